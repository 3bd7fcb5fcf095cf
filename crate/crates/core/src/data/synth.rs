//! Procedural scenes and grammar-generated captions.
//!
//! A scene is a small grid with a few colored shapes. Each grid cell becomes
//! one region feature row: one-hot shape, one-hot color, one-hot row and
//! column, and a background flag for empty cells, plus Gaussian noise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CaptionEntry, CaptionRecord, Dataset, ImageRecord, RegionFeatureSet, Split, Style};
use crate::rng::{purpose, substream, StreamRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise_std: f32,
    pub feature_dim: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_rows: 3,
            grid_cols: 3,
            shapes: ["circle", "square", "triangle", "star"].map(String::from).to_vec(),
            colors: ["red", "green", "blue", "yellow"].map(String::from).to_vec(),
            min_objects: 1,
            max_objects: 3,
            noise_std: 0.05,
            feature_dim: 16,
        }
    }
}

impl SceneConfig {
    pub fn regions(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Dimensions used by the deterministic encoding.
    pub fn encoding_dim(&self) -> usize {
        self.shapes.len() + self.colors.len() + self.grid_rows + self.grid_cols + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < self.encoding_dim() {
            return Err(Error::Config(format!(
                "feature_dim {} cannot hold the {}-dimensional region encoding",
                self.feature_dim,
                self.encoding_dim()
            )));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("scenes need at least one shape and one color".into()));
        }
        if self.min_objects == 0
            || self.min_objects > self.max_objects
            || self.max_objects > self.regions()
        {
            return Err(Error::Config(format!(
                "object count range {}..={} does not fit a {}x{} grid",
                self.min_objects, self.max_objects, self.grid_rows, self.grid_cols
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    /// Objects in reading order (row-major cell index).
    pub objects: Vec<SceneObject>,
}

/// Feature grid of a scene. With `noise_std == 0` the result is exactly the
/// deterministic encoding.
pub fn scene_features(scene: &Scene, config: &SceneConfig, rng: &mut StreamRng) -> RegionFeatureSet {
    let (ns, nc, nr) = (config.shapes.len(), config.colors.len(), config.grid_rows);
    let cols = config.grid_cols;
    let d = config.feature_dim;
    let mut values = vec![0.0f32; config.regions() * d];
    for cell in 0..config.regions() {
        let (row, col) = (cell / cols, cell % cols);
        let out = &mut values[cell * d..(cell + 1) * d];
        out[ns + nc + row] = 1.0;
        out[ns + nc + nr + col] = 1.0;
        match scene.objects.iter().find(|o| o.row == row && o.col == col) {
            Some(o) => {
                out[o.shape] = 1.0;
                out[ns + o.color] = 1.0;
            }
            None => out[ns + nc + nr + cols] = 1.0,
        }
    }
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, config.noise_std).expect("valid std");
        values.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    RegionFeatureSet::new(config.regions(), d, values).expect("consistent dims")
}

fn random_scene(id: String, seed: u64, config: &SceneConfig, rng: &mut StreamRng) -> Scene {
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut cells: Vec<usize> = sample(rng, config.regions(), count).into_vec();
    cells.sort_unstable();
    let objects = cells
        .into_iter()
        .map(|cell| SceneObject {
            shape: rng.random_range(0..config.shapes.len()),
            color: rng.random_range(0..config.colors.len()),
            row: cell / config.grid_cols,
            col: cell % config.grid_cols,
        })
        .collect();
    Scene { id, seed, objects }
}

/// Generates `count` random scenes with their features; fully determined by
/// `(seed, config)`.
pub fn synth_scenes(
    count: usize,
    config: &SceneConfig,
    seed: u64,
) -> Result<Vec<(Scene, RegionFeatureSet)>> {
    synth_scenes_with_prefix(count, config, seed, "scene")
}

fn synth_scenes_with_prefix(
    count: usize,
    config: &SceneConfig,
    seed: u64,
    prefix: &str,
) -> Result<Vec<(Scene, RegionFeatureSet)>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = substream(seed, &[purpose::SCENE, hash_str(prefix), i as u64]);
            let scene = random_scene(format!("{prefix}{i:05}"), seed, config, &mut rng);
            let features = scene_features(&scene, config, &mut rng);
            (scene, features)
        })
        .collect())
}

fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Style adjectives of each polarity, each with the nouns it may modify.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleLexicon {
    pub positive: BTreeMap<String, Vec<String>>,
    pub negative: BTreeMap<String, Vec<String>>,
}

impl StyleLexicon {
    /// Lexicon matching the default scene shapes.
    pub fn synthetic() -> Self {
        let all = ["circle", "square", "triangle", "star"];
        let build = |entries: &[(&str, &[&str])]| -> BTreeMap<String, Vec<String>> {
            entries
                .iter()
                .map(|(a, nouns)| (a.to_string(), nouns.iter().map(|n| n.to_string()).collect()))
                .collect()
        };
        Self {
            positive: build(&[
                ("beautiful", &all),
                ("charming", &["circle", "square"]),
                ("cheerful", &all),
                ("cute", &["circle", "star"]),
                ("elegant", &["square", "triangle"]),
                ("lovely", &all),
                ("nice", &all),
                ("perfect", &["circle", "square", "triangle"]),
                ("pretty", &["circle", "star", "triangle"]),
                ("shiny", &["star", "circle", "square"]),
            ]),
            negative: build(&[
                ("broken", &["square", "triangle", "star"]),
                ("creepy", &["star", "triangle"]),
                ("crooked", &["triangle", "square"]),
                ("dirty", &all),
                ("dull", &all),
                ("gloomy", &all),
                ("lonely", &all),
                ("nasty", &["circle", "square"]),
                ("ugly", &all),
                ("weird", &all),
            ]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::Config("lexicon polarities must be nonempty".into()));
        }
        if let Some(a) = self.positive.keys().find(|a| self.negative.contains_key(*a)) {
            return Err(Error::Config(format!("adjective {a:?} appears in both polarities")));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let lex: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(File::create(path)?, self)?;
        Ok(())
    }

    fn entries(&self, style: Style) -> Option<&BTreeMap<String, Vec<String>>> {
        match style {
            Style::Factual => None,
            Style::Positive => Some(&self.positive),
            Style::Negative => Some(&self.negative),
        }
    }

    /// Polarity of `token` if it is a lexicon adjective.
    pub fn polarity(&self, token: &str) -> Option<Style> {
        if self.positive.contains_key(token) {
            Some(Style::Positive)
        } else if self.negative.contains_key(token) {
            Some(Style::Negative)
        } else {
            None
        }
    }

    pub fn is_adjective(&self, token: &str) -> bool {
        self.polarity(token).is_some()
    }

    /// Adjectives of `style` allowed for `noun`, in lexicon order.
    pub fn adjectives_for(&self, style: Style, noun: &str) -> Vec<&str> {
        self.entries(style)
            .map(|m| {
                m.iter()
                    .filter(|(_, nouns)| nouns.iter().any(|n| n == noun))
                    .map(|(a, _)| a.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    pub captions_per_scene: usize,
    /// Zipf exponent of the adjective choice; 0 is uniform.
    pub adjective_skew: f64,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            captions_per_scene: 3,
            adjective_skew: 1.0,
        }
    }
}

/// A caption template with the objects it mentions, as positions of
/// `(token index of the color word, object)`.
struct Draft {
    tokens: Vec<String>,
    mentions: Vec<(usize, SceneObject)>,
}

fn vertical_word(row: usize, rows: usize) -> &'static [&'static str] {
    let third = row * 3 / rows.max(1);
    match third {
        0 => &["at", "the", "top"],
        1 => &["in", "the", "middle"],
        _ => &["at", "the", "bottom"],
    }
}

fn drafts(scene: &Scene, config: &SceneConfig) -> Vec<Draft> {
    let name = |o: &SceneObject| -> [String; 3] {
        ["a".into(), config.colors[o.color].clone(), config.shapes[o.shape].clone()]
    };
    let location = |o: &SceneObject| {
        let mut tokens = name(o).to_vec();
        tokens.extend(vertical_word(o.row, config.grid_rows).iter().map(|s| s.to_string()));
        Draft {
            tokens,
            mentions: vec![(1, *o)],
        }
    };
    let existence = |o: &SceneObject| {
        let mut tokens: Vec<String> = vec!["there".into(), "is".into()];
        tokens.extend(name(o));
        Draft {
            tokens,
            mentions: vec![(3, *o)],
        }
    };
    let relation = |a: &SceneObject, b: &SceneObject| {
        let rel: &[&str] = if a.row < b.row {
            &["above"]
        } else if a.row > b.row {
            &["below"]
        } else if a.col < b.col {
            &["to", "the", "left", "of"]
        } else {
            &["to", "the", "right", "of"]
        };
        let mut tokens = name(a).to_vec();
        tokens.extend(rel.iter().map(|s| s.to_string()));
        let second = tokens.len() + 1;
        tokens.extend(name(b));
        Draft {
            tokens,
            mentions: vec![(1, *a), (second, *b)],
        }
    };

    let objs = &scene.objects;
    let mut out = Vec::new();
    if objs.len() >= 2 {
        out.push(relation(&objs[0], &objs[1]));
    }
    out.push(location(&objs[0]));
    out.push(existence(&objs[0]));
    if objs.len() >= 2 {
        out.push(location(&objs[1]));
        out.push(relation(&objs[1], &objs[0]));
    }
    out
}

fn pick_adjective<'a>(
    candidates: &[&'a str],
    skew: f64,
    rng: &mut StreamRng,
) -> &'a str {
    let weights: Vec<f64> = (0..candidates.len())
        .map(|r| 1.0 / ((r + 1) as f64).powf(skew))
        .collect();
    let dist = WeightedIndex::new(&weights).expect("positive weights");
    candidates[dist.sample(rng)]
}

/// Grammar captions of a scene. Caption `i` uses the scene's `i`-th template
/// (cycling); styled captions get one lexicon adjective inserted before the
/// color of the first mentioned object that the lexicon can modify.
pub fn synth_captions(
    scene: &Scene,
    style: Style,
    split: Split,
    lexicon: &StyleLexicon,
    scene_config: &SceneConfig,
    caption_config: &CaptionConfig,
    rng: &mut StreamRng,
) -> Result<Vec<CaptionRecord>> {
    let templates = drafts(scene, scene_config);
    let mut out = Vec::with_capacity(caption_config.captions_per_scene);
    for i in 0..caption_config.captions_per_scene {
        let draft = &templates[i % templates.len()];
        let mut tokens = draft.tokens.clone();
        if style != Style::Factual {
            let slot = draft.mentions.iter().find_map(|(at, o)| {
                let adjs = lexicon.adjectives_for(style, &scene_config.shapes[o.shape]);
                (!adjs.is_empty()).then_some((*at, adjs))
            });
            let Some((at, adjs)) = slot else {
                return Err(Error::Config(format!(
                    "lexicon has no {style} adjective for any noun in scene {}",
                    scene.id
                )));
            };
            let adj = pick_adjective(&adjs, caption_config.adjective_skew, rng);
            tokens.insert(at, adj.to_string());
        }
        out.push(CaptionRecord {
            image_id: scene.id.clone(),
            tokens,
            style,
            split,
        });
    }
    Ok(out)
}

/// Number of scenes per split for one caption style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleGroup {
    pub style: Style,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl StyleGroup {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub scene: SceneConfig,
    pub captions: CaptionConfig,
    pub groups: Vec<StyleGroup>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            captions: CaptionConfig::default(),
            groups: vec![
                StyleGroup {
                    style: Style::Factual,
                    train: 400,
                    val: 50,
                    test: 50,
                },
                StyleGroup {
                    style: Style::Positive,
                    train: 100,
                    val: 25,
                    test: 40,
                },
                StyleGroup {
                    style: Style::Negative,
                    train: 100,
                    val: 25,
                    test: 40,
                },
            ],
        }
    }
}

impl CorpusConfig {
    /// Splits `scenes` scenes of one style using the default proportions of
    /// that style.
    pub fn single_style(style: Style, scenes: usize) -> Self {
        let base = Self::default();
        let proto = base.groups.iter().find(|g| g.style == style).expect("all styles present");
        Self {
            groups: vec![scale_group(proto, scenes)],
            ..base
        }
    }

    /// All three styles with `scenes` factual scenes and styled groups scaled
    /// to keep the default ratio.
    pub fn all_styles(scenes: usize) -> Self {
        let base = Self::default();
        let factual_total = base.groups[0].total() as f64;
        let groups = base
            .groups
            .iter()
            .map(|g| {
                let n = (scenes as f64 * g.total() as f64 / factual_total).round() as usize;
                scale_group(g, n.max(1))
            })
            .collect();
        Self { groups, ..base }
    }
}

fn scale_group(proto: &StyleGroup, scenes: usize) -> StyleGroup {
    let total = proto.total() as f64;
    let val = (scenes as f64 * proto.val as f64 / total).round() as usize;
    let test = (scenes as f64 * proto.test as f64 / total).round() as usize;
    let train = scenes.saturating_sub(val + test);
    StyleGroup {
        style: proto.style,
        train,
        val,
        test,
    }
}

/// Builds a complete corpus: one disjoint set of scenes per style group.
pub fn synth_corpus(config: &CorpusConfig, lexicon: &StyleLexicon, seed: u64) -> Result<Dataset> {
    lexicon.validate()?;
    let mut images = Vec::new();
    for group in &config.groups {
        if group.total() == 0 {
            continue;
        }
        let prefix = match group.style {
            Style::Factual => "f",
            Style::Positive => "p",
            Style::Negative => "n",
        };
        let scenes = synth_scenes_with_prefix(group.total(), &config.scene, seed, prefix)?;
        for (i, (scene, features)) in scenes.into_iter().enumerate() {
            let split = if i < group.train {
                Split::Train
            } else if i < group.train + group.val {
                Split::Val
            } else {
                Split::Test
            };
            let mut rng = substream(seed, &[purpose::CAPTION, hash_str(prefix), i as u64]);
            let captions = synth_captions(
                &scene,
                group.style,
                split,
                lexicon,
                &config.scene,
                &config.captions,
                &mut rng,
            )?;
            images.push(ImageRecord {
                image_id: scene.id.clone(),
                features,
                captions: captions
                    .into_iter()
                    .map(|c| CaptionEntry {
                        tokens: c.tokens,
                        style: c.style,
                        split: c.split,
                    })
                    .collect(),
            });
        }
    }
    Dataset::new(images)
}
