use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::rng::{purpose, substream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Factual,
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Factual, Style::Positive, Style::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Factual => "factual",
            Style::Positive => "positive",
            Style::Negative => "negative",
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown style {s:?}")))
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split {s:?}")))
    }
}

/// The `K x D` grid of region descriptors of one image, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f32>>", into = "Vec<Vec<f32>>")]
pub struct RegionFeatureSet {
    regions: usize,
    dim: usize,
    values: Vec<f32>,
}

impl RegionFeatureSet {
    pub fn new(regions: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if regions == 0 || dim == 0 || values.len() != regions * dim {
            return Err(Error::Invalid(format!(
                "region features need {regions}x{dim} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("region features must be finite".into()));
        }
        Ok(Self {
            regions,
            dim,
            values,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let regions = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("region feature rows differ in length".into()));
        }
        Self::new(regions, dim, rows.concat())
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }
}

impl TryFrom<Vec<Vec<f32>>> for RegionFeatureSet {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f32>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<RegionFeatureSet> for Vec<Vec<f32>> {
    fn from(f: RegionFeatureSet) -> Self {
        f.values.chunks(f.dim).map(<[f32]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionEntry {
    pub tokens: Vec<String>,
    pub style: Style,
    pub split: Split,
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub features: RegionFeatureSet,
    pub captions: Vec<CaptionEntry>,
}

impl ImageRecord {
    pub fn split(&self) -> Option<Split> {
        self.captions.first().map(|c| c.split)
    }
}

/// A caption flattened together with its image id.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub style: Style,
    pub split: Split,
}

/// An encoded caption of one image, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Position of the image in its [`Dataset`].
    pub image: usize,
    /// `begin + ids + end + pad...`
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(images: Vec<ImageRecord>) -> Result<Self> {
        let ds = Self { images };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(K, D)` of the feature grids, if any image is present.
    pub fn feature_shape(&self) -> Option<(usize, usize)> {
        self.images
            .first()
            .map(|r| (r.features.regions(), r.features.dim()))
    }

    fn validate(&self) -> Result<()> {
        for (i, rec) in self.images.iter().enumerate() {
            check_record(rec, self.feature_shape()).map_err(|message| Error::Record {
                path: "<memory>".into(),
                line: i + 1,
                message,
            })?;
        }
        let mut seen = std::collections::HashSet::new();
        for rec in &self.images {
            if !seen.insert(rec.image_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate image id {}", rec.image_id)));
            }
        }
        Ok(())
    }

    pub fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Self> {
        let mut images = Vec::new();
        let mut shape = None;
        let mut ids = std::collections::HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            check_record(&rec, shape).map_err(err)?;
            if !ids.insert(rec.image_id.clone()) {
                return Err(err(format!("duplicate image id {}", rec.image_id)));
            }
            shape.get_or_insert((rec.features.regions(), rec.features.dim()));
            images.push(rec);
        }
        Ok(Self { images })
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        Self::read_jsonl(BufReader::new(file), path)
    }

    pub fn write_jsonl(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for rec in &self.images {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(File::create(path)?)
    }

    pub fn caption_records(&self) -> impl Iterator<Item = CaptionRecord> + '_ {
        self.images.iter().flat_map(|rec| {
            rec.captions.iter().map(move |c| CaptionRecord {
                image_id: rec.image_id.clone(),
                tokens: c.tokens.clone(),
                style: c.style,
                split: c.split,
            })
        })
    }

    /// Every caption token list in the file, in order.
    pub fn all_captions(&self) -> impl Iterator<Item = &Vec<String>> {
        self.images
            .iter()
            .flat_map(|r| r.captions.iter().map(|c| &c.tokens))
    }

    /// Vocabulary of the training captions of every style, so styled words
    /// are known before the adversarial stage.
    pub fn train_vocabulary(&self) -> Vocabulary {
        Vocabulary::build(
            self.images
                .iter()
                .flat_map(|r| r.captions.iter())
                .filter(|c| c.split == Split::Train)
                .map(|c| &c.tokens),
        )
    }

    /// Images having at least one caption of `style` in `split`.
    pub fn images_with(&self, style: Style, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.captions.iter().any(|c| c.style == style && c.split == split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Reference captions of `style` for an image.
    pub fn references(&self, image: usize, style: Style) -> Vec<Vec<String>> {
        self.images[image]
            .captions
            .iter()
            .filter(|c| c.style == style)
            .map(|c| c.tokens.clone())
            .collect()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.images.iter().position(|r| r.image_id == image_id)
    }

    /// Encodes every caption of `style` in `split`.
    pub fn examples(
        &self,
        style: Style,
        split: Split,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for (i, rec) in self.images.iter().enumerate() {
            for c in rec.captions.iter().filter(|c| c.style == style && c.split == split) {
                let ids = vocab.encode(&c.tokens, max_len).map_err(|e| {
                    Error::Caption(format!("image {}: {e}", rec.image_id))
                })?;
                out.push(Example { image: i, ids });
            }
        }
        Ok(out)
    }
}

fn check_record(rec: &ImageRecord, shape: Option<(usize, usize)>) -> Result<(), String> {
    let got = (rec.features.regions(), rec.features.dim());
    if let Some(expected) = shape {
        if got != expected {
            return Err(format!(
                "features of {} are {}x{}, expected {}x{}",
                rec.image_id, got.0, got.1, expected.0, expected.1
            ));
        }
    }
    if let Some(first) = rec.captions.first() {
        if rec.captions.iter().any(|c| c.split != first.split) {
            return Err(format!("image {} appears in more than one split", rec.image_id));
        }
    }
    Ok(())
}

/// Shuffles `examples` with a stream keyed by `(seed, epoch)` and cuts it into
/// batches of `batch_size`; the last batch may be smaller.
pub fn batches<'a>(
    examples: &'a [Example],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Vec<&'a Example>> + 'a {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut substream(seed, &[purpose::SHUFFLE, epoch]));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks
        .into_iter()
        .map(move |c| c.into_iter().map(|i| &examples[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, k: usize, split: Split) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            features: RegionFeatureSet::new(k, 2, vec![0.25; k * 2]).unwrap(),
            captions: vec![CaptionEntry {
                tokens: vec!["a".into(), "red".into(), "circle".into()],
                style: Style::Factual,
                split,
            }],
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = Dataset::read_jsonl(&b""[..], Path::new("x")).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn shape_mismatch_names_line() {
        let mut buf = Vec::new();
        Dataset {
            images: vec![record("a", 3, Split::Train), record("b", 2, Split::Train)],
        }
        .write_jsonl(&mut buf)
        .unwrap();
        match Dataset::read_jsonl(&buf[..], Path::new("d.jsonl")) {
            Err(Error::Record { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("2x2") && message.contains("3x2"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let line = r#"{"image_id":"a","features":[[0.0]],"captions":[{"tokens":["x"],"style":"angry","split":"train"}]}"#;
        assert!(Dataset::read_jsonl(line.as_bytes(), Path::new("d")).is_err());
        let line = r#"{"image_id":"a","features":[[0.0]],"captions":[{"tokens":["x"],"style":"factual","split":"dev"}]}"#;
        assert!(Dataset::read_jsonl(line.as_bytes(), Path::new("d")).is_err());
        let line = "{not json";
        assert!(matches!(
            Dataset::read_jsonl(line.as_bytes(), Path::new("d")),
            Err(Error::Record { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip_preserves_fields() {
        let mut rec = record("a", 2, Split::Val);
        rec.features = RegionFeatureSet::new(2, 2, vec![0.1, -3.5e-7, 1.0 / 3.0, 7.25]).unwrap();
        let ds = Dataset::new(vec![rec, record("b", 2, Split::Test)]).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(&buf[..], Path::new("d")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn batches_partition_deterministically() {
        let examples: Vec<Example> = (0..10).map(|i| Example { image: i, ids: vec![] }).collect();
        let one: Vec<Vec<usize>> = batches(&examples, 4, 3, 1)
            .map(|b| b.iter().map(|e| e.image).collect())
            .collect();
        let again: Vec<Vec<usize>> = batches(&examples, 4, 3, 1)
            .map(|b| b.iter().map(|e| e.image).collect())
            .collect();
        assert_eq!(one, again);
        assert_eq!(one.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = one.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(&examples, 64, 3, 1).count(), 1);
    }
}
