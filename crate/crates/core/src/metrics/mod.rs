//! Caption-quality and style-diversity evaluation.

mod quality;
mod report;
mod style;

pub use quality::{bleu, cider, cider_scores, rouge_l, rouge_l_pair, EvalCorpus, EvalItem};
pub use report::{
    evaluate_corpus, read_candidates, write_candidates, CandidateRecord, MetricReport,
};
pub use style::{extract_style_adjectives, style_entropy, top_k_mass, StyleUsage};
