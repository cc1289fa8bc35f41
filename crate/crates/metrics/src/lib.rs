//! Self-contained metric implementations: accuracy / macro-F1 / one-vs-rest
//! AUC for classification, mIoU / Dice / pixel-F1 for segmentation, BLEU and
//! ROUGE-L for caption generation. Everything is a pure function of its
//! inputs and invariant to sample ordering.

pub mod cls;
pub mod seg;
pub mod text;

pub use cls::{accuracy, auc_ovr, confusion_matrix, macro_f1, AucOvr};
pub use seg::{seg_metrics, SegAccumulator, SegScores};
pub use text::{bleu, rouge_l, BleuAccumulator, BleuScores};

#[derive(Debug, Clone)]
pub enum MetricError {
    Empty(String),
    Invalid(String),
}

impl std::fmt::Display for MetricError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricError::Empty(m) => write!(f, "empty input: {m}"),
            MetricError::Invalid(m) => write!(f, "invalid input: {m}"),
        }
    }
}

impl std::error::Error for MetricError {}

pub type Result<T> = std::result::Result<T, MetricError>;
