//! ROUGE-L, CIDEr-D and the per-field evaluation report.

pub mod cider;
pub mod report;
pub mod rouge;

pub use cider::{cider_d, CiderScores};
pub use report::{
    load_references, parse_references, references_from_dataset, triplet_average, write_references, EvalReport,
    FieldScores, ReferenceCaptions, ReferenceRecord, SampleScores,
};
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};
