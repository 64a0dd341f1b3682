//! Caption quality (BLEU, ROUGE-L) and attention-based synchronization
//! scores (Element-of, IoU, IoP).

mod sync;
mod text;

pub use sync::{
    element_of, evaluate_sync, iop, iou, predicted_interval, write_word_csv, Interval, SampleSync, SyncInput,
    SyncReport, WordDiagnostic, DEFAULT_TAU,
};
pub use text::{bleu, bleu_scores, rouge_l, rouge_l_corpus};
