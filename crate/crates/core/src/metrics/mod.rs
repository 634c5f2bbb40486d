//! Text translation metrics and motion reconstruction metrics.

mod motion;
mod text;

pub use motion::{fid, mpjpe, pampjpe, umeyama, FidResult, MotionEvalReport};
pub use text::{
    bleu, cider, evaluate_corpus, lcs_len, rouge_l, rouge_l_pair, wer_align, EditOp, EvalPair,
    EvalReport, WerAlignment, ROUGE_BETA2,
};
