//! Style contrastive refinement: a VGG-style extractor with pooled
//! projectors, the layer-summed contrastive loss, its pretraining loop and
//! a style-retrieval evaluation.

mod extractor;
mod loss;
mod pretrain;
mod retrieval;

pub use extractor::{l2_normalize, ScrConfig, StyleExtractor, SCR_CONFIG_FILE};
pub use loss::{log_sum_exp, style_contrastive_loss, DEFAULT_TAU};
pub use pretrain::{pretrain_into, pretrain_scr, scaled_negatives, PretrainLog, ScrPretrainConfig};
pub use retrieval::{embed_corpus, layer_score, retrieval_accuracy, score_matrix};
