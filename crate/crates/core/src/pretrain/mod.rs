//! Masked behavior prediction and next-K behaviors prediction.

mod loss;
mod sampling;
mod train;

pub use loss::{forward_losses, nbp_user_embedding, predict_scores, LossVars, Objective};
pub use sampling::{make_mbp_sample, make_nbp_sample, sample_rng, BehaviorRef, Corpus, MbpSample, NbpSample, Stream};
pub use train::{build_samples, evaluate_losses, pretrain, write_loss_csv, LossRow, PretrainConfig, PretrainReport};
