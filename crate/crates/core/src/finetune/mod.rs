//! Downstream heads and the scratch / frozen / finetune training regimes.

mod heads;
mod split;
mod train;

pub use heads::{ClassificationHead, CtrHead, AD_PREFIX};
pub use split::{random_split, stratified_split, stratified_subsample, subsample, Split};
pub use train::{
    class_labels, ctr_split, demo_split, evaluate_classifier, evaluate_ctr, impression_owners, task_rng,
    train_classifier, train_ctr, Downstream, FinetuneConfig, FinetuneRun, Head, HeadSpec, Regime, Task, USER_PREFIX,
};
