//! Transformer encoder, task heads and their training loops.

pub mod encoder;
pub mod head;
pub mod nn;
pub mod train;

pub use encoder::{pool, EncoderConfig, EncoderModel};
pub use head::{HeadConfig, TaskHead};
pub use nn::Dropout;
pub use train::{
    finetune, masked_accuracy, mlm_loss_eval, predict, pretrain, pretrain_with_hook, FinetuneConfig, Predictions,
    PretrainConfig, TrainRunReport,
};
