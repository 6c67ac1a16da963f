//! Text-conditioned pixel-space denoiser and its noise schedule.

mod checkpoint;
mod model;
pub mod nn;
mod sample;
mod schedule;
mod text;
mod train;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use model::{ldm_loss, ldm_loss_tensor, predict_noise, ModelConfig, ModelParams, PromptEncoding, MAX_TOKENS};
pub use sample::{sample, sample_batch};
pub use schedule::{make_schedule, q_sample, LatentState, NoiseSchedule};
pub use text::placeholder_var_name;
pub use train::{pretrain, TrainConfig, TrainReport};
pub use unet::{AttnCapture, TrunkFeatures, UNet, UNetConfig};
