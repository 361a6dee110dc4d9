//! Audio-conditioned stochastic video forecasting at desk scale: a
//! synthetic multimodal benchmark (M3SO), a variational generator with
//! audio/visual self-attention encoders, a multimodal adversarial
//! discriminator, joint training, and the evaluation protocols.

pub mod avfeat;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod m3so;
pub mod net;
pub mod objective;
pub mod trainer;
pub mod util;

pub use error::{AvError, Result};
