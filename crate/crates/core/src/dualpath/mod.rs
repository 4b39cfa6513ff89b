//! Adversarial placement training with two paths sharing one generator.
//!
//! The unsupervised path draws the latent code from the standard normal and
//! is judged by the discriminator only. The supervised path encodes the code
//! from a labelled positive composite, so the predicted placement can be
//! compared with the stored one; a KL term keeps that posterior close to the
//! prior so both paths see codes from the same distribution.

mod disc;
mod latent;
mod losses;
mod model;
mod train;

pub use disc::Discriminator;
pub use latent::LatentHead;
pub use losses::{adv_objective, cls_objective, generator_adv_loss, loss_kld, loss_rec, RecVariant, PROB_EPS};
pub use model::{GeneratorOutput, Model, Placement, SceneInput};
pub use train::{fit, overfit_items, probe_scenes, Batch, BatchItem, LossBreakdown, Trainer, METRICS_HEADER, STEP_LOG_HEADER};
