//! Adversarial attack and defense toolkit for a built-in multi-scale
//! semantic-segmentation network, with reproducible training, crafting,
//! filtering and evaluation pipelines.

pub mod attacks;
pub mod defenses;
pub mod harness;
pub mod metrics;
pub mod segnet;
pub mod tensor;
pub mod types;
