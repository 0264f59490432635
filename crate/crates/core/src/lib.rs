//! Desk-scale residual-network engine for skin lesion analysis: a
//! reverse-mode autodiff core with the usual convolutional layer zoo,
//! declarative residual network construction, a fully convolutional
//! segmentation pipeline with multi-scale flip test-time fusion, three
//! classification strategies, an SGD trainer with fixed/linear schedules,
//! and Jaccard/AUC evaluation.

pub mod autodiff;
pub mod cls;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod resnet;
pub mod rng;
pub mod seg;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Tape, VarId};
pub use error::{Error, Result};
pub use ops::FlipKind;
pub use cls::{ClassLabel, ClassScores, Strategy};
pub use data::{Dataset, ImageBuffer};
pub use resnet::{HeadSpec, Mode, Network, NetworkSpec};
pub use seg::{BinaryMask, ScoreMask, TtaConfig};
pub use train::{ScheduleSpec, TrainConfig};
pub use tensor::{Element, Tensor};
