//! Ensemble of imitation agents trained on constrained-filter analyses, with a
//! primal-dual penalty on the energy band and a hard-bounded action space.

pub mod bellman;
pub mod dataset;
pub mod dual;
pub mod features;
pub mod infer;
pub mod train;

pub use bellman::{constrained_bellman, tabular_bellman_oracle, ContractionCheck, TabularMdp};
pub use dataset::{build_dataset, Dataset, MemberData, Normalization, Slice, TrainingSet};
pub use dual::{constraint_violation, dual_update, penalized_reward, ConstraintViolation, DualState};
pub use features::{clamp_action, ActionBounds, FeatureLayout, Normalizer};
pub use infer::{infer, EnsembleBand, Inference};
pub use train::{kkt_residuals, train, train_agent, Agent, AgentTrace, KktReport, TrainConfig};
