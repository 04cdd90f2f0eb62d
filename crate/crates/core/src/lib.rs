//! Core types for trajectory prediction from vision-language model output:
//! kinematics, visual prompts, prompt construction, self-consistency
//! aggregation, dataset loading and metrics.

pub mod consistency;
pub mod dataset;
pub mod kinematics;
pub mod metrics;
pub mod prompting;
pub mod visual_prompt;
