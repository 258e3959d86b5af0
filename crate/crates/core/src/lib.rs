//! Hierarchical evaluation of GUI agent trajectories with a staged model
//! judge: segment the trajectory into subtasks, diagnose each subtask, then
//! summarize into a task-level verdict.
//!
//! Every model call goes through [`backend::Backend`], so the whole pipeline
//! runs offline against [`backend::MockBackend`].

pub mod backend;
pub mod cli;
pub mod diagnosis;
pub mod media;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod render;
pub mod seg_quality;
pub mod segmentation;
pub mod stage;
pub mod summary;
pub mod trajectory;
