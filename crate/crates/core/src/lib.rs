//! Multi-turn tool-integrated reasoning for text-to-SQL.
//!
//! - [`protocol`]: parse and validate assistant turns (`<think>`, `<tool_call>`, `<answer>`).
//! - [`sandbox`]: read-only SQLite execution with timeouts and row caps, plus an HTTP tool service.
//! - [`rollout`]: the generate / execute / feed-back loop against any [`rollout::PolicyEndpoint`].
//! - [`reward`]: format, execution and result rewards.
//! - [`grpo`]: group-relative advantages, quality filtering, the surrogate loss and a toy trainer.
//! - [`bench`]: datasets, gold filtering, prompts and pass@1 evaluation.
//! - [`cli`]: the `tir-sql` command.
//! - [`demo`]: bundled databases, dataset and transcripts.

pub mod bench;
pub mod cli;
pub mod demo;
pub mod grpo;
pub mod protocol;
pub mod reward;
pub mod rollout;
pub mod sandbox;
