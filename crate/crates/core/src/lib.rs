//! Model-agnostic image guardrail pipeline.
//!
//! The crate is organized around a structured guardrail [`policy`](crate::policy),
//! prompts built from it ([`prompt`]), a pluggable VLM [`gateway`], an output
//! [`codec`] for the moderation result protocol, multi-model [`consensus`]
//! filtering, the self-[`refine`]ment loop, reference [`loss`] numerics, and an
//! [`eval`] harness.

pub mod codec;
pub mod consensus;
pub mod eval;
pub mod gateway;
pub mod loss;
pub mod policy;
pub mod prompt;
pub mod refine;
