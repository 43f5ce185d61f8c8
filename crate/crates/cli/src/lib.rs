//! Service and configuration layers over the guardrail pipeline.

pub mod config;
pub mod service;
