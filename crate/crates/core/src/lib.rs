//! Prompt optimization for LLM-based sequential recommendation.

pub mod dataset;
pub mod evaluator;
pub mod fusion;
pub mod gateway;
pub mod metrics;
pub mod optimizer;
pub mod parser;
pub mod templates;
