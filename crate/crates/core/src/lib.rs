//! Statute prediction for legal case descriptions with attention-based
//! explanations.
//!
//! The pipeline: [`corpus`] loads and masks cases, [`embeddings`] turns
//! sentences and statute contents into vectors, [`model`] trains the
//! attention-over-sentences classifier, [`explain`] extracts and
//! counterfactually scores its explanations, [`metrics`] evaluates
//! predictions, and [`llm`] runs the zero-shot prompting pipeline gated by
//! the classifier's top-K statutes.

pub mod corpus;
pub mod explain;
pub mod llm;
pub mod embeddings;
pub mod metrics;
pub mod model;
pub mod synthetic;
