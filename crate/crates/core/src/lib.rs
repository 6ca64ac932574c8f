pub mod budget_engine;
pub mod classifier_bank;
pub mod crf;
pub mod error;
pub mod harness;
pub mod learn;
pub mod policy;
pub mod seed;
pub mod svgraph;

#[cfg(test)]
pub(crate) mod testutil;
