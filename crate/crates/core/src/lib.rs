//! Likelihood inference for control rate regression in meta-analysis of
//! rates, with a second-order corrected signed likelihood root.

pub mod data;
pub mod likelihood;
pub mod linalg;
pub mod estimation;
pub mod skovgaard;
pub mod re_oracle;
pub mod simulation;
pub mod cli;
