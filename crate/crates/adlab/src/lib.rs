//! Desk-scale laboratory for difficulty-adaptive reasoning policies.
//!
//! A tiny autoregressive policy is trained in two stages — supervised
//! fine-tuning on difficulty-labeled targets, then group-relative policy
//! optimization under a composite reward (tag-format structure plus semantic
//! accuracy) — on a synthetic deduction gym whose questions are either direct
//! fact lookups or multi-hop hypothetical chains. The point under test:
//! reasoning effort should track question difficulty.

pub mod eval;
pub mod judge;
pub mod policy;
pub mod tagfmt;
pub mod taskgen;
pub mod telemetry;
pub mod text;
pub mod train;
