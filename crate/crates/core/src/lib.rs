// Negated comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod checks;
pub mod dp;
pub mod envs;
pub mod harness;
pub mod error;
pub mod io;
pub mod mdp;
pub mod oracle;
pub mod sampled;
pub mod tables;
pub mod util;
pub mod variational;
