//! Independent reference implementations used by the oracle tests and the
//! acceptance run.

pub mod brute;
pub mod gradients;
pub mod mfcc_reference;
