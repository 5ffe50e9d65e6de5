//! Dataset construction, the binary detection suite, the multi-class
//! confusion matrix and sliding-window localization.

pub mod config;
pub mod confusion;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod localize;
pub mod suite;

/// Offsets deriving every sub-seed from one master seed.
pub mod seeds {
    pub const CORPUS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MANIPULATION: u64 = 3;
    pub const SVM: u64 = 4;
    pub const CNN_INIT: u64 = 5;
    pub const CNN_SHUFFLE: u64 = 6;
    pub const CNN_SUBSET: u64 = 7;
    pub const LOCALIZE: u64 = 8;

    pub fn derive(master: u64, offset: u64) -> u64 {
        master.wrapping_add(offset.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}
