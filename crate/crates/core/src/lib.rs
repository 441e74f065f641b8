//! Permission-grouped opcode-histogram detection of malicious Android apps.
//!
//! The pipeline: extract a 256-bucket Dalvik opcode histogram per app
//! ([`dex`], [`smali`], [`apk`]), read requested permissions from the
//! manifest ([`manifest`], [`axml`]), bucket apps by dangerous-permission
//! group ([`groups`]), rank opcodes by the class-mean occurrence difference
//! inside each group ([`selection`]), then train and evaluate per-group
//! classifiers over the top-ranked opcodes ([`classify`], [`eval`]).
//! [`corpus`] handles dataset manifests, the extraction cache and synthetic
//! corpora.

pub mod apk;
pub mod axml;
pub mod classify;
pub mod corpus;
pub mod dex;
pub mod eval;
pub mod groups;
pub mod histogram;
pub mod manifest;
pub mod opcodes;
pub mod seeds;
pub mod selection;
pub mod smali;

pub use histogram::{merge_histograms, OpcodeHistogram};
pub use manifest::PermissionSet;
pub use opcodes::Opcode;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
