//! Environmental sound classification pipeline.
//!
//! The crate turns raw audio into class predictions in four stages:
//! 1D pitch-shift augmentation ([`audio`]), DWT scalogram rendering and
//! histogram equalization ([`scalogram`]), high-level spectrogram
//! augmentation with a weighted cycle-consistent GAN ([`wccgan`], backed by
//! the reverse-mode autodiff engine in [`tensor`]), and unsupervised feature
//! learning with SURF descriptors ([`surf`]), a spherical K-Means++ codebook
//! ([`codebook`]) and a random forest ([`forest`]).
//!
//! [`pipeline`] wires the stages into a cached, seed-deterministic batch run
//! driven by the `escpipe` CLI; [`eval`] provides k-fold evaluation with
//! augmentation-leakage guards.

pub mod audio;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fft;
pub mod forest;
pub mod pipeline;
pub mod scalogram;
pub mod surf;
pub mod synth;
pub mod tensor;
pub mod wccgan;

pub use error::{Error, Result};

/// Derives a per-component RNG seed from a master seed and a tag, so stages
/// and workers get independent, scheduling-invariant streams.
pub fn sub_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for b in master.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// FNV-1a digest of a byte stream; used for stage cache keys.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
