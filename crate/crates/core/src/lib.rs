//! Lattice-free sequence-discriminative training of HMM acoustic models.
//!
//! The crate computes LF-MMI, boosted LF-MMI and LF-sMBR objectives and their
//! gradients with respect to per-frame pseudo log-likelihoods, over a cyclic
//! phone-LM denominator graph with leaky-HMM regularisation. Around that core
//! it provides a synthetic phone-recognition corpus, a small feed-forward
//! acoustic model, a from-scratch trainer, a Viterbi decoder, and brute-force
//! reference implementations used to verify every objective and gradient.

pub mod acoustic_model;
pub mod criteria;
pub mod decoder;
pub mod error;
pub mod forward_backward;
pub mod graphs;
pub mod oracle;
pub mod synth_data;
pub mod textio;
pub mod trainer;

pub use error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-3)`; the floor keeps near-zero entries
/// from dominating.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
