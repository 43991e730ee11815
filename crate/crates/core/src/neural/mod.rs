//! Peak and precursor embeddings, the spectrum encoder, the imputation module
//! and the peptide decoder.

mod model;

pub use model::{BatchOutcome, Dropout, LossBreakdown, MemoryMode, Model, Precursor, TrainingExample};

use crate::chem::{MAX_PEPTIDE_LEN, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

/// Architecture and set-prediction hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub imputer_layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Number of learnable peak queries, `M`.
    pub queries: usize,
    /// Existence-probability threshold for imputed rows.
    pub tau: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Append complementary peaks to the observed peak list.
    pub use_complement: bool,
    /// Imputation module and its loss.
    pub imputation: bool,
    /// Cross-entropy on the theoretical-spectrum memory.
    pub theory_ce: bool,
    /// Decode C-terminus first.
    pub reverse_decoding: bool,
    /// Add a sinusoidal encoding of the running residue mass to decoder inputs.
    pub prefix_mass_encoding: bool,
    /// Probability clamp applied before logs in the existence loss.
    pub log_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-scale architecture (not trainable on a desk CPU).
    pub fn full() -> Self {
        Self {
            d_model: 512,
            encoder_layers: 9,
            decoder_layers: 9,
            imputer_layers: 3,
            heads: 8,
            ffn_width: 1024,
            queries: 100,
            tau: 0.8,
            lambda_max: 10_000.0,
            lambda_min: 0.001,
            vocab_size: VOCAB_SIZE,
            max_len: MAX_PEPTIDE_LEN,
            dropout: 0.1,
            use_complement: true,
            imputation: true,
            theory_ce: true,
            reverse_decoding: false,
            prefix_mass_encoding: false,
            log_clamp: crate::assign::DEFAULT_LOG_CLAMP,
        }
    }

    /// Small profile that trains on a single CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            imputer_layers: 2,
            heads: 4,
            ffn_width: 128,
            queries: 32,
            dropout: 0.0,
            prefix_mass_encoding: true,
            ..Self::full()
        }
    }

    /// The same profile with the imputation module and theoretical CE removed.
    pub fn ablated(&self) -> Self {
        Self { imputation: false, theory_ce: false, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.queries == 0 {
            return bad("queries must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.lambda_min > 0.0 && self.lambda_max > self.lambda_min) {
            return bad("need 0 < lambda_min < lambda_max".into());
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if self.max_len == 0 || self.max_len > MAX_PEPTIDE_LEN {
            return bad(format!("max_len must be in 1..={MAX_PEPTIDE_LEN}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(self.log_clamp > 0.0 && self.log_clamp < 0.5) {
            return bad("log_clamp must lie in (0, 0.5)".into());
        }
        Ok(())
    }
}

/// The learned set of latent peak candidates and their existence probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationOutput<T> {
    /// `M x d` imputed representations.
    pub vectors: Matrix<T>,
    /// `M` probabilities in `(0, 1)`.
    pub probs: Vec<T>,
}

impl<T: Scalar> ImputationOutput<T> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Per-peak latent representations, one row per input peak.
pub type LatentPeakSet<T> = Matrix<T>;

/// Divisors of the fixed m/z embedding, one per output feature.
///
/// Feature `j` (1-based) uses `(lmax/lmin) * (lmin / 2pi)^(2j/d)`; the first
/// half takes the sine of `m / divisor`, the second half the cosine.
pub fn mz_divisors(d: usize, lambda_max: f64, lambda_min: f64) -> Vec<f64> {
    let base = lambda_min / (2.0 * std::f64::consts::PI);
    let scale = lambda_max / lambda_min;
    (1..=d).map(|j| scale * base.powf(2.0 * j as f64 / d as f64)).collect()
}

/// Fixed sinusoidal m/z embedding of width `d`.
pub fn encode_mz(m: f64, d: usize, lambda_max: f64, lambda_min: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("embedding width must be even, got {d}")));
    }
    if !(m >= 0.0) {
        return Err(Error::Domain(format!("m/z must be non-negative, got {m}")));
    }
    Ok(encode_with(m, &mz_divisors(d, lambda_max, lambda_min)))
}

pub(crate) fn encode_with(m: f64, divisors: &[f64]) -> Vec<f64> {
    let half = divisors.len() / 2;
    divisors
        .iter()
        .enumerate()
        .map(|(i, &div)| if i < half { (m / div).sin() } else { (m / div).cos() })
        .collect()
}

/// Standard sinusoidal position encoding over the token axis.
pub fn position_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}
