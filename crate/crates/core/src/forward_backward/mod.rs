//! Scaled forward-backward over the denominator graph (plain, leaky, boosted
//! and accuracy-extended) and over numerator supervisions.

mod denominator;
mod numerator;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub use denominator::{
    backward, forward, occupancies, smbr_backward, smbr_forward, AlphaBeta, ForwardPass, SmbrQuantities,
};
pub(crate) use denominator::{average_accuracy as denominator_average_accuracy, backward_sweep, forward_sweep};
pub use numerator::{numerator_forward_backward, NumeratorPass};

/// `T x J` matrix of pseudo log-likelihoods `log p(o_t | j)`, used as is:
/// no prior division, no acoustic scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLikes(Array2<f64>);

impl LogLikes {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((t, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log-likelihood {v} at frame {t}, pdf {j}")));
        }
        Ok(Self(values))
    }

    pub fn num_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_pdfs(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.0.row(t)
    }
}

/// `T x J` per-frame occupancies; every row is a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors(Array2<f64>);

impl Posteriors {
    /// Wraps a matrix, checking that rows are distributions within 1e-9.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (t, row) in values.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&g| !(-1e-12..=1.0 + 1e-12).contains(&g)) {
                return Err(Error::invariant("posteriors", format!("row {t} is not a distribution (sum {sum})")));
            }
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn num_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_pdfs(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.0[[t, j]]
    }
}

/// Additive log-domain likelihood offsets, `-b * gamma_num(t, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoostTable(Array2<f64>);

impl BoostTable {
    pub fn new(gamma_num: &Posteriors, boost: f64) -> Self {
        Self(gamma_num.values().mapv(|g| -boost * g))
    }

    pub fn offsets(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Per-frame shifted likelihoods `exp(ll + boost - shift_t)` where `shift_t`
/// is the row maximum; the shift is folded back into the log scales.
pub(crate) struct Emissions {
    pub lik: Array2<f64>,
    pub shift: Vec<f64>,
}

impl Emissions {
    pub fn new(ll: &LogLikes, boost: Option<&BoostTable>) -> Result<Self> {
        let mut lik = ll.values().clone();
        if let Some(b) = boost {
            if b.0.dim() != lik.dim() {
                return Err(Error::DimensionMismatch {
                    what: "boost table frames x pdfs",
                    expected: lik.len(),
                    actual: b.0.len(),
                });
            }
            lik += &b.0;
        }
        let mut shift = Vec::with_capacity(lik.nrows());
        for mut row in lik.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            shift.push(m);
        }
        Ok(Self { lik, shift })
    }
}
