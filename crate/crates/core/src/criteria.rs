//! LF-MMI, boosted LF-MMI and LF-sMBR objectives with gradients with respect
//! to the log-likelihood matrix, plus the cross-entropy regulariser.
//!
//! All criteria are maximised. The leaky coefficient in [`CriterionConfig`]
//! is the one used for the denominator recursions; the numerator is never
//! leaky.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::forward_backward::{
    backward_sweep, forward_sweep, numerator_forward_backward, BoostTable, Emissions, LogLikes, Posteriors,
};
use crate::graphs::{DenominatorGraph, Supervision};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriterionKind {
    Mmi,
    Bmmi,
    Smbr,
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriterionKind::Mmi => "mmi",
            CriterionKind::Bmmi => "bmmi",
            CriterionKind::Smbr => "smbr",
        })
    }
}

impl FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmi" => Ok(CriterionKind::Mmi),
            "bmmi" => Ok(CriterionKind::Bmmi),
            "smbr" => Ok(CriterionKind::Smbr),
            _ => Err(Error::Config(format!("unknown criterion `{s}` (expected mmi, bmmi or smbr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionConfig {
    pub kind: CriterionKind,
    /// Boosting factor; must be zero for MMI.
    pub boost: f64,
    /// Scale on silence-pdf accuracies, sMBR only.
    pub silence_scale: f64,
    pub leaky_coeff: f64,
    pub xent_smooth: f64,
    pub silence_pdfs: Vec<usize>,
}

impl CriterionConfig {
    /// Leaky coefficient 0.1 and cross-entropy smoothing 0.025 throughout;
    /// boost 0.1 for bMMI, silence scale 0.013 for sMBR.
    pub fn defaults(kind: CriterionKind) -> Self {
        Self {
            kind,
            boost: if kind == CriterionKind::Bmmi { 0.1 } else { 0.0 },
            silence_scale: if kind == CriterionKind::Smbr { 0.013 } else { 1.0 },
            leaky_coeff: 0.1,
            xent_smooth: 0.025,
            silence_pdfs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.boost >= 0.0 && self.boost.is_finite()) {
            return Err(Error::Config(format!("boost factor {} must be >= 0", self.boost)));
        }
        if self.kind == CriterionKind::Mmi && self.boost != 0.0 {
            return Err(Error::Config("MMI requires boost factor 0; use bmmi".into()));
        }
        if !(self.silence_scale > 0.0 && self.silence_scale <= 1.0) {
            return Err(Error::Config(format!("silence scale {} must be in (0, 1]", self.silence_scale)));
        }
        if !(self.leaky_coeff >= 0.0 && self.leaky_coeff.is_finite()) {
            return Err(Error::Config(format!("leaky coefficient {} must be >= 0", self.leaky_coeff)));
        }
        if !(self.xent_smooth >= 0.0 && self.xent_smooth.is_finite()) {
            return Err(Error::Config(format!("xent smoothing {} must be >= 0", self.xent_smooth)));
        }
        Ok(())
    }
}

/// Frame accuracies derived from the numerator occupancies:
/// `a(t, j) = gamma_num(t, j) * (mu if j is silence else 1)`.
#[derive(Clone, Debug)]
pub struct AccuracyModel {
    gamma_num: Posteriors,
    is_silence: Vec<bool>,
    silence_scale: f64,
}

impl AccuracyModel {
    pub fn new(gamma_num: Posteriors, silence_pdfs: &[usize], silence_scale: f64) -> Result<Self> {
        if !(silence_scale > 0.0 && silence_scale <= 1.0) {
            return Err(Error::Config(format!("silence scale {silence_scale} must be in (0, 1]")));
        }
        let mut is_silence = vec![false; gamma_num.num_pdfs()];
        for &j in silence_pdfs {
            *is_silence
                .get_mut(j)
                .ok_or(Error::IdOutOfRange { id: j, vocab: gamma_num.num_pdfs() })? = true;
        }
        Ok(Self {
            gamma_num,
            is_silence,
            silence_scale,
        })
    }

    pub fn gamma_num(&self) -> &Posteriors {
        &self.gamma_num
    }

    pub fn frame_accuracy(&self) -> Array2<f64> {
        let mut acc = self.gamma_num.values().clone();
        if self.silence_scale != 1.0 {
            for mut row in acc.rows_mut() {
                for (j, a) in row.iter_mut().enumerate() {
                    if self.is_silence[j] {
                        *a *= self.silence_scale;
                    }
                }
            }
        }
        acc
    }
}

#[derive(Clone, Debug)]
pub struct CriterionOutput {
    /// Criterion value plus the cross-entropy term.
    pub objective: f64,
    /// `d objective / d log p(o_t | j)`.
    pub grad: Array2<f64>,
    pub num_logprob: f64,
    /// Log of the denominator sum (boosted for bMMI, leaky if configured).
    pub den_logprob: f64,
    /// Expected path accuracy, sMBR only.
    pub avg_accuracy: Option<f64>,
    pub xent_value: f64,
}

impl CriterionOutput {
    /// Objective without the cross-entropy term.
    pub fn criterion_value(&self) -> f64 {
        self.objective - self.xent_value
    }
}

fn check_dims(den: &DenominatorGraph, sup: &Supervision, ll: &LogLikes) -> Result<()> {
    if ll.num_pdfs() != den.num_pdfs() {
        return Err(Error::DimensionMismatch {
            what: "log-likelihood columns vs graph pdfs",
            expected: den.num_pdfs(),
            actual: ll.num_pdfs(),
        });
    }
    if ll.num_frames() != sup.num_frames() {
        return Err(Error::DimensionMismatch {
            what: "log-likelihood frames vs supervision",
            expected: sup.num_frames(),
            actual: ll.num_frames(),
        });
    }
    Ok(())
}

/// Dispatches on `cfg.kind`.
pub fn compute(den: &DenominatorGraph, sup: &Supervision, ll: &LogLikes, cfg: &CriterionConfig) -> Result<CriterionOutput> {
    compute_with_reference(den, sup, ll, cfg, None)
}

pub fn compute_mmi(den: &DenominatorGraph, sup: &Supervision, ll: &LogLikes, cfg: &CriterionConfig) -> Result<CriterionOutput> {
    let cfg = CriterionConfig {
        kind: CriterionKind::Mmi,
        ..cfg.clone()
    };
    compute_with_reference(den, sup, ll, &cfg, None)
}

pub fn compute_bmmi(den: &DenominatorGraph, sup: &Supervision, ll: &LogLikes, cfg: &CriterionConfig) -> Result<CriterionOutput> {
    let cfg = CriterionConfig {
        kind: CriterionKind::Bmmi,
        ..cfg.clone()
    };
    compute_with_reference(den, sup, ll, &cfg, None)
}

pub fn compute_smbr(den: &DenominatorGraph, sup: &Supervision, ll: &LogLikes, cfg: &CriterionConfig) -> Result<CriterionOutput> {
    let cfg = CriterionConfig {
        kind: CriterionKind::Smbr,
        ..cfg.clone()
    };
    compute_with_reference(den, sup, ll, &cfg, None)
}

/// Like [`compute`], but boosting, accuracies and the cross-entropy targets
/// use `reference` in place of the numerator occupancies when given. The
/// returned gradient treats those occupancies as constants, so this is the
/// function to differentiate numerically with `reference` frozen at the
/// evaluation point.
pub fn compute_with_reference(
    den: &DenominatorGraph,
    sup: &Supervision,
    ll: &LogLikes,
    cfg: &CriterionConfig,
    reference: Option<&Posteriors>,
) -> Result<CriterionOutput> {
    cfg.validate()?;
    check_dims(den, sup, ll)?;
    let num = numerator_forward_backward(sup, ll)?;
    let gamma_ref = reference.unwrap_or(&num.gamma);
    if gamma_ref.values().dim() != ll.values().dim() {
        return Err(Error::DimensionMismatch {
            what: "reference occupancies",
            expected: ll.values().len(),
            actual: gamma_ref.values().len(),
        });
    }

    let mut out = match cfg.kind {
        CriterionKind::Mmi | CriterionKind::Bmmi => {
            let boost = (cfg.boost > 0.0).then(|| BoostTable::new(gamma_ref, cfg.boost));
            let em = Emissions::new(ll, boost.as_ref())?;
            let fwd = forward_sweep(den, &em, cfg.leaky_coeff, None)?;
            let bwd = backward_sweep(den, &em, &fwd, None)?;
            CriterionOutput {
                objective: num.logprob - fwd.total_logprob,
                grad: num.gamma.values() - &bwd.gamma,
                num_logprob: num.logprob,
                den_logprob: fwd.total_logprob,
                avg_accuracy: None,
                xent_value: 0.0,
            }
        }
        CriterionKind::Smbr => {
            let acc = AccuracyModel::new(gamma_ref.clone(), &cfg.silence_pdfs, cfg.silence_scale)?;
            let frame_acc = acc.frame_accuracy();
            let em = Emissions::new(ll, None)?;
            let fwd = forward_sweep(den, &em, cfg.leaky_coeff, Some(&frame_acc))?;
            let bwd = backward_sweep(den, &em, &fwd, Some(&frame_acc))?;
            let avg = crate::forward_backward::denominator_average_accuracy(den, &fwd);
            let cond = bwd.cond_accuracy.expect("accuracy supplied");
            let grad = &bwd.gamma * &cond.mapv(|a| a - avg);
            CriterionOutput {
                objective: avg,
                grad,
                num_logprob: num.logprob,
                den_logprob: fwd.total_logprob,
                avg_accuracy: Some(avg),
                xent_value: 0.0,
            }
        }
    };

    if cfg.xent_smooth > 0.0 {
        let (value, grad) = xent_regularizer(gamma_ref, ll, cfg.xent_smooth)?;
        out.objective += value;
        out.xent_value = value;
        out.grad += &grad;
    }
    if let Some(((t, j), g)) = out.grad.indexed_iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {g} at frame {t}, pdf {j}")));
    }
    if !out.objective.is_finite() {
        return Err(Error::NonFinite(format!("objective {}", out.objective)));
    }
    Ok(out)
}

/// `smooth * sum_t sum_j gamma(t, j) * log_softmax(ll(t, .))_j` and its
/// gradient `smooth * (gamma - softmax(ll))`, with `gamma` held fixed.
pub fn xent_regularizer(gamma_num: &Posteriors, ll: &LogLikes, smooth: f64) -> Result<(f64, Array2<f64>)> {
    if gamma_num.values().dim() != ll.values().dim() {
        return Err(Error::DimensionMismatch {
            what: "xent targets",
            expected: ll.values().len(),
            actual: gamma_num.values().len(),
        });
    }
    if smooth == 0.0 {
        return Ok((0.0, Array2::zeros(ll.values().dim())));
    }
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(ll.values().dim());
    for (t, row) in ll.values().axis_iter(Axis(0)).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (j, &x) in row.iter().enumerate() {
            let g = gamma_num.get(t, j);
            value += g * (x - lse);
            grad[[t, j]] = smooth * (g - (x - lse).exp());
        }
    }
    Ok((smooth * value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{Arc, SupArc};
    use ndarray::array;

    /// One state, a self loop per pdf with weight one: every pdf string of
    /// every length has weight one.
    fn free_graph(num_pdfs: usize) -> DenominatorGraph {
        let arcs = (0..num_pdfs)
            .map(|pdf| Arc {
                src: 0,
                dst: 0,
                pdf,
                log_prob: 0.0,
            })
            .collect();
        DenominatorGraph::new(1, num_pdfs, arcs, vec![1.0], vec![1.0], 0.0).unwrap()
    }

    fn free_supervision(num_frames: usize, num_pdfs: usize) -> Supervision {
        let frames = (0..num_frames)
            .map(|_| (0..num_pdfs).map(|pdf| SupArc { src: 0, dst: 0, pdf }).collect())
            .collect();
        Supervision::new("free", frames, vec![0], vec![0]).unwrap()
    }

    fn single_path(pdfs: &[usize]) -> Supervision {
        let frames = pdfs.iter().map(|&pdf| vec![SupArc { src: 0, dst: 0, pdf }]).collect();
        Supervision::new("one", frames, vec![0], vec![0]).unwrap()
    }

    fn plain(kind: CriterionKind) -> CriterionConfig {
        CriterionConfig {
            kind,
            boost: 0.0,
            silence_scale: 1.0,
            leaky_coeff: 0.0,
            xent_smooth: 0.0,
            silence_pdfs: vec![],
        }
    }

    #[test]
    fn identical_languages_give_zero() {
        let den = free_graph(3);
        let sup = free_supervision(4, 3);
        let ll = LogLikes::new(array![[0.1, -1.0, 2.0], [0.0, 0.3, 0.3], [-2.0, 1.0, 0.5], [1.0, 1.0, 1.0]]).unwrap();
        let out = compute_mmi(&den, &sup, &ll, &plain(CriterionKind::Mmi)).unwrap();
        assert!(out.objective.abs() < 1e-12);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn single_path_smbr_is_degenerate() {
        // A chain graph whose only path is the reference.
        let pdfs = [0, 0, 1, 2];
        let arcs = pdfs
            .iter()
            .enumerate()
            .map(|(t, &pdf)| Arc {
                src: t,
                dst: t + 1,
                pdf,
                log_prob: -0.3,
            })
            .collect();
        let mut finals = vec![0.0; 5];
        finals[4] = 1.0;
        let mut initial = vec![0.0; 5];
        initial[0] = 1.0;
        let den = DenominatorGraph::new(5, 3, arcs, initial, finals, 0.0).unwrap();
        let ll = LogLikes::new(Array2::from_shape_fn((4, 3), |(t, j)| (t * 3 + j) as f64 * 0.1)).unwrap();
        let out = compute_smbr(&den, &single_path(&pdfs), &ll, &plain(CriterionKind::Smbr)).unwrap();
        assert!((out.objective - 4.0).abs() < 1e-12);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn mmi_rejects_boost() {
        let cfg = CriterionConfig {
            boost: 0.1,
            ..plain(CriterionKind::Mmi)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn xent_disabled_and_uniform() {
        let gamma = Posteriors::new(array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let ll = LogLikes::new(Array2::from_elem((3, 4), 0.7)).unwrap();
        let (v, g) = xent_regularizer(&gamma, &ll, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, _) = xent_regularizer(&gamma, &ll, 0.025).unwrap();
        assert!((v - 0.025 * 3.0 * (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_matches_finite_differences() {
        let gamma = Posteriors::new(array![[0.2, 0.8, 0.0], [0.5, 0.25, 0.25]]).unwrap();
        let base = array![[0.3, -1.2, 2.0], [0.0, 0.4, -0.7]];
        let (_, grad) = xent_regularizer(&gamma, &LogLikes::new(base.clone()).unwrap(), 0.3).unwrap();
        let h = 1e-5;
        for ((t, j), g) in grad.indexed_iter() {
            let eval = |d: f64| {
                let mut m = base.clone();
                m[[t, j]] += d;
                xent_regularizer(&gamma, &LogLikes::new(m).unwrap(), 0.3).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(crate::relative_error(*g, fd) < 1e-6, "({t},{j}) {g} vs {fd}");
        }
    }

    #[test]
    fn silence_scale_applies_only_to_silence() {
        let gamma = Posteriors::new(array![[0.5, 0.5], [1.0, 0.0]]).unwrap();
        let acc = AccuracyModel::new(gamma, &[0], 0.5).unwrap().frame_accuracy();
        assert_eq!(acc, array![[0.25, 0.5], [0.5, 0.0]]);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SMBR".parse::<CriterionKind>().unwrap(), CriterionKind::Smbr);
        assert!("mpe".parse::<CriterionKind>().is_err());
    }
}
