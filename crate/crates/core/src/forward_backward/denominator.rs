use ndarray::{Array1, Array2};

use super::{BoostTable, Emissions, LogLikes, Posteriors};
use crate::criteria::AccuracyModel;
use crate::error::{Error, Result};
use crate::graphs::DenominatorGraph;

/// Forward quantities. `alpha` is `(T + 1) x S` with every row renormalised to
/// sum to one; `log_scales[t]` is the log of the removed normaliser (including
/// the likelihood shift of frame `t`).
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub alpha: Array2<f64>,
    pub log_scales: Vec<f64>,
    pub total_logprob: f64,
    /// Expected accumulated accuracy given the state, present for sMBR.
    pub alpha_mbr: Option<Array2<f64>>,
    pub(crate) scales: Vec<f64>,
    pub(crate) leak: f64,
}

impl ForwardPass {
    pub fn num_frames(&self) -> usize {
        self.alpha.nrows() - 1
    }

    /// `sum_s alpha(s, T) * final(s)` on the scaled rows.
    pub(crate) fn final_mass(&self, graph: &DenominatorGraph) -> f64 {
        let t = self.num_frames();
        self.alpha.row(t).iter().zip(graph.finals()).map(|(a, f)| a * f).sum()
    }
}

/// Forward and backward quantities. With the shared scaling,
/// `sum_s alpha(s, t) * beta(s, t)` is the same for every `t`.
#[derive(Clone, Debug)]
pub struct AlphaBeta {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub log_scales: Vec<f64>,
    pub total_logprob: f64,
    pub(crate) scales: Vec<f64>,
    pub(crate) leak: f64,
}

impl AlphaBeta {
    /// `sum_s alpha(s, t) * beta(s, t)`.
    pub fn frame_product(&self, t: usize) -> f64 {
        self.alpha.row(t).dot(&self.beta.row(t))
    }
}

#[derive(Clone, Debug)]
pub struct SmbrQuantities {
    pub alpha_mbr: Array2<f64>,
    pub beta_mbr: Array2<f64>,
    /// Expected path accuracy over the (leaky) denominator graph.
    pub avg_accuracy: f64,
    /// `T x J` expected path accuracy given pdf `j` at frame `t`; zero where
    /// the pdf has no occupancy.
    pub cond_accuracy: Array2<f64>,
}

pub(crate) struct BackwardSweep {
    pub beta: Array2<f64>,
    pub gamma: Array2<f64>,
    pub beta_mbr: Option<Array2<f64>>,
    pub cond_accuracy: Option<Array2<f64>>,
}

fn check_dims(graph: &DenominatorGraph, ll: &LogLikes) -> Result<()> {
    if ll.num_pdfs() != graph.num_pdfs() {
        return Err(Error::DimensionMismatch {
            what: "log-likelihood columns vs graph pdfs",
            expected: graph.num_pdfs(),
            actual: ll.num_pdfs(),
        });
    }
    Ok(())
}

/// `v += leak * P_0 * sum(v)`: every state jumps to every state with
/// probability `leak * P_0(dst)`, emitting nothing.
fn leak_forward(v: &mut [f64], initial: &[f64], leak: f64) {
    if leak == 0.0 {
        return;
    }
    let total: f64 = v.iter().sum();
    for (x, p0) in v.iter_mut().zip(initial) {
        *x += leak * p0 * total;
    }
}

/// Transpose of [`leak_forward`]: `v += leak * (P_0 . v)`.
fn leak_backward(v: &mut [f64], initial: &[f64], leak: f64) {
    if leak == 0.0 {
        return;
    }
    let dot: f64 = v.iter().zip(initial).map(|(x, p)| x * p).sum();
    for x in v.iter_mut() {
        *x += leak * dot;
    }
}

/// One forward sweep. When `accuracy` is given, the accuracy-weighted
/// recursion runs alongside it.
pub(crate) fn forward_sweep(
    graph: &DenominatorGraph,
    em: &Emissions,
    leak: f64,
    accuracy: Option<&Array2<f64>>,
) -> Result<ForwardPass> {
    let num_frames = em.lik.nrows();
    let num_states = graph.num_states();
    let initial = graph.initial();
    let probs = graph.arc_probs();
    let arcs = graph.arcs();

    let mut alpha = Array2::<f64>::zeros((num_frames + 1, num_states));
    let mut alpha_mbr = accuracy.map(|_| Array2::<f64>::zeros((num_frames + 1, num_states)));
    let mut scales = Vec::with_capacity(num_frames + 1);
    let mut log_scales = Vec::with_capacity(num_frames + 1);

    let mut cur: Vec<f64> = initial.to_vec();
    leak_forward(&mut cur, initial, leak);
    let c0: f64 = cur.iter().sum();
    for (dst, x) in alpha.row_mut(0).iter_mut().zip(&cur) {
        *dst = x / c0;
    }
    scales.push(c0);
    log_scales.push(c0.ln());

    let mut next = vec![0.0; num_states];
    let mut next_mbr = vec![0.0; num_states];
    for t in 1..=num_frames {
        let lik = em.lik.row(t - 1);
        let prev = alpha.row(t - 1);
        next.iter_mut().for_each(|x| *x = 0.0);
        next_mbr.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..num_states {
            for &a in graph.incoming(s) {
                let arc = &arcs[a];
                let delta = prev[arc.src] * probs[a] * lik[arc.pdf];
                next[s] += delta;
                if let (Some(acc), Some(mbr)) = (accuracy, alpha_mbr.as_ref()) {
                    next_mbr[s] += (mbr[[t - 1, arc.src]] + acc[[t - 1, arc.pdf]]) * delta;
                }
            }
        }
        leak_forward(&mut next, initial, leak);
        let c: f64 = next.iter().sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Underflow { frame: t });
        }
        if let Some(mbr) = alpha_mbr.as_mut() {
            leak_forward(&mut next_mbr, initial, leak);
            for s in 0..num_states {
                mbr[[t, s]] = if next[s] > 0.0 { next_mbr[s] / next[s] } else { 0.0 };
            }
        }
        for (dst, x) in alpha.row_mut(t).iter_mut().zip(&next) {
            *dst = x / c;
        }
        scales.push(c);
        log_scales.push(c.ln() + em.shift[t - 1]);
    }

    let mut pass = ForwardPass {
        alpha,
        log_scales,
        total_logprob: 0.0,
        alpha_mbr,
        scales,
        leak,
    };
    let fin = pass.final_mass(graph);
    if !(fin > 0.0) {
        return Err(Error::Underflow { frame: num_frames });
    }
    pass.total_logprob = pass.log_scales.iter().sum::<f64>() + fin.ln();
    Ok(pass)
}

/// One backward sweep producing beta, the pdf occupancies and, when
/// `accuracy` is given, the accuracy-to-go and conditional accuracies.
pub(crate) fn backward_sweep(
    graph: &DenominatorGraph,
    em: &Emissions,
    fwd: &ForwardPass,
    accuracy: Option<&Array2<f64>>,
) -> Result<BackwardSweep> {
    let num_frames = fwd.num_frames();
    let num_states = graph.num_states();
    let num_pdfs = graph.num_pdfs();
    let initial = graph.initial();
    let probs = graph.arc_probs();
    let arcs = graph.arcs();
    let leak = fwd.leak;
    let smbr = match (accuracy, fwd.alpha_mbr.as_ref()) {
        (Some(acc), Some(mbr)) => Some((acc, mbr)),
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::invariant("sMBR backward", "forward pass ran without accuracies"));
        }
    };
    let z = fwd.final_mass(graph);

    let mut beta = Array2::<f64>::zeros((num_frames + 1, num_states));
    beta.row_mut(num_frames).assign(&Array1::from(graph.finals().to_vec()));
    let mut gamma = Array2::<f64>::zeros((num_frames, num_pdfs));
    // accuracy-weighted beta, beta(s, t) * beta_mbr(s, t)
    let mut acc_beta = smbr.map(|_| Array2::<f64>::zeros((num_frames + 1, num_states)));
    let mut cond_num = smbr.map(|_| Array2::<f64>::zeros((num_frames, num_pdfs)));

    let mut pre = vec![0.0; num_states];
    let mut pre_acc = vec![0.0; num_states];
    for t in (1..=num_frames).rev() {
        pre.copy_from_slice(beta.row(t).as_slice().expect("standard layout"));
        leak_backward(&mut pre, initial, leak);
        if let Some(ab) = acc_beta.as_ref() {
            pre_acc.copy_from_slice(ab.row(t).as_slice().expect("standard layout"));
            leak_backward(&mut pre_acc, initial, leak);
        }
        let c = fwd.scales[t];
        let lik = em.lik.row(t - 1);
        let mut new_beta = vec![0.0; num_states];
        let mut new_acc = vec![0.0; num_states];
        for (a, arc) in arcs.iter().enumerate() {
            let w = probs[a] * lik[arc.pdf] / c;
            let to_go = w * pre[arc.dst];
            new_beta[arc.src] += to_go;
            let occ = fwd.alpha[[t - 1, arc.src]] * to_go / z;
            gamma[[t - 1, arc.pdf]] += occ;
            if let Some((acc, mbr)) = smbr {
                let a_t = acc[[t - 1, arc.pdf]];
                new_acc[arc.src] += w * (a_t * pre[arc.dst] + pre_acc[arc.dst]);
                if let Some(cn) = cond_num.as_mut() {
                    let future = if pre[arc.dst] > 0.0 { pre_acc[arc.dst] / pre[arc.dst] } else { 0.0 };
                    cn[[t - 1, arc.pdf]] += occ * (mbr[[t - 1, arc.src]] + a_t + future);
                }
            }
        }
        beta.row_mut(t - 1).assign(&Array1::from(new_beta));
        if let Some(ab) = acc_beta.as_mut() {
            ab.row_mut(t - 1).assign(&Array1::from(new_acc));
        }
    }

    let beta_mbr = acc_beta.map(|ab| {
        let mut out = ab;
        for ((t, s), v) in out.indexed_iter_mut() {
            let b = beta[[t, s]];
            *v = if b > 0.0 { *v / b } else { 0.0 };
        }
        out
    });
    let cond_accuracy = cond_num.map(|mut cn| {
        for ((t, j), v) in cn.indexed_iter_mut() {
            let g = gamma[[t, j]];
            *v = if g > 0.0 { *v / g } else { 0.0 };
        }
        cn
    });
    Ok(BackwardSweep {
        beta,
        gamma,
        beta_mbr,
        cond_accuracy,
    })
}

/// Forward recursion with the graph's leaky coefficient; `boost` multiplies
/// every likelihood by `exp(offset)` without touching `ll`.
pub fn forward(graph: &DenominatorGraph, ll: &LogLikes, boost: Option<&BoostTable>) -> Result<ForwardPass> {
    check_dims(graph, ll)?;
    let em = Emissions::new(ll, boost)?;
    forward_sweep(graph, &em, graph.leaky_coeff(), None)
}

/// Completes `fwd` with the backward recursion; `boost` must match the one
/// used for `fwd`.
pub fn backward(
    graph: &DenominatorGraph,
    ll: &LogLikes,
    boost: Option<&BoostTable>,
    fwd: ForwardPass,
) -> Result<AlphaBeta> {
    check_dims(graph, ll)?;
    if fwd.num_frames() != ll.num_frames() {
        return Err(Error::DimensionMismatch {
            what: "forward pass frames",
            expected: ll.num_frames(),
            actual: fwd.num_frames(),
        });
    }
    let em = Emissions::new(ll, boost)?;
    let sweep = backward_sweep(graph, &em, &fwd, None)?;
    Ok(AlphaBeta {
        alpha: fwd.alpha,
        beta: sweep.beta,
        log_scales: fwd.log_scales,
        total_logprob: fwd.total_logprob,
        scales: fwd.scales,
        leak: fwd.leak,
    })
}

/// Per-frame pdf occupancies from a completed [`AlphaBeta`]. Leak jumps emit
/// nothing, so only graph arcs contribute.
pub fn occupancies(
    graph: &DenominatorGraph,
    ll: &LogLikes,
    boost: Option<&BoostTable>,
    ab: &AlphaBeta,
) -> Result<Posteriors> {
    check_dims(graph, ll)?;
    let em = Emissions::new(ll, boost)?;
    let num_frames = ll.num_frames();
    let z = ab.frame_product(num_frames);
    let mut gamma = Array2::<f64>::zeros((num_frames, graph.num_pdfs()));
    let mut pre = vec![0.0; graph.num_states()];
    for t in 1..=num_frames {
        pre.copy_from_slice(ab.beta.row(t).as_slice().expect("standard layout"));
        leak_backward(&mut pre, graph.initial(), ab.leak);
        for (a, arc) in graph.arcs().iter().enumerate() {
            gamma[[t - 1, arc.pdf]] +=
                ab.alpha[[t - 1, arc.src]] * graph.arc_probs()[a] * em.lik[[t - 1, arc.pdf]] * pre[arc.dst]
                    / ab.scales[t]
                    / z;
        }
    }
    Ok(Posteriors::from_raw(gamma))
}

/// Forward sweep carrying the expected accumulated accuracy (no boosting).
pub fn smbr_forward(graph: &DenominatorGraph, ll: &LogLikes, acc: &AccuracyModel) -> Result<ForwardPass> {
    check_dims(graph, ll)?;
    let frame_acc = acc.frame_accuracy();
    if frame_acc.dim() != ll.values().dim() {
        return Err(Error::DimensionMismatch {
            what: "accuracy model frames",
            expected: ll.num_frames(),
            actual: frame_acc.nrows(),
        });
    }
    let em = Emissions::new(ll, None)?;
    forward_sweep(graph, &em, graph.leaky_coeff(), Some(&frame_acc))
}

/// The single backward sweep of sMBR: beta, occupancies, accuracy-to-go and
/// the conditional accuracies all come out of it.
pub fn smbr_backward(
    graph: &DenominatorGraph,
    ll: &LogLikes,
    acc: &AccuracyModel,
    fwd: ForwardPass,
) -> Result<(AlphaBeta, SmbrQuantities, Posteriors)> {
    check_dims(graph, ll)?;
    let frame_acc = acc.frame_accuracy();
    let em = Emissions::new(ll, None)?;
    let sweep = backward_sweep(graph, &em, &fwd, Some(&frame_acc))?;
    let alpha_mbr = fwd
        .alpha_mbr
        .clone()
        .ok_or_else(|| Error::invariant("sMBR backward", "forward pass ran without accuracies"))?;
    let avg_accuracy = average_accuracy(graph, &fwd);
    let quantities = SmbrQuantities {
        alpha_mbr,
        beta_mbr: sweep.beta_mbr.expect("accuracy supplied"),
        avg_accuracy,
        cond_accuracy: sweep.cond_accuracy.expect("accuracy supplied"),
    };
    let ab = AlphaBeta {
        alpha: fwd.alpha,
        beta: sweep.beta,
        log_scales: fwd.log_scales,
        total_logprob: fwd.total_logprob,
        scales: fwd.scales,
        leak: fwd.leak,
    };
    Ok((ab, quantities, Posteriors::from_raw(sweep.gamma)))
}

pub(crate) fn average_accuracy(graph: &DenominatorGraph, fwd: &ForwardPass) -> f64 {
    let alpha_mbr = fwd.alpha_mbr.as_ref().expect("forward pass ran with accuracies");
    let t = fwd.num_frames();
    let num: f64 = (0..graph.num_states())
        .map(|s| fwd.alpha[[t, s]] * graph.finals()[s] * alpha_mbr[[t, s]])
        .sum();
    num / fwd.final_mass(graph)
}
