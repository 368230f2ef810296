use ndarray::Array2;

use super::{LogLikes, Posteriors};
use crate::error::{Error, Result};
use crate::graphs::Supervision;

#[derive(Clone, Debug)]
pub struct NumeratorPass {
    pub logprob: f64,
    pub gamma: Posteriors,
}

/// Forward-backward over the layered supervision. No leak and no boost;
/// arcs are unweighted, so `logprob` is the log of the summed likelihoods of
/// all accepted pdf sequences.
pub fn numerator_forward_backward(sup: &Supervision, ll: &LogLikes) -> Result<NumeratorPass> {
    let num_frames = sup.num_frames();
    if ll.num_frames() != num_frames {
        return Err(Error::DimensionMismatch {
            what: "log-likelihood frames vs supervision",
            expected: num_frames,
            actual: ll.num_frames(),
        });
    }
    if let Some(j) = sup.max_pdf().filter(|&j| j >= ll.num_pdfs()) {
        return Err(Error::DimensionMismatch {
            what: "supervision pdf vs log-likelihood columns",
            expected: ll.num_pdfs(),
            actual: j + 1,
        });
    }
    // Likelihoods shifted by the max over the pdfs this frame can emit.
    let mut lik: Vec<Vec<f64>> = Vec::with_capacity(num_frames);
    let mut log_norm = 0.0;
    for t in 0..num_frames {
        let row = ll.row(t);
        let m = sup.arcs(t).iter().map(|a| row[a.pdf]).fold(f64::NEG_INFINITY, f64::max);
        lik.push(sup.arcs(t).iter().map(|a| (row[a.pdf] - m).exp()).collect());
        log_norm += m;
    }

    let mut alpha: Vec<Vec<f64>> = (0..=num_frames).map(|t| vec![0.0; sup.layer_size(t)]).collect();
    for &s in sup.initial() {
        alpha[0][s] = 1.0;
    }
    let mut scales = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let (done, rest) = alpha.split_at_mut(t + 1);
        let (prev, next) = (&done[t], &mut rest[0]);
        for (a, w) in sup.arcs(t).iter().zip(&lik[t]) {
            next[a.dst] += prev[a.src] * w;
        }
        let c: f64 = next.iter().sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Underflow { frame: t + 1 });
        }
        next.iter_mut().for_each(|x| *x /= c);
        scales.push(c);
    }

    let mut beta: Vec<Vec<f64>> = (0..=num_frames).map(|t| vec![0.0; sup.layer_size(t)]).collect();
    for &s in sup.finals() {
        beta[num_frames][s] = 1.0;
    }
    let z: f64 = sup.finals().iter().map(|&s| alpha[num_frames][s]).sum();
    if !(z > 0.0) {
        return Err(Error::EmptyLanguage);
    }
    let mut gamma = Array2::<f64>::zeros((num_frames, ll.num_pdfs()));
    for t in (0..num_frames).rev() {
        let (head, tail) = beta.split_at_mut(t + 1);
        let (cur, next) = (&mut head[t], &tail[0]);
        for (a, w) in sup.arcs(t).iter().zip(&lik[t]) {
            let to_go = w * next[a.dst] / scales[t];
            cur[a.src] += to_go;
            gamma[[t, a.pdf]] += alpha[t][a.src] * to_go / z;
        }
    }
    let logprob = log_norm + scales.iter().map(|c| c.ln()).sum::<f64>() + z.ln();
    Ok(NumeratorPass {
        logprob,
        gamma: Posteriors::from_raw(gamma),
    })
}
