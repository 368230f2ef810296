//! Viterbi decoding through the denominator graph and phone-level scoring.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::forward_backward::LogLikes;
use crate::graphs::{DenominatorGraph, HmmTopology};

/// Utterance id and phone sequence, one line of a transcription file.
pub type Transcript = (String, Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
pub struct ViterbiResult {
    pub pdfs: Vec<usize>,
    pub phones: Vec<usize>,
    /// Log of initial, transition, final and emission terms on the best path.
    pub score: f64,
}

/// Best complete path, ignoring the graph's leak. Among equal-scoring
/// predecessors the smallest arc index wins; among equal final states the
/// smallest state.
pub fn viterbi(graph: &DenominatorGraph, ll: &LogLikes, topo: &HmmTopology) -> Result<ViterbiResult> {
    if ll.num_pdfs() != graph.num_pdfs() {
        return Err(Error::DimensionMismatch {
            what: "log-likelihood columns vs graph pdfs",
            expected: graph.num_pdfs(),
            actual: ll.num_pdfs(),
        });
    }
    let n = graph.num_states();
    let num_frames = ll.num_frames();
    let x = ll.values();
    let mut delta: Vec<f64> = graph.initial().iter().map(|p| p.ln()).collect();
    let mut back = vec![vec![usize::MAX; n]; num_frames];
    for t in 0..num_frames {
        let mut next = vec![f64::NEG_INFINITY; n];
        for (a, arc) in graph.arcs().iter().enumerate() {
            let cand = delta[arc.src] + arc.log_prob + x[[t, arc.pdf]];
            if cand > next[arc.dst] {
                next[arc.dst] = cand;
                back[t][arc.dst] = a;
            }
        }
        delta = next;
    }
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (s, f) in graph.finals().iter().enumerate() {
        let cand = delta[s] + f.ln();
        if cand > best.0 {
            best = (cand, s);
        }
    }
    if best.1 == usize::MAX {
        return Err(Error::invariant("decoding", "no complete path through the graph"));
    }
    let mut pdfs = vec![0; num_frames];
    let mut s = best.1;
    for t in (0..num_frames).rev() {
        let arc = graph.arcs()[back[t][s]];
        pdfs[t] = arc.pdf;
        s = arc.src;
    }
    Ok(ViterbiResult {
        phones: topo.phones_of_pdf_path(&pdfs),
        pdfs,
        score: best.0,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. The
/// traceback prefers substitution (or match), then insertion, then deletion.
pub fn phone_edit_distance(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    d[0] = (0..=m).collect();
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]) {
            if hyp[i - 1] != reference[j - 1] {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.insertions += 1;
            i -= 1;
        } else {
            counts.deletions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScoreReport {
    pub edits: EditCounts,
    pub ref_len: usize,
    pub utterances: usize,
}

impl ScoreReport {
    /// `(S + I + D) / N`; zero for an empty reference set.
    pub fn per(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.edits.total() as f64 / self.ref_len as f64
        }
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>6} {:>6} {:>6} {:>6} {:>8}", "utts", "S", "I", "D", "N", "PER%")?;
        writeln!(
            f,
            "{:>6} {:>6} {:>6} {:>6} {:>6} {:>8.2}",
            self.utterances,
            self.edits.substitutions,
            self.edits.insertions,
            self.edits.deletions,
            self.ref_len,
            100.0 * self.per()
        )
    }
}

/// Scores hypotheses against references matched by utterance id. Every
/// reference needs a hypothesis and vice versa.
pub fn score(hyps: &[Transcript], refs: &[Transcript]) -> Result<ScoreReport> {
    let by_id: HashMap<&str, &[usize]> = hyps.iter().map(|(id, p)| (id.as_str(), &p[..])).collect();
    if by_id.len() != hyps.len() {
        return Err(Error::invariant("hypotheses", "duplicate utterance id"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::DimensionMismatch {
            what: "hypothesis vs reference utterances",
            expected: refs.len(),
            actual: hyps.len(),
        });
    }
    let mut report = ScoreReport::default();
    for (id, r) in refs {
        let h = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::invariant("hypotheses", format!("no hypothesis for utterance {id}")))?;
        let e = phone_edit_distance(h, r);
        report.edits.substitutions += e.substitutions;
        report.edits.insertions += e.insertions;
        report.edits.deletions += e.deletions;
        report.ref_len += r.len();
        report.utterances += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::Arc;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn single_path_graph() {
        let topo = HmmTopology::uniform(2, 1, 0.5).unwrap();
        let arcs = vec![
            Arc { src: 0, dst: 1, pdf: 0, log_prob: 0.5f64.ln() },
            Arc { src: 1, dst: 2, pdf: 1, log_prob: 0.25f64.ln() },
        ];
        let g = DenominatorGraph::new(3, 2, arcs, vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.8], 0.0).unwrap();
        let ll = LogLikes::new(array![[-1.0, -2.0], [-3.0, -0.5]]).unwrap();
        let r = viterbi(&g, &ll, &topo).unwrap();
        assert_eq!(r.pdfs, vec![0, 1]);
        assert_eq!(r.phones, vec![0, 1]);
        let want = 0.5f64.ln() + 0.25f64.ln() + 0.8f64.ln() - 1.0 - 0.5;
        assert!((r.score - want).abs() < 1e-14);
    }

    #[test]
    fn ties_take_smallest_arc() {
        let topo = HmmTopology::uniform(2, 1, 0.5).unwrap();
        let arcs = vec![
            Arc { src: 0, dst: 1, pdf: 1, log_prob: 0.5f64.ln() },
            Arc { src: 0, dst: 1, pdf: 0, log_prob: 0.5f64.ln() },
        ];
        let g = DenominatorGraph::new(2, 2, arcs, vec![1.0, 0.0], vec![0.0, 1.0], 0.0).unwrap();
        let r = viterbi(&g, &LogLikes::new(array![[0.0, 0.0]]).unwrap(), &topo).unwrap();
        assert_eq!(r.pdfs, vec![1]);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(phone_edit_distance(&[0, 1, 2], &[0, 1, 2]), EditCounts::default());
        let e = phone_edit_distance(&[0, 1], &[0, 1, 2]);
        assert_eq!((e.substitutions, e.insertions, e.deletions), (0, 0, 1));
        let e = phone_edit_distance(&[], &[3, 4, 5]);
        assert_eq!(e.deletions, 3);
        let e = phone_edit_distance(&[1, 2], &[3]);
        assert_eq!((e.substitutions, e.insertions, e.deletions), (1, 1, 0));
    }

    #[test]
    fn score_report() {
        let refs = vec![("a".to_string(), vec![1, 2, 3]), ("b".to_string(), vec![4])];
        let r = score(&refs, &refs).unwrap();
        assert_eq!(r.per(), 0.0);
        let empty = vec![("a".to_string(), vec![]), ("b".to_string(), vec![])];
        let r = score(&empty, &refs).unwrap();
        assert_eq!(r.per(), 1.0);
        assert_eq!(r.edits.deletions, 4);
        assert!(r.to_string().contains("100.00"));
        assert!(score(&refs[..1], &refs).is_err());
    }

    /// Plain recursive minimum over the three edit operations, with the same
    /// tie order, as an independent reference.
    fn reference_counts(h: &[usize], r: &[usize]) -> (usize, EditCounts) {
        if h.is_empty() {
            return (r.len(), EditCounts { deletions: r.len(), ..Default::default() });
        }
        if r.is_empty() {
            return (h.len(), EditCounts { insertions: h.len(), ..Default::default() });
        }
        let (hl, rl) = (h.len() - 1, r.len() - 1);
        let (cs, mut es) = reference_counts(&h[..hl], &r[..rl]);
        let sub_cost = usize::from(h[hl] != r[rl]);
        es.substitutions += sub_cost;
        let (ci, mut ei) = reference_counts(&h[..hl], r);
        ei.insertions += 1;
        let (cd, mut ed) = reference_counts(h, &r[..rl]);
        ed.deletions += 1;
        let best = (cs + sub_cost).min(ci + 1).min(cd + 1);
        if cs + sub_cost == best {
            (best, es)
        } else if ci + 1 == best {
            (best, ei)
        } else {
            (best, ed)
        }
    }

    proptest! {
        #[test]
        fn edit_distance_matches_reference(
            h in proptest::collection::vec(0usize..4, 0..7),
            r in proptest::collection::vec(0usize..4, 0..7),
        ) {
            let (cost, want) = reference_counts(&h, &r);
            let got = phone_edit_distance(&h, &r);
            prop_assert_eq!(got.total(), cost);
            prop_assert_eq!(got, want);
        }
    }
}
