//! Time-layered numerator acceptor.
//!
//! Layer `t` holds the states reached after consuming `t` frames; the arcs of
//! frame `t` lead from layer `t` to layer `t + 1`. State indices are local to
//! their layer. Arcs are unweighted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graphs::{Alignment, HmmTopology};
use crate::textio::{expect_arity, field, records};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SupArc {
    pub src: usize,
    pub dst: usize,
    pub pdf: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Supervision {
    utt_id: String,
    frames: Vec<Vec<SupArc>>,
    layer_sizes: Vec<usize>,
    initial: Vec<usize>,
    finals: Vec<usize>,
}

impl Supervision {
    pub fn new(utt_id: impl Into<String>, frames: Vec<Vec<SupArc>>, initial: Vec<usize>, finals: Vec<usize>) -> Result<Self> {
        let utt_id = utt_id.into();
        let num_frames = frames.len();
        if num_frames == 0 {
            return Err(Error::invariant("supervision", format!("{utt_id}: zero frames")));
        }
        let mut layer_sizes = vec![0usize; num_frames + 1];
        for &s in &initial {
            layer_sizes[0] = layer_sizes[0].max(s + 1);
        }
        for &s in &finals {
            layer_sizes[num_frames] = layer_sizes[num_frames].max(s + 1);
        }
        for (t, arcs) in frames.iter().enumerate() {
            for a in arcs {
                layer_sizes[t] = layer_sizes[t].max(a.src + 1);
                layer_sizes[t + 1] = layer_sizes[t + 1].max(a.dst + 1);
            }
        }
        let sup = Self {
            utt_id,
            frames,
            layer_sizes,
            initial,
            finals,
        };
        if !sup.has_complete_path() {
            return Err(Error::EmptyLanguage);
        }
        Ok(sup)
    }

    fn has_complete_path(&self) -> bool {
        let mut live = vec![false; self.layer_sizes[0]];
        for &s in &self.initial {
            live[s] = true;
        }
        for (t, arcs) in self.frames.iter().enumerate() {
            let mut next = vec![false; self.layer_sizes[t + 1]];
            for a in arcs {
                if live[a.src] {
                    next[a.dst] = true;
                }
            }
            live = next;
        }
        self.finals.iter().any(|&s| live[s])
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Arcs consuming frame `t` (0-based).
    pub fn arcs(&self, t: usize) -> &[SupArc] {
        &self.frames[t]
    }

    pub fn layer_size(&self, t: usize) -> usize {
        self.layer_sizes[t]
    }

    pub fn initial(&self) -> &[usize] {
        &self.initial
    }

    pub fn finals(&self) -> &[usize] {
        &self.finals
    }

    pub fn max_pdf(&self) -> Option<usize> {
        self.frames.iter().flatten().map(|a| a.pdf).max()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("SUP {} {}\n", self.utt_id, self.num_frames());
        for s in &self.initial {
            let _ = writeln!(out, "I {s}");
        }
        for (t, arcs) in self.frames.iter().enumerate() {
            let _ = writeln!(out, "T {t}");
            for a in arcs {
                let _ = writeln!(out, "A {} {} {}", a.src, a.dst, a.pdf);
            }
        }
        for s in &self.finals {
            let _ = writeln!(out, "F {s}");
        }
        out
    }
}

/// Parses one or more concatenated `SUP` blocks.
pub fn read_supervisions(text: &str) -> Result<Vec<Supervision>> {
    struct Pending {
        line: usize,
        utt: String,
        frames: Vec<Vec<SupArc>>,
        current: Option<usize>,
        initial: Vec<usize>,
        finals: Vec<usize>,
    }
    let finish = |p: Pending| -> Result<Supervision> {
        Supervision::new(p.utt, p.frames, p.initial, p.finals).map_err(|e| Error::parse(p.line, e.to_string()))
    };
    let mut out = Vec::new();
    let mut cur: Option<Pending> = None;
    for (line, f) in records(text) {
        if f[0] == "SUP" {
            expect_arity(&f, 3, line)?;
            if let Some(p) = cur.take() {
                out.push(finish(p)?);
            }
            let t: usize = field(&f, 2, line, "T")?;
            cur = Some(Pending {
                line,
                utt: f[1].to_string(),
                frames: vec![Vec::new(); t],
                current: None,
                initial: Vec::new(),
                finals: Vec::new(),
            });
            continue;
        }
        let p = cur
            .as_mut()
            .ok_or_else(|| Error::parse(line, "record before `SUP` header"))?;
        match f[0] {
            "I" | "F" => {
                expect_arity(&f, 2, line)?;
                let s: usize = field(&f, 1, line, "state")?;
                if f[0] == "I" {
                    p.initial.push(s);
                } else {
                    p.finals.push(s);
                }
            }
            "T" => {
                expect_arity(&f, 2, line)?;
                let t: usize = field(&f, 1, line, "t")?;
                if t >= p.frames.len() {
                    return Err(Error::parse(line, format!("frame {t} out of range")));
                }
                p.current = Some(t);
            }
            "A" => {
                expect_arity(&f, 4, line)?;
                let t = p
                    .current
                    .ok_or_else(|| Error::parse(line, "arc outside a `T <t>` block"))?;
                p.frames[t].push(SupArc {
                    src: field(&f, 1, line, "src")?,
                    dst: field(&f, 2, line, "dst")?,
                    pdf: field(&f, 3, line, "pdf")?,
                });
            }
            other => return Err(Error::parse(line, format!("unknown record `{other}`"))),
        }
    }
    if let Some(p) = cur {
        out.push(finish(p)?);
    }
    Ok(out)
}

pub fn write_supervisions(sups: &[Supervision]) -> String {
    sups.iter().map(Supervision::to_text).collect()
}

/// Supervision accepting every pdf sequence obtained by moving each boundary
/// between consecutive pdf runs of the alignment by at most `tolerance`
/// frames, keeping every run at least one frame long and the runs in order.
/// With `tolerance == 0` only the aligned pdf sequence is accepted.
pub fn build_numerator_graph(ali: &Alignment, tolerance: usize, topo: &HmmTopology) -> Result<Supervision> {
    ali.validate(topo)?;
    let num_frames = ali.num_frames();
    let segs = ali.pdf_segments();
    let k_max = segs.len();
    // window[k]: admissible start frames of run k (k >= 1)
    let window: Vec<(usize, usize)> = segs
        .iter()
        .map(|s| {
            let lo = s.start.saturating_sub(tolerance).max(1);
            let hi = (s.start + tolerance).min(num_frames - 1);
            (lo, hi)
        })
        .collect();

    // Forward: live[t][k] = frame t-1 may belong to run k. Layer 0 has a
    // single virtual state.
    let mut live = vec![vec![false; k_max]; num_frames + 1];
    let mut raw: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_frames];
    raw[0].push((0, 0));
    live[1][0] = true;
    for t in 1..num_frames {
        for k in 0..k_max {
            if !live[t][k] {
                continue;
            }
            let can_stay = k + 1 == k_max || window[k + 1].1 > t;
            if can_stay {
                raw[t].push((k, k));
                live[t + 1][k] = true;
            }
            if k + 1 < k_max && (window[k + 1].0..=window[k + 1].1).contains(&t) {
                raw[t].push((k, k + 1));
                live[t + 1][k + 1] = true;
            }
        }
    }
    if !live[num_frames][k_max - 1] {
        return Err(Error::invariant(
            "alignment",
            format!("{}: no segmentation fits {num_frames} frames", ali.utt_id),
        ));
    }

    // Backward trim to states that reach the final run at the last frame.
    let mut coacc = vec![vec![false; k_max]; num_frames + 1];
    coacc[num_frames][k_max - 1] = true;
    for t in (1..num_frames).rev() {
        for &(k, k2) in &raw[t] {
            if coacc[t + 1][k2] {
                coacc[t][k] = true;
            }
        }
    }
    let index: Vec<Vec<usize>> = coacc
        .iter()
        .map(|layer| {
            let mut next = 0;
            layer
                .iter()
                .map(|&ok| {
                    let i = next;
                    if ok {
                        next += 1;
                    }
                    i
                })
                .collect()
        })
        .collect();
    let frames = raw
        .iter()
        .enumerate()
        .map(|(t, arcs)| {
            arcs.iter()
                .filter(|&&(k, k2)| (t == 0 || coacc[t][k]) && coacc[t + 1][k2])
                .map(|&(k, k2)| SupArc {
                    src: if t == 0 { 0 } else { index[t][k] },
                    dst: index[t + 1][k2],
                    pdf: segs[k2].pdf,
                })
                .collect()
        })
        .collect();
    Supervision::new(ali.utt_id.clone(), frames, vec![0], vec![0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::alignment::ali_from_runs;
    use std::collections::BTreeSet;

    /// Every accepted pdf string, by depth-first search.
    fn language(sup: &Supervision) -> BTreeSet<Vec<usize>> {
        fn go(sup: &Supervision, t: usize, s: usize, prefix: &mut Vec<usize>, out: &mut BTreeSet<Vec<usize>>) {
            if t == sup.num_frames() {
                if sup.finals().contains(&s) {
                    out.insert(prefix.clone());
                }
                return;
            }
            for a in sup.arcs(t).iter().filter(|a| a.src == s) {
                prefix.push(a.pdf);
                go(sup, t + 1, a.dst, prefix, out);
                prefix.pop();
            }
        }
        let mut out = BTreeSet::new();
        for &s in sup.initial() {
            go(sup, 0, s, &mut Vec::new(), &mut out);
        }
        out
    }

    #[test]
    fn zero_tolerance_is_single_path() {
        let topo = HmmTopology::uniform(2, 2, 0.5).unwrap();
        let ali = ali_from_runs(&topo, "u", &[(1, 0, 2), (1, 1, 1)]);
        let sup = build_numerator_graph(&ali, 0, &topo).unwrap();
        let lang = language(&sup);
        assert_eq!(lang.len(), 1);
        assert_eq!(lang.into_iter().next().unwrap(), ali.pdfs());
        for t in 0..sup.num_frames() {
            assert_eq!(sup.arcs(t).len(), 1);
        }
    }

    #[test]
    fn tolerance_one_moves_single_boundary() {
        let topo = HmmTopology::uniform(2, 1, 0.5).unwrap();
        let ali = ali_from_runs(&topo, "u", &[(0, 0, 5), (1, 0, 5)]);
        let sup = build_numerator_graph(&ali, 1, &topo).unwrap();
        let lang = language(&sup);
        assert_eq!(lang.len(), 3);
        let boundaries: BTreeSet<usize> = lang.iter().map(|s| s.iter().position(|&p| p == 1).unwrap()).collect();
        assert_eq!(boundaries, [4, 5, 6].into_iter().collect());
    }

    #[test]
    fn two_state_counts_match_enumeration() {
        // Counts from an independent brute-force enumeration of boundary vectors.
        let topo = HmmTopology::uniform(2, 2, 0.5).unwrap();
        let ali = ali_from_runs(&topo, "u", &[(0, 0, 3), (0, 1, 3), (1, 0, 3), (1, 1, 3)]);
        let counts: Vec<usize> = (0..3)
            .map(|tau| language(&build_numerator_graph(&ali, tau, &topo).unwrap()).len())
            .collect();
        assert_eq!(counts, vec![1, 27, 95]);
    }

    #[test]
    fn huge_tolerance_clamps() {
        let topo = HmmTopology::uniform(3, 2, 0.5).unwrap();
        let ali = ali_from_runs(&topo, "u", &[(0, 0, 1), (0, 1, 1), (2, 0, 1), (2, 1, 2)]);
        let sup = build_numerator_graph(&ali, 100, &topo).unwrap();
        // four runs in five frames: choose 3 boundaries among 4 interior slots
        assert_eq!(language(&sup).len(), 4);
    }

    #[test]
    fn invalid_alignment_rejected() {
        let topo = HmmTopology::uniform(3, 2, 0.5).unwrap();
        let ali = ali_from_runs(&topo, "u", &[(0, 0, 3)]);
        assert!(build_numerator_graph(&ali, 0, &topo).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let topo = HmmTopology::uniform(2, 2, 0.5).unwrap();
        let sups: Vec<Supervision> = [0, 2]
            .iter()
            .map(|&tau| {
                let ali = ali_from_runs(&topo, &format!("u{tau}"), &[(0, 0, 2), (0, 1, 2), (1, 0, 3), (1, 1, 1)]);
                build_numerator_graph(&ali, tau, &topo).unwrap()
            })
            .collect();
        assert_eq!(read_supervisions(&write_supervisions(&sups)).unwrap(), sups);
    }

    #[test]
    fn file_without_complete_path_rejected() {
        let err = read_supervisions("SUP u 2\nI 0\nT 0\nA 0 0 1\nT 1\nA 1 0 1\nF 0\n").unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn language_grows_with_tolerance(durs in proptest::collection::vec(1usize..4, 2..6), tau in 0usize..3) {
            let topo = HmmTopology::uniform(3, 1, 0.5).unwrap();
            let runs: Vec<(usize, usize, usize)> = durs.iter().enumerate().map(|(i, &d)| (i % 3, 0, d)).collect();
            let ali = ali_from_runs(&topo, "p", &runs);
            let small = language(&build_numerator_graph(&ali, tau, &topo).unwrap());
            let big = language(&build_numerator_graph(&ali, tau + 1, &topo).unwrap());
            proptest::prop_assert!(small.is_subset(&big));
            proptest::prop_assert!(small.contains(&ali.pdfs()));
        }
    }
}
