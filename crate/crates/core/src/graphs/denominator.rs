//! Cyclic denominator acceptor over HMM states.
//!
//! A state is "currently occupying HMM state `q` of phone `p`". Every arc
//! consumes exactly one frame and carries the pdf of its destination state.
//! `initial` gives the occupancy before the first frame and `finals` the
//! probability of stopping after the last one, so the weights of all complete
//! paths of all lengths sum to one for graphs built from a proper LM.
//!
//! The leaky coefficient is stored with the graph but never materialised as
//! arcs; the recursions apply it.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graphs::lm::{History, Next, PhoneLm};
use crate::graphs::HmmTopology;
use crate::textio::{expect_arity, field, fmt_f64, records};

const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    pub pdf: usize,
    pub log_prob: f64,
}

#[derive(Clone, Debug)]
pub struct DenominatorGraph {
    num_states: usize,
    num_pdfs: usize,
    arcs: Vec<Arc>,
    probs: Vec<f64>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    initial: Vec<f64>,
    finals: Vec<f64>,
    leaky_coeff: f64,
}

impl PartialEq for DenominatorGraph {
    fn eq(&self, other: &Self) -> bool {
        self.num_states == other.num_states
            && self.num_pdfs == other.num_pdfs
            && self.arcs == other.arcs
            && self.initial == other.initial
            && self.finals == other.finals
            && self.leaky_coeff == other.leaky_coeff
    }
}

impl DenominatorGraph {
    pub fn new(
        num_states: usize,
        num_pdfs: usize,
        arcs: Vec<Arc>,
        initial: Vec<f64>,
        finals: Vec<f64>,
        leaky_coeff: f64,
    ) -> Result<Self> {
        let what = "denominator graph";
        if num_states == 0 || num_pdfs == 0 {
            return Err(Error::invariant(what, "needs at least one state and one pdf"));
        }
        if initial.len() != num_states {
            return Err(Error::DimensionMismatch {
                what: "initial probabilities",
                expected: num_states,
                actual: initial.len(),
            });
        }
        if finals.len() != num_states {
            return Err(Error::DimensionMismatch {
                what: "final probabilities",
                expected: num_states,
                actual: finals.len(),
            });
        }
        if !(leaky_coeff >= 0.0 && leaky_coeff.is_finite()) {
            return Err(Error::invariant(what, format!("leaky coefficient {leaky_coeff} must be >= 0")));
        }
        if initial.iter().chain(&finals).any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invariant(what, "negative or non-finite initial/final probability"));
        }
        let total: f64 = initial.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::invariant(
                what,
                format!("initial probabilities unnormalized (sum {total})"),
            ));
        }
        if arcs.is_empty() {
            return Err(Error::invariant(what, "no arcs, so no path to a final state"));
        }
        let mut incoming = vec![Vec::new(); num_states];
        let mut outgoing = vec![Vec::new(); num_states];
        for (i, a) in arcs.iter().enumerate() {
            if a.src >= num_states || a.dst >= num_states || a.pdf >= num_pdfs || !a.log_prob.is_finite() {
                return Err(Error::invariant(what, format!("arc {i} {a:?} out of range or non-finite")));
            }
            incoming[a.dst].push(i);
            outgoing[a.src].push(i);
        }
        let probs = arcs.iter().map(|a| a.log_prob.exp()).collect();
        let g = Self {
            num_states,
            num_pdfs,
            arcs,
            probs,
            incoming,
            outgoing,
            initial,
            finals,
            leaky_coeff,
        };
        let (acc, coacc) = g.connectivity();
        if let Some(s) = acc.iter().position(|x| !x) {
            return Err(Error::invariant(what, format!("state {s} unreachable from the initial states")));
        }
        if let Some(s) = coacc.iter().position(|x| !x) {
            return Err(Error::invariant(what, format!("state {s} has no path to a final state")));
        }
        Ok(g)
    }

    /// Accessible and co-accessible flags per state.
    fn connectivity(&self) -> (Vec<bool>, Vec<bool>) {
        let bfs = |seeds: Vec<usize>, next: &dyn Fn(usize) -> Vec<usize>| {
            let mut seen = vec![false; self.num_states];
            let mut queue: VecDeque<usize> = seeds.into_iter().collect();
            for &s in &queue {
                seen[s] = true;
            }
            while let Some(s) = queue.pop_front() {
                for n in next(s) {
                    if !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
            seen
        };
        let init = (0..self.num_states).filter(|&s| self.initial[s] > 0.0).collect();
        let fin = (0..self.num_states).filter(|&s| self.finals[s] > 0.0).collect();
        let acc = bfs(init, &|s| self.outgoing[s].iter().map(|&a| self.arcs[a].dst).collect());
        let coacc = bfs(fin, &|s| self.incoming[s].iter().map(|&a| self.arcs[a].src).collect());
        (acc, coacc)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_pdfs(&self) -> usize {
        self.num_pdfs
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    /// `exp(log_prob)` per arc.
    pub fn arc_probs(&self) -> &[f64] {
        &self.probs
    }

    /// Indices of arcs entering `state`.
    pub fn incoming(&self, state: usize) -> &[usize] {
        &self.incoming[state]
    }

    /// Indices of arcs leaving `state`.
    pub fn outgoing(&self, state: usize) -> &[usize] {
        &self.outgoing[state]
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn finals(&self) -> &[f64] {
        &self.finals
    }

    pub fn leaky_coeff(&self) -> f64 {
        self.leaky_coeff
    }

    /// Same structure with a different leaky coefficient.
    pub fn with_leaky_coeff(mut self, leaky_coeff: f64) -> Result<Self> {
        if !(leaky_coeff >= 0.0 && leaky_coeff.is_finite()) {
            return Err(Error::invariant("denominator graph", format!("leaky coefficient {leaky_coeff} must be >= 0")));
        }
        self.leaky_coeff = leaky_coeff;
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("DEN {} {} {}\n", self.num_states, self.num_pdfs, fmt_f64(self.leaky_coeff));
        for (s, &p) in self.initial.iter().enumerate().filter(|(_, p)| **p > 0.0) {
            let _ = writeln!(out, "I {s} {}", fmt_f64(p));
        }
        for a in &self.arcs {
            let _ = writeln!(out, "A {} {} {} {}", a.src, a.dst, a.pdf, fmt_f64(a.log_prob));
        }
        for (s, &p) in self.finals.iter().enumerate().filter(|(_, p)| **p > 0.0) {
            let _ = writeln!(out, "F {s} {}", fmt_f64(p));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut recs = records(text);
        let (line, header) = recs.next().ok_or_else(|| Error::parse(1, "empty graph file"))?;
        if header[0] != "DEN" {
            return Err(Error::parse(line, "expected `DEN <S> <J> <lambda>` header"));
        }
        expect_arity(&header, 4, line)?;
        let num_states: usize = field(&header, 1, line, "S")?;
        let num_pdfs: usize = field(&header, 2, line, "J")?;
        let leaky: f64 = field(&header, 3, line, "lambda")?;
        let mut initial = vec![0.0; num_states];
        let mut finals = vec![0.0; num_states];
        let mut arcs = Vec::new();
        let state = |f: &[&str], idx: usize, line: usize| -> Result<usize> {
            let s: usize = field(f, idx, line, "state")?;
            if s >= num_states {
                return Err(Error::parse(line, format!("state {s} out of range (S = {num_states})")));
            }
            Ok(s)
        };
        for (line, f) in recs {
            match f[0] {
                "I" | "F" => {
                    expect_arity(&f, 3, line)?;
                    let s = state(&f, 1, line)?;
                    let p: f64 = field(&f, 2, line, "prob")?;
                    if f[0] == "I" {
                        initial[s] = p;
                    } else {
                        finals[s] = p;
                    }
                }
                "A" => {
                    expect_arity(&f, 5, line)?;
                    let pdf: usize = field(&f, 3, line, "pdf")?;
                    if pdf >= num_pdfs {
                        return Err(Error::parse(line, format!("pdf {pdf} out of range (J = {num_pdfs})")));
                    }
                    let log_prob: f64 = field(&f, 4, line, "logprob")?;
                    if !log_prob.is_finite() {
                        return Err(Error::parse(line, "non-finite arc log-probability"));
                    }
                    arcs.push(Arc {
                        src: state(&f, 1, line)?,
                        dst: state(&f, 2, line)?,
                        pdf,
                        log_prob,
                    });
                }
                other => return Err(Error::parse(line, format!("unknown record `{other}`"))),
            }
        }
        Self::new(num_states, num_pdfs, arcs, initial, finals, leaky)
    }
}

/// Expands the phone bigram through the HMM topology. Phone-final states
/// connect to every phone-initial state with `forward * P(next | cur)`; the
/// end-of-sequence mass becomes the final weight and the start row, renormalised
/// without its end entry, becomes the initial distribution. Zero-probability
/// arcs are dropped and states that end up disconnected are trimmed.
pub fn build_denominator_graph(lm: &PhoneLm, topo: &HmmTopology, leaky_coeff: f64) -> Result<DenominatorGraph> {
    if lm.vocab_size() != topo.num_phones() {
        return Err(Error::DimensionMismatch {
            what: "phone vocabulary (LM vs topology)",
            expected: topo.num_phones(),
            actual: lm.vocab_size(),
        });
    }
    let phones = topo.num_phones();
    let n = topo.states_per_phone();
    let last = n - 1;
    let num_states = topo.num_pdfs();
    let mut arcs = Vec::new();
    let mut push = |src: usize, dst: usize, p: f64| {
        if p > 0.0 {
            arcs.push(Arc {
                src,
                dst,
                pdf: dst,
                log_prob: p.ln(),
            });
        }
    };
    for p in 0..phones {
        for q in 0..n {
            let s = topo.pdf(p, q);
            push(s, s, topo.self_loop(q));
            if q < last {
                push(s, topo.pdf(p, q + 1), topo.forward(q));
            } else {
                for next in 0..phones {
                    push(s, topo.pdf(next, 0), topo.forward(q) * lm.prob(History::Phone(p), Next::Phone(next)));
                }
            }
        }
    }
    let start_mass = 1.0 - lm.prob(History::Start, Next::End);
    if start_mass <= 0.0 {
        return Err(Error::invariant("phone LM", "start history puts all mass on end of sequence"));
    }
    let mut initial = vec![0.0; num_states];
    let mut finals = vec![0.0; num_states];
    for p in 0..phones {
        initial[topo.pdf(p, 0)] = lm.prob(History::Start, Next::Phone(p)) / start_mass;
        finals[topo.pdf(p, last)] = topo.forward(last) * lm.prob(History::Phone(p), Next::End);
    }
    trimmed(num_states, topo.num_pdfs(), arcs, initial, finals, leaky_coeff)
}

fn trimmed(
    num_states: usize,
    num_pdfs: usize,
    arcs: Vec<Arc>,
    initial: Vec<f64>,
    finals: Vec<f64>,
    leaky_coeff: f64,
) -> Result<DenominatorGraph> {
    let mut out = vec![Vec::new(); num_states];
    let mut inc = vec![Vec::new(); num_states];
    for a in &arcs {
        out[a.src].push(a.dst);
        inc[a.dst].push(a.src);
    }
    let reach = |seeds: Vec<usize>, adj: &Vec<Vec<usize>>| {
        let mut seen = vec![false; num_states];
        let mut stack = seeds;
        while let Some(s) = stack.pop() {
            if !std::mem::replace(&mut seen[s], true) {
                stack.extend(adj[s].iter().copied());
            }
        }
        seen
    };
    let acc = reach((0..num_states).filter(|&s| initial[s] > 0.0).collect(), &out);
    let coacc = reach((0..num_states).filter(|&s| finals[s] > 0.0).collect(), &inc);
    let keep: Vec<bool> = acc.iter().zip(&coacc).map(|(a, c)| *a && *c).collect();
    let mut remap = vec![usize::MAX; num_states];
    let mut kept = 0;
    for s in 0..num_states {
        if keep[s] {
            remap[s] = kept;
            kept += 1;
        }
    }
    let arcs = arcs
        .into_iter()
        .filter(|a| keep[a.src] && keep[a.dst])
        .map(|a| Arc {
            src: remap[a.src],
            dst: remap[a.dst],
            ..a
        })
        .collect();
    let pick = |v: Vec<f64>| v.into_iter().enumerate().filter(|(s, _)| keep[*s]).map(|(_, p)| p).collect::<Vec<_>>();
    let mut initial = pick(initial);
    let total: f64 = initial.iter().sum();
    if total > 0.0 {
        initial.iter_mut().for_each(|p| *p /= total);
    }
    DenominatorGraph::new(kept, num_pdfs, arcs, initial, pick(finals), leaky_coeff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::lm::estimate_phone_lm;

    fn two_phone_lm() -> PhoneLm {
        estimate_phone_lm(&[vec![0, 1], vec![1, 1, 0], vec![1]], 2, 0.8).unwrap()
    }

    #[test]
    fn one_phone_one_state_expansion() {
        let lm = estimate_phone_lm(&[vec![0, 0], vec![0]], 1, 0.5).unwrap();
        let topo = HmmTopology::uniform(1, 1, 0.5).unwrap();
        let g = build_denominator_graph(&lm, &topo, 0.0).unwrap();
        let stay = lm.prob(History::Phone(0), Next::Phone(0));
        let end = lm.prob(History::Phone(0), Next::End);
        assert_eq!(g.num_states(), 1);
        let mut probs: Vec<f64> = g.arc_probs().to_vec();
        probs.sort_by(f64::total_cmp);
        let mut expect = vec![0.5, 0.5 * stay];
        expect.sort_by(f64::total_cmp);
        for (a, b) in probs.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((g.finals()[0] - 0.5 * end).abs() < 1e-15);
        assert_eq!(g.initial(), &[1.0]);
    }

    #[test]
    fn two_phone_two_state_shape() {
        let topo = HmmTopology::uniform(2, 2, 0.6).unwrap();
        let g = build_denominator_graph(&two_phone_lm(), &topo, 0.1).unwrap();
        assert_eq!(g.num_states(), 4);
        // 4 self loops, 2 intra-phone, 2x2 cross-phone
        assert_eq!(g.arcs().len(), 10);
        for (s, out) in (0..4).map(|s| (s, g.outgoing(s))) {
            let total: f64 = out.iter().map(|&a| g.arc_probs()[a]).sum::<f64>() + g.finals()[s];
            assert!((total - 1.0).abs() < 1e-12, "state {s} mass {total}");
        }
        for a in g.arcs() {
            assert_eq!(a.pdf, a.dst);
        }
    }

    #[test]
    fn leak_does_not_change_structure() {
        let topo = HmmTopology::uniform(2, 2, 0.6).unwrap();
        let g0 = build_denominator_graph(&two_phone_lm(), &topo, 0.0).unwrap();
        let g1 = build_denominator_graph(&two_phone_lm(), &topo, 0.1).unwrap();
        assert_eq!(g0.arcs(), g1.arcs());
        assert_eq!(g0.initial(), g1.initial());
        assert_eq!(g0.finals(), g1.finals());
        assert_eq!(g1.leaky_coeff(), 0.1);
    }

    #[test]
    fn unseen_phones_are_trimmed() {
        let lm = estimate_phone_lm(&[vec![1, 2], vec![1, 2]], 3, 1.0).unwrap();
        let topo = HmmTopology::uniform(3, 2, 0.5).unwrap();
        let g = build_denominator_graph(&lm, &topo, 0.0).unwrap();
        assert_eq!(g.num_states(), 4);
        assert_eq!(g.num_pdfs(), 6);
    }

    #[test]
    fn vocabulary_mismatch() {
        let topo = HmmTopology::uniform(3, 2, 0.5).unwrap();
        assert!(matches!(
            build_denominator_graph(&two_phone_lm(), &topo, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn text_roundtrip() {
        let topo = HmmTopology::uniform(2, 2, 0.6).unwrap();
        let g = build_denominator_graph(&two_phone_lm(), &topo, 0.1).unwrap();
        assert_eq!(DenominatorGraph::from_text(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn rejects_unnormalized_initial() {
        let text = "DEN 2 1 0\nI 0 0.9\nA 0 1 0 -0.5\nA 1 1 0 -0.5\nF 1 1\n";
        let err = DenominatorGraph::from_text(text).unwrap_err();
        assert!(err.to_string().contains("initial probabilities unnormalized"), "{err}");
    }

    #[test]
    fn rejects_empty_arc_section() {
        let err = DenominatorGraph::from_text("DEN 2 1 0\nI 0 1\nF 1 1\n").unwrap_err();
        assert!(err.to_string().contains("no path to a final state"), "{err}");
    }

    #[test]
    fn rejects_dead_end_state() {
        let text = "DEN 3 1 0\nI 0 1\nA 0 1 0 0\nA 0 2 0 0\nF 1 1\n";
        let err = DenominatorGraph::from_text(text).unwrap_err();
        assert!(err.to_string().contains("state 2 has no path"), "{err}");
    }

    #[test]
    fn parse_error_has_line_number() {
        let err = DenominatorGraph::from_text("DEN 1 1 0\nI 0 1\nA 0 0 x 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
