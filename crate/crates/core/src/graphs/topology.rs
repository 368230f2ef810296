use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::textio::{expect_arity, field, fmt_f64, records};

/// Left-to-right HMM shared by every phone. State `q` of phone `p` emits
/// pdf `p * states_per_phone + q`.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmTopology {
    num_phones: usize,
    /// `(self_loop, forward)` per state.
    transitions: Vec<(f64, f64)>,
}

impl HmmTopology {
    pub fn new(num_phones: usize, transitions: Vec<(f64, f64)>) -> Result<Self> {
        if num_phones == 0 || transitions.is_empty() {
            return Err(Error::invariant("topology", "needs at least one phone and one state"));
        }
        for (q, &(s, f)) in transitions.iter().enumerate() {
            if !(0.0..1.0).contains(&s) || !(f > 0.0 && f <= 1.0) || ((s + f) - 1.0).abs() > 1e-9 {
                return Err(Error::invariant(
                    "topology",
                    format!("state {q} transitions ({s}, {f}) must be a distribution with forward > 0"),
                ));
            }
        }
        Ok(Self { num_phones, transitions })
    }

    /// Same self-loop probability on every state.
    pub fn uniform(num_phones: usize, states_per_phone: usize, self_loop: f64) -> Result<Self> {
        Self::new(num_phones, vec![(self_loop, 1.0 - self_loop); states_per_phone])
    }

    pub fn num_phones(&self) -> usize {
        self.num_phones
    }

    pub fn states_per_phone(&self) -> usize {
        self.transitions.len()
    }

    pub fn num_pdfs(&self) -> usize {
        self.num_phones * self.transitions.len()
    }

    pub fn self_loop(&self, state: usize) -> f64 {
        self.transitions[state].0
    }

    pub fn forward(&self, state: usize) -> f64 {
        self.transitions[state].1
    }

    pub fn pdf(&self, phone: usize, state: usize) -> usize {
        phone * self.states_per_phone() + state
    }

    /// `(phone, state)` of a pdf.
    pub fn pdf_info(&self, pdf: usize) -> (usize, usize) {
        (pdf / self.states_per_phone(), pdf % self.states_per_phone())
    }

    /// Collapses a frame-level pdf path into phones. A phone starts at frame 0
    /// and wherever the pdf changes into a phone-initial state or a new phone.
    /// With a one-state topology, immediate repeats of a phone merge.
    pub fn phones_of_pdf_path(&self, pdfs: &[usize]) -> Vec<usize> {
        let mut phones = Vec::new();
        let mut prev: Option<usize> = None;
        for &pdf in pdfs {
            let (phone, state) = self.pdf_info(pdf);
            let starts = match prev {
                None => true,
                Some(pp) => pp != pdf && (state == 0 || self.pdf_info(pp).0 != phone),
            };
            if starts {
                phones.push(phone);
            }
            prev = Some(pdf);
        }
        phones
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("TOPO {} {}\n", self.num_phones, self.states_per_phone());
        for (q, &(s, f)) in self.transitions.iter().enumerate() {
            let _ = writeln!(out, "S {q} {} {}", fmt_f64(s), fmt_f64(f));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut recs = records(text);
        let (line, header) = recs.next().ok_or_else(|| Error::parse(1, "empty topology file"))?;
        if header[0] != "TOPO" {
            return Err(Error::parse(line, "expected `TOPO <phones> <states>` header"));
        }
        expect_arity(&header, 3, line)?;
        let phones: usize = field(&header, 1, line, "phones")?;
        let states: usize = field(&header, 2, line, "states")?;
        let mut transitions = vec![None; states];
        for (line, f) in recs {
            if f[0] != "S" {
                return Err(Error::parse(line, format!("unknown record `{}`", f[0])));
            }
            expect_arity(&f, 4, line)?;
            let q: usize = field(&f, 1, line, "state")?;
            if q >= states {
                return Err(Error::parse(line, format!("state {q} out of range")));
            }
            transitions[q] = Some((field(&f, 2, line, "self")?, field(&f, 3, line, "forward")?));
        }
        let transitions = transitions
            .into_iter()
            .enumerate()
            .map(|(q, t)| t.ok_or_else(|| Error::parse(0, format!("missing transitions for state {q}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(phones, transitions)
    }
}
