//! Bigram phone language model with a uniform floor.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::textio::{expect_arity, field, fmt_f64, records};

const NORM_TOL: f64 = 1e-9;

/// Conditioning context of a bigram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum History {
    Start,
    Phone(usize),
}

/// Predicted symbol of a bigram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Next {
    Phone(usize),
    End,
}

/// Phone bigram. Row `0` is the start history and row `p + 1` is phone `p`;
/// column `p` predicts phone `p` and the last column predicts end of sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneLm {
    vocab_size: usize,
    interpolation_weight: f64,
    rows: Vec<Vec<f64>>,
}

impl PhoneLm {
    pub fn new(vocab_size: usize, interpolation_weight: f64, rows: Vec<Vec<f64>>) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invariant("phone LM", "empty vocabulary"));
        }
        if !(0.0..=1.0).contains(&interpolation_weight) {
            return Err(Error::invariant(
                "phone LM",
                format!("interpolation weight {interpolation_weight} outside [0, 1]"),
            ));
        }
        if rows.len() != vocab_size + 1 {
            return Err(Error::DimensionMismatch {
                what: "phone LM histories",
                expected: vocab_size + 1,
                actual: rows.len(),
            });
        }
        for (h, row) in rows.iter().enumerate() {
            if row.len() != vocab_size + 1 {
                return Err(Error::DimensionMismatch {
                    what: "phone LM row",
                    expected: vocab_size + 1,
                    actual: row.len(),
                });
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invariant("phone LM", format!("row {h} has a negative or non-finite probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > NORM_TOL {
                return Err(Error::invariant(
                    "phone LM",
                    format!("history row {h} unnormalized (sums to {sum})"),
                ));
            }
        }
        Ok(Self {
            vocab_size,
            interpolation_weight,
            rows,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        2
    }

    pub fn interpolation_weight(&self) -> f64 {
        self.interpolation_weight
    }

    fn row_index(&self, h: History) -> usize {
        match h {
            History::Start => 0,
            History::Phone(p) => p + 1,
        }
    }

    fn col_index(&self, n: Next) -> usize {
        match n {
            Next::Phone(p) => p,
            Next::End => self.vocab_size,
        }
    }

    pub fn prob(&self, history: History, next: Next) -> f64 {
        self.rows[self.row_index(history)][self.col_index(next)]
    }

    /// Probability of a complete phone sequence, end symbol included.
    pub fn sequence_prob(&self, phones: &[usize]) -> f64 {
        let mut h = History::Start;
        let mut p = 1.0;
        for &ph in phones {
            p *= self.prob(h, Next::Phone(ph));
            h = History::Phone(ph);
        }
        p * self.prob(h, Next::End)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "LM {} {} {}\n",
            self.vocab_size,
            self.order(),
            fmt_f64(self.interpolation_weight)
        );
        for (r, row) in self.rows.iter().enumerate() {
            let hist = if r == 0 { "START".to_string() } else { (r - 1).to_string() };
            for (c, &p) in row.iter().enumerate() {
                let next = if c == self.vocab_size { "END".to_string() } else { c.to_string() };
                let _ = writeln!(out, "P {hist} {next} {}", fmt_f64(p));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut recs = records(text);
        let (line, header) = recs.next().ok_or_else(|| Error::parse(1, "empty LM file"))?;
        if header[0] != "LM" {
            return Err(Error::parse(line, "expected `LM <vocab> <order> <interp>` header"));
        }
        expect_arity(&header, 4, line)?;
        let vocab: usize = field(&header, 1, line, "vocab")?;
        let order: usize = field(&header, 2, line, "order")?;
        let interp: f64 = field(&header, 3, line, "interp")?;
        if order != 2 {
            return Err(Error::parse(line, format!("unsupported LM order {order} (only 2)")));
        }
        let mut rows = vec![vec![0.0; vocab + 1]; vocab + 1];
        for (line, f) in recs {
            if f[0] != "P" {
                return Err(Error::parse(line, format!("unknown record `{}`", f[0])));
            }
            expect_arity(&f, 4, line)?;
            let r = match f[1] {
                "START" => 0,
                s => {
                    let p: usize = field(&f, 1, line, "hist")?;
                    if p >= vocab {
                        return Err(Error::parse(line, format!("history {s} out of range")));
                    }
                    p + 1
                }
            };
            let c = match f[2] {
                "END" => vocab,
                s => {
                    let p: usize = field(&f, 2, line, "next")?;
                    if p >= vocab {
                        return Err(Error::parse(line, format!("next phone {s} out of range")));
                    }
                    p
                }
            };
            rows[r][c] = field(&f, 3, line, "prob")?;
        }
        Self::new(vocab, interp, rows)
    }
}

/// Maximum-likelihood bigram interpolated with a uniform distribution over
/// all phones plus the end symbol.
pub fn estimate_phone_lm(
    phone_sequences: &[Vec<usize>],
    vocab_size: usize,
    interpolation_weight: f64,
) -> Result<PhoneLm> {
    if phone_sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if vocab_size == 0 {
        return Err(Error::invariant("phone LM", "empty vocabulary"));
    }
    let width = vocab_size + 1;
    let mut counts = vec![vec![0.0f64; width]; width];
    for seq in phone_sequences {
        let mut r = 0;
        for &p in seq {
            if p >= vocab_size {
                return Err(Error::IdOutOfRange { id: p, vocab: vocab_size });
            }
            counts[r][p] += 1.0;
            r = p + 1;
        }
        counts[r][vocab_size] += 1.0;
    }
    let uniform = 1.0 / width as f64;
    let rows = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.into_iter()
                .map(|c| {
                    let ml = if total > 0.0 { c / total } else { uniform };
                    interpolation_weight * ml + (1.0 - interpolation_weight) * uniform
                })
                .collect()
        })
        .collect();
    PhoneLm::new(vocab_size, interpolation_weight, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_continuation_is_certain() {
        let lm = estimate_phone_lm(&[vec![1, 2], vec![1, 2]], 3, 1.0).unwrap();
        assert_eq!(lm.prob(History::Phone(1), Next::Phone(2)), 1.0);
        assert_eq!(lm.prob(History::Phone(2), Next::End), 1.0);
    }

    #[test]
    fn interpolation_matches_counting() {
        // 0.5 * 1/2 + 0.5 * 1/4, cross-checked by a separate counting script.
        let lm = estimate_phone_lm(&[vec![1], vec![2]], 3, 0.5).unwrap();
        assert!((lm.prob(History::Start, Next::Phone(1)) - 0.375).abs() < 1e-15);
        assert!((lm.prob(History::Start, Next::End) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_is_uniform() {
        let lm = estimate_phone_lm(&[vec![0, 1, 1, 2], vec![2]], 3, 0.0).unwrap();
        for r in &lm.rows {
            for &p in r {
                assert_eq!(p, 0.25);
            }
        }
    }

    #[test]
    fn rejects_bad_corpus() {
        assert!(matches!(estimate_phone_lm(&[], 3, 0.5), Err(Error::EmptyCorpus)));
        assert!(matches!(
            estimate_phone_lm(&[vec![0, 3]], 3, 0.5),
            Err(Error::IdOutOfRange { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn text_roundtrip() {
        let lm = estimate_phone_lm(&[vec![0, 1, 2, 0], vec![2, 2]], 3, 0.9).unwrap();
        assert_eq!(PhoneLm::from_text(&lm.to_text()).unwrap(), lm);
    }

    #[test]
    fn unnormalized_file_rejected() {
        let text: String = estimate_phone_lm(&[vec![0]], 1, 0.5)
            .unwrap()
            .to_text()
            .lines()
            .map(|l| if l.starts_with("P START END") { "P START END 0.1\n".to_string() } else { format!("{l}\n") })
            .collect();
        let err = PhoneLm::from_text(&text).unwrap_err();
        assert!(err.to_string().contains("unnormalized"), "{err}");
    }
}
