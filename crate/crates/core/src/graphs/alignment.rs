use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graphs::HmmTopology;
use crate::textio::records;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignedFrame {
    pub phone: usize,
    pub state: usize,
    pub pdf: usize,
}

/// Frame-level reference state sequence of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub utt_id: String,
    pub frames: Vec<AlignedFrame>,
}

/// Maximal run of frames sharing one pdf.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PdfSegment {
    pub pdf: usize,
    pub start: usize,
    pub end: usize,
}

impl Alignment {
    pub fn new(utt_id: impl Into<String>, frames: Vec<AlignedFrame>) -> Self {
        Self {
            utt_id: utt_id.into(),
            frames,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn pdfs(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.pdf).collect()
    }

    /// Checks pdf labels and left-to-right state order against `topo`.
    pub fn validate(&self, topo: &HmmTopology) -> Result<()> {
        let what = "alignment";
        if self.frames.is_empty() {
            return Err(Error::invariant(what, format!("{}: no frames", self.utt_id)));
        }
        let last = topo.states_per_phone() - 1;
        let mut prev: Option<AlignedFrame> = None;
        for (t, f) in self.frames.iter().enumerate() {
            if f.phone >= topo.num_phones() || f.state > last || topo.pdf(f.phone, f.state) != f.pdf {
                return Err(Error::invariant(
                    what,
                    format!("{}: frame {t} has inconsistent label {}:{}:{}", self.utt_id, f.phone, f.state, f.pdf),
                ));
            }
            let ok = match prev {
                None => f.state == 0,
                Some(p) if p.phone == f.phone && (f.state == p.state || f.state == p.state + 1) => true,
                Some(p) => p.state == last && f.state == 0,
            };
            if !ok {
                return Err(Error::invariant(
                    what,
                    format!("{}: frame {t} breaks the left-to-right topology", self.utt_id),
                ));
            }
            prev = Some(*f);
        }
        if prev.map(|p| p.state) != Some(last) {
            return Err(Error::invariant(
                what,
                format!("{}: utterance ends inside a phone", self.utt_id),
            ));
        }
        Ok(())
    }

    /// Phone sequence; a phone run restarts when the state index drops.
    pub fn phone_sequence(&self) -> Vec<usize> {
        let mut phones = Vec::new();
        let mut prev: Option<AlignedFrame> = None;
        for f in &self.frames {
            let starts = match prev {
                None => true,
                Some(p) => p.phone != f.phone || f.state < p.state,
            };
            if starts {
                phones.push(f.phone);
            }
            prev = Some(*f);
        }
        phones
    }

    pub fn pdf_segments(&self) -> Vec<PdfSegment> {
        let mut segs: Vec<PdfSegment> = Vec::new();
        for (t, f) in self.frames.iter().enumerate() {
            match segs.last_mut() {
                Some(s) if s.pdf == f.pdf => s.end = t + 1,
                _ => segs.push(PdfSegment {
                    pdf: f.pdf,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        segs
    }

    pub fn to_line(&self) -> String {
        let mut out = self.utt_id.clone();
        for f in &self.frames {
            let _ = write!(out, " {}:{}:{}", f.phone, f.state, f.pdf);
        }
        out
    }
}

pub fn write_alignments(alis: &[Alignment]) -> String {
    let mut out = String::new();
    for a in alis {
        out.push_str(&a.to_line());
        out.push('\n');
    }
    out
}

pub fn read_alignments(text: &str) -> Result<Vec<Alignment>> {
    records(text)
        .map(|(line, fields)| {
            let frames = fields[1..]
                .iter()
                .map(|tok| {
                    let parts: Vec<&str> = tok.split(':').collect();
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::parse(line, format!("bad frame label `{tok}`")))
                    };
                    if parts.len() != 3 {
                        return Err(Error::parse(line, format!("expected phone:state:pdf, found `{tok}`")));
                    }
                    Ok(AlignedFrame {
                        phone: parse(parts[0])?,
                        state: parse(parts[1])?,
                        pdf: parse(parts[2])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if frames.is_empty() {
                return Err(Error::parse(line, "utterance without frames"));
            }
            Ok(Alignment::new(fields[0], frames))
        })
        .collect()
}

#[cfg(test)]
pub(crate) fn ali_from_runs(topo: &HmmTopology, utt: &str, runs: &[(usize, usize, usize)]) -> Alignment {
    let frames = runs
        .iter()
        .flat_map(|&(phone, state, dur)| {
            std::iter::repeat_n(
                AlignedFrame {
                    phone,
                    state,
                    pdf: topo.pdf(phone, state),
                },
                dur,
            )
        })
        .collect();
    Alignment::new(utt, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> HmmTopology {
        HmmTopology::uniform(3, 2, 0.75).unwrap()
    }

    #[test]
    fn repeated_phone_is_two_runs() {
        let a = ali_from_runs(&topo(), "u", &[(1, 0, 2), (1, 1, 1), (1, 0, 1), (1, 1, 2)]);
        a.validate(&topo()).unwrap();
        assert_eq!(a.phone_sequence(), vec![1, 1]);
        assert_eq!(a.pdf_segments().len(), 4);
    }

    #[test]
    fn validation_errors() {
        let t = topo();
        assert!(ali_from_runs(&t, "u", &[(1, 1, 2)]).validate(&t).is_err());
        assert!(ali_from_runs(&t, "u", &[(1, 0, 2)]).validate(&t).is_err());
        assert!(ali_from_runs(&t, "u", &[(1, 0, 1), (2, 0, 1), (2, 1, 1)]).validate(&t).is_err());
        let mut a = ali_from_runs(&t, "u", &[(1, 0, 1), (1, 1, 1)]);
        a.frames[0].pdf = 0;
        assert!(a.validate(&t).is_err());
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let t = topo();
        let alis = vec![
            ali_from_runs(&t, "a", &[(0, 0, 1), (0, 1, 2)]),
            ali_from_runs(&t, "b", &[(2, 0, 3), (2, 1, 1)]),
        ];
        assert_eq!(read_alignments(&write_alignments(&alis)).unwrap(), alis);
        let err = read_alignments("a 0:0:0\nb 0:0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
