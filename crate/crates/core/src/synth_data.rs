//! Synthetic phone-recognition corpus: a random phone bigram drives phone
//! sequences, a left-to-right HMM draws state durations, and each pdf emits
//! from a spherical Gaussian.
//!
//! On disk a split is a directory holding `feats/<utt>.mat`, `ali.txt`,
//! `text.txt` and `topo.txt`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::graphs::{read_alignments, write_alignments, AlignedFrame, Alignment, History, HmmTopology, Next, PhoneLm};
use crate::textio::{read_matrix, records, write_matrix};

const MAX_MEAN_DRAWS: usize = 10_000;
const MAX_UTT_DRAWS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeSpec {
    /// Including silence, which is phone 0.
    pub num_phones: usize,
    pub states_per_phone: usize,
    pub self_loop: f64,
    pub feat_dim: usize,
    pub sigma: f64,
    /// Means are uniform in `[-mean_range, mean_range]` per coordinate.
    pub mean_range: f64,
    /// Every pair of means differs by at least this much in some coordinate.
    pub min_separation: f64,
    /// Probability of ending after any phone.
    pub end_prob: f64,
    /// Concentration of the symmetric Dirichlet the bigram rows are drawn from.
    pub bigram_concentration: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for GenerativeSpec {
    fn default() -> Self {
        Self {
            num_phones: 6,
            states_per_phone: 2,
            self_loop: 0.75,
            feat_dim: 10,
            sigma: 1.0,
            mean_range: 2.5,
            min_separation: 2.0,
            end_prob: 0.2,
            bigram_concentration: 0.5,
            min_frames: 20,
            max_frames: 60,
            seed: 1,
        }
    }
}

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_phones == 0 || self.states_per_phone == 0 || self.feat_dim == 0 {
            return bad("phones, states per phone and feature dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return bad(format!("self-loop probability {} outside [0, 1)", self.self_loop));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be >= 0", self.sigma));
        }
        if !(self.end_prob > 0.0 && self.end_prob < 1.0) {
            return bad(format!("end probability {} outside (0, 1)", self.end_prob));
        }
        if !(self.bigram_concentration > 0.0) {
            return bad("bigram concentration must be positive".into());
        }
        if self.min_frames > self.max_frames || self.max_frames < self.states_per_phone {
            return bad(format!(
                "frame range [{}, {}] admits no utterance of at least {} frames",
                self.min_frames, self.max_frames, self.states_per_phone
            ));
        }
        if self.min_separation > 2.0 * self.mean_range {
            return bad("mean separation exceeds the mean range".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T x D`.
    pub features: Array2<f64>,
    pub alignment: Alignment,
    pub phones: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub topology: HmmTopology,
    pub utterances: Vec<Utterance>,
}

/// The sampled generative parameters.
#[derive(Clone, Debug)]
pub struct GenerativeModel {
    pub spec: GenerativeSpec,
    pub topology: HmmTopology,
    /// The true bigram; the end probability is the same for every phone and
    /// zero from the start history.
    pub bigram: PhoneLm,
    /// `num_pdfs x D`.
    pub means: Array2<f64>,
}

impl GenerativeModel {
    pub fn new(spec: &GenerativeSpec) -> Result<Self> {
        spec.validate()?;
        let topology = HmmTopology::uniform(spec.num_phones, spec.states_per_phone, spec.self_loop)?;
        let mut rng = spec.rng(0);
        let v = spec.num_phones;
        let gamma = Gamma::new(spec.bigram_concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;
        let rows = (0..=v)
            .map(|h| {
                let draws: Vec<f64> = (0..v).map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
                let total: f64 = draws.iter().sum();
                let keep = if h == 0 { 1.0 } else { 1.0 - spec.end_prob };
                let mut row: Vec<f64> = draws.iter().map(|d| keep * d / total).collect();
                row.push(1.0 - keep);
                row
            })
            .collect();
        let bigram = PhoneLm::new(v, 1.0, rows)?;

        let num_pdfs = topology.num_pdfs();
        let half = spec.mean_range;
        let sep = spec.min_separation;
        let mut means = Array2::<f64>::zeros((num_pdfs, spec.feat_dim));
        for j in 0..num_pdfs {
            let mut draws = 0;
            loop {
                draws += 1;
                if draws > MAX_MEAN_DRAWS {
                    return Err(Error::Config(format!("could not place {num_pdfs} means {sep} apart")));
                }
                for d in 0..spec.feat_dim {
                    means[[j, d]] = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
                }
                let separated = (0..j).all(|k| {
                    means.row(j).iter().zip(means.row(k)).any(|(a, b)| (a - b).abs() >= sep)
                });
                if separated {
                    break;
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            topology,
            bigram,
            means,
        })
    }

    fn sample_phones(&self, rng: &mut impl Rng) -> Vec<usize> {
        let v = self.spec.num_phones;
        let mut phones = Vec::new();
        let mut h = History::Start;
        loop {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = Next::End;
            for p in 0..v {
                acc += self.bigram.prob(h, Next::Phone(p));
                if u < acc {
                    next = Next::Phone(p);
                    break;
                }
            }
            match next {
                Next::Phone(p) => {
                    phones.push(p);
                    h = History::Phone(p);
                }
                Next::End => return phones,
            }
        }
    }

    fn sample_utterance(&self, rng: &mut impl Rng, id: String) -> Result<Utterance> {
        let noise = Normal::new(0.0, self.spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..MAX_UTT_DRAWS {
            let phones = self.sample_phones(rng);
            let mut frames = Vec::new();
            for &p in &phones {
                for q in 0..self.spec.states_per_phone {
                    let pdf = self.topology.pdf(p, q);
                    loop {
                        frames.push(AlignedFrame { phone: p, state: q, pdf });
                        if frames.len() > self.spec.max_frames || !rng.random_bool(self.topology.self_loop(q)) {
                            break;
                        }
                    }
                }
                if frames.len() > self.spec.max_frames {
                    break;
                }
            }
            if frames.len() < self.spec.min_frames || frames.len() > self.spec.max_frames {
                continue;
            }
            let features = Array2::from_shape_fn((frames.len(), self.spec.feat_dim), |(t, d)| {
                self.means[[frames[t].pdf, d]]
            }) + Array2::from_shape_simple_fn((frames.len(), self.spec.feat_dim), || noise.sample(rng));
            return Ok(Utterance {
                alignment: Alignment::new(id.clone(), frames),
                id,
                features,
                phones,
            });
        }
        Err(Error::Config("utterance length constraints are practically unsatisfiable".into()))
    }

    /// `n_utts` utterances with ids `<prefix>_<index>`. Distinct `stream`
    /// values give independent splits from the same model.
    pub fn generate(&self, n_utts: usize, prefix: &str, stream: u64) -> Result<Corpus> {
        if n_utts == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut rng = self.spec.rng(stream + 1);
        let utterances = (0..n_utts)
            .map(|i| self.sample_utterance(&mut rng, format!("{prefix}_{i:05}")))
            .collect::<Result<_>>()?;
        Ok(Corpus {
            topology: self.topology.clone(),
            utterances,
        })
    }

    /// Index of the nearest mean, the Bayes decision for equal priors and
    /// shared spherical covariance.
    pub fn classify_frame(&self, x: ndarray::ArrayView1<'_, f64>) -> usize {
        let dist = |j: usize| self.means.row(j).iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum::<f64>();
        (0..self.means.nrows())
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
            .expect("at least one pdf")
    }
}

/// Single training split from `spec`.
pub fn generate_corpus(spec: &GenerativeSpec, n_utts: usize) -> Result<Corpus> {
    GenerativeModel::new(spec)?.generate(n_utts, "train", 0)
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("feats"))?;
        for u in &self.utterances {
            fs::write(dir.join("feats").join(format!("{}.mat", u.id)), write_matrix(&u.features))?;
        }
        let alis: Vec<Alignment> = self.utterances.iter().map(|u| u.alignment.clone()).collect();
        fs::write(dir.join("ali.txt"), write_alignments(&alis))?;
        fs::write(dir.join("text.txt"), write_transcripts(self.utterances.iter().map(|u| (u.id.as_str(), &u.phones[..]))))?;
        fs::write(dir.join("topo.txt"), self.topology.to_text())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.join(name).display()))))
        };
        let topology = HmmTopology::from_text(&read("topo.txt")?)?;
        let alis = read_alignments(&read("ali.txt")?)?;
        let texts = read_transcripts(&read("text.txt")?)?;
        if texts.len() != alis.len() {
            return Err(Error::DimensionMismatch {
                what: "transcriptions vs alignments",
                expected: alis.len(),
                actual: texts.len(),
            });
        }
        let mut utterances = Vec::with_capacity(alis.len());
        for (ali, (id, phones)) in alis.into_iter().zip(texts) {
            if ali.utt_id != id {
                return Err(Error::invariant("corpus", format!("utterance order differs: {} vs {id}", ali.utt_id)));
            }
            ali.validate(&topology)?;
            let features = read_matrix(&read(&format!("feats/{id}.mat"))?)?;
            if features.nrows() != ali.num_frames() {
                return Err(Error::DimensionMismatch {
                    what: "feature frames vs alignment",
                    expected: ali.num_frames(),
                    actual: features.nrows(),
                });
            }
            utterances.push(Utterance {
                id,
                features,
                alignment: ali,
                phones,
            });
        }
        if utterances.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { topology, utterances })
    }
}

/// `<utt_id> <phone ids...>` per line.
pub fn write_transcripts<'a>(items: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut out = String::new();
    for (id, phones) in items {
        out.push_str(id);
        for p in phones {
            out.push(' ');
            out.push_str(&p.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_transcripts(text: &str) -> Result<Vec<(String, Vec<usize>)>> {
    records(text)
        .map(|(line, f)| {
            let phones = f[1..]
                .iter()
                .map(|s| s.parse().map_err(|_| Error::parse(line, format!("bad phone id `{s}`"))))
                .collect::<Result<_>>()?;
            Ok((f[0].to_string(), phones))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GenerativeSpec {
        GenerativeSpec {
            seed: 3,
            ..GenerativeSpec::default()
        }
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let a = generate_corpus(&small_spec(), 5).unwrap();
        let b = generate_corpus(&small_spec(), 5).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let first = fs::read_to_string(dir.path().join("ali.txt")).unwrap();
        assert_eq!(Corpus::read(dir.path()).unwrap(), a);
        b.write(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("ali.txt")).unwrap(), first);
    }

    #[test]
    fn utterances_respect_constraints() {
        let spec = small_spec();
        let c = generate_corpus(&spec, 50).unwrap();
        for u in &c.utterances {
            let t = u.alignment.num_frames();
            assert!((spec.min_frames..=spec.max_frames).contains(&t));
            assert_eq!(u.features.dim(), (t, spec.feat_dim));
            u.alignment.validate(&c.topology).unwrap();
            assert_eq!(u.alignment.phone_sequence(), u.phones);
        }
    }

    #[test]
    fn means_are_separated() {
        let m = GenerativeModel::new(&GenerativeSpec::default()).unwrap();
        for a in 0..m.means.nrows() {
            for b in 0..a {
                assert!(m.means.row(a).iter().zip(m.means.row(b)).any(|(x, y)| (x - y).abs() >= 2.0));
            }
        }
    }

    #[test]
    fn noiseless_frames_classified_exactly() {
        let spec = GenerativeSpec {
            sigma: 0.0,
            ..small_spec()
        };
        let m = GenerativeModel::new(&spec).unwrap();
        let c = m.generate(20, "t", 0).unwrap();
        for u in &c.utterances {
            for (t, f) in u.alignment.frames.iter().enumerate() {
                assert_eq!(m.classify_frame(u.features.row(t)), f.pdf);
            }
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            GenerativeSpec { num_phones: 0, ..small_spec() },
            GenerativeSpec { min_frames: 70, ..small_spec() },
            GenerativeSpec { end_prob: 0.0, ..small_spec() },
            GenerativeSpec { min_separation: 9.0, ..small_spec() },
        ] {
            assert!(GenerativeModel::new(&spec).is_err(), "{spec:?}");
        }
        assert!(matches!(generate_corpus(&small_spec(), 0), Err(Error::EmptyCorpus)));
    }
}
