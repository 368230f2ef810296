//! From-scratch training loop and phone-error-rate evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acoustic_model::{LrSchedule, NetGradients, Sgd, ToyNet};
use crate::criteria::{compute, CriterionConfig, CriterionKind};
use crate::decoder::{score, viterbi, ScoreReport, Transcript};
use crate::error::{Error, Result};
use crate::graphs::{
    build_denominator_graph, build_numerator_graph, estimate_phone_lm, DenominatorGraph, HmmTopology, Supervision,
};
use crate::synth_data::Corpus;
use crate::textio::{fmt_f64, records};

pub const CONFIG_KEYS: &[&str] = &[
    "criterion",
    "b",
    "mu",
    "lambda",
    "xent_smooth",
    "tolerance",
    "epochs",
    "lr_initial",
    "lr_final",
    "momentum",
    "clip_norm",
    "batch_size",
    "hidden",
    "seed",
    "lm_weight",
    "data_dir",
    "out_dir",
    "den_graph",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub criterion: CriterionKind,
    pub boost: f64,
    pub silence_scale: f64,
    pub leaky_coeff: f64,
    pub xent_smooth: f64,
    pub tolerance: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Interpolation weight of the estimated phone LM.
    pub lm_weight: f64,
    /// Holds `train/` and `test/` corpus splits.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Prebuilt denominator graph; estimated from the training transcripts
    /// when absent.
    pub den_graph: Option<PathBuf>,
}

impl TrainConfig {
    /// Four epochs with tolerance 5 for MMI and bMMI, twelve epochs with
    /// tolerance 0 for sMBR.
    pub fn defaults(kind: CriterionKind) -> Self {
        let c = CriterionConfig::defaults(kind);
        let smbr = kind == CriterionKind::Smbr;
        Self {
            criterion: kind,
            boost: c.boost,
            silence_scale: c.silence_scale,
            leaky_coeff: c.leaky_coeff,
            xent_smooth: c.xent_smooth,
            tolerance: if smbr { 0 } else { 5 },
            epochs: if smbr { 12 } else { 4 },
            lr_initial: 0.001,
            lr_final: 0.0001,
            momentum: 0.9,
            clip_norm: 5.0,
            batch_size: 8,
            hidden: vec![64, 64],
            seed: 0,
            lm_weight: 0.9,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("exp"),
            den_graph: None,
        }
    }

    /// Applies one `key=value` setting. Changing `criterion` does not reset
    /// the other keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value `{value}` for `{key}`: expected {what}"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        match key {
            "criterion" => self.criterion = value.parse()?,
            "b" => self.boost = float()?,
            "mu" => self.silence_scale = float()?,
            "lambda" => self.leaky_coeff = float()?,
            "xent_smooth" => self.xent_smooth = float()?,
            "tolerance" => self.tolerance = int()?,
            "epochs" => self.epochs = int()?,
            "lr_initial" => self.lr_initial = float()?,
            "lr_final" => self.lr_final = float()?,
            "momentum" => self.momentum = float()?,
            "clip_norm" => self.clip_norm = float()?,
            "batch_size" => self.batch_size = int()?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse().map_err(|_| bad("comma-separated widths")))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("an integer"))?,
            "lm_weight" => self.lm_weight = float()?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "den_graph" => self.den_graph = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines. A `criterion` line, wherever it appears,
    /// selects the defaults the remaining keys override.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, found `{line}`")))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let kind = match pairs.iter().rev().find(|(_, k, _)| k == "criterion") {
            Some((line, _, v)) => v.parse().map_err(|e: Error| Error::parse(*line, e.to_string()))?,
            None => CriterionKind::Mmi,
        };
        let mut cfg = Self::defaults(kind);
        for (line, k, v) in &pairs {
            cfg.set(k, v).map_err(|e| Error::parse(*line, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "criterion={}", self.criterion);
        let _ = writeln!(out, "b={}", self.boost);
        let _ = writeln!(out, "mu={}", self.silence_scale);
        let _ = writeln!(out, "lambda={}", self.leaky_coeff);
        let _ = writeln!(out, "xent_smooth={}", self.xent_smooth);
        let _ = writeln!(out, "tolerance={}", self.tolerance);
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "lr_initial={}", self.lr_initial);
        let _ = writeln!(out, "lr_final={}", self.lr_final);
        let _ = writeln!(out, "momentum={}", self.momentum);
        let _ = writeln!(out, "clip_norm={}", self.clip_norm);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "hidden={}", hidden.join(","));
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "lm_weight={}", self.lm_weight);
        let _ = writeln!(out, "data_dir={}", self.data_dir.display());
        let _ = writeln!(out, "out_dir={}", self.out_dir.display());
        if let Some(p) = &self.den_graph {
            let _ = writeln!(out, "den_graph={}", p.display());
        }
        out
    }

    pub fn criterion_config(&self, silence_pdfs: Vec<usize>) -> CriterionConfig {
        CriterionConfig {
            kind: self.criterion,
            boost: self.boost,
            silence_scale: self.silence_scale,
            leaky_coeff: self.leaky_coeff,
            xent_smooth: self.xent_smooth,
            silence_pdfs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.criterion_config(Vec::new()).validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_initial >= 0.0 && self.lr_final >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    /// Criterion value (without the cross-entropy term) per frame.
    pub objective_per_frame: f64,
    pub num_logprob: f64,
    pub den_logprob: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iter,objective_per_frame,num_logprob,den_logprob,grad_norm,lr";

pub fn write_log(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.objective_per_frame),
            fmt_f64(r.num_logprob),
            fmt_f64(r.den_logprob),
            fmt_f64(r.grad_norm),
            fmt_f64(r.lr)
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: ToyNet,
    pub log: Vec<LogRow>,
    /// Frame-weighted mean criterion value per frame, one per epoch.
    pub epoch_objectives: Vec<f64>,
}

/// Everything the loop needs besides the config.
pub struct TrainingSetup {
    pub topology: HmmTopology,
    pub den: DenominatorGraph,
    pub features: Vec<Array2<f64>>,
    pub supervisions: Vec<Supervision>,
}

/// Pdfs of phone 0.
pub fn silence_pdfs(topo: &HmmTopology) -> Vec<usize> {
    (0..topo.states_per_phone()).map(|q| topo.pdf(0, q)).collect()
}

impl TrainingSetup {
    pub fn prepare(cfg: &TrainConfig, corpus: &Corpus) -> Result<Self> {
        let topology = corpus.topology.clone();
        let den = match &cfg.den_graph {
            Some(p) => DenominatorGraph::from_text(&read_file(p)?)?,
            None => {
                let seqs: Vec<Vec<usize>> = corpus.utterances.iter().map(|u| u.phones.clone()).collect();
                let lm = estimate_phone_lm(&seqs, topology.num_phones(), cfg.lm_weight)?;
                build_denominator_graph(&lm, &topology, cfg.leaky_coeff)?
            }
        };
        if den.num_pdfs() != topology.num_pdfs() {
            return Err(Error::DimensionMismatch {
                what: "denominator graph pdfs vs topology",
                expected: topology.num_pdfs(),
                actual: den.num_pdfs(),
            });
        }
        let supervisions = corpus
            .utterances
            .iter()
            .map(|u| build_numerator_graph(&u.alignment, cfg.tolerance, &topology))
            .collect::<Result<_>>()?;
        Ok(Self {
            topology,
            den,
            features: corpus.utterances.iter().map(|u| u.features.clone()).collect(),
            supervisions,
        })
    }
}

pub(crate) fn read_file(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
}

struct UttResult {
    value: f64,
    num_logprob: f64,
    den_logprob: f64,
    frames: usize,
    grads: NetGradients,
}

/// Runs the training loop in memory. `on_epoch` sees the network after every
/// epoch (checkpointing hooks in here).
pub fn train_with(
    cfg: &TrainConfig,
    setup: &TrainingSetup,
    net: ToyNet,
    mut on_epoch: impl FnMut(usize, &ToyNet) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let crit = cfg.criterion_config(silence_pdfs(&setup.topology));
    let n = setup.features.len();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        initial_lr: cfg.lr_initial,
        final_lr: cfg.lr_final,
        total_updates: (cfg.epochs * batches_per_epoch).saturating_sub(1),
    };
    let mut net = net;
    let mut opt = Sgd::new(cfg.momentum, cfg.clip_norm);
    let mut log = Vec::new();
    let mut epoch_objectives = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut epoch_value, mut epoch_frames) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<UttResult>> = batch
                .par_iter()
                .map(|&u| {
                    let x = &setup.features[u];
                    let ll = net.forward(x)?;
                    let out = compute(&setup.den, &setup.supervisions[u], &ll, &crit)
                        .map_err(|e| Error::invariant("training", format!("utterance {}: {e}", setup.supervisions[u].utt_id())))?;
                    let value = out.criterion_value();
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "objective {value} on utterance {}",
                            setup.supervisions[u].utt_id()
                        )));
                    }
                    Ok(UttResult {
                        value,
                        num_logprob: out.num_logprob,
                        den_logprob: out.den_logprob,
                        frames: x.nrows(),
                        grads: net.backward(x, &out.grad)?,
                    })
                })
                .collect();
            let mut total = NetGradients::zeros_like(&net);
            let (mut value, mut num, mut den, mut frames) = (0.0, 0.0, 0.0, 0usize);
            for r in results {
                let r = r?;
                total.add_scaled(&r.grads, 1.0);
                value += r.value;
                num += r.num_logprob;
                den += r.den_logprob;
                frames += r.frames;
            }
            let lr = schedule.lr(iter);
            let step = opt.step(&mut net, &total, lr);
            let f = frames as f64;
            log.push(LogRow {
                iter,
                objective_per_frame: value / f,
                num_logprob: num / f,
                den_logprob: den / f,
                grad_norm: step.grad_norm,
                lr,
            });
            debug!("iter {iter}: objective/frame {:.5} grad norm {:.3}", value / f, step.grad_norm);
            epoch_value += value;
            epoch_frames += frames;
            iter += 1;
        }
        let avg = epoch_value / epoch_frames as f64;
        info!("epoch {epoch}: {} objective per frame {avg:.6}", cfg.criterion);
        epoch_objectives.push(avg);
        on_epoch(epoch, &net)?;
    }
    Ok(TrainOutcome {
        net,
        log,
        epoch_objectives,
    })
}

/// Reads `data_dir/train`, trains from a seeded random initialisation and
/// writes `epoch_<k>.net`, `final.net`, `train_log.csv`, `den.txt` and the
/// effective config to `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = Corpus::read(&cfg.data_dir.join("train"))?;
    let setup = TrainingSetup::prepare(cfg, &corpus)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("train.cfg"), cfg.to_text())?;
    fs::write(cfg.out_dir.join("den.txt"), setup.den.to_text())?;
    let input_dim = setup.features[0].ncols();
    let net = ToyNet::random(input_dim, &cfg.hidden, setup.topology.num_pdfs(), cfg.seed);
    let out_dir = cfg.out_dir.clone();
    let outcome = train_with(cfg, &setup, net, |epoch, net| {
        fs::write(out_dir.join(format!("epoch_{epoch}.net")), net.to_text())?;
        Ok(())
    })?;
    fs::write(cfg.out_dir.join("final.net"), outcome.net.to_text())?;
    fs::write(cfg.out_dir.join("train_log.csv"), write_log(&outcome.log))?;
    Ok(outcome)
}

/// Viterbi hypotheses for every utterance, in corpus order.
pub fn decode_corpus(net: &ToyNet, den: &DenominatorGraph, corpus: &Corpus) -> Result<Vec<Transcript>> {
    corpus
        .utterances
        .par_iter()
        .map(|u| {
            let ll = net.forward(&u.features)?;
            Ok((u.id.clone(), viterbi(den, &ll, &corpus.topology)?.phones))
        })
        .collect()
}

/// Phone error rate of `net` on `corpus`, with the hypotheses.
pub fn evaluate(net: &ToyNet, corpus: &Corpus, den: &DenominatorGraph) -> Result<(ScoreReport, Vec<Transcript>)> {
    let hyps = decode_corpus(net, den, corpus)?;
    let refs: Vec<Transcript> = corpus.utterances.iter().map(|u| (u.id.clone(), u.phones.clone())).collect();
    Ok((score(&hyps, &refs)?, hyps))
}

/// Parses a training log written by [`write_log`].
pub fn read_log(text: &str) -> Result<Vec<LogRow>> {
    let mut rows = Vec::new();
    for (line, f) in records(&text.replace(',', " ")) {
        if f[0] == "iter" {
            continue;
        }
        crate::textio::expect_arity(&f, 6, line)?;
        rows.push(LogRow {
            iter: crate::textio::field(&f, 0, line, "iter")?,
            objective_per_frame: crate::textio::field(&f, 1, line, "objective_per_frame")?,
            num_logprob: crate::textio::field(&f, 2, line, "num_logprob")?,
            den_logprob: crate::textio::field(&f, 3, line, "den_logprob")?,
            grad_norm: crate::textio::field(&f, 4, line, "grad_norm")?,
            lr: crate::textio::field(&f, 5, line, "lr")?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{GenerativeModel, GenerativeSpec};

    fn tiny_setup(cfg: &TrainConfig) -> (TrainingSetup, Corpus) {
        let model = GenerativeModel::new(&GenerativeSpec::default()).unwrap();
        let corpus = model.generate(16, "train", 0).unwrap();
        (TrainingSetup::prepare(cfg, &corpus).unwrap(), corpus)
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::from_text("# sweep\nb = 0.15\ncriterion=bmmi\nepochs=2\n").unwrap();
        assert_eq!(cfg.criterion, CriterionKind::Bmmi);
        assert_eq!(cfg.boost, 0.15);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let smbr = TrainConfig::from_text("criterion=smbr").unwrap();
        assert_eq!((smbr.epochs, smbr.tolerance, smbr.silence_scale), (12, 0, 0.013));
        let err = TrainConfig::from_text("bogus=1").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("valid keys") && err.contains("lr_initial"), "{err}");
    }

    #[test]
    fn boost_sweep_values_accepted() {
        for b in ["0.05", "0.1", "0.15"] {
            let mut cfg = TrainConfig::defaults(CriterionKind::Bmmi);
            cfg.set("b", b).unwrap();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn zero_lr_leaves_objective_unchanged() {
        let mut cfg = TrainConfig::defaults(CriterionKind::Mmi);
        cfg.lr_initial = 0.0;
        cfg.lr_final = 0.0;
        cfg.epochs = 3;
        cfg.hidden = vec![8];
        let (setup, _) = tiny_setup(&cfg);
        let net = ToyNet::random(10, &cfg.hidden, 12, 0);
        let out = train_with(&cfg, &setup, net.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(out.net, net);
        let e = &out.epoch_objectives;
        assert!((e[0] - e[1]).abs() < 1e-12 && (e[0] - e[2]).abs() < 1e-12, "{e:?}");
    }

    #[test]
    fn training_is_reproducible() {
        let mut cfg = TrainConfig::defaults(CriterionKind::Smbr);
        cfg.epochs = 1;
        cfg.hidden = vec![8];
        let (setup, _) = tiny_setup(&cfg);
        let run = || {
            let net = ToyNet::random(10, &cfg.hidden, 12, 5);
            write_log(&train_with(&cfg, &setup, net, |_, _| Ok(())).unwrap().log)
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(read_log(&a).unwrap().len(), 2);
    }

    #[test]
    fn perfect_likelihoods_decode_almost_perfectly() {
        let cfg = TrainConfig::defaults(CriterionKind::Mmi);
        let (setup, corpus) = tiny_setup(&cfg);
        let den = setup.den.with_leaky_coeff(0.0).unwrap();
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for u in &corpus.utterances {
            let mut ll = Array2::zeros((u.alignment.num_frames(), 12));
            for (t, f) in u.alignment.frames.iter().enumerate() {
                ll[[t, f.pdf]] = 10.0;
            }
            let ll = crate::forward_backward::LogLikes::new(ll).unwrap();
            hyps.push((u.id.clone(), viterbi(&den, &ll, &corpus.topology).unwrap().phones));
            refs.push((u.id.clone(), u.phones.clone()));
        }
        assert!(score(&hyps, &refs).unwrap().per() <= 0.01);
    }
}
