use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lfseq::acoustic_model::ToyNet;
use lfseq::criteria::{CriterionConfig, CriterionKind};
use lfseq::decoder::score;
use lfseq::graphs::{
    build_denominator_graph, build_numerator_graph, estimate_phone_lm, read_alignments, write_supervisions,
    DenominatorGraph, HmmTopology, PhoneLm,
};
use lfseq::oracle::{net_gradient_check, oracle_check, OracleCheckConfig};
use lfseq::synth_data::{read_transcripts, write_transcripts, Corpus, GenerativeModel, GenerativeSpec};
use lfseq::trainer::{self, TrainConfig};

/// Lattice-free MMI / boosted MMI / sMBR training on synthetic phone data.
#[derive(Parser)]
#[command(name = "lfseq", version)]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: <out>/train and <out>/test splits, each
    /// with feats/<utt>.mat (`MAT <T> <D>` + rows), ali.txt
    /// (`<utt> <phone:state:pdf>...`), text.txt (`<utt> <phones...>`) and
    /// topo.txt; plus <out>/true_lm.txt.
    GenData(GenDataArgs),
    /// Estimate an interpolated phone bigram from a transcription file and
    /// write it as `LM <vocab> 2 <weight>` + `P <hist|START> <next|END> <prob>`.
    EstimateLm(EstimateLmArgs),
    /// Build den.txt (denominator graph), topo.txt and sup.txt (numerator
    /// supervisions) in the output directory.
    BuildGraphs(BuildGraphsArgs),
    /// Train from a random initialisation. Flags override config-file keys.
    Train(TrainArgs),
    /// Finite-difference check of net backprop composed with a criterion;
    /// fails when the max relative error exceeds --tol.
    GradCheck(GradCheckArgs),
    /// Compare the recursions with brute-force enumeration on seeded random
    /// instances; prints pass/fail per criterion.
    OracleCheck(OracleCheckArgs),
    /// Viterbi-decode a corpus split and write `<utt> <phones...>` lines.
    Decode(DecodeArgs),
    /// Score hypotheses against references and print S/I/D/N/PER.
    Score(ScoreArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Phones including silence (phone 0).
    #[arg(long, default_value_t = 6)]
    phones: usize,
    #[arg(long, default_value_t = 10)]
    feat_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Args)]
struct EstimateLmArgs {
    /// `<utt> <phone ids...>` per line.
    #[arg(long)]
    transcripts: PathBuf,
    #[arg(long)]
    vocab: usize,
    /// Weight of the maximum-likelihood estimate against the uniform floor.
    #[arg(long, default_value_t = 0.9)]
    weight: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraphsArgs {
    #[arg(long)]
    lm: PathBuf,
    /// Topology file (`TOPO <phones> <states>` + `S <q> <self> <fwd>`).
    #[arg(long)]
    topo: PathBuf,
    #[arg(long)]
    alignments: PathBuf,
    #[arg(long, default_value_t = 5)]
    tolerance: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    b: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long = "xent_smooth", alias = "xent-smooth")]
    xent_smooth: Option<String>,
    #[arg(long)]
    tolerance: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "lr_initial", alias = "lr-initial")]
    lr_initial: Option<String>,
    #[arg(long = "lr_final", alias = "lr-final")]
    lr_final: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long = "clip_norm", alias = "clip-norm")]
    clip_norm: Option<String>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "lm_weight", alias = "lm-weight")]
    lm_weight: Option<String>,
    #[arg(long = "data_dir", alias = "data-dir")]
    data_dir: Option<String>,
    #[arg(long = "out_dir", alias = "out-dir")]
    out_dir: Option<String>,
    #[arg(long = "den_graph", alias = "den-graph")]
    den_graph: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        [
            ("b", &self.b),
            ("mu", &self.mu),
            ("lambda", &self.lambda),
            ("xent_smooth", &self.xent_smooth),
            ("tolerance", &self.tolerance),
            ("epochs", &self.epochs),
            ("lr_initial", &self.lr_initial),
            ("lr_final", &self.lr_final),
            ("momentum", &self.momentum),
            ("clip_norm", &self.clip_norm),
            ("batch_size", &self.batch_size),
            ("hidden", &self.hidden),
            ("seed", &self.seed),
            ("lm_weight", &self.lm_weight),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("den_graph", &self.den_graph),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "mmi")]
    criterion: CriterionKind,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.025)]
    xent_smooth: f64,
    #[arg(long, default_value_t = 5)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leaky coefficient of the leaky half of the instances.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    b: f64,
    #[arg(long, default_value_t = 0.013)]
    mu: f64,
}

#[derive(Args)]
struct DecodeArgs {
    /// Model file (`NET <D> <J> <n_layers>` ...).
    #[arg(long)]
    model: PathBuf,
    /// Denominator graph; its leaky coefficient is ignored.
    #[arg(long)]
    den: PathBuf,
    /// Corpus split directory (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    /// Reference transcriptions, e.g. <split>/text.txt.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = GenerativeSpec {
        num_phones: a.phones,
        feat_dim: a.feat_dim,
        sigma: a.sigma,
        seed: a.seed,
        ..GenerativeSpec::default()
    };
    let model = GenerativeModel::new(&spec)?;
    model.generate(a.train, "train", 0)?.write(&a.out.join("train"))?;
    model.generate(a.test, "test", 1)?.write(&a.out.join("test"))?;
    write(&a.out.join("true_lm.txt"), &model.bigram.to_text())?;
    println!("wrote {} train and {} test utterances to {}", a.train, a.test, a.out.display());
    Ok(())
}

fn estimate_lm(a: &EstimateLmArgs) -> Result<()> {
    let seqs: Vec<Vec<usize>> = read_transcripts(&read(&a.transcripts)?)
        .with_context(|| format!("parsing {}", a.transcripts.display()))?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let lm = estimate_phone_lm(&seqs, a.vocab, a.weight)?;
    write(&a.out, &lm.to_text())
}

fn build_graphs(a: &BuildGraphsArgs) -> Result<()> {
    let lm = PhoneLm::from_text(&read(&a.lm)?).with_context(|| format!("parsing {}", a.lm.display()))?;
    let topo = HmmTopology::from_text(&read(&a.topo)?).with_context(|| format!("parsing {}", a.topo.display()))?;
    let alis = read_alignments(&read(&a.alignments)?).with_context(|| format!("parsing {}", a.alignments.display()))?;
    let den = build_denominator_graph(&lm, &topo, a.lambda)?;
    let sups = alis
        .iter()
        .map(|ali| build_numerator_graph(ali, a.tolerance, &topo).with_context(|| format!("utterance {}", ali.utt_id)))
        .collect::<Result<Vec<_>>>()?;
    write(&a.out.join("den.txt"), &den.to_text())?;
    write(&a.out.join("topo.txt"), &topo.to_text())?;
    write(&a.out.join("sup.txt"), &write_supervisions(&sups))?;
    println!(
        "denominator graph: {} states, {} arcs; {} supervisions",
        den.num_states(),
        den.arcs().len(),
        sups.len()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    // A --criterion flag selects that criterion's defaults; explicit file keys
    // still apply on top, then the remaining flags.
    let mut text = match &a.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    if let Some(c) = &a.criterion {
        text.push_str(&format!("\ncriterion={c}\n"));
    }
    let mut cfg = TrainConfig::from_text(&text).with_context(|| match &a.config {
        Some(p) => format!("parsing {}", p.display()),
        None => "parsing --criterion".to_string(),
    })?;
    for (k, v) in a.overrides() {
        cfg.set(k, v).with_context(|| format!("flag --{k}"))?;
    }
    let outcome = trainer::train(&cfg)?;
    for (e, v) in outcome.epoch_objectives.iter().enumerate() {
        println!("epoch {e}: objective per frame {v:.6}");
    }
    let test_dir = cfg.data_dir.join("test");
    if test_dir.exists() {
        let test = Corpus::read(&test_dir)?;
        let den = DenominatorGraph::from_text(&read(&cfg.out_dir.join("den.txt"))?)?;
        let (report, _) = trainer::evaluate(&outcome.net, &test, &den)?;
        print!("{report}");
    }
    println!("model written to {}", cfg.out_dir.join("final.net").display());
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> Result<bool> {
    let mut cfg = CriterionConfig::defaults(a.criterion);
    cfg.leaky_coeff = a.lambda;
    cfg.xent_smooth = a.xent_smooth;
    cfg.silence_pdfs = vec![0];
    if let Some(b) = a.b {
        cfg.boost = b;
    }
    if let Some(mu) = a.mu {
        cfg.silence_scale = mu;
    }
    let r = net_gradient_check(&cfg, a.seed, a.instances)?;
    let ok = r.max_rel_err <= a.tol;
    println!(
        "{} grad-check: {} instances, {} parameters, max relative error {:.3e} (tol {:.0e}) {}",
        r.kind,
        r.instances,
        r.params_checked,
        r.max_rel_err,
        a.tol,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn run_oracle_check(a: &OracleCheckArgs) -> Result<bool> {
    let cfg = OracleCheckConfig {
        seed: a.seed,
        instances: a.instances,
        leaky_coeff: a.lambda,
        boost: a.b,
        silence_scale: a.mu,
        ..OracleCheckConfig::default()
    };
    let results = oracle_check(&cfg)?;
    for r in &results {
        println!(
            "{:<5} lambda={:<4} instances={} objective_err={:.3e} grad_err={:.3e} {}",
            r.kind,
            r.leaky_coeff,
            r.instances,
            r.max_objective_err,
            r.max_grad_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(results.iter().all(|r| r.passed))
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let net = ToyNet::from_text(&read(&a.model)?).with_context(|| format!("parsing {}", a.model.display()))?;
    let den = DenominatorGraph::from_text(&read(&a.den)?).with_context(|| format!("parsing {}", a.den.display()))?;
    let corpus = Corpus::read(&a.data)?;
    let hyps = trainer::decode_corpus(&net, &den, &corpus)?;
    write(&a.out, &write_transcripts(hyps.iter().map(|(id, p)| (id.as_str(), &p[..]))))?;
    println!("decoded {} utterances to {}", hyps.len(), a.out.display());
    Ok(())
}

fn run_score(a: &ScoreArgs) -> Result<()> {
    let hyps = read_transcripts(&read(&a.hyp)?).with_context(|| format!("parsing {}", a.hyp.display()))?;
    let refs = read_transcripts(&read(&a.reference)?).with_context(|| format!("parsing {}", a.reference.display()))?;
    let report = score(&hyps, &refs)?;
    print!("{report}");
    if let Some(out) = &a.out {
        write(out, &report.to_string())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::EstimateLm(a) => estimate_lm(a)?,
        Command::BuildGraphs(a) => build_graphs(a)?,
        Command::Train(a) => train(a)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::OracleCheck(a) => return run_oracle_check(a),
        Command::Decode(a) => decode(a)?,
        Command::Score(a) => run_score(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
