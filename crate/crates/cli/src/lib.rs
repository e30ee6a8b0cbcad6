//! Command implementations behind the `dialret` binary.

pub mod server;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dialret::corpus::{build_corpus, encode_records, Corpus, CorpusConfig, Split};
use dialret::dialog_model::EncoderVariant;
use dialret::joint_embedding::FeatLossKind;
use dialret::retrieval::evaluate_split;
use dialret::service::{simulate, OracleMode, ServiceConfig, SessionManager};
use dialret::training::{
    baseline_table_csv, run_baseline_suite, write_log_csv, Checkpoint, TrainConfig, TrainData, Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "dialret", version, about = "Dialog-based interactive video retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Two-phase training on a corpus.
    Train(TrainArgs),
    /// Per-round R@k and MeanR on a split.
    Eval(EvalArgs),
    /// Run oracle-answered sessions over a split.
    Simulate(SimulateArgs),
    /// Train and evaluate the baseline comparison.
    Baselines(BaselinesArgs),
    /// Start the HTTP session API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with corpus settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOptions {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<EncoderVariant>,
    #[arg(long)]
    pub feat_loss: Option<FeatLossKind>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
}

impl TrainOptions {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(f) = self.feat_loss {
            cfg.feat_loss = f;
        }
        if let Some(e) = self.phase1_epochs {
            cfg.phase1_epochs = e;
        }
        if let Some(e) = self.phase2_epochs {
            cfg.phase2_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log as CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub options: TrainOptions,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// Directory for the report files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// `templated` answers each shown question from the scene; `verbatim`
    /// replays the stored answers.
    #[arg(long, default_value = "templated", value_parser = parse_oracle)]
    pub oracle: OracleMode,
    /// Show stored questions instead of generated ones.
    #[arg(long)]
    pub gt_questions: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselinesArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub options: TrainOptions,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    #[arg(long)]
    pub gt_questions: bool,
    /// Idle minutes before a session is dropped.
    #[arg(long, default_value_t = 30)]
    pub ttl_minutes: u64,
    /// Directory of static UI assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn parse_oracle(s: &str) -> Result<OracleMode, String> {
    match s {
        "templated" => Ok(OracleMode::Templated),
        "verbatim" => Ok(OracleMode::Verbatim),
        _ => Err(format!("unknown oracle `{s}` (templated, verbatim)")),
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => CorpusConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => CorpusConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.train {
        cfg.train = n;
    }
    if let Some(n) = args.val {
        cfg.val = n;
    }
    if let Some(n) = args.test {
        cfg.test = n;
    }
    if let Some(s) = args.noise_sigma {
        cfg.noise_sigma = s;
    }
    let corpus = build_corpus(&cfg)?;
    corpus.write(&args.out)?;
    log::info!(
        "wrote {} train / {} val / {} test videos to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let cfg = args.options.resolve()?;
    let data = TrainData::from_corpus(&corpus, &cfg.model.feature_blocks)?;
    let ckpt = Trainer::new(cfg, &corpus.config, data)?.train_two_phase()?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ckpt.save(&args.out)?;
    if let Some(log_path) = &args.log {
        write_log_csv(log_path, &ckpt.log)?;
    }
    if let Some(best) = ckpt.history.iter().map(|h| h.val_mean_rank).reduce(f64::min) {
        println!("best validation MeanR {best:.2} after {} epochs", ckpt.history.len());
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let model = &ckpt.model;
    let samples = encode_records(corpus.split(args.split), &model.vocab, &model.config.feature_blocks);
    let report = evaluate_split(model, &samples, args.rounds)?;
    report.write(&args.out, &format!("eval_{}", args.split.name()))?;
    print_rounds(&report);
    Ok(())
}

pub fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    if args.oracle == OracleMode::Verbatim && !args.gt_questions {
        bail!("the verbatim oracle replays stored answers, so it needs --gt-questions");
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let records = corpus.split(args.split).to_vec();
    let manager = SessionManager::new(
        ckpt.model,
        records.clone(),
        ServiceConfig {
            rounds: args.rounds,
            gt_questions: args.gt_questions,
            ..ServiceConfig::default()
        },
    )?;
    let sim = simulate(&manager, &records, args.oracle)?;
    let stem = format!("simulate_{}", args.split.name());
    sim.report.write(&args.out, &stem)?;
    std::fs::write(
        args.out.join(format!("{stem}_summary.json")),
        serde_json::to_string_pretty(&serde_json::json!({
            "question_parse_rate": sim.question_parse_rate,
            "questions": sim.questions,
            "gt_questions": args.gt_questions,
        }))?,
    )?;
    print_rounds(&sim.report);
    println!(
        "questions parsed by the template grammar: {:.1}%",
        sim.question_parse_rate
    );
    Ok(())
}

pub fn baselines(args: &BaselinesArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let cfg = args.options.resolve()?;
    let rows = run_baseline_suite(&corpus, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let table = baseline_table_csv(&rows);
    std::fs::write(args.out.join("baselines.csv"), &table)?;
    std::fs::write(args.out.join("baselines.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(())
}

pub async fn serve(args: &ServeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let manager = Arc::new(SessionManager::new(
        ckpt.model,
        corpus.split(args.split).to_vec(),
        ServiceConfig {
            rounds: args.rounds,
            gt_questions: args.gt_questions,
            ttl: Duration::from_secs(args.ttl_minutes * 60),
            ..ServiceConfig::default()
        },
    )?);
    server::spawn_reaper(Arc::clone(&manager));
    let app = server::router(manager, args.static_dir.clone());
    let listener = tokio::net::TcpListener::bind(args.addr)
        .await
        .with_context(|| format!("binding {}", args.addr))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn print_rounds(report: &dialret::retrieval::EvalReport) {
    println!("round   R@1    R@5    R@10   MeanR");
    for r in &report.rounds {
        println!(
            "{:>5} {:>6.1} {:>6.1} {:>6.1} {:>7.2}",
            r.round, r.r_at_1, r.r_at_5, r.r_at_10, r.mean_rank
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Simulate(a) => simulate_cmd(&a),
        Command::Baselines(a) => baselines(&a),
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&a))
        }
    }
}
