use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use warpkit::error::{Error, Result};
use warpkit::injection::Strategy;
use warpkit::numerics::Scalar;
use warpkit::pipeline::{
    self, init_checkpoint, AblateOptions, Checkpoint, Corpus, GenerateOptions, InitLatent, MatchEvalOptions,
    Precision, ReferenceInput, RunConfig, RunReport, SubjectSource, PRECISION_ENV,
};
use warpkit::scenes::CorpusSpec;

#[derive(Parser, Debug)]
#[command(name = "warpkit", version, about = "Subject-driven video generation on a toy diffusion transformer")]
struct Cli {
    /// Run configuration (TOML, schema "wk-1"); defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working precision; overrides the config.
    #[arg(long, global = true, env = PRECISION_ENV, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum StrategyArg {
    None,
    ValueWarp,
    KvReplace,
    TokenConcat,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::None => Strategy::None,
            StrategyArg::ValueWarp => Strategy::ValueWarp,
            StrategyArg::KvReplace => Strategy::KvReplace,
            StrategyArg::TokenConcat => Strategy::TokenConcat,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubjectArg {
    Checkpoint,
    Analytic,
}

impl From<SubjectArg> for SubjectSource {
    fn from(s: SubjectArg) -> Self {
        match s {
            SubjectArg::Checkpoint => SubjectSource::Checkpoint,
            SubjectArg::Analytic => SubjectSource::Analytic,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a freshly initialized base model checkpoint.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene corpus.
    GenScene {
        /// Corpus spec (TOML); defaults apply without one.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        references: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit adapters and the subject token on one scene's reference set.
    Adapt {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dual-branch generation with one injection strategy.
    Generate {
        #[command(flatten)]
        ckpt: CkptArg,
        /// Reference: a corpus scene directory or a latent tensor file.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// File holding the prompt text.
        #[arg(long, conflicts_with = "prompt_text")]
        prompt: Option<PathBuf>,
        /// Prompt text given inline.
        #[arg(long)]
        prompt_text: Option<String>,
        #[arg(long, value_enum, default_value_t = StrategyArg::ValueWarp)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Starting latent: "noise", "scene" (inversion of the reference
        /// scene's video) or a tensor file.
        #[arg(long, default_value = "noise")]
        init: String,
        #[arg(long, value_enum, default_value_t = SubjectArg::Checkpoint)]
        subject: SubjectArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correspondence accuracy of every layer and descriptor kind.
    MatchEval {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        ckpt: CkptArg,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_enum, default_value_t = SubjectArg::Analytic)]
        subject: SubjectArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare injection strategies on corpus scenes.
    Ablate {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        ckpt: CkptArg,
        /// Scene indices; all scenes without the flag.
        #[arg(long, value_delimiter = ',')]
        scenes: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',')]
        strategies: Vec<StrategyArg>,
        #[arg(long, value_enum, default_value_t = SubjectArg::Analytic)]
        subject: SubjectArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct CorpusArg {
    /// Corpus directory written by gen-scene.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CkptArg {
    /// Checkpoint directory written by init or adapt.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str, key: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("--{name} is required (or set paths.{key} in the config)")))
}

fn parse_init(s: &str) -> InitLatent {
    match s {
        "noise" => InitLatent::Noise,
        "scene" => InitLatent::Scene,
        path => InitLatent::File(PathBuf::from(path)),
    }
}

fn print_report(report: &RunReport, out: &Path) {
    println!("{} finished in {:.2}s, outputs in {}", report.command, report.seconds, out.display());
    if let Ok(text) = serde_json::to_string_pretty(&report.metrics) {
        println!("{text}");
    }
}

fn run_typed<T: Scalar>(cli: &Cli, cfg: &RunConfig, precision: Precision) -> Result<()> {
    let paths = &cfg.paths;
    let out_of = |o: &Option<PathBuf>| pick(o, &paths.out, "out", "out");
    let corpus_of = |c: &CorpusArg| pick(&c.corpus, &paths.corpus, "corpus", "corpus").and_then(|p| Corpus::open(&p));
    let ckpt_of = |c: &CkptArg| pick(&c.ckpt, &paths.checkpoint, "ckpt", "checkpoint").and_then(|p| Checkpoint::<T>::load(&p));
    match &cli.command {
        Command::Init { out } => {
            let out = out_of(out)?;
            let model = init_checkpoint(&cfg.model, cfg.seed, &out)?;
            cfg.save(&out.join("config.toml"))?;
            println!("initialized {} ({})", out.display(), pipeline::checkpoint::base_checksum(&model));
        }
        Command::GenScene {
            spec,
            scenes,
            references,
            out,
        } => {
            let out = out_of(out)?;
            let mut spec = match spec {
                Some(p) => CorpusSpec::load(p)?,
                None => CorpusSpec::default(),
            };
            spec.scenes = scenes.unwrap_or(spec.scenes);
            spec.references = references.unwrap_or(spec.references);
            let corpus = pipeline::gen_scene(&spec, &out)?;
            println!("wrote {} scenes to {}", corpus.len(), out.display());
        }
        Command::Adapt { corpus, scene, out } => {
            let out = out_of(out)?;
            let report = pipeline::adapt::<T>(cfg, &corpus_of(corpus)?, *scene, &out, precision)?;
            print_report(&report, &out);
        }
        Command::Generate {
            ckpt,
            reference,
            prompt,
            prompt_text,
            strategy,
            seed,
            init,
            subject,
            out,
        } => {
            let out = out_of(out)?;
            let prompt = match (prompt, prompt_text) {
                (Some(p), _) => std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?.trim().to_string(),
                (None, Some(t)) => t.clone(),
                (None, None) => return Err(Error::Config("--prompt FILE or --prompt-text is required".into())),
            };
            let opts = GenerateOptions {
                reference: ReferenceInput::from_path(reference),
                prompt,
                strategy: (*strategy).into(),
                seed: *seed,
                init: parse_init(init),
                subject: (*subject).into(),
            };
            let (report, _) = pipeline::generate(cfg, &ckpt_of(ckpt)?, &opts, &out, precision)?;
            print_report(&report, &out);
        }
        Command::MatchEval {
            corpus,
            ckpt,
            scene,
            subject,
            out,
        } => {
            let out = out_of(out)?;
            let opts = MatchEvalOptions {
                scene: *scene,
                subject: (*subject).into(),
                ..MatchEvalOptions::default()
            };
            let (report, _) = pipeline::match_eval(cfg, &ckpt_of(ckpt)?, &corpus_of(corpus)?, &opts, &out, precision)?;
            print_report(&report, &out);
        }
        Command::Ablate {
            corpus,
            ckpt,
            scenes,
            strategies,
            subject,
            out,
        } => {
            let out = out_of(out)?;
            let corpus = corpus_of(corpus)?;
            let opts = AblateOptions {
                scenes: if scenes.is_empty() {
                    (0..corpus.len()).collect()
                } else {
                    scenes.clone()
                },
                strategies: if strategies.is_empty() {
                    Strategy::ALL.to_vec()
                } else {
                    strategies.iter().map(|&s| s.into()).collect()
                },
                subject: (*subject).into(),
            };
            let (report, _) = pipeline::ablate(cfg, &ckpt_of(ckpt)?, &corpus, &opts, &out, precision)?;
            print_report(&report, &out);
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let precision = cfg.resolve_precision(cli.precision.map(Into::into));
    log::info!("precision {precision}");
    match precision {
        Precision::F32 => run_typed::<f32>(cli, &cfg, precision),
        Precision::F64 => run_typed::<f64>(cli, &cfg, precision),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
