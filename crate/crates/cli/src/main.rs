use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use tinylm::data::{builtin_text, upload_text, Corpus, CorpusSource, Vocabulary, DEFAULT_HOLDOUT_FRACTION};
use tinylm::evaluation;
use tinylm::inference::{prompt_ids, Decoder, GenerationSettings, Generator};
use tinylm::model::Preset;
use tinylm::session::{self, DirStore, Session, PRETRAINED_BUNDLE_ID};
use tinylm::tensor::{Backend, CpuBackend};
use tinylm::training::{checkpoint, system_clock, Checkpoint, Hyperparameters, StepMetrics, TrainState, Trainer};
use tinylm::Error;

#[derive(Parser)]
#[command(name = "tinylm", version, about = "Train and run small character-level language models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch, or continue from --model.
    Train(TrainArgs),
    /// Continue a prompt with a trained model.
    Generate(GenerateArgs),
    /// Score a model on a corpus's holdout slice and print the report.
    Eval(EvalArgs),
    /// Build the bundled pretrained start state.
    ExportPretrained(ExportArgs),
    /// Run a session endpoint over TCP or stdio.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Builtin corpus id or path to a UTF-8 text file.
    #[arg(long)]
    corpus: String,
    #[arg(long, default_value = "tiny-2M")]
    preset: Preset,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f32,
    #[arg(long)]
    mixed_precision: bool,
    #[arg(long, default_value = "model.llmc")]
    out: PathBuf,
    /// Print a progress line every this many steps; 0 silences it.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    /// Always pick the most likely next character.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 0.8)]
    temperature: f32,
    /// 0 disables top-k truncation.
    #[arg(long, default_value_t = 40)]
    top_k: usize,
    #[arg(short = 'n', default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value = "pretrained/stories-tiny.llmc")]
    out: PathBuf,
    /// Override the recipe's step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    serve_addr: String,
    /// Speak the protocol on stdin/stdout instead of TCP.
    #[arg(long)]
    stdio: bool,
    /// Directory of pretrained `.llmc` bundles offered to sessions.
    #[arg(long, default_value = "pretrained")]
    pretrained_dir: PathBuf,
}

/// Failure with the exit code it maps to.
enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Data(_) | Error::Format(_) | Error::Io(_) => Failure::User(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn backend() -> Arc<dyn Backend> {
    Arc::new(CpuBackend)
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

/// A builtin id, or else a path to a text file.
fn corpus_text(spec: &str) -> Result<(String, String, CorpusSource), Failure> {
    if let Some(text) = builtin_text(spec) {
        return Ok((spec.to_owned(), text.to_owned(), CorpusSource::Builtin));
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Failure::User(format!("{spec:?} is neither a builtin corpus nor a file")));
    }
    let text = upload_text(&read_file(path)?)?;
    Ok((spec.to_owned(), text, CorpusSource::Uploaded))
}

fn load_model(path: &Path) -> Result<Checkpoint, Failure> {
    checkpoint::import(&read_file(path)?).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn report_progress(m: &StepMetrics, every: u64, total: u64) {
    if every > 0 && (m.step % every == 0 || m.step == total) {
        eprintln!(
            "step {:>5}  loss {:.4}  lr {:.2e}  {:.0} tok/s{}",
            m.step,
            m.loss,
            m.lr,
            m.tokens_per_sec,
            if m.skipped { "  (skipped: overflow)" } else { "" }
        );
    }
}

fn train(args: TrainArgs) -> Outcome {
    let (name, text, source) = corpus_text(&args.corpus)?;
    let hyper = Hyperparameters {
        batch_size: args.batch,
        lr_max: args.lr,
        max_steps: args.steps,
        seed: args.seed,
        mixed_precision: args.mixed_precision,
        ..Default::default()
    };
    let (cfg, vocab, state) = match &args.model {
        Some(path) => {
            let ckpt = load_model(path)?;
            let state = TrainState::from_checkpoint(&ckpt, &hyper);
            (ckpt.config, ckpt.vocab, state)
        }
        None => {
            let vocab = Vocabulary::build(&text)?;
            let cfg = args.preset.config(vocab.size());
            let weights = tinylm::model::ModelWeights::init(&cfg, args.seed)?;
            let state = TrainState::new(&cfg, weights, &hyper);
            (cfg, vocab, state)
        }
    };
    let corpus = Corpus::new(name, text, &vocab, DEFAULT_HOLDOUT_FRACTION, source)?;
    let suff = corpus.sufficiency(cfg.param_count());
    eprintln!(
        "{} parameters, {} training tokens ({:.3} per parameter, {:?})",
        cfg.param_count(),
        corpus.train_tokens().len(),
        suff.tokens_per_parameter,
        suff.verdict
    );
    // the schedule spans the whole run, including steps taken before --model was saved
    let target = state.step + args.steps;
    let hyper = Hyperparameters {
        max_steps: target,
        ..hyper
    };
    let mut trainer = Trainer::new(cfg, state, corpus.train_arc(), hyper, backend())?;
    while trainer.state().step < target {
        let m = trainer.train_step()?;
        report_progress(&m, args.log_every, target);
    }
    write_file(&args.out, &checkpoint::export(&trainer.state().checkpoint(&cfg, &vocab)))?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn generate(args: GenerateArgs) -> Outcome {
    let ckpt = load_model(&args.model)?;
    let settings = if args.greedy {
        GenerationSettings::greedy(args.n)
    } else {
        if !(args.temperature > 0.0) {
            return Err(Failure::User("--temperature must be positive; use --greedy for argmax".into()));
        }
        GenerationSettings {
            temperature: args.temperature,
            top_k: (args.top_k > 0).then_some(args.top_k),
            max_new_tokens: args.n,
            seed: args.seed,
        }
    };
    let decoder = Decoder::new(Arc::new(ckpt.weights), ckpt.config, backend())?;
    let prompt = prompt_ids(&ckpt.vocab, &args.prompt);
    let mut out = std::io::stdout().lock();
    let io = |e: std::io::Error| Failure::User(e.to_string());
    for step in Generator::new(&decoder, &prompt, settings)? {
        write!(out, "{}", ckpt.vocab.symbol(step?.token)?).map_err(io)?;
        out.flush().map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let ckpt = load_model(&args.model)?;
    let (name, text, source) = corpus_text(&args.corpus)?;
    let corpus = Corpus::new(name, text, &ckpt.vocab, DEFAULT_HOLDOUT_FRACTION, source)?;
    let report = evaluation::evaluate(&Arc::new(ckpt.weights), &ckpt.config, &corpus, backend())?;
    println!("{}", report.to_canonical_json());
    Ok(())
}

fn export_pretrained(args: ExportArgs) -> Outcome {
    let mut recipe = session::pretrained_recipe();
    if let Some(steps) = args.steps {
        recipe.hyperparameters.max_steps = steps;
    }
    eprintln!(
        "training {} on {} for {} steps (seed {})",
        recipe.preset, recipe.corpus, recipe.hyperparameters.max_steps, recipe.hyperparameters.seed
    );
    let total = recipe.hyperparameters.max_steps;
    let ckpt = session::build_pretrained(&recipe, backend(), |m| report_progress(m, 50, total))?;
    write_file(&args.out, &checkpoint::export(&ckpt))?;
    eprintln!("wrote {} (bundle id {PRETRAINED_BUNDLE_ID:?} when named {PRETRAINED_BUNDLE_ID}.llmc)", args.out.display());
    Ok(())
}

fn serve(args: ServeArgs) -> Outcome {
    let io = |e: std::io::Error| Failure::Internal(e.to_string());
    let new_session = || Session::new(Box::new(DirStore(args.pretrained_dir.clone())), backend());
    if args.stdio {
        return session::serve(new_session(), std::io::stdin(), std::io::stdout().lock(), system_clock()).map_err(io);
    }
    let listener = TcpListener::bind(&args.serve_addr).map_err(|e| Failure::User(format!("{}: {e}", args.serve_addr)))?;
    eprintln!("listening on {}", listener.local_addr().map_err(io)?);
    // one session at a time, mirroring one learner per endpoint
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        eprintln!("session opened for {peer}");
        let reader = stream.try_clone().map_err(io)?;
        if let Err(e) = session::serve(new_session(), reader, stream, system_clock()) {
            eprintln!("session for {peer} ended: {e}");
        } else {
            eprintln!("session for {peer} closed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Cmd::Train(a) => train(a),
        Cmd::Generate(a) => generate(a),
        Cmd::Eval(a) => eval(a),
        Cmd::ExportPretrained(a) => export_pretrained(a),
        Cmd::Serve(a) => serve(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
