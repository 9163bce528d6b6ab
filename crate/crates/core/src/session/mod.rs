//! Command/event state machine tying data, model, training, generation and
//! evaluation together, plus a transport-agnostic serve loop.

pub mod protocol;
mod throttle;

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;

pub use protocol::{
    Architecture, Bytes, Command, CommandKind, CorpusSummary, Envelope, ErrorCode, Event, ModelChoice,
    ModelOrigin, Phase, PresetInfo, StartFrom,
};
pub use throttle::Throttle;

use crate::data::{builtin_text, upload_text, Corpus, CorpusSource, Vocabulary, BUILTIN_CORPORA, DEFAULT_HOLDOUT_FRACTION};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::inference::{prompt_ids, Decoder, GenerationSettings, Generator};
use crate::model::{ModelConfig, ModelWeights, Preset};
use crate::training::{checkpoint, system_clock, Checkpoint, Clock, Hyperparameters, TrainState, Trainer};
use crate::tensor::{Backend, CpuBackend};

/// Whether `kind` is accepted in `phase`. Commands that need a model or a
/// corpus are additionally rejected when those are missing.
pub fn is_legal(phase: Phase, kind: CommandKind) -> bool {
    use CommandKind::*;
    match kind {
        ListCorpora | UploadCorpus | ListPresets | Generate | Evaluate | Export | Shutdown => true,
        SelectCorpus | ConfigureModel | Import => phase != Phase::Training,
        StartTraining => phase == Phase::Idle,
        Pause => phase == Phase::Training,
        Resume => phase == Phase::Paused,
    }
}

/// Source of pretrained checkpoints addressed by bundle id.
pub trait PretrainedStore: Send {
    fn ids(&self) -> Vec<String>;
    fn load(&self, id: &str) -> Result<Vec<u8>>;
}

/// Bundles stored as `<dir>/<id>.llmc`.
pub struct DirStore(pub PathBuf);

impl PretrainedStore for DirStore {
    fn ids(&self) -> Vec<String> {
        let Ok(entries) = std::fs::read_dir(&self.0) else {
            return Vec::new();
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let path = e.path();
                (path.extension()? == checkpoint::EXTENSION).then(|| path.file_stem()?.to_str().map(str::to_owned))?
            })
            .collect();
        ids.sort();
        ids
    }

    fn load(&self, id: &str) -> Result<Vec<u8>> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Data(format!("invalid bundle id {id:?}")));
        }
        let path = self.0.join(format!("{id}.{}", checkpoint::EXTENSION));
        std::fs::read(&path).map_err(|e| Error::Data(format!("pretrained bundle {id:?}: {e}")))
    }
}

/// In-memory bundles, for embedders without a filesystem and for tests.
#[derive(Default)]
pub struct MemoryStore(pub HashMap<String, Vec<u8>>);

impl PretrainedStore for MemoryStore {
    fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.0.keys().cloned().collect();
        ids.sort();
        ids
    }

    fn load(&self, id: &str) -> Result<Vec<u8>> {
        self.0
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no pretrained bundle {id:?}")))
    }
}

struct StoredCorpus {
    name: String,
    text: Arc<str>,
    source: CorpusSource,
}

struct ModelSlot {
    cfg: ModelConfig,
    vocab: Vocabulary,
    origin: ModelOrigin,
    /// Between runs the state lives here; during a run it moves into the trainer.
    state: Option<TrainState>,
    trainer: Option<Trainer>,
}

impl ModelSlot {
    fn weights(&self) -> &ModelWeights {
        match (&self.trainer, &self.state) {
            (Some(t), _) => t.weights(),
            (None, Some(s)) => &s.weights,
            (None, None) => unreachable!("slot always holds a state or a trainer"),
        }
    }

    fn step(&self) -> u64 {
        match (&self.trainer, &self.state) {
            (Some(t), _) => t.state().step,
            (None, Some(s)) => s.step,
            _ => 0,
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        match (&self.trainer, &self.state) {
            (Some(t), _) => t.state().checkpoint(&self.cfg, &self.vocab),
            (None, Some(s)) => s.checkpoint(&self.cfg, &self.vocab),
            _ => unreachable!("slot always holds a state or a trainer"),
        }
    }

    /// Ends the run, keeping what it learned.
    fn stop(&mut self) {
        if let Some(t) = self.trainer.take() {
            self.state = Some(t.into_state());
        }
    }
}

fn code_for(err: &Error) -> ErrorCode {
    match err {
        Error::NonFinite { .. } | Error::LossScaleUnderflow => ErrorCode::InternalNumeric,
        _ => ErrorCode::FormatError,
    }
}

fn illegal(why: impl Into<String>) -> Vec<Event> {
    vec![Event::error(ErrorCode::IllegalState, why)]
}

/// One learner's session. Commands are handled synchronously; training
/// advances one step per call to [`Session::step`].
pub struct Session {
    phase: Phase,
    corpora: BTreeMap<String, StoredCorpus>,
    uploads: usize,
    selected: Option<String>,
    model: Option<ModelSlot>,
    pretrained: Box<dyn PretrainedStore>,
    backend: Arc<dyn Backend>,
    clock: Clock,
    commands_seen: u64,
}

impl Default for Session {
    fn default() -> Self {
        Self::new(Box::new(MemoryStore::default()), Arc::new(CpuBackend))
    }
}

impl Session {
    pub fn new(pretrained: Box<dyn PretrainedStore>, backend: Arc<dyn Backend>) -> Self {
        let corpora = BUILTIN_CORPORA
            .iter()
            .map(|(id, name, text)| {
                (
                    id.to_string(),
                    StoredCorpus {
                        name: name.to_string(),
                        text: Arc::from(*text),
                        source: CorpusSource::Builtin,
                    },
                )
            })
            .collect();
        Self {
            phase: Phase::Idle,
            corpora,
            uploads: 0,
            selected: None,
            model: None,
            pretrained,
            backend,
            clock: system_clock(),
            commands_seen: 0,
        }
    }

    /// Replaces the clock used for throughput figures.
    pub fn set_clock(&mut self, clock: Clock) {
        self.clock = clock;
        if let Some(t) = self.model.as_mut().and_then(|m| m.trainer.as_mut()) {
            t.set_clock(self.clock.clone());
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn selected_corpus(&self) -> Option<&str> {
        self.selected.as_deref()
    }

    pub fn model_config(&self) -> Option<&ModelConfig> {
        self.model.as_ref().map(|m| &m.cfg)
    }

    pub fn model_step(&self) -> Option<u64> {
        self.model.as_ref().map(ModelSlot::step)
    }

    /// A frozen copy of the current model, for embedders that want to
    /// inspect it directly.
    pub fn model_snapshot(&self) -> Option<(ModelConfig, Vocabulary, Arc<ModelWeights>)> {
        self.model
            .as_ref()
            .map(|m| (m.cfg, m.vocab.clone(), Arc::new(m.weights().clone())))
    }

    /// Handles one command; every command yields at least one event.
    pub fn handle(&mut self, cmd: Command) -> Vec<Envelope> {
        self.commands_seen += 1;
        let id = self.commands_seen;
        let events = if !is_legal(self.phase, cmd.kind()) {
            illegal(format!("{:?} is not allowed while {:?}", cmd.kind(), self.phase))
        } else {
            self.dispatch(cmd)
        };
        debug_assert!(!events.is_empty());
        events
            .into_iter()
            .map(|event| Envelope {
                reply_to: Some(id),
                event,
            })
            .collect()
    }

    /// Runs one training step when training; otherwise does nothing.
    pub fn step(&mut self) -> Vec<Envelope> {
        if self.phase != Phase::Training {
            return Vec::new();
        }
        let slot = self.model.as_mut().expect("training implies a model");
        let trainer = slot.trainer.as_mut().expect("training implies a trainer");
        let mut events = Vec::new();
        match trainer.train_step() {
            Ok(metrics) => {
                events.push(Event::TrainingMetrics(metrics));
                if metrics.step >= trainer.hyperparameters().max_steps {
                    slot.stop();
                    self.phase = Phase::Idle;
                    events.push(Event::StateChanged { phase: Phase::Idle });
                }
            }
            Err(e) => {
                slot.stop();
                self.phase = Phase::Idle;
                events.push(Event::error(code_for(&e), format!("training aborted: {e}")));
                events.push(Event::StateChanged { phase: Phase::Idle });
            }
        }
        events
            .into_iter()
            .map(|event| Envelope { reply_to: None, event })
            .collect()
    }

    fn dispatch(&mut self, cmd: Command) -> Vec<Event> {
        match cmd {
            Command::ListCorpora => vec![self.corpus_list()],
            Command::UploadCorpus { name, data } => self.upload(name, &data.0),
            Command::SelectCorpus { id } => self.select(id),
            Command::ListPresets => vec![self.preset_list()],
            Command::ConfigureModel { model, start } => self.configure(model, start),
            Command::StartTraining { hyperparameters } => self.start(hyperparameters),
            Command::Pause => {
                self.phase = Phase::Paused;
                vec![Event::StateChanged { phase: Phase::Paused }]
            }
            Command::Resume => {
                self.phase = Phase::Training;
                vec![Event::StateChanged { phase: Phase::Training }]
            }
            Command::Generate { prompt, settings } => self.generate(&prompt, settings),
            Command::Evaluate => self.evaluate(),
            Command::Export => match &self.model {
                Some(slot) => vec![Event::ExportReady {
                    data: Bytes(checkpoint::export(&slot.checkpoint())),
                }],
                None => illegal("no model to export"),
            },
            Command::Import { data } => self.import(&data.0),
            Command::Shutdown => {
                if let Some(slot) = &mut self.model {
                    slot.stop();
                }
                self.phase = Phase::Idle;
                vec![Event::Closed]
            }
        }
    }

    fn corpus_list(&self) -> Event {
        Event::CorpusList {
            corpora: self
                .corpora
                .iter()
                .map(|(id, c)| CorpusSummary {
                    id: id.clone(),
                    name: c.name.clone(),
                    source: c.source,
                    chars: c.text.chars().count(),
                })
                .collect(),
        }
    }

    fn preset_list(&self) -> Event {
        Event::PresetList {
            presets: Preset::ALL
                .iter()
                .map(|p| {
                    let c = p.config(2);
                    PresetInfo {
                        name: p.name().to_owned(),
                        architecture: Architecture {
                            n_layers: c.n_layers,
                            n_heads: c.n_heads,
                            d_model: c.d_model,
                            context_len: c.context_len,
                            mlp_ratio: c.mlp_ratio,
                            rope_base: c.rope_base,
                        },
                    }
                })
                .collect(),
            pretrained: self.pretrained.ids(),
        }
    }

    fn upload(&mut self, name: String, bytes: &[u8]) -> Vec<Event> {
        let text = match upload_text(bytes) {
            Ok(t) => t,
            Err(e) => return vec![Event::error(ErrorCode::FormatError, e.to_string())],
        };
        self.uploads += 1;
        let id = format!("upload-{}", self.uploads);
        self.corpora.insert(
            id.clone(),
            StoredCorpus {
                name,
                text: text.into(),
                source: CorpusSource::Uploaded,
            },
        );
        vec![self.corpus_info(&id)]
    }

    fn select(&mut self, id: String) -> Vec<Event> {
        if !self.corpora.contains_key(&id) {
            return vec![Event::error(ErrorCode::FormatError, format!("unknown corpus {id:?}"))];
        }
        self.selected = Some(id.clone());
        vec![self.corpus_info(&id)]
    }

    /// The corpus encoded against the active model's vocabulary, or its
    /// own when no model is configured.
    fn encoded(&self, id: &str) -> Corpus {
        let stored = &self.corpora[id];
        let own;
        let vocab = match &self.model {
            Some(slot) => &slot.vocab,
            None => {
                own = Vocabulary::build(&stored.text).expect("stored corpora are non-empty");
                &own
            }
        };
        Corpus::new(
            stored.name.clone(),
            stored.text.clone(),
            vocab,
            DEFAULT_HOLDOUT_FRACTION,
            stored.source,
        )
        .expect("default holdout fraction is valid")
    }

    fn corpus_info(&self, id: &str) -> Event {
        let corpus = self.encoded(id);
        Event::CorpusInfo {
            id: id.to_owned(),
            name: corpus.name().to_owned(),
            token_count: corpus.tokens().len(),
            train_tokens: corpus.train_tokens().len(),
            holdout_tokens: corpus.holdout_tokens().len(),
            sufficiency: self.model.as_ref().map(|m| corpus.sufficiency(m.cfg.param_count())),
        }
    }

    fn model_info(&self) -> Event {
        let slot = self.model.as_ref().expect("called with a model");
        Event::ModelInfo {
            config: slot.cfg,
            param_count: slot.cfg.param_count(),
            origin: slot.origin,
            step: slot.step(),
        }
    }

    fn configure(&mut self, choice: ModelChoice, start: StartFrom) -> Vec<Event> {
        let abandoning = self.phase == Phase::Paused;
        let slot = match start {
            StartFrom::Untrained => {
                let Some(id) = &self.selected else {
                    return illegal("select a corpus before configuring an untrained model");
                };
                let vocab = Vocabulary::build(&self.corpora[id].text).expect("stored corpora are non-empty");
                let cfg = match choice {
                    ModelChoice::Preset(p) => p.config(vocab.size()),
                    ModelChoice::Config(a) => a.with_vocab(vocab.size()),
                };
                let weights = match ModelWeights::init(&cfg, 0) {
                    Ok(w) => w,
                    Err(e) => return vec![Event::error(ErrorCode::FormatError, e.to_string())],
                };
                ModelSlot {
                    cfg,
                    vocab,
                    origin: ModelOrigin::Untrained,
                    state: Some(TrainState::new(&cfg, weights, &Hyperparameters::default())),
                    trainer: None,
                }
            }
            StartFrom::Pretrained(bundle) => {
                let ckpt = match self.pretrained.load(&bundle).and_then(|b| checkpoint::import(&b)) {
                    Ok(c) => c,
                    Err(e) => return vec![Event::error(ErrorCode::FormatError, e.to_string())],
                };
                let matches = match choice {
                    ModelChoice::Preset(p) => p.config(ckpt.config.vocab_size) == ckpt.config,
                    ModelChoice::Config(a) => a.with_vocab(ckpt.config.vocab_size) == ckpt.config,
                };
                if !matches {
                    return vec![Event::error(
                        ErrorCode::FormatError,
                        format!("bundle {bundle:?} does not have the requested architecture"),
                    )];
                }
                ModelSlot {
                    cfg: ckpt.config,
                    origin: ModelOrigin::Pretrained,
                    state: Some(TrainState::from_checkpoint(&ckpt, &Hyperparameters::default())),
                    vocab: ckpt.vocab,
                    trainer: None,
                }
            }
        };
        self.install(slot, abandoning)
    }

    fn install(&mut self, slot: ModelSlot, abandoning: bool) -> Vec<Event> {
        self.model = Some(slot);
        self.phase = Phase::Idle;
        let mut events = vec![self.model_info()];
        if let Some(id) = self.selected.clone() {
            events.push(self.corpus_info(&id));
        }
        if abandoning {
            events.push(Event::StateChanged { phase: Phase::Idle });
        }
        events
    }

    fn import(&mut self, bytes: &[u8]) -> Vec<Event> {
        let ckpt = match checkpoint::import(bytes) {
            Ok(c) => c,
            Err(e) => return vec![Event::error(ErrorCode::FormatError, e.to_string())],
        };
        let abandoning = self.phase == Phase::Paused;
        let slot = ModelSlot {
            cfg: ckpt.config,
            origin: ModelOrigin::Imported,
            state: Some(TrainState::from_checkpoint(&ckpt, &Hyperparameters::default())),
            vocab: ckpt.vocab,
            trainer: None,
        };
        self.install(slot, abandoning)
    }

    fn start(&mut self, hyper: Hyperparameters) -> Vec<Event> {
        let Some(id) = self.selected.clone() else {
            return illegal("select a corpus before training");
        };
        if self.model.is_none() {
            return illegal("configure a model before training");
        }
        let corpus = self.encoded(&id);
        let slot = self.model.as_mut().expect("checked above");
        if corpus.train_tokens().len() < slot.cfg.context_len + 1 {
            return vec![Event::error(
                ErrorCode::CorpusTooSmall,
                format!(
                    "training slice has {} tokens; one window needs {}",
                    corpus.train_tokens().len(),
                    slot.cfg.context_len + 1
                ),
            )];
        }
        let previous = slot.state.take().expect("idle slot holds its state");
        // a new run keeps the weights and step count but not the moments
        let mut state = TrainState::new(&slot.cfg, previous.weights.clone(), &hyper);
        state.step = previous.step;
        state.tokens_seen = previous.tokens_seen;
        match Trainer::new(slot.cfg, state, corpus.train_arc(), hyper, self.backend.clone()) {
            Ok(mut trainer) => {
                trainer.set_clock(self.clock.clone());
                slot.trainer = Some(trainer);
                self.phase = Phase::Training;
                vec![Event::StateChanged { phase: Phase::Training }]
            }
            Err(e) => {
                slot.state = Some(previous);
                vec![Event::error(code_for(&e), e.to_string())]
            }
        }
    }

    fn generate(&mut self, prompt: &str, settings: GenerationSettings) -> Vec<Event> {
        let Some(slot) = &self.model else {
            return illegal("no model to generate with");
        };
        // a snapshot, so generation never observes a half-applied update
        let snapshot = Arc::new(slot.weights().clone());
        let result = (|| -> Result<Vec<Event>> {
            let decoder = Decoder::new(snapshot, slot.cfg, self.backend.clone())?;
            let ids = prompt_ids(&slot.vocab, prompt);
            let mut events = Vec::new();
            let mut text = String::new();
            for step in Generator::new(&decoder, &ids, settings)? {
                let step = step?;
                let piece = slot.vocab.symbol(step.token)?.to_string();
                text.push_str(&piece);
                events.push(Event::GeneratedToken {
                    token: step.token,
                    text: piece,
                });
            }
            events.push(Event::GenerationDone {
                tokens: events.len(),
                text,
            });
            Ok(events)
        })();
        result.unwrap_or_else(|e| vec![Event::error(code_for(&e), e.to_string())])
    }

    fn evaluate(&mut self) -> Vec<Event> {
        let Some(id) = self.selected.clone() else {
            return illegal("select a corpus to evaluate against");
        };
        let Some(slot) = &self.model else {
            return illegal("no model to evaluate");
        };
        let corpus = self.encoded(&id);
        let snapshot = Arc::new(slot.weights().clone());
        match evaluation::evaluate(&snapshot, &slot.cfg, &corpus, self.backend.clone()) {
            Ok(report) => vec![Event::EvalResult { report }],
            Err(Error::Data(msg)) => vec![Event::error(ErrorCode::CorpusTooSmall, msg)],
            Err(e) => vec![Event::error(code_for(&e), e.to_string())],
        }
    }
}

enum Incoming {
    Command(Command),
    Malformed(String),
    Closed,
}

fn reader_loop<R: Read>(mut reader: R, tx: mpsc::Sender<Incoming>) {
    loop {
        let msg = match protocol::read_frame(&mut reader) {
            Ok(protocol::Frame::Data(doc)) => match protocol::decode_command(&doc) {
                Ok(cmd) => Incoming::Command(cmd),
                Err(e) => Incoming::Malformed(e),
            },
            Ok(protocol::Frame::Oversized(len)) => {
                Incoming::Malformed(format!("frame of {len} bytes exceeds the limit"))
            }
            Ok(protocol::Frame::Eof) | Err(_) => {
                let _ = tx.send(Incoming::Closed);
                return;
            }
        };
        if tx.send(msg).is_err() {
            return;
        }
    }
}

/// Serves one session over a framed byte stream until `Shutdown` or the
/// end of input. Commands are read on a separate thread and handled between
/// training steps; metrics are throttled to ten per second.
pub fn serve<R, W>(mut session: Session, reader: R, mut writer: W, clock: Clock) -> std::io::Result<()>
where
    R: Read + Send + 'static,
    W: Write,
{
    session.set_clock(clock.clone());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || reader_loop(reader, tx));
    let mut throttle = Throttle::ten_hertz();

    let send = |w: &mut W, env: &Envelope| protocol::write_frame(w, &protocol::encode_event(env));
    loop {
        let incoming = if session.phase() == Phase::Training {
            match rx.try_recv() {
                Ok(msg) => Some(msg),
                Err(mpsc::TryRecvError::Empty) => None,
                Err(mpsc::TryRecvError::Disconnected) => Some(Incoming::Closed),
            }
        } else {
            if let Some(env) = throttle.flush(clock()) {
                send(&mut writer, &env)?;
            }
            Some(rx.recv().unwrap_or(Incoming::Closed))
        };

        match incoming {
            Some(Incoming::Command(cmd)) => {
                let shutdown = matches!(cmd, Command::Shutdown);
                let replies = session.handle(cmd);
                // metrics from before a state change must precede it
                if let Some(env) = throttle.flush(clock()) {
                    send(&mut writer, &env)?;
                }
                for env in &replies {
                    send(&mut writer, env)?;
                }
                if shutdown {
                    return Ok(());
                }
            }
            Some(Incoming::Malformed(msg)) => {
                let env = Envelope {
                    reply_to: None,
                    event: Event::error(ErrorCode::FormatError, format!("frame skipped: {msg}")),
                };
                send(&mut writer, &env)?;
            }
            Some(Incoming::Closed) => {
                if let Some(env) = throttle.flush(clock()) {
                    send(&mut writer, &env)?;
                }
                return Ok(());
            }
            None => {
                for env in session.step() {
                    if matches!(env.event, Event::TrainingMetrics(_)) {
                        if let Some(out) = throttle.offer(env, clock()) {
                            send(&mut writer, &out)?;
                        }
                    } else {
                        if let Some(out) = throttle.flush(clock()) {
                            send(&mut writer, &out)?;
                        }
                        send(&mut writer, &env)?;
                    }
                }
            }
        }
    }
}

/// The recipe behind the bundled pretrained start state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainedRecipe {
    pub corpus: &'static str,
    pub preset: Preset,
    pub hyperparameters: Hyperparameters,
}

pub const PRETRAINED_BUNDLE_ID: &str = "stories-tiny";

pub fn pretrained_recipe() -> PretrainedRecipe {
    PretrainedRecipe {
        corpus: "stories",
        preset: Preset::Tiny2M,
        hyperparameters: Hyperparameters {
            batch_size: 16,
            max_steps: 600,
            seed: 1234,
            ..Hyperparameters::default()
        },
    }
}

/// Trains the recipe and returns the checkpoint. `progress` sees each step.
pub fn build_pretrained(
    recipe: &PretrainedRecipe,
    backend: Arc<dyn Backend>,
    mut progress: impl FnMut(&crate::training::StepMetrics),
) -> Result<Checkpoint> {
    let text = builtin_text(recipe.corpus).ok_or_else(|| Error::Data(format!("no builtin corpus {:?}", recipe.corpus)))?;
    let vocab = Vocabulary::build(text)?;
    let corpus = Corpus::builtin(recipe.corpus, &vocab)?;
    let cfg = recipe.preset.config(vocab.size());
    let mut trainer = Trainer::from_scratch(cfg, corpus.train_arc(), recipe.hyperparameters, backend)?;
    for _ in 0..recipe.hyperparameters.max_steps {
        let m = trainer.train_step()?;
        progress(&m);
    }
    Ok(trainer.state().checkpoint(&cfg, &vocab))
}
