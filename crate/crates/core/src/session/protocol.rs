//! Wire protocol: length-prefixed frames, each one canonical JSON document
//! with a `type` tag and `protocol_version`.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::data::{CorpusSource, Sufficiency};
use crate::evaluation::EvalReport;
use crate::inference::GenerationSettings;
use crate::model::{ModelConfig, Preset};
use crate::training::{Hyperparameters, StepMetrics};

pub const PROTOCOL_VERSION: u64 = 1;
/// Largest frame accepted; a 20 MB upload is about 27 MB once base64-encoded.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

/// Binary payload carried as base64 text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bytes(pub Vec<u8>);

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD
            .decode(text.as_bytes())
            .map(Bytes)
            .map_err(serde::de::Error::custom)
    }
}

/// Shape of a model without its vocabulary, which comes from data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl Architecture {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            context_len: self.context_len,
            vocab_size,
            mlp_ratio: self.mlp_ratio,
            rope_base: self.rope_base,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Preset(Preset),
    Config(Architecture),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartFrom {
    Untrained,
    Pretrained(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    ListCorpora,
    UploadCorpus {
        name: String,
        data: Bytes,
    },
    SelectCorpus {
        id: String,
    },
    ListPresets,
    ConfigureModel {
        model: ModelChoice,
        start: StartFrom,
    },
    StartTraining {
        #[serde(default)]
        hyperparameters: Hyperparameters,
    },
    Pause,
    Resume,
    Generate {
        prompt: String,
        #[serde(default)]
        settings: GenerationSettings,
    },
    Evaluate,
    Export,
    Import {
        data: Bytes,
    },
    Shutdown,
}

/// Command discriminant, used by the legality table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandKind {
    ListCorpora,
    UploadCorpus,
    SelectCorpus,
    ListPresets,
    ConfigureModel,
    StartTraining,
    Pause,
    Resume,
    Generate,
    Evaluate,
    Export,
    Import,
    Shutdown,
}

impl CommandKind {
    pub const ALL: [CommandKind; 13] = [
        CommandKind::ListCorpora,
        CommandKind::UploadCorpus,
        CommandKind::SelectCorpus,
        CommandKind::ListPresets,
        CommandKind::ConfigureModel,
        CommandKind::StartTraining,
        CommandKind::Pause,
        CommandKind::Resume,
        CommandKind::Generate,
        CommandKind::Evaluate,
        CommandKind::Export,
        CommandKind::Import,
        CommandKind::Shutdown,
    ];
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::ListCorpora => CommandKind::ListCorpora,
            Command::UploadCorpus { .. } => CommandKind::UploadCorpus,
            Command::SelectCorpus { .. } => CommandKind::SelectCorpus,
            Command::ListPresets => CommandKind::ListPresets,
            Command::ConfigureModel { .. } => CommandKind::ConfigureModel,
            Command::StartTraining { .. } => CommandKind::StartTraining,
            Command::Pause => CommandKind::Pause,
            Command::Resume => CommandKind::Resume,
            Command::Generate { .. } => CommandKind::Generate,
            Command::Evaluate => CommandKind::Evaluate,
            Command::Export => CommandKind::Export,
            Command::Import { .. } => CommandKind::Import,
            Command::Shutdown => CommandKind::Shutdown,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Training,
    Paused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    IllegalState,
    CorpusTooSmall,
    FormatError,
    InternalNumeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub id: String,
    pub name: String,
    pub source: CorpusSource,
    pub chars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetInfo {
    pub name: String,
    pub architecture: Architecture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelOrigin {
    Untrained,
    Pretrained,
    Imported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    CorpusList {
        corpora: Vec<CorpusSummary>,
    },
    CorpusInfo {
        id: String,
        name: String,
        token_count: usize,
        train_tokens: usize,
        holdout_tokens: usize,
        /// Present once a model is configured.
        sufficiency: Option<Sufficiency>,
    },
    PresetList {
        presets: Vec<PresetInfo>,
        pretrained: Vec<String>,
    },
    ModelInfo {
        config: ModelConfig,
        param_count: usize,
        origin: ModelOrigin,
        step: u64,
    },
    TrainingMetrics(StepMetrics),
    StateChanged {
        phase: Phase,
    },
    GeneratedToken {
        token: u32,
        text: String,
    },
    GenerationDone {
        tokens: usize,
        text: String,
    },
    EvalResult {
        report: EvalReport,
    },
    ExportReady {
        data: Bytes,
    },
    /// Acknowledges `Shutdown`; nothing follows it.
    Closed,
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl Event {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Event::Error {
            code,
            message: message.into(),
        }
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        match self {
            Event::Error { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// An event and, when it answers a command, that command's ordinal.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub reply_to: Option<u64>,
    pub event: Event,
}

fn canonical(mut value: Value, extra: &[(&str, Value)]) -> Vec<u8> {
    if let Value::Object(map) = &mut value {
        for (k, v) in extra {
            map.insert((*k).to_owned(), v.clone());
        }
    }
    // serde_json's map is ordered by key unless `preserve_order` is enabled
    serde_json::to_vec(&value).expect("value serializes")
}

pub fn encode_event(env: &Envelope) -> Vec<u8> {
    let value = serde_json::to_value(&env.event).expect("events serialize");
    let mut extra = vec![("protocol_version", Value::from(PROTOCOL_VERSION))];
    if let Some(id) = env.reply_to {
        extra.push(("reply_to", Value::from(id)));
    }
    canonical(value, &extra)
}

pub fn decode_event(doc: &[u8]) -> Result<Envelope, String> {
    let mut map = versioned_object(doc)?;
    let reply_to = match map.remove("reply_to") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or("reply_to must be an unsigned integer")?),
    };
    let event = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
    Ok(Envelope { reply_to, event })
}

pub fn encode_command(cmd: &Command) -> Vec<u8> {
    let value = serde_json::to_value(cmd).expect("commands serialize");
    canonical(value, &[("protocol_version", Value::from(PROTOCOL_VERSION))])
}

pub fn decode_command(doc: &[u8]) -> Result<Command, String> {
    let map = versioned_object(doc)?;
    serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())
}

fn versioned_object(doc: &[u8]) -> Result<Map<String, Value>, String> {
    let value: Value = serde_json::from_slice(doc).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(mut map) = value else {
        return Err("frame must hold a JSON object".into());
    };
    match map.remove("protocol_version").and_then(|v| v.as_u64()) {
        Some(PROTOCOL_VERSION) => Ok(map),
        Some(v) => Err(format!("unsupported protocol_version {v}")),
        None => Err("missing protocol_version".into()),
    }
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, doc: &[u8]) -> io::Result<()> {
    let len = u32::try_from(doc.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(doc)?;
    w.flush()
}

/// Outcome of reading one frame.
#[derive(Debug, PartialEq, Eq)]
pub enum Frame {
    Data(Vec<u8>),
    /// Declared length above [`MAX_FRAME_BYTES`]; the body was skipped.
    Oversized(usize),
    Eof,
}

pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> io::Result<Frame> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut header[filled..])? {
            0 if filled == 0 => return Ok(Frame::Eof),
            0 => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header")),
            n => filled += n,
        }
    }
    let len = u32::from_le_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Ok(Frame::Oversized(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Frame::Data(body))
}
