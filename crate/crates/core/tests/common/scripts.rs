//! Session scripts shared by the session and acceptance suites.

use tinylm::inference::GenerationSettings;
use tinylm::session::protocol;
use tinylm::session::{
    is_legal, Architecture, Bytes, Command, CommandKind, Envelope, ErrorCode, Event, ModelChoice, Phase, Session,
    StartFrom,
};
use tinylm::training::Hyperparameters;

pub fn small() -> ModelChoice {
    ModelChoice::Config(Architecture {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        context_len: 16,
        mlp_ratio: 4,
        rope_base: 10_000.0,
    })
}

pub fn quick_run(max_steps: u64) -> Hyperparameters {
    Hyperparameters {
        batch_size: 2,
        max_steps,
        ..Default::default()
    }
}

/// A session with a corpus and model, brought to `phase`.
pub fn session_in(phase: Phase) -> Session {
    let mut s = Session::default();
    s.handle(Command::SelectCorpus { id: "stories".into() });
    s.handle(Command::ConfigureModel {
        model: small(),
        start: StartFrom::Untrained,
    });
    if phase != Phase::Idle {
        s.handle(Command::StartTraining {
            hyperparameters: quick_run(1000),
        });
        s.step();
    }
    if phase == Phase::Paused {
        s.handle(Command::Pause);
    }
    assert_eq!(s.phase(), phase);
    s
}

fn sample(kind: CommandKind, export: &[u8]) -> Command {
    match kind {
        CommandKind::ListCorpora => Command::ListCorpora,
        CommandKind::UploadCorpus => Command::UploadCorpus {
            name: "notes".into(),
            data: Bytes("the cat sat on the mat. ".repeat(60).into_bytes()),
        },
        CommandKind::SelectCorpus => Command::SelectCorpus { id: "shakespeare".into() },
        CommandKind::ListPresets => Command::ListPresets,
        CommandKind::ConfigureModel => Command::ConfigureModel {
            model: small(),
            start: StartFrom::Untrained,
        },
        CommandKind::StartTraining => Command::StartTraining {
            hyperparameters: quick_run(1000),
        },
        CommandKind::Pause => Command::Pause,
        CommandKind::Resume => Command::Resume,
        CommandKind::Generate => Command::Generate {
            prompt: "Once".into(),
            settings: GenerationSettings::greedy(5),
        },
        CommandKind::Evaluate => Command::Evaluate,
        CommandKind::Export => Command::Export,
        CommandKind::Import => Command::Import { data: Bytes(export.to_vec()) },
        CommandKind::Shutdown => Command::Shutdown,
    }
}

/// The table front ends mirror when enabling controls.
const TABLE: [(CommandKind, [bool; 3]); 13] = {
    use CommandKind::*;
    // idle, training, paused
    [
        (ListCorpora, [true, true, true]),
        (UploadCorpus, [true, true, true]),
        (SelectCorpus, [true, false, true]),
        (ListPresets, [true, true, true]),
        (ConfigureModel, [true, false, true]),
        (StartTraining, [true, false, false]),
        (Pause, [false, true, false]),
        (Resume, [false, false, true]),
        (Generate, [true, true, true]),
        (Evaluate, [true, true, true]),
        (Export, [true, true, true]),
        (Import, [true, false, true]),
        (Shutdown, [true, true, true]),
    ]
};

const PHASES: [Phase; 3] = [Phase::Idle, Phase::Training, Phase::Paused];

/// Checks every (phase, command) pair; returns the number checked.
pub fn check_legality_table() -> usize {
    let export = {
        let mut s = session_in(Phase::Idle);
        match s.handle(Command::Export).remove(0).event {
            Event::ExportReady { data } => data.0,
            other => panic!("{other:?}"),
        }
    };
    assert_eq!(TABLE.len(), CommandKind::ALL.len());
    let mut checked = 0;
    for (kind, row) in TABLE {
        for (phase, legal) in PHASES.into_iter().zip(row) {
            assert_eq!(is_legal(phase, kind), legal, "{kind:?} in {phase:?}");
            let mut s = session_in(phase);
            let step_before = s.model_step();
            let replies = s.handle(sample(kind, &export));
            assert!(!replies.is_empty(), "{kind:?} in {phase:?} produced no event");
            assert!(replies.iter().all(|r| r.reply_to.is_some()));
            let rejected = replies[0].event.error_code() == Some(ErrorCode::IllegalState);
            assert_eq!(rejected, !legal, "{kind:?} in {phase:?}: {:?}", replies[0].event);
            if !legal {
                assert_eq!(replies.len(), 1);
                assert_eq!(s.phase(), phase, "rejected command changed the phase");
                assert_eq!(s.model_step(), step_before);
            } else {
                assert!(
                    replies.iter().all(|r| r.event.error_code().is_none()),
                    "{kind:?} in {phase:?}: {replies:?}"
                );
            }
            checked += 1;
        }
    }
    checked
}

/// Payloads of a run, without throughput, which depends on the wall clock.
pub fn payloads(events: &[Envelope]) -> Vec<serde_json::Value> {
    events
        .iter()
        .map(|e| {
            let mut v: serde_json::Value = serde_json::from_slice(&protocol::encode_event(e)).unwrap();
            if let Some(obj) = v.as_object_mut() {
                obj.remove("tokens_per_sec");
            }
            v
        })
        .collect()
}

/// Upload, configure, train, evaluate, export, import, generate.
pub fn scripted_session(model: ModelChoice, steps: u64, batch_size: usize) -> Vec<Envelope> {
    let corpus: String = "a cat. a dog. a cow. the end. "
        .chars()
        .cycle()
        .take(1024)
        .collect();
    let mut s = Session::default();
    let mut log = Vec::new();
    log.extend(s.handle(Command::UploadCorpus {
        name: "pets".into(),
        data: Bytes(corpus.into_bytes()),
    }));
    log.extend(s.handle(Command::SelectCorpus { id: "upload-1".into() }));
    log.extend(s.handle(Command::ConfigureModel {
        model,
        start: StartFrom::Untrained,
    }));
    log.extend(s.handle(Command::StartTraining {
        hyperparameters: Hyperparameters {
            batch_size,
            max_steps: steps,
            seed: 42,
            ..Default::default()
        },
    }));
    while s.phase() == Phase::Training {
        log.extend(s.step());
    }
    log.extend(s.handle(Command::Evaluate));
    let exported = s.handle(Command::Export);
    let Event::ExportReady { data } = &exported[0].event else { panic!("{exported:?}") };
    let data = data.clone();
    log.extend(exported);
    log.extend(s.handle(Command::Import { data }));
    log.extend(s.handle(Command::Generate {
        prompt: "a c".into(),
        settings: GenerationSettings::greedy(20),
    }));
    log
}

pub fn replay_matches(model: ModelChoice, steps: u64, batch_size: usize) -> (bool, usize) {
    let a = scripted_session(model, steps, batch_size);
    let b = scripted_session(model, steps, batch_size);
    let steps_seen: Vec<u64> = a
        .iter()
        .filter_map(|e| match &e.event {
            Event::TrainingMetrics(m) => Some(m.step),
            _ => None,
        })
        .collect();
    assert!(steps_seen.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(steps_seen.len() as u64, steps);
    (payloads(&a) == payloads(&b), a.len())
}

