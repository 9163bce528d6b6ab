//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the report is printed even when everything passes; pass a
//! substring argument to run only matching criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use tinylm::data::{builtin_text, Corpus, CorpusSource, Vocabulary};
use tinylm::evaluation::{self, Grade};
use tinylm::inference::{generate, generate_uncached, Decoder, GenerationSettings, Generator};
use tinylm::model::{ModelConfig, ModelWeights, Preset};
use tinylm::tensor::{Backend, CpuBackend, Precision, RopeTable, Tape, Tensor};
use tinylm::training::{checkpoint, measure_memory, Hyperparameters, LossScaler, Trainer};

type Outcome = Result<String, String>;

fn backend() -> Arc<dyn Backend> {
    Arc::new(CpuBackend)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn parameter_count() -> Outcome {
    // per-tensor shapes written out independently of the model's manifest
    let oracle = |l: usize, d: usize, v: usize| {
        let block = d + 4 * d * d + d + d * 4 * d + 4 * d * d;
        v * d + l * block + d
    };
    let standard = Preset::Standard4M.config(128);
    let tiny = Preset::Tiny2M.config(128);
    let (s, t) = (standard.param_count(), tiny.param_count());
    let s_weights = ModelWeights::init(&standard, 0).map_err(|e| e.to_string())?.param_count();
    check(
        (3_400_000..=4_400_000).contains(&s)
            && (1_800_000..=2_200_000).contains(&t)
            && s == oracle(8, 192, 128)
            && t == oracle(6, 160, 128)
            && s_weights == s,
        format!("standard-4M {s}, tiny-2M {t} (vocab 128); oracle agrees"),
    )
}

fn memory() -> Outcome {
    let tiny = Preset::Tiny2M.config(128);
    let full = measure_memory(&tiny, 16, Precision::Full, backend()).map_err(|e| e.to_string())?;
    let standard = Preset::Standard4M.config(128);
    let sf = measure_memory(&standard, 16, Precision::Full, backend()).map_err(|e| e.to_string())?;
    let sh = measure_memory(&standard, 16, Precision::Half, backend()).map_err(|e| e.to_string())?;
    let resident = full.weights + full.moments + full.activations;
    let ratio = sh.activations as f64 / sf.activations as f64;
    check(
        resident as f64 <= 0.24e9 && ratio <= 0.55,
        format!(
            "tiny-2M weights+moments+activations {:.3} GB ({:.3} GB with gradients); standard-4M half/full activations {:.1}%",
            resident as f64 / 1e9,
            full.total() as f64 / 1e9,
            100.0 * ratio
        ),
    )
}

fn emergence() -> Outcome {
    let text: String = builtin_text("shakespeare").unwrap().chars().take(200 * 1024).collect();
    let vocab = Vocabulary::build(&text).map_err(|e| e.to_string())?;
    let corpus = Corpus::new("shakespeare-200k", text.as_str(), &vocab, 0.1, CorpusSource::Builtin).map_err(|e| e.to_string())?;
    let cfg = Preset::Tiny2M.config(vocab.size());
    let hyper = Hyperparameters {
        batch_size: 8,
        max_steps: 2000,
        seed: 3,
        ..Default::default()
    };
    let started = Instant::now();
    let mut trainer = Trainer::from_scratch(cfg, corpus.train_arc(), hyper, backend()).map_err(|e| e.to_string())?;
    let score = |t: &Trainer| evaluation::holdout_loss(t.weights(), &cfg, corpus.holdout_tokens(), backend()).map(|r| r.0);
    let initial = score(&trainer).map_err(|e| e.to_string())?;
    let mut marks = Vec::new();
    for step in 1..=2000u64 {
        trainer.train_step().map_err(|e| format!("step {step}: {e}"))?;
        if [50, 500, 2000].contains(&step) {
            marks.push(score(&trainer).map_err(|e| e.to_string())?);
        }
    }
    let weights = Arc::new(trainer.weights().clone());
    let report = evaluation::evaluate(&weights, &cfg, &corpus, backend()).map_err(|e| e.to_string())?;
    let ln_v = (vocab.size() as f64).ln();
    let monotone = marks.windows(2).all(|w| w[1] <= w[0] * 1.05);
    check(
        (initial - ln_v).abs() <= 0.05 * ln_v
            && report.holdout_loss <= 2.4
            && report.grade >= Grade::Structured
            && monotone,
        format!(
            "holdout {initial:.3} (ln V {ln_v:.3}) -> {:.3}/{:.3}/{:.3} at 50/500/2000, grade {:?}, {:.0}s",
            marks[0],
            marks[1],
            marks[2],
            report.grade,
            started.elapsed().as_secs_f64()
        ),
    )
}

/// Central differences of an f64 oracle against the tape's gradient of
/// `sum(w ⊙ op(x))`.
fn unit_gradient(
    x: &[f32],
    shape: &[usize],
    op: &dyn Fn(&mut Tape, tinylm::tensor::Var) -> tinylm::Result<tinylm::tensor::Var>,
    oracle: &dyn Fn(&[f64]) -> Vec<f64>,
) -> f64 {
    let w: Vec<f32> = (0..x.len()).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
    let mut tape = Tape::new(backend());
    let xv = tape.param(Tensor::new(shape, x.to_vec()).unwrap());
    let wv = tape.constant(Tensor::new(shape, w.clone()).unwrap());
    let y = op(&mut tape, xv).unwrap();
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let got = grads.get(xv).unwrap().values().into_owned();
    let f = |p: &[f64]| oracle(p).iter().zip(&w).map(|(a, &b)| a * b as f64).sum::<f64>();
    let mut x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x64[i];
        x64[i] = orig + 1e-6;
        let up = f(&x64);
        x64[i] = orig - 1e-6;
        let down = f(&x64);
        x64[i] = orig;
        let fd = (up - down) / 2e-6;
        worst = worst.max((got[i] as f64 - fd).abs() / fd.abs().max(got[i].abs() as f64).max(1e-4));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let x: Vec<f32> = (0..24).map(|i| ((i * 7 % 13) as f32 - 6.0) / 4.0).collect();
    let rows = |p: &[f64], f: &dyn Fn(&[f64]) -> Vec<f64>| p.chunks(8).flat_map(f).collect::<Vec<f64>>();
    let softmax = unit_gradient(&x, &[3, 8], &|t, v| t.softmax(v), &|p| {
        rows(p, &|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
            r.iter().map(|v| (v - m).exp() / z).collect()
        })
    });
    let gelu = unit_gradient(&x, &[3, 8], &|t, v| t.gelu(v), &|p| {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        p.iter().map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh())).collect()
    });
    let gain: Vec<f32> = (0..8).map(|i| 0.5 + i as f32 / 8.0).collect();
    let g2 = gain.clone();
    let rms = unit_gradient(
        &x,
        &[3, 8],
        &move |t, v| {
            let g = t.constant(Tensor::new(&[8], g2.clone()).unwrap());
            t.rmsnorm(v, g, 1e-5)
        },
        &|p| {
            rows(p, &|r| {
                let s = 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / 8.0 + 1e-5).sqrt();
                r.iter().zip(&gain).map(|(v, &g)| v * s * g as f64).collect()
            })
        },
    );
    let table = Arc::new(RopeTable::new(4, 8, 10_000.0).unwrap());
    let rope = unit_gradient(&x, &[1, 3, 8], &move |t, v| t.rope(v, table.clone(), 2, 1), &|p| {
        let mut out = p.to_vec();
        for (pos, row) in out.chunks_mut(8).enumerate() {
            for head in row.chunks_mut(4) {
                for (i, pair) in head.chunks_mut(2).enumerate() {
                    let a = (pos + 1) as f64 * 10_000f64.powf(-2.0 * i as f64 / 4.0);
                    let (u, w) = (pair[0], pair[1]);
                    pair[0] = u * a.cos() - w * a.sin();
                    pair[1] = u * a.sin() + w * a.cos();
                }
            }
        }
        out
    });
    let units_ok = [softmax, gelu, rms, rope].iter().all(|&e| e <= 1e-3);
    let (model_err, at) = common::reference::worst_relative_error(1, backend());
    check(
        units_ok && model_err <= 1e-2,
        format!(
            "model worst rel err {model_err:.2e} ({at}); softmax {softmax:.1e}, gelu {gelu:.1e}, rmsnorm {rms:.1e}, rope {rope:.1e}"
        ),
    )
}

fn kv_cache() -> Outcome {
    let cfg = Preset::Tiny2M.config(65);
    let mut worst: f32 = 0.0;
    for seed in 0..10u64 {
        let weights = Arc::new(ModelWeights::init(&cfg, seed).map_err(|e| e.to_string())?);
        let decoder = Decoder::new(weights, cfg, backend()).map_err(|e| e.to_string())?;
        // long enough that the window slides during generation
        let prompt: Vec<u32> = (0..100).map(|i| ((i * 13 + seed as usize) % 64 + 1) as u32).collect();
        let settings = GenerationSettings::greedy(50);
        let oracle = generate_uncached(&decoder, &prompt, settings).map_err(|e| e.to_string())?;
        let cached: Vec<_> = Generator::new(&decoder, &prompt, settings)
            .map_err(|e| e.to_string())?
            .collect::<tinylm::Result<_>>()
            .map_err(|e| e.to_string())?;
        if cached.len() != 50 || oracle.len() != 50 {
            return Err(format!("seed {seed}: {} cached vs {} uncached tokens", cached.len(), oracle.len()));
        }
        for (i, (a, b)) in cached.iter().zip(&oracle).enumerate() {
            if a.token != b.token {
                return Err(format!("seed {seed}: token {i} differs ({} vs {})", a.token, b.token));
            }
            let diff = a.logits.iter().zip(&b.logits).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            worst = worst.max(diff);
        }
    }
    check(worst <= 1e-4, format!("10 seeds × 50 greedy tokens identical; max logit diff {worst:.2e}"))
}

fn trained_small_model() -> tinylm::Result<(ModelConfig, Vocabulary, tinylm::training::TrainState)> {
    let text = builtin_text("stories").unwrap();
    let vocab = Vocabulary::build(text)?;
    let corpus = Corpus::builtin("stories", &vocab)?;
    let cfg = ModelConfig::new(2, 2, 32, 32, vocab.size());
    let hyper = Hyperparameters {
        batch_size: 4,
        max_steps: 40,
        ..Default::default()
    };
    let mut trainer = Trainer::from_scratch(cfg, corpus.train_arc(), hyper, backend())?;
    for _ in 0..40 {
        trainer.train_step()?;
    }
    Ok((cfg, vocab, trainer.into_state()))
}

fn checkpoint_fidelity() -> Outcome {
    let (cfg, vocab, state) = trained_small_model().map_err(|e| e.to_string())?;
    let first = checkpoint::export(&state.checkpoint(&cfg, &vocab));
    let imported = checkpoint::import(&first).map_err(|e| e.to_string())?;
    let second = checkpoint::export(&imported);
    let prompt = vocab.encode("Once upon");
    let run = |w: &ModelWeights| -> tinylm::Result<Vec<u32>> {
        let decoder = Decoder::new(Arc::new(w.clone()), cfg, backend())?;
        generate(&decoder, &prompt, GenerationSettings::greedy(60))
    };
    let before = run(&state.weights).map_err(|e| e.to_string())?;
    let after = run(&imported.weights).map_err(|e| e.to_string())?;
    let mut truncated = first.clone();
    truncated.truncate(first.len() - 3);
    let trunc_msg = checkpoint::import(&truncated).err().map(|e| e.to_string()).unwrap_or_default();
    check(
        first == second && before == after && trunc_msg.contains("payload shorter than manifest"),
        format!("{} bytes, re-export identical, 60 greedy tokens identical after import", first.len()),
    )
}

fn final_loss(losses: &[f32]) -> f32 {
    losses[losses.len() - 10..].iter().sum::<f32>() / 10.0
}

fn mixed_precision() -> Outcome {
    let text = builtin_text("stories").unwrap();
    let vocab = Vocabulary::build(text).map_err(|e| e.to_string())?;
    let corpus = Corpus::builtin("stories", &vocab).map_err(|e| e.to_string())?;
    let cfg = Preset::Tiny2M.config(vocab.size());
    let mut runs = Vec::new();
    for mixed in [false, true] {
        let hyper = Hyperparameters {
            batch_size: 8,
            max_steps: 200,
            seed: 17,
            mixed_precision: mixed,
            ..Default::default()
        };
        let mut trainer = Trainer::from_scratch(cfg, corpus.train_arc(), hyper, backend()).map_err(|e| e.to_string())?;
        let mut losses = Vec::new();
        let mut skipped = 0;
        for _ in 0..200 {
            let m = trainer.train_step().map_err(|e| e.to_string())?;
            losses.push(m.loss);
            skipped += m.skipped as usize;
        }
        runs.push((losses[0], final_loss(&losses), skipped));
    }
    let mut scaler = LossScaler::default();
    let mut sequence = vec![scaler.scale()];
    for _ in 0..2 {
        scaler.on_overflow().map_err(|e| e.to_string())?;
        sequence.push(scaler.scale());
    }
    let ok_runs = runs.iter().all(|&(first, last, _)| last <= 0.6 * first);
    check(
        ok_runs && sequence == [65_536.0, 32_768.0, 16_384.0],
        format!(
            "full {:.3}->{:.3}, mixed {:.3}->{:.3} ({} skipped); scale sequence {sequence:?}",
            runs[0].0, runs[0].1, runs[1].0, runs[1].1, runs[1].2
        ),
    )
}

fn overfit() -> Outcome {
    let text: String = "the quick brown fox jumps over the lazy dog; ".chars().cycle().take(1024).collect();
    let vocab = Vocabulary::build(&text).map_err(|e| e.to_string())?;
    let tokens: Arc<[u32]> = vocab.encode(&text).into();
    let cfg = Preset::Tiny2M.config(vocab.size());
    let hyper = Hyperparameters {
        batch_size: 4,
        max_steps: 300,
        ..Default::default()
    };
    let started = Instant::now();
    let mut trainer = Trainer::from_scratch(cfg, tokens.clone(), hyper, backend()).map_err(|e| e.to_string())?;
    let mut first_below = None;
    let mut last = f32::NAN;
    for _ in 0..300 {
        let m = trainer.train_step().map_err(|e| e.to_string())?;
        last = m.loss;
        if m.loss < 0.5 && first_below.is_none() {
            first_below = Some(m.step);
        }
    }
    let weights = Arc::new(trainer.weights().clone());
    let report = evaluation::evaluate_slices(&weights, &cfg, &tokens, &tokens, backend()).map_err(|e| e.to_string())?;
    check(
        last < 0.5 && report.grade == Grade::Memorized,
        format!(
            "final loss {last:.4} (first < 0.5 at step {first_below:?}), memorization {:.2}, grade {:?}, {:.0}s",
            report.memorization_rate,
            report.grade,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn session() -> Outcome {
    let pairs = common::scripts::check_legality_table();
    let (same, events) = common::scripts::replay_matches(common::scripts::small(), 300, 4);
    check(same, format!("{pairs} phase×command pairs match the table; {events}-event transcript replays identically"))
}

fn privacy() -> Outcome {
    let (crates, lines) = common::privacy::audit();
    let linked = common::privacy::engine_dependency_closure().len();
    check(
        crates.is_empty() && lines.is_empty(),
        format!("{linked} linked crates audited; network crates {crates:?}; socket uses {lines:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter-count", parameter_count),
        ("memory", memory),
        ("training-emergence", emergence),
        ("gradient-suite", gradient_suite),
        ("kv-cache-equivalence", kv_cache),
        ("checkpoint-fidelity", checkpoint_fidelity),
        ("mixed-precision-parity", mixed_precision),
        ("overfit-oracle", overfit),
        ("session-state-machine", session),
        ("privacy-invariant", privacy),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
