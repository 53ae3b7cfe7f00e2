//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; the process fails if any criterion does.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use headlab::coref::{
    build_adjacent_link, build_full_link, row_normalize_with_fallback, CorefClusters,
    FullLinkEdges, LinkMode,
};
use headlab::corpus::{generate, GeneratorConfig, Split, SplitSizes};
use headlab::data::encode_split;
use headlab::experiment::{
    self, ExperimentConfig, InjectionEval, ModelImportance, PruningEval, Variant, Workspace,
};
use headlab::head_analysis::score_heads;
use headlab::injection::{
    importance_before_after, injected_examples, sample_structure, EncoderSlot, HeadSelection,
    InjectionPlan,
};
use headlab::metrics::{lcs_len, rouge, rouge_l};
use headlab::model::{
    layer_keys, Bank, HeadSlot, ModelConfig, PassOptions, Seq2SeqModel, FIRST_FREE_ID,
};
use headlab::numerics::{Tape, Tensor, Var};
use headlab::training::{train_with_observer, Example, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", c1_gradients),
        ("gate equivalence", c2_gates),
        ("importance oracle", c3_importance),
        ("pruning ordering", c4_pruning),
        ("matrix suite", c5_matrices),
        ("injection exactness", c6_injection),
        ("injection comparison", c7_injection_table),
        ("ablation and importance shift", c8_ablation),
        ("rouge suite", c9_rouge),
        ("pipeline smoke", c10_pipeline),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !only.is_empty()
            && !only
                .iter()
                .any(|o| id.ends_with(&format!(" {o}")) || name.contains(o.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} ({name}) [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} ({name}) [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criterion/criteria failed");
        std::process::exit(1);
    }
}

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        model_dim: 16,
        ffn_dim: 32,
        vocab_size: 20,
        max_seq_len: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn random_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut toks = |len: usize| {
        (0..len)
            .map(|_| rng.gen_range(FIRST_FREE_ID..20))
            .collect::<Vec<_>>()
    };
    (0..n)
        .map(|i| Example {
            id: format!("s{i}"),
            source: toks(6 + i % 4),
            target: toks(3 + i % 3),
            overrides: None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Gradients

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var) -> Var {
    let t = tape.value(y).clone();
    let w = Tensor::new(
        t.shape().to_vec(),
        (0..t.len()).map(|k| 0.3 + 0.17 * (k % 7) as f64).collect(),
    )
    .unwrap();
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Largest relative error between backward and central differences.
fn primitive_error(inputs: &[Tensor], build: &Build) -> f64 {
    let eps = 1e-4;
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] += eps;
            let up = eval(&xs);
            xs[i].data_mut()[k] -= 2.0 * eps;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[k], numeric, 1e-6));
        }
    }
    worst
}

fn c1_gradients() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);
    let (a34, b45, c34, row4, m44) = (r(&[3, 4]), r(&[4, 5]), r(&[3, 4]), r(&[4]), r(&[4, 4]));
    let (a43, g) = (r(&[4, 3]), r(&[4]));
    let gates = Tensor::from_rows(&[vec![0.7, 0.2], vec![0.4, 0.9]]).unwrap();
    let table = r(&[6, 4]);
    // Keep ReLU inputs away from the kink.
    let relu_in = Tensor::new(
        vec![3, 4],
        a34.data().iter().map(|v| v + 0.05 * v.signum()).collect(),
    )
    .unwrap();
    let mask: Vec<bool> = (0..16).map(|k| k % 4 != 3 || k == 3).collect();
    let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        (
            "matmul",
            vec![a34.clone(), b45.clone()],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "matmul_t (a^T b^T)",
            vec![a43.clone(), r(&[5, 4])],
            Box::new(|t, v| {
                let y = t.matmul_t(v[0], v[1], true, true).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "add",
            vec![a34.clone(), c34.clone()],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "add_row",
            vec![a34.clone(), row4.clone()],
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "affine",
            vec![a34.clone(), m44.clone(), row4.clone()],
            Box::new(|t, v| {
                let y = t.affine(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "mul",
            vec![a34.clone(), c34.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "scale",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                weighted_sum(t, y)
            }),
        ),
        (
            "gelu",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.gelu(v[0]);
                weighted_sum(t, y)
            }),
        ),
        (
            "relu",
            vec![relu_in],
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y)
            }),
        ),
        (
            "softmax_rows",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0], None).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "softmax_rows masked",
            vec![m44.clone()],
            Box::new(move |t, v| {
                let y = t.softmax_rows(v[0], Some(&mask)).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "layer_norm",
            vec![a34.clone(), g.clone(), row4.clone()],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "gather_rows",
            vec![table],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[2, 0, 2, 5]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "slice_cols",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.slice_cols(v[0], 1, 2).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "concat_cols",
            vec![a34.clone(), c34.clone()],
            Box::new(|t, v| {
                let y = t.concat_cols(&[v[0], v[1]]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "gate_cols",
            vec![a34.clone(), gates],
            Box::new(|t, v| {
                let y = t.gate_cols(v[0], v[1], 1).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "cross_entropy",
            vec![a34.clone()],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 3], 0).unwrap()),
        ),
        ("sum", vec![a34], Box::new(|t, v| t.sum(v[0]))),
    ];
    let mut worst_prim: f64 = 0.0;
    for (name, inputs, build) in &cases {
        let e = primitive_error(inputs, build.as_ref());
        check!(e < 1e-4, "{name}: relative error {e:.2e} >= 1e-4");
        worst_prim = worst_prim.max(e);
    }

    // End to end: every parameter and every gate of the full model loss.
    // Gates sit at 0.5 so both sides of the stencil are feasible.
    let mut model = ok(Seq2SeqModel::new(tiny_config(), 7))?;
    let slots = model.gates().slots();
    for &slot in &slots {
        ok(model.gates_mut().set(slot, 0.5))?;
    }
    let ex = &random_examples(1, 3)[0];
    let opts = PassOptions {
        param_grads: true,
        gate_grads: true,
        ..PassOptions::default()
    };
    let (mut pass, loss) = ok(model.forward_loss(&ex.source, &ex.target, None, opts))?;
    ok(pass.tape.backward(loss))?;
    let mut analytic: Vec<f64> = pass
        .param_vars()
        .iter()
        .zip(model.params())
        .flat_map(|(&v, p)| {
            pass.tape
                .grad_slice(v)
                .map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec)
        })
        .collect();
    let gate_grads = pass.gate_grads().ok_or("gate gradients missing")?;
    drop(pass);
    for &slot in &slots {
        let row = ok(model.gates().row_index(slot.bank, slot.layer))?;
        analytic.push(gate_grads.at(row, slot.head));
    }
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let n_params: usize = sizes.iter().sum();
    let name = |mut k: usize| {
        for (p, &len) in model.params().iter().zip(&sizes) {
            if k < len {
                return format!("{}[{k}]", p.name);
            }
            k -= len;
        }
        format!("gate {:?}", slots[k])
    };
    // Loss with coordinate `k` of (parameters, gates) shifted by `delta`.
    let shifted = |k: usize, delta: f64| -> Result<f64, String> {
        let mut m = model.clone();
        if k < n_params {
            let (mut pi, mut off) = (0, k);
            while off >= sizes[pi] {
                off -= sizes[pi];
                pi += 1;
            }
            m.params_mut()[pi].value.data_mut()[off] += delta;
        } else {
            let slot = slots[k - n_params];
            let g = ok(m.gates().get(slot))?;
            ok(m.gates_mut().set(slot, g + delta))?;
        }
        ok(m.loss_value(&ex.source, &ex.target, None))
    };
    let mut worst_model: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        // Fourth-order central stencil with step 1e-3, plus the plain
        // two-point stencil with step 1e-4.
        let h = 1e-3;
        let (m2, m1, p1, p2) = (
            shifted(k, -2.0 * h)?,
            shifted(k, -h)?,
            shifted(k, h)?,
            shifted(k, 2.0 * h)?,
        );
        let five = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        let h = 1e-4;
        let two = (shifted(k, h)? - shifted(k, -h)?) / (2.0 * h);
        for numeric in [five, two] {
            let e = rel_err(a, numeric, 1e-4);
            check!(
                e < 1e-3,
                "{}: analytic {a} vs numeric {numeric}: relative error {e:.2e}",
                name(k)
            );
            worst_model = worst_model.max(e);
        }
    }
    let checked = analytic.len();
    let elapsed = start.elapsed();
    check!(
        elapsed < Duration::from_secs(60),
        "took {:.1}s",
        elapsed.as_secs_f64()
    );
    Ok(format!(
        "{} primitives max rel err {worst_prim:.1e}; {checked} model partials max rel err {worst_model:.1e}",
        cases.len()
    ))
}

// ---------------------------------------------------------------------------
// 2. Gates

fn attn_prefix(bank: Bank, layer: usize) -> String {
    match bank {
        Bank::EncoderSelf => format!("enc.{layer}.attn"),
        Bank::DecoderSelf => format!("dec.{layer}.self_attn"),
        Bank::DecoderCross => format!("dec.{layer}.cross_attn"),
    }
}

fn c2_gates() -> Check {
    let cfg = ModelConfig {
        heads: 4,
        ..tiny_config()
    };
    let dh = cfg.head_dim();
    let model = ok(Seq2SeqModel::new(cfg.clone(), 11))?;
    let data = random_examples(4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let all: Vec<HeadSlot> = layer_keys(&cfg)
        .into_iter()
        .flat_map(|k| (0..cfg.heads).map(move |h| HeadSlot::new(k.bank, k.layer, h)))
        .collect();
    let mut worst: f64 = 0.0;
    let trials = 50;
    for _ in 0..trials {
        let chosen: Vec<HeadSlot> = all.iter().copied().filter(|_| rng.gen_bool(0.3)).collect();
        let mut gated = model.clone();
        let mut zeroed = model.clone();
        for &slot in &chosen {
            ok(gated.gates_mut().set(slot, 0.0))?;
            let wo = zeroed
                .param_mut(&format!("{}.wo", attn_prefix(slot.bank, slot.layer)))
                .ok_or("missing output projection")?;
            let d = wo.cols();
            wo.data_mut()[slot.head * dh * d..(slot.head + 1) * dh * d].fill(0.0);
        }
        for ex in &data {
            let a = ok(gated.decoder_logits(&ex.source, &ex.target))?;
            let b = ok(zeroed.decoder_logits(&ex.source, &ex.target))?;
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    check!(worst < 1e-12, "max abs diff {worst:.2e}");
    Ok(format!(
        "{trials} random head sets, max abs diff {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Importance

fn c3_importance() -> Check {
    let model = ok(Seq2SeqModel::new(tiny_config(), 17))?;
    let data = random_examples(8, 5);
    let map = ok(score_heads(&model, &data))?;
    let h = 1e-3;
    let loss_at = |ex: &Example, slot: HeadSlot, v: f64| {
        let mut m = model.clone();
        m.gates_mut().set(slot, v).unwrap();
        m.loss_value(&ex.source, &ex.target, None).unwrap()
    };
    let mut worst: f64 = 0.0;
    for (row, key) in layer_keys(model.config()).into_iter().enumerate() {
        for head in 0..model.config().heads {
            let slot = HeadSlot::new(key.bank, key.layer, head);
            // Gates live in [0, 1]: second-order one-sided stencil at 1.
            let fd = data
                .iter()
                .map(|ex| {
                    ((3.0 * loss_at(ex, slot, 1.0) - 4.0 * loss_at(ex, slot, 1.0 - h)
                        + loss_at(ex, slot, 1.0 - 2.0 * h))
                        / (2.0 * h))
                        .abs()
                })
                .sum::<f64>()
                / data.len() as f64;
            let got = map.raw[row][head];
            check!(
                got >= 0.0 && map.normalized[row][head] >= 0.0,
                "{key} head {head}: negative score"
            );
            let e = (got - fd).abs() / fd.abs().max(1e-8);
            check!(
                e < 1e-2,
                "{key} head {head}: score {got} vs finite difference {fd}"
            );
            worst = worst.max(e);
        }
    }
    let doubled: Vec<Example> = data.iter().chain(&data).cloned().collect();
    let twice = ok(score_heads(&model, &doubled))?;
    check!(
        twice.raw == map.raw && twice.normalized == map.normalized,
        "duplicated set changed the scores"
    );
    Ok(format!(
        "8 samples, max rel err {worst:.1e}; nonnegative; duplication-invariant"
    ))
}

// ---------------------------------------------------------------------------
// 4, 7, 8. Seed experiment

struct Experiment {
    cfg: ExperimentConfig,
    ws: Workspace,
    pruning_time: Duration,
    pruning: Vec<PruningEval>,
    injection: Vec<InjectionEval>,
    report: Vec<PathBuf>,
}

fn experiment_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![1, 2, 3, 4, 5],
        output_dir: PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"),
        run_id: "seeds".into(),
        ..ExperimentConfig::default()
    };
    cfg.injection.selections = HeadSelection::ALL.to_vec();
    cfg.injection.link_modes = LinkMode::ALL.to_vec();
    cfg
}

fn timed(f: impl FnOnce() -> headlab::Result<()>) -> Result<Duration, String> {
    let start = Instant::now();
    ok(f())?;
    Ok(start.elapsed())
}

fn run_experiment() -> Result<Experiment, String> {
    let cfg = experiment_config();
    ok(cfg.validate())?;
    let ws = Workspace::for_config(&cfg);
    let _ = std::fs::remove_dir_all(ws.root());
    let mut pruning_time = Duration::ZERO;
    for stage in [
        experiment::gen_data,
        experiment::train_baselines,
        experiment::score_baselines,
        experiment::prune,
        experiment::eval_pruning,
    ] {
        pruning_time += timed(|| stage(&cfg))?;
    }
    timed(|| experiment::inject(&cfg))?;
    timed(|| experiment::eval_injection(&cfg))?;
    let report = ok(experiment::report(&cfg))?.files;
    let mut pruning = Vec::new();
    let mut injection = Vec::new();
    for &seed in &cfg.seeds {
        pruning.push(ok(experiment::load_artifact(
            &ws.eval_pruning(seed),
            "eval",
        ))?);
        injection.push(ok(experiment::load_artifact(
            &ws.eval_injection(seed),
            "eval",
        ))?);
    }
    Ok(Experiment {
        cfg,
        ws,
        pruning_time,
        pruning,
        injection,
        report,
    })
}

fn shared_experiment() -> Result<&'static Experiment, String> {
    static CELL: std::sync::OnceLock<Result<Experiment, String>> = std::sync::OnceLock::new();
    CELL.get_or_init(run_experiment)
        .as_ref()
        .map_err(|e| format!("experiment failed: {e}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c4_pruning() -> Check {
    let exp = shared_experiment()?;
    let r2 = |e: &PruningEval, label: &str| {
        e.pruning
            .iter()
            .find(|p| p.label == label)
            .map(|p| p.score.r2_f1())
            .ok_or(format!("missing row {label}"))
    };
    let mut ordered = 0;
    let mut details = Vec::new();
    let mut trained = Vec::new();
    for e in &exp.pruning {
        let high = e.baseline.r2_f1() - r2(e, experiment::PRUNE_INFERENCE_HIGHEST)?;
        let low = e.baseline.r2_f1() - r2(e, experiment::PRUNE_INFERENCE_LOWEST)?;
        ordered += usize::from(high > low);
        details.push(format!(
            "seed {}: drop high {:.4} low {:.4}",
            e.seed, high, low
        ));
        trained.push(r2(e, experiment::PRUNE_TRAINING_LOWEST)?);
    }
    let base = mean(
        &exp.pruning
            .iter()
            .map(|e| e.baseline.r2_f1())
            .collect::<Vec<_>>(),
    );
    let rel = (mean(&trained) - base) / base;
    let mins = exp.pruning_time.as_secs_f64() / 60.0;
    let summary = format!(
        "{ordered}/5 seeds ordered [{}]; training-stage rel change {:+.2}%; {mins:.1} min",
        details.join("; "),
        100.0 * rel
    );
    check!(ordered >= 4, "{summary}");
    check!(rel.abs() <= 0.02, "{summary}");
    check!(mins <= 30.0, "{summary}");
    Ok(summary)
}

fn importance_adjacent() -> Variant {
    Variant {
        selection: HeadSelection::Importance,
        link_mode: LinkMode::Adjacent,
    }
}

fn injected(e: &InjectionEval, v: Variant) -> Result<&experiment::InjectResult, String> {
    e.injection
        .iter()
        .find(|r| r.variant == v)
        .ok_or(format!("seed {}: no {}", e.seed, v.tag()))
}

fn c7_injection_table() -> Check {
    let exp = shared_experiment()?;
    let v = importance_adjacent();
    let base = mean(
        &exp.pruning
            .iter()
            .map(|e| e.baseline.r2_f1())
            .collect::<Vec<_>>(),
    );
    let inj = mean(
        &exp.injection
            .iter()
            .map(|e| injected(e, v).map(|r| r.score.r2_f1()))
            .collect::<Result<Vec<_>, _>>()?,
    );
    let table = exp.ws.reports().join("table4_injection.md");
    check!(exp.report.contains(&table), "table 4 report not written");
    let text = ok(std::fs::read_to_string(&table))?;
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Model"))
        .collect();
    let want = [
        "Baseline",
        "Importance, full-link",
        "Importance, adjacent-link",
        "Probing, full-link",
        "Probing, adjacent-link",
    ];
    for w in want {
        check!(
            rows.iter().any(|r| r.starts_with(&format!("| {w} |"))),
            "table 4 lacks row {w}"
        );
    }
    check!(
        rows.len() == 5 && text.contains("| Model | ROUGE-1 | ROUGE-2 | ROUGE-L |"),
        "table 4 layout:\n{text}"
    );
    let summary = format!(
        "mean ROUGE-2 baseline {:.2}, importance/adjacent {:.2}",
        100.0 * base,
        100.0 * inj
    );
    check!(inj >= base, "{summary}");
    Ok(summary + "; table with 5 rows emitted")
}

fn c8_ablation() -> Check {
    let exp = shared_experiment()?;
    let v = importance_adjacent();
    let mut degraded = 0;
    let mut per_seed = Vec::new();
    let mut majority = true;
    for e in &exp.injection {
        let r = injected(e, v)?;
        degraded += usize::from(r.ablated.r2_f1() < r.score.r2_f1());
        let before: ModelImportance = ok(experiment::load_artifact(
            &exp.ws.importance(e.seed),
            "score-heads",
        ))?;
        let dir = exp.ws.variant_dir(e.seed, v);
        let after: ModelImportance = ok(experiment::load_artifact(
            &dir.join("importance.json"),
            "inject",
        ))?;
        let plan: InjectionPlan = ok(experiment::load_artifact(&dir.join("plan.json"), "inject"))?;
        let cmp = ok(importance_before_after(
            &before.ensemble,
            &after.ensemble,
            &plan,
        ))?;
        let up = cmp.layers_increased();
        majority &= 2 * up > cmp.layers.len();
        per_seed.push(format!(
            "seed {}: R2 {:.2} -> {:.2} ablated, {up}/{} layers up",
            e.seed,
            100.0 * r.score.r2_f1(),
            100.0 * r.ablated.r2_f1(),
            cmp.layers.len()
        ));
    }
    let summary = format!("{degraded}/5 seeds degrade [{}]", per_seed.join("; "));
    check!(degraded >= 4, "{summary}");
    check!(
        majority,
        "importance rose in a minority of layers for some seed: {summary}"
    );
    let _ = &exp.cfg;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 5. Structure matrices

/// Every partition of `0..k` into blocks of size 2..=4, at most 4 blocks,
/// as block labels in order of first appearance.
fn partitions(k: usize, out: &mut Vec<Vec<usize>>) {
    fn go(labels: &mut Vec<usize>, sizes: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        let i = labels.len();
        let remaining = k - i;
        let deficit: usize = sizes.iter().map(|&s| 2usize.saturating_sub(s)).sum();
        if deficit > remaining {
            return;
        }
        if i == k {
            out.push(labels.clone());
            return;
        }
        for b in 0..sizes.len() {
            if sizes[b] < 4 {
                sizes[b] += 1;
                labels.push(b);
                go(labels, sizes, k, out);
                labels.pop();
                sizes[b] -= 1;
            }
        }
        if sizes.len() < 4 {
            sizes.push(1);
            labels.push(sizes.len() - 1);
            go(labels, sizes, k, out);
            labels.pop();
            sizes.pop();
        }
    }
    go(&mut Vec::new(), &mut Vec::new(), k, out);
}

/// Pairwise definitions: full-link joins every same-cluster pair with
/// 1/size; adjacent-link joins same-cluster pairs with no cluster mate
/// strictly between them.
fn oracle(labels: &[usize], pos: &[usize], n: usize, full: &mut Vec<f64>, adj: &mut Vec<f64>) {
    full.clear();
    full.resize(n * n, 0.0);
    adj.clear();
    adj.resize(n * n, 0.0);
    let mut size = [0usize; 4];
    for &l in labels {
        size[l] += 1;
    }
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j || labels[i] != labels[j] {
                continue;
            }
            full[pos[i] * n + pos[j]] = 1.0 / size[labels[i]] as f64;
            let (lo, hi) = (i.min(j), i.max(j));
            if !labels[lo + 1..hi].contains(&labels[i]) {
                adj[pos[i] * n + pos[j]] = 1.0;
            }
        }
    }
}

fn c5_matrices() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut configs = 0usize;
    let (mut want_full, mut want_adj) = (Vec::new(), Vec::new());
    for k in 2..=16 {
        let mut parts = Vec::new();
        partitions(k, &mut parts);
        for labels in parts {
            // Dense placement, plus a random spread over n = 16 when room.
            let mut layouts = vec![((0..k).collect::<Vec<_>>(), k)];
            if k < 16 {
                let mut spots: Vec<usize> = (0..16).collect();
                for i in (1..16).rev() {
                    spots.swap(i, rng.gen_range(0..=i));
                }
                let mut chosen = spots[..k].to_vec();
                chosen.sort_unstable();
                layouts.push((chosen, 16));
            }
            let clusters_n = labels.iter().max().map_or(0, |&l| l + 1);
            let mut size = [0usize; 4];
            // Cluster and rank within the cluster of each mention.
            let mut member = Vec::with_capacity(k);
            for &l in &labels {
                member.push((l, size[l]));
                size[l] += 1;
            }
            for (pos, n) in layouts {
                configs += 1;
                let mut spans = vec![Vec::new(); clusters_n];
                for (i, &l) in labels.iter().enumerate() {
                    spans[l].push((pos[i], pos[i] + 1));
                }
                let clusters = ok(CorefClusters::from_spans(&spans))?;
                let full = ok(build_full_link(&clusters, n))?;
                let adj = ok(build_adjacent_link(&clusters, n))?;
                oracle(&labels, &pos, n, &mut want_full, &mut want_adj);
                check!(
                    full.as_tensor().data() == want_full.as_slice(),
                    "full-link mismatch for {labels:?} at {pos:?}"
                );
                check!(
                    adj.as_tensor().data() == want_adj.as_slice(),
                    "adjacent-link mismatch for {labels:?} at {pos:?}"
                );
                let mut at = [None; 16];
                for (idx, &p) in pos.iter().enumerate() {
                    at[p] = Some(member[idx]);
                }
                for (a, adjacent) in [(&full, false), (&adj, true)] {
                    let mode = if adjacent { "adjacent" } else { "full" };
                    let m = a.as_tensor().data();
                    for i in 0..n {
                        for j in 0..n {
                            check!(
                                m[i * n + j] == m[j * n + i],
                                "{mode}: asymmetric at ({i},{j})"
                            );
                            let support = match (at[i], at[j]) {
                                (Some((ci, ri)), Some((cj, rj))) if ci == cj && i != j => {
                                    !adjacent || ri.abs_diff(rj) == 1
                                }
                                _ => false,
                            };
                            check!(
                                (m[i * n + j] != 0.0) == support,
                                "{mode}: support wrong at ({i},{j})"
                            );
                        }
                    }
                }
                for (idx, &p) in pos.iter().enumerate() {
                    let (c, r) = member[idx];
                    let m = size[c] as f64;
                    check!(
                        full.row_sum(p) == (m - 1.0) / m,
                        "full-link row mass at {p}"
                    );
                    let endpoint = r == 0 || r + 1 == size[c];
                    check!(
                        adj.row_sum(p) == if endpoint { 1.0 } else { 2.0 },
                        "adjacent-link row mass at {p}"
                    );
                }
                for a in [&full, &adj] {
                    let norm = ok(row_normalize_with_fallback(a.as_tensor()))?;
                    for (i, mention) in at.iter().enumerate().take(n) {
                        let s: f64 = norm.row(i).iter().sum();
                        check!(
                            (s - 1.0).abs() < 1e-12 && norm.row(i).iter().all(|&v| v >= 0.0),
                            "row {i} not stochastic"
                        );
                        if mention.is_none() {
                            check!(
                                norm.at(i, i) == 1.0,
                                "uncovered row {i} lacks self-attention"
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(format!(
        "{configs} cluster configurations agree with the pairwise oracle"
    ))
}

// ---------------------------------------------------------------------------
// 6. Injection

fn c6_injection() -> Check {
    let corpus = ok(generate(&GeneratorConfig {
        seed: 21,
        sizes: SplitSizes {
            train: 12,
            validation: 4,
            test: 4,
        },
        ..GeneratorConfig::default()
    }))?;
    let vocab = corpus.build_vocab();
    let train = ok(encode_split(&corpus, Split::Train, &vocab))?;
    let cfg = ModelConfig {
        encoder_layers: 4,
        decoder_layers: 1,
        heads: 4,
        model_dim: 16,
        ffn_dim: 32,
        vocab_size: vocab.len(),
        max_seq_len: 72,
        dropout: 0.1,
        ..ModelConfig::default()
    };
    let model = ok(Seq2SeqModel::new(cfg, 3))?;
    let params = model.parameter_count();
    let mut checks = 0usize;
    for mode in LinkMode::ALL {
        let plan = InjectionPlan {
            selection: HeadSelection::Importance,
            link_mode: mode,
            layer_range: (2, 4),
            slots: vec![
                EncoderSlot { layer: 2, head: 1 },
                EncoderSlot { layer: 3, head: 0 },
                EncoderSlot { layer: 3, head: 2 },
            ],
        };
        let examples = ok(injected_examples(&train, &plan, FullLinkEdges::AllPairs))?;
        let wants: Vec<Arc<Tensor>> = train
            .iter()
            .map(|s| sample_structure(s, mode, FullLinkEdges::AllPairs))
            .collect::<headlab::Result<_>>()
            .map_err(|e| e.to_string())?;
        let mut verify = |m: &Seq2SeqModel, training: bool| -> Result<(), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for (ex, want) in examples.iter().zip(&wants) {
                let opts = PassOptions {
                    record_attention: true,
                    param_grads: training,
                    dropout_rng: training.then_some(&mut rng),
                    ..PassOptions::default()
                };
                let (pass, _) =
                    ok(m.forward_loss(&ex.source, &ex.target, ex.overrides.as_ref(), opts))?;
                let mut seen = 0;
                for (slot, attn) in pass.attention_maps() {
                    if plan.head_slots().contains(&slot) {
                        check!(
                            attn == &**want,
                            "{slot:?} deviates from the structure matrix on {}",
                            ex.id
                        );
                        seen += 1;
                    }
                }
                check!(seen == plan.slots.len(), "saw {seen} planned heads");
                checks += seen;
            }
            Ok(())
        };
        let tc = TrainConfig {
            learning_rate: 3e-3,
            epochs: 2,
            batch_size: 4,
            patience: None,
            ..TrainConfig::default()
        };
        let mut failure = None;
        let out = ok(train_with_observer(
            model.clone(),
            &examples,
            &[],
            &tc,
            3,
            None,
            &mut |m, _| {
                if failure.is_none() {
                    failure = verify(m, true).err();
                }
            },
        ))?;
        if let Some(f) = failure {
            return Err(f);
        }
        verify(&out.model, false)?;
        check!(
            out.model.parameter_count() == params,
            "parameter count changed"
        );
    }
    Ok(format!("{checks} planned-head attention maps equal A_x exactly; parameter count {params} unchanged"))
}

// ---------------------------------------------------------------------------
// 9. ROUGE

/// Longest common subsequence by trying subsequences of the shorter input
/// from longest to shortest.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let m = short.len();
    let mut best = 0;
    for mask in 0u32..(1 << m) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let mut it = long.iter();
        if (0..m)
            .filter(|i| mask & (1 << i) != 0)
            .all(|i| it.any(|&c| c == short[i]))
        {
            best = size;
        }
    }
    best
}

fn sequences(len: usize) -> Vec<Vec<u8>> {
    (0..3usize.pow(len as u32))
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let d = (code % 3) as u8;
                    code /= 3;
                    d
                })
                .collect()
        })
        .collect()
}

fn c9_rouge() -> Check {
    let by_len: Vec<Vec<Vec<u8>>> = (0..=12).map(sequences).collect();
    let mut pairs = 0usize;
    for la in 0..=12 {
        for lb in 0..=(12 - la) {
            for a in &by_len[la] {
                for b in &by_len[lb] {
                    let want = brute_lcs(a, b);
                    let got = lcs_len(a, b);
                    check!(got == want, "lcs({a:?}, {b:?}) = {got}, oracle {want}");
                    pairs += 1;
                }
            }
        }
    }
    // ROUGE-L precision and recall follow from the LCS on a sample of the
    // longest sequences.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20_000 {
        let a = &by_len[12][rng.gen_range(0..by_len[12].len())];
        let b = &by_len[12][rng.gen_range(0..by_len[12].len())];
        let l = brute_lcs(a, b);
        check!(lcs_len(a, b) == l, "lcs mismatch on length-12 pair");
        let pr = rouge_l(a, b);
        check!(
            pr.precision == l as f64 / 12.0 && pr.recall == l as f64 / 12.0,
            "rouge-l ratios"
        );
    }
    let x = ["the", "cat", "sat", "on", "a", "mat"];
    let same = rouge(&x, &x);
    check!(
        same.f1_triple() == [1.0, 1.0, 1.0],
        "identity scores {:?}",
        same.f1_triple()
    );
    let y = ["dogs", "bark", "loudly"];
    let disjoint = rouge(&x, &y);
    check!(
        disjoint.f1_triple() == [0.0, 0.0, 0.0],
        "disjoint scores {:?}",
        disjoint.f1_triple()
    );
    Ok(format!(
        "{pairs} exhaustive pairs with total length <= 12, 20000 sampled length-12 pairs"
    ))
}

// ---------------------------------------------------------------------------
// 10. Pipeline

fn read_tree(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in ok(std::fs::read_dir(dir))? {
        let path = ok(entry)?.path();
        out.insert(
            path.strip_prefix(dir).unwrap().to_path_buf(),
            ok(std::fs::read(&path))?,
        );
    }
    Ok(out)
}

fn c10_pipeline() -> Check {
    let bin = env!("CARGO_BIN_EXE_headlab");
    let outdir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-smoke");
    let commands = [
        "gen-data",
        "train",
        "score-heads",
        "prune",
        "inject",
        "eval",
        "report",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&outdir);
        for c in commands {
            let out = ok(Command::new(bin)
                .arg(c)
                .env("HEADLAB_OUTDIR", &outdir)
                .output())?;
            check!(
                out.status.code() == Some(0),
                "`headlab {c}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            );
        }
        runs.push(read_tree(&outdir.join("default").join("reports"))?);
    }
    check!(!runs[0].is_empty(), "no report files");
    for name in [
        "report.md",
        "table3_pruning.csv",
        "table4_injection.csv",
        "table5_ablation.csv",
        "fig4_importance.csv",
        "heatmap_mean.csv",
    ] {
        check!(
            runs[0].contains_key(Path::new(name)),
            "missing report {name}"
        );
    }
    check!(runs[0] == runs[1], "reports differ between invocations");
    Ok(format!(
        "7 commands exit 0 twice; {} report files byte-identical",
        runs[0].len()
    ))
}
