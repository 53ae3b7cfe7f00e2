//! The end-to-end experiment: data, baselines, head scoring, pruning,
//! injection, evaluation and reports. Every stage reads and writes files
//! under one run directory so stages can run as separate commands.

mod config;
mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{
    desk_model, desk_training, AnalysisConfig, CorpusConfig, DecodeConfig, ExperimentConfig,
    InjectionConfig, OUTDIR_ENV,
};
pub use report::{write_reports, ReportFiles};

use crate::coref::LinkMode;
use crate::corpus::{generate, stats, Corpus, Split, Vocab};
use crate::data::{encode_split, plain_examples, EncodedSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, DecodeSettings};
use crate::head_analysis::{
    aggregate_runs, apply_pruning, export_heatmap, score_heads, select_extremes, ImportanceMap,
    PruningPlan, RunEnsemble, SelectionMode,
};
use crate::injection::{
    ablate_injected_heads, fine_tune_with_injection, injected_examples, plan_by_importance,
    plan_by_probing, probe_samples, HeadSelection, InjectionPlan,
};
use crate::metrics::RougeScore;
use crate::model::{layer_keys, ModelConfig, Seq2SeqModel};
use crate::training::{train, EpochMetrics, Example};

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

/// One injection configuration: how heads are chosen and which matrix
/// they receive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub selection: HeadSelection,
    pub link_mode: LinkMode,
}

impl Variant {
    pub fn tag(self) -> String {
        format!("{}-{}", self.selection.name(), self.link_mode.name())
    }

    pub fn label(self) -> String {
        let sel = match self.selection {
            HeadSelection::Importance => "Importance",
            HeadSelection::Probing => "Probing",
        };
        format!("{sel}, {}-link", self.link_mode.name())
    }
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        Self::new(cfg.run_dir())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn baseline(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("baseline.json")
    }

    pub fn importance(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("importance.json")
    }

    pub fn prune_plan(&self, seed: u64, mode: SelectionMode) -> PathBuf {
        let m = match mode {
            SelectionMode::Highest => "highest",
            SelectionMode::Lowest => "lowest",
        };
        self.seed_dir(seed).join(format!("prune_{m}.json"))
    }

    pub fn pruned_training(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("pruned_training_lowest.json")
    }

    pub fn variant_dir(&self, seed: u64, v: Variant) -> PathBuf {
        self.seed_dir(seed).join(format!("inject-{}", v.tag()))
    }

    pub fn eval_pruning(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("eval_pruning.json")
    }

    pub fn eval_injection(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("eval_injection.json")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.into(),
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    require(path, producer)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn load_model(path: &Path, producer: &str) -> Result<Seq2SeqModel> {
    require(path, producer)?;
    Seq2SeqModel::load(path)
}

fn history_csv(history: &[EpochMetrics], best_epoch: usize) -> String {
    let mut out = String::from("epoch,train_loss,val_rouge1,val_rouge2,val_rouge_l,best\n");
    for h in history {
        let [r1, r2, rl] = h.validation.f1_triple();
        let _ = writeln!(
            out,
            "{},{:.6},{r1:.6},{r2:.6},{rl:.6},{}",
            h.epoch,
            h.train_loss,
            u8::from(h.epoch == best_epoch)
        );
    }
    out
}

/// Encoded splits plus the vocabulary of a generated run.
pub struct Prepared {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub train: Vec<EncodedSample>,
    pub validation: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
}

impl Prepared {
    pub fn load(ws: &Workspace) -> Result<Self> {
        require(&ws.corpus(), "gen-data")?;
        let corpus = Corpus::load_jsonl(&ws.corpus())?;
        let vocab: Vocab = read_json(&ws.vocab(), "gen-data")?;
        Ok(Self {
            train: encode_split(&corpus, Split::Train, &vocab)?,
            validation: encode_split(&corpus, Split::Validation, &vocab)?,
            test: encode_split(&corpus, Split::Test, &vocab)?,
            corpus,
            vocab,
        })
    }

    pub fn split(&self, split: Split) -> &[EncodedSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn model_config(&self, cfg: &ExperimentConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            ..cfg.model.clone()
        }
    }
}

/// Writes the corpus, its vocabulary and its statistics.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::for_config(cfg);
    mkdir(ws.root())?;
    let corpus = match &cfg.corpus.path {
        Some(p) => Corpus::load_jsonl(p)?,
        None => generate(&cfg.corpus.generator())?,
    };
    corpus.save_jsonl(&ws.corpus())?;
    write_json(&ws.vocab(), &corpus.build_vocab())?;
    let st = stats(&corpus)?;
    write_text(&ws.root().join("corpus_stats.md"), &st.to_markdown())?;
    write_text(&ws.root().join("corpus_stats.csv"), &st.to_csv())?;
    write_json(&ws.root().join("config.json"), cfg)
}

/// Trains one baseline per seed.
pub fn train_baselines(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::for_config(cfg);
    let data = Prepared::load(&ws)?;
    let (tr, va) = (
        plain_examples(&data.train),
        plain_examples(&data.validation),
    );
    for &seed in &cfg.seeds {
        let model = Seq2SeqModel::new(data.model_config(cfg), seed)?;
        let out = train(model, &tr, &va, &cfg.training, seed, None)?;
        mkdir(&ws.seed_dir(seed))?;
        out.model.save(&ws.baseline(seed))?;
        write_text(
            &ws.seed_dir(seed).join("baseline_history.csv"),
            &history_csv(&out.history, out.best_epoch),
        )?;
    }
    Ok(())
}

/// Importance of one model: a shard ensemble for ranking plus the map over
/// the whole scoring split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelImportance {
    pub ensemble: RunEnsemble,
    pub whole: ImportanceMap,
}

/// Contiguous shards whose sizes differ by at most one.
fn shards<T>(items: &[T], count: usize) -> Vec<&[T]> {
    let (base, extra) = (items.len() / count, items.len() % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

pub fn score_model(
    model: &Seq2SeqModel,
    examples: &[Example],
    cfg: &AnalysisConfig,
) -> Result<ModelImportance> {
    let maps = shards(examples, cfg.score_shards)
        .into_iter()
        .map(|s| score_heads(model, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelImportance {
        ensemble: aggregate_runs(maps, cfg.cov_threshold)?,
        whole: score_heads(model, examples)?,
    })
}

/// Scores every baseline's heads and writes per-seed heatmaps.
pub fn score_baselines(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::for_config(cfg);
    let data = Prepared::load(&ws)?;
    let examples = plain_examples(data.split(cfg.analysis.score_split));
    for &seed in &cfg.seeds {
        let model = load_model(&ws.baseline(seed), "train")?;
        let imp = score_model(&model, &examples, &cfg.analysis)?;
        write_json(&ws.importance(seed), &imp)?;
        let dir = ws.seed_dir(seed);
        export_heatmap(
            &imp.ensemble,
            &dir.join("heatmap.csv"),
            Some(&dir.join("heatmap.svg")),
        )?;
    }
    Ok(())
}

fn load_importance(ws: &Workspace, seed: u64) -> Result<ModelImportance> {
    read_json(&ws.importance(seed), "score-heads")
}

/// Writes highest- and lowest-ranking pruning plans and trains a model
/// with the lowest-ranking heads masked from the start.
pub fn prune(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::for_config(cfg);
    let data = Prepared::load(&ws)?;
    let (tr, va) = (
        plain_examples(&data.train),
        plain_examples(&data.validation),
    );
    let targets: Vec<_> = layer_keys(&data.model_config(cfg))
        .into_iter()
        .filter(|k| cfg.analysis.banks.contains(&k.bank))
        .collect();
    for &seed in &cfg.seeds {
        let imp = load_importance(&ws, seed)?;
        for mode in [SelectionMode::Highest, SelectionMode::Lowest] {
            let plan = select_extremes(&imp.ensemble, mode, cfg.analysis.k, &targets)?;
            write_json(&ws.prune_plan(seed, mode), &plan)?;
        }
        let lowest: PruningPlan = read_json(&ws.prune_plan(seed, SelectionMode::Lowest), "prune")?;
        let model = Seq2SeqModel::new(data.model_config(cfg), seed)?;
        let mask = lowest.gates_for(&model)?;
        let out = train(model, &tr, &va, &cfg.training, seed, Some(&mask))?;
        out.model.save(&ws.pruned_training(seed))?;
        write_text(
            &ws.seed_dir(seed).join("pruned_training_history.csv"),
            &history_csv(&out.history, out.best_epoch),
        )?;
    }
    Ok(())
}

pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for &selection in &cfg.injection.selections {
        for &link_mode in &cfg.injection.link_modes {
            let v = Variant {
                selection,
                link_mode,
            };
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    out
}

/// Plans, trains and re-scores every configured injection variant.
pub fn inject(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::for_config(cfg);
    let data = Prepared::load(&ws)?;
    let edges = cfg.injection.full_link_edges;
    let range = cfg.layer_range();
    for &seed in &cfg.seeds {
        let imp = load_importance(&ws, seed)?;
        let baseline = load_model(&ws.baseline(seed), "train")?;
        for v in variants(cfg) {
            let dir = ws.variant_dir(seed, v);
            mkdir(&dir)?;
            let plan = match v.selection {
                HeadSelection::Importance => {
                    plan_by_importance(&imp.ensemble, v.link_mode, range, cfg.injection.k)?
                }
                HeadSelection::Probing => {
                    let probes = probe_samples(&data.validation, v.link_mode, edges)?;
                    let (plan, report) =
                        plan_by_probing(&baseline, &probes, v.link_mode, range, cfg.injection.k)?;
                    write_text(&dir.join("probing.csv"), &report.to_csv())?;
                    plan
                }
            };
            write_json(&dir.join("plan.json"), &plan)?;
            let model = Seq2SeqModel::new(data.model_config(cfg), seed)?;
            let out = fine_tune_with_injection(
                model,
                &plan,
                &data.train,
                &data.validation,
                &cfg.training,
                seed,
                edges,
            )?;
            out.model.save(&dir.join("model.json"))?;
            write_text(
                &dir.join("history.csv"),
                &history_csv(&out.history, out.best_epoch),
            )?;
            let scoring = injected_examples(data.split(cfg.analysis.score_split), &plan, edges)?;
            write_json(
                &dir.join("importance.json"),
                &score_model(&out.model, &scoring, &cfg.analysis)?,
            )?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub label: String,
    pub score: RougeScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectResult {
    pub variant: Variant,
    pub score: RougeScore,
    /// Same model with the injected heads' gates at zero.
    pub ablated: RougeScore,
}

/// Test-set scores of the baseline and pruned models of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningEval {
    pub seed: u64,
    pub baseline: RougeScore,
    pub pruning: Vec<PruneResult>,
}

/// Test-set scores of the injected models of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionEval {
    pub seed: u64,
    pub injection: Vec<InjectResult>,
}

pub const PRUNE_INFERENCE_HIGHEST: &str = "Inference stage, highest-ranking heads";
pub const PRUNE_INFERENCE_LOWEST: &str = "Inference stage, lowest-ranking heads";
pub const PRUNE_TRAINING_LOWEST: &str = "Training stage, lowest-ranking heads";

struct Evaluator {
    data: Prepared,
    refs: Vec<String>,
    decode: DecodeSettings,
}

impl Evaluator {
    fn new(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Self> {
        let data = Prepared::load(ws)?;
        Ok(Self {
            refs: data.test.iter().map(|s| s.reference.join(" ")).collect(),
            data,
            decode: DecodeSettings {
                beam_size: cfg.decode.beam_size,
                max_len: cfg.decode.max_len,
            },
        })
    }

    fn score(&self, model: &Seq2SeqModel, examples: &[Example]) -> Result<RougeScore> {
        evaluate(model, examples, &self.refs, &self.data.vocab, self.decode)
    }
}

/// Decodes the test split with the baseline and every pruned model.
pub fn eval_pruning(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::for_config(cfg);
    let ev = Evaluator::new(cfg, &ws)?;
    let plain = plain_examples(&ev.data.test);
    for &seed in &cfg.seeds {
        let baseline = load_model(&ws.baseline(seed), "train")?;
        let mut result = PruningEval {
            seed,
            baseline: ev.score(&baseline, &plain)?,
            pruning: Vec::new(),
        };
        for (mode, label) in [
            (SelectionMode::Highest, PRUNE_INFERENCE_HIGHEST),
            (SelectionMode::Lowest, PRUNE_INFERENCE_LOWEST),
        ] {
            let plan: PruningPlan = read_json(&ws.prune_plan(seed, mode), "prune")?;
            let pruned = apply_pruning(baseline.clone(), &plan)?;
            result.pruning.push(PruneResult {
                label: label.into(),
                score: ev.score(&pruned, &plain)?,
            });
        }
        let trained = load_model(&ws.pruned_training(seed), "prune")?;
        result.pruning.push(PruneResult {
            label: PRUNE_TRAINING_LOWEST.into(),
            score: ev.score(&trained, &plain)?,
        });
        write_json(&ws.eval_pruning(seed), &result)?;
    }
    Ok(())
}

/// Decodes the test split with every injected model, with and without its
/// injected heads.
pub fn eval_injection(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::for_config(cfg);
    let ev = Evaluator::new(cfg, &ws)?;
    for &seed in &cfg.seeds {
        let mut result = InjectionEval {
            seed,
            injection: Vec::new(),
        };
        for v in variants(cfg) {
            let dir = ws.variant_dir(seed, v);
            let plan: InjectionPlan = read_json(&dir.join("plan.json"), "inject")?;
            let model = load_model(&dir.join("model.json"), "inject")?;
            let ex = injected_examples(&ev.data.test, &plan, cfg.injection.full_link_edges)?;
            let ablated = ablate_injected_heads(&model, &plan)?;
            result.injection.push(InjectResult {
                variant: v,
                score: ev.score(&model, &ex)?,
                ablated: ev.score(&ablated, &ex)?,
            });
        }
        write_json(&ws.eval_injection(seed), &result)?;
    }
    Ok(())
}

/// Test-set evaluation of every model.
pub fn eval(cfg: &ExperimentConfig) -> Result<()> {
    eval_pruning(cfg)?;
    eval_injection(cfg)
}

/// Renders every report from the stored artifacts.
pub fn report(cfg: &ExperimentConfig) -> Result<ReportFiles> {
    write_reports(cfg, &Workspace::for_config(cfg))
}

/// Every stage in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<ReportFiles> {
    gen_data(cfg)?;
    train_baselines(cfg)?;
    score_baselines(cfg)?;
    prune(cfg)?;
    inject(cfg)?;
    eval(cfg)?;
    report(cfg)
}

/// Reads a stored artifact, naming `producer` if it is missing.
pub fn load_artifact<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    read_json(path, producer)
}
