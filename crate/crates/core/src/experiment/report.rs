use std::fmt::Write as _;
use std::path::PathBuf;

use super::{
    load_artifact, mkdir, write_text, ExperimentConfig, InjectResult, InjectionEval,
    ModelImportance, PruningEval, Variant, Workspace,
};
use crate::corpus::{stats, Corpus};
use crate::error::{ensure, Result};
use crate::head_analysis::{aggregate_runs, Heatmap};
use crate::injection::{importance_before_after, InjectionPlan};
use crate::metrics::{format_relative, relative_change, RougeScore};

/// Paths of the files written by a report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

const METRICS: [&str; 3] = ["ROUGE-1", "ROUGE-2", "ROUGE-L"];

/// F1 values in percent.
fn pct(s: &RougeScore) -> [f64; 3] {
    s.f1_triple().map(|v| 100.0 * v)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One table row across seeds: per-seed percent triples.
struct Row {
    label: String,
    per_seed: Vec<[f64; 3]>,
}

impl Row {
    fn new(label: impl Into<String>, scores: impl IntoIterator<Item = RougeScore>) -> Self {
        Self {
            label: label.into(),
            per_seed: scores.into_iter().map(|s| pct(&s)).collect(),
        }
    }

    fn stats(&self, m: usize) -> (f64, f64) {
        mean_std(&self.per_seed.iter().map(|t| t[m]).collect::<Vec<_>>())
    }

    fn means(&self) -> [f64; 3] {
        [0, 1, 2].map(|m| self.stats(m).0)
    }
}

/// Markdown table of seed means, with relative changes against `base`
/// when given.
fn markdown(title: &str, first: &str, rows: &[Row], base: Option<&Row>, seeds: usize) -> String {
    let mut out = format!("## {title}\n\nMean over {seeds} seed(s); scores are F1 in percent.\n\n");
    let _ = writeln!(out, "| {first} | {} |", METRICS.join(" | "));
    out.push_str("|---|---|---|---|\n");
    for row in rows {
        let means = row.means();
        let cells: Vec<String> = (0..3)
            .map(|m| match base {
                Some(b) if !std::ptr::eq(b, row) => {
                    format!(
                        "{:.2} ({})",
                        means[m],
                        format_relative(relative_change(means[m], b.means()[m]))
                    )
                }
                _ => format!("{:.2}", means[m]),
            })
            .collect();
        let _ = writeln!(out, "| {} | {} |", row.label, cells.join(" | "));
    }
    out
}

/// Seed-aggregated CSV: mean and std per metric plus relative change of the
/// mean against `base`.
fn summary_csv(rows: &[Row], base: Option<&Row>) -> String {
    let mut out = String::from(
        "setting,rouge1_mean,rouge1_std,rouge2_mean,rouge2_std,rouge_l_mean,rouge_l_std,rouge1_rel,rouge2_rel,rouge_l_rel\n",
    );
    for row in rows {
        let _ = write!(out, "{}", csv_field(&row.label));
        for m in 0..3 {
            let (mean, std) = row.stats(m);
            let _ = write!(out, ",{mean:.6},{std:.6}");
        }
        for m in 0..3 {
            let rel = base.map_or(0.0, |b| relative_change(row.means()[m], b.means()[m]));
            let _ = write!(out, ",{rel:.6}");
        }
        out.push('\n');
    }
    out
}

fn seeds_csv(seeds: &[u64], rows: &[Row]) -> String {
    let mut out = String::from("seed,setting,rouge1,rouge2,rouge_l\n");
    for row in rows {
        for (seed, t) in seeds.iter().zip(&row.per_seed) {
            let _ = writeln!(
                out,
                "{seed},{},{:.6},{:.6},{:.6}",
                csv_field(&row.label),
                t[0],
                t[1],
                t[2]
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Both evaluation files of one seed.
struct SeedEval {
    seed: u64,
    baseline: RougeScore,
    pruning: Vec<super::PruneResult>,
    injection: Vec<InjectResult>,
}

fn load_eval(ws: &Workspace, seed: u64) -> Result<SeedEval> {
    let p: PruningEval = load_artifact(&ws.eval_pruning(seed), "eval")?;
    let i: InjectionEval = load_artifact(&ws.eval_injection(seed), "eval")?;
    Ok(SeedEval {
        seed,
        baseline: p.baseline,
        pruning: p.pruning,
        injection: i.injection,
    })
}

fn injection_of(e: &SeedEval, v: Variant) -> Option<&InjectResult> {
    e.injection.iter().find(|r| r.variant == v)
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
    index: String,
}

impl Writer {
    fn put(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        write_text(&path, text)?;
        self.files.push(path);
        Ok(())
    }

    fn table(&mut self, stem: &str, md: String, csv: String, per_seed: String) -> Result<()> {
        self.put(&format!("{stem}.md"), &md)?;
        self.put(&format!("{stem}.csv"), &csv)?;
        self.put(&format!("{stem}_seeds.csv"), &per_seed)?;
        self.index.push_str(&md);
        self.index.push('\n');
        Ok(())
    }
}

/// Writes markdown and CSV tables for pruning, injection, ablation,
/// importance shifts, corpus statistics and heatmaps.
pub fn write_reports(cfg: &ExperimentConfig, ws: &Workspace) -> Result<ReportFiles> {
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let evals = seeds
        .iter()
        .map(|&s| load_eval(ws, s))
        .collect::<Result<Vec<_>>>()?;
    let dir = ws.reports();
    mkdir(&dir)?;
    let mut w = Writer {
        dir,
        files: Vec::new(),
        index: format!("# Report for run `{}`\n\n", cfg.run_id),
    };

    let corpus_path = ws.corpus();
    super::require(&corpus_path, "gen-data")?;
    let st = stats(&Corpus::load_jsonl(&corpus_path)?)?;
    w.put("corpus_stats.md", &st.to_markdown())?;
    w.put("corpus_stats.csv", &st.to_csv())?;
    w.index.push_str("## Corpus statistics\n\n");
    w.index.push_str(&st.to_markdown());
    w.index.push('\n');

    let n = seeds.len();

    // Pruning.
    let labels: Vec<String> = evals[0].pruning.iter().map(|p| p.label.clone()).collect();
    let mut rows = vec![Row::new("Baseline", evals.iter().map(|e| e.baseline))];
    for label in &labels {
        let scores = evals
            .iter()
            .map(|e| {
                e.pruning
                    .iter()
                    .find(|p| &p.label == label)
                    .map(|p| p.score)
                    .ok_or_else(|| {
                        crate::Error::Contract(format!(
                            "seed {} lacks pruning row {label:?}",
                            e.seed
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row::new(label.clone(), scores));
    }
    w.table(
        "table3_pruning",
        markdown("Pruning heads", "Setting", &rows, Some(&rows[0]), n)
            + "\nRelative changes against the baseline are in brackets.\n",
        summary_csv(&rows, Some(&rows[0])),
        seeds_csv(&seeds, &rows),
    )?;

    // Injection comparison.
    let variants = super::variants(cfg);
    let mut rows = vec![Row::new("Baseline", evals.iter().map(|e| e.baseline))];
    for &v in &variants {
        let scores = evals
            .iter()
            .map(|e| injection_of(e, v).map(|r| r.score))
            .collect::<Option<Vec<_>>>();
        ensure!(
            scores.is_some(),
            Contract,
            "missing results for {}: run `eval`",
            v.tag()
        );
        rows.push(Row::new(v.label(), scores.unwrap_or_default()));
    }
    w.table(
        "table4_injection",
        markdown("Head selection and injection", "Model", &rows, None, n),
        summary_csv(&rows, Some(&rows[0])),
        seeds_csv(&seeds, &rows),
    )?;

    // Ablation of injected heads.
    let mut md = format!(
        "## Ablation of injected heads\n\nMean over {n} seed(s); scores are F1 in percent. Relative changes against the unablated model are in brackets.\n\n| Model | {} |\n|---|---|---|---|\n",
        METRICS.join(" | ")
    );
    let mut csv = String::from("variant,ablated,rouge1_mean,rouge1_std,rouge2_mean,rouge2_std,rouge_l_mean,rouge_l_std,rouge1_rel,rouge2_rel,rouge_l_rel\n");
    let mut per_seed = String::from("seed,variant,ablated,rouge1,rouge2,rouge_l\n");
    for &v in &variants {
        let results: Vec<&InjectResult> = evals.iter().filter_map(|e| injection_of(e, v)).collect();
        let full = Row::new(v.label(), results.iter().map(|r| r.score));
        let ablated = Row::new(
            format!("{}, injected heads masked", v.label()),
            results.iter().map(|r| r.ablated),
        );
        let means = full.means();
        let _ = writeln!(
            md,
            "| {} | {:.2} | {:.2} | {:.2} |",
            full.label, means[0], means[1], means[2]
        );
        let cells: Vec<String> = (0..3)
            .map(|m| {
                let (a, f) = (ablated.means()[m], full.means()[m]);
                format!("{a:.2} ({})", format_relative(relative_change(a, f)))
            })
            .collect();
        let _ = writeln!(md, "| {} | {} |", ablated.label, cells.join(" | "));
        for (row, flag) in [(&full, 0), (&ablated, 1)] {
            let _ = write!(csv, "{},{flag}", v.tag());
            for m in 0..3 {
                let (mean, std) = row.stats(m);
                let _ = write!(csv, ",{mean:.6},{std:.6}");
            }
            for m in 0..3 {
                let rel = if flag == 1 {
                    relative_change(row.means()[m], full.means()[m])
                } else {
                    0.0
                };
                let _ = write!(csv, ",{rel:.6}");
            }
            csv.push('\n');
            for (seed, t) in seeds.iter().zip(&row.per_seed) {
                let _ = writeln!(
                    per_seed,
                    "{seed},{},{flag},{:.6},{:.6},{:.6}",
                    v.tag(),
                    t[0],
                    t[1],
                    t[2]
                );
            }
        }
    }
    w.table("table5_ablation", md, csv, per_seed)?;

    // Importance of injected heads before and after injection.
    let mut md = String::from(
        "## Normalized importance of injected heads\n\nBefore: baseline model. After: model trained with injection. Values are per-layer normalized importance.\n\n| Model | Seed | Layer | Head | Before | After | Change |\n|---|---|---|---|---|---|---|\n",
    );
    let mut csv = String::from("variant,seed,layer,head,before,after,change\n");
    let mut summary =
        String::from("\n| Model | Seed | Layers with higher importance |\n|---|---|---|\n");
    for &v in &variants {
        for &seed in &seeds {
            let before: ModelImportance = load_artifact(&ws.importance(seed), "score-heads")?;
            let vd = ws.variant_dir(seed, v);
            let after: ModelImportance = load_artifact(&vd.join("importance.json"), "inject")?;
            let plan: InjectionPlan = load_artifact(&vd.join("plan.json"), "inject")?;
            let cmp = importance_before_after(&before.ensemble, &after.ensemble, &plan)?;
            for s in &cmp.slots {
                let d = s.after - s.before;
                let _ = writeln!(
                    md,
                    "| {} | {seed} | {} | {} | {:.2} | {:.2} | {:+.2} |",
                    v.label(),
                    s.layer,
                    s.head,
                    s.before,
                    s.after,
                    d
                );
                let _ = writeln!(
                    csv,
                    "{},{seed},{},{},{:.6},{:.6},{:.6}",
                    v.tag(),
                    s.layer,
                    s.head,
                    s.before,
                    s.after,
                    d
                );
            }
            let _ = writeln!(
                summary,
                "| {} | {seed} | {} of {} |",
                v.label(),
                cmp.layers_increased(),
                cmp.layers.len()
            );
        }
    }
    md.push_str(&summary);
    w.put("fig4_importance.md", &md)?;
    w.put("fig4_importance.csv", &csv)?;
    w.index.push_str(&md);
    w.index.push('\n');

    // Heatmaps: one per seed plus the cross-seed mean of whole-split maps.
    let mut wholes = Vec::new();
    for &seed in &seeds {
        let imp: ModelImportance = load_artifact(&ws.importance(seed), "score-heads")?;
        let map = Heatmap::from_ensemble(&imp.ensemble);
        w.put(&format!("heatmap_seed-{seed}.csv"), &map.to_csv())?;
        w.put(&format!("heatmap_seed-{seed}.svg"), &map.to_svg())?;
        wholes.push(imp.whole);
    }
    let ens = aggregate_runs(wholes, cfg.analysis.cov_threshold)?;
    let mean = Heatmap::from_ensemble(&ens);
    w.put("heatmap_mean.csv", &mean.to_csv())?;
    w.put("heatmap_mean.svg", &mean.to_svg())?;

    let index = std::mem::take(&mut w.index);
    w.put("report.md", &index)?;
    Ok(ReportFiles { files: w.files })
}
