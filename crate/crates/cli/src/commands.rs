use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use mode_core::adapters::{enumerate_compositions, init_adapter, param_count, Adapter, AdapterConfig, AdapterKind, Checkpoint, LoraAdapter};
use mode_core::analysis::{
    binomial_significance, cluster_separation, collect_rank_slices, param_percent, pca, projections_csv, win_rate_matrix_csv, win_record,
    Significance, SliceKind, WinRecord,
};
use mode_core::synthbench::{gen_multitask, SyntheticTaskSet, TaskMix};
use mode_core::training::{train_loop, RunReport, TrainConfig};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{CliError, CliResult};
use crate::output::{csv_string, ensure_dir, file_safe, write_atomic, write_json};

/// Confidence level for win-rate significance flags.
pub const CONFIDENCE: f64 = 0.99;

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub task: Option<usize>,
}

fn resolve(config_path: &Path, ov: &Overrides) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if ov.task.is_some() {
        cfg.task = ov.task;
    }
    cfg.validate_common()?;
    let out = cfg.out_dir(ov.out.as_deref())?;
    Ok((cfg, out))
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    seed: Option<u64>,
    config: &'a T,
}

fn train_variant(cfg: &ExperimentConfig, suite: &SyntheticTaskSet, variant: &Variant, mix: TaskMix) -> CliResult<(Adapter, RunReport)> {
    let init_seed = cfg.init_seed(variant);
    let mut adapter = init_adapter(variant.kind, &variant.config, init_seed)?;
    let task = match mix {
        TaskMix::Single(t) => Some(t),
        TaskMix::Mixture => None,
    };
    let train = TrainConfig {
        seed: cfg.train_seed(variant, task),
        ..cfg.train.clone()
    };
    let report = train_loop(&mut adapter, &suite.base, &suite.data, mix, &train)?;
    Ok((adapter, report))
}

fn write_run(dir: &Path, adapter: &Adapter, report: &RunReport, seed: u64, label: String) -> CliResult<()> {
    let ckpt = Checkpoint::from_adapter(adapter, seed, report.steps as u64).with_label(label);
    write_atomic(&dir.join("checkpoint.json"), ckpt.to_json()?.as_bytes())?;
    write_json(&dir.join("run_report.json"), report)?;
    write_atomic(&dir.join("losses.csv"), report.losses_csv().as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub final_eval_loss: f64,
}

/// Generate the suite, initialize, train and evaluate one adapter.
pub fn cmd_train(config_path: &Path, ov: &Overrides) -> CliResult<TrainSummary> {
    let (cfg, out) = resolve(config_path, ov)?;
    let variant = cfg
        .adapter
        .clone()
        .ok_or_else(|| CliError::Config("missing field `adapter`".into()))?;
    let suite = gen_multitask(&cfg.seeded_synth())?;
    let mix = cfg.task.map_or(TaskMix::Mixture, TaskMix::Single);
    let (adapter, report) = train_variant(&cfg, &suite, &variant, mix)?;

    ensure_dir(&out)?;
    let label = cfg.task.map_or_else(|| "mixture".to_string(), |t| format!("task_{t}"));
    write_run(&out, &adapter, &report, cfg.init_seed(&variant), label)?;
    write_json(
        &out.join("config.json"),
        &Echo {
            command: "train",
            seed: Some(cfg.seed),
            config: &cfg,
        },
    )?;
    Ok(TrainSummary {
        out_dir: out,
        final_eval_loss: report.final_eval_loss,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub kind: AdapterKind,
    pub config: AdapterConfig,
    pub total_params: u64,
    pub percent: f64,
    pub final_eval_loss: f64,
    pub task_eval_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairResult {
    pub model: String,
    pub baseline: String,
    pub record: WinRecord,
    pub significance: Significance,
}

#[derive(Debug, Clone)]
pub struct CompareSummary {
    pub out_dir: PathBuf,
    pub variants: Vec<VariantResult>,
    pub pairs: Vec<PairResult>,
}

fn unique_names(variants: &[Variant]) -> Vec<String> {
    let mut seen = HashSet::new();
    variants
        .iter()
        .map(|v| {
            let base = v.name.clone().unwrap_or_else(|| v.canonical_label());
            let mut name = base.clone();
            let mut k = 2;
            while !seen.insert(name.clone()) {
                name = format!("{base}_{k}");
                k += 1;
            }
            name
        })
        .collect()
}

/// Pairwise win record of `a` against `b` where lower per-task loss wins.
pub fn compare_pair(a: &[f64], b: &[f64]) -> CliResult<(WinRecord, Significance)> {
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let record = win_record(&neg(a), &neg(b))?;
    let decided = record.wins + record.losses;
    let significance = if decided == 0 {
        Significance {
            significant: false,
            p_value: 1.0,
        }
    } else {
        binomial_significance(record.wins, decided, 0.5, CONFIDENCE)?
    };
    Ok((record, significance))
}

/// Train every listed variant on the same mixture and tabulate.
pub fn cmd_compare(config_path: &Path, ov: &Overrides) -> CliResult<CompareSummary> {
    let (cfg, out) = resolve(config_path, ov)?;
    if cfg.variants.len() < 2 {
        return Err(CliError::Config("`variants` must list at least two adapters".into()));
    }
    let names = unique_names(&cfg.variants);
    let suite = gen_multitask(&cfg.seeded_synth())?;
    let runs: Vec<CliResult<(Adapter, RunReport)>> = cfg
        .variants
        .par_iter()
        .map(|v| train_variant(&cfg, &suite, v, TaskMix::Mixture))
        .collect();
    let runs: Vec<(Adapter, RunReport)> = runs.into_iter().collect::<CliResult<_>>()?;

    ensure_dir(&out)?;
    let backbone = cfg.backbone();
    let mut results = Vec::new();
    for ((variant, name), (adapter, report)) in cfg.variants.iter().zip(&names).zip(&runs) {
        let total = param_count(variant.kind, &variant.config)?.total;
        write_run(&out.join("variants").join(file_safe(name)), adapter, report, cfg.init_seed(variant), name.clone())?;
        results.push(VariantResult {
            name: name.clone(),
            kind: variant.kind,
            config: variant.config,
            total_params: total,
            percent: param_percent(total, backbone)?,
            final_eval_loss: report.final_eval_loss,
            task_eval_losses: report.task_eval_losses.iter().map(|t| t.loss).collect(),
        });
    }

    let num_tasks = cfg.synth.num_tasks;
    let mut header: Vec<String> = ["variant", "total_params", "percent", "final_eval_loss"].map(String::from).to_vec();
    header.extend((0..num_tasks).map(|t| format!("task_{t}")));
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut row = vec![
                r.name.clone(),
                r.total_params.to_string(),
                format!("{:.2}", r.percent),
                r.final_eval_loss.to_string(),
            ];
            row.extend(r.task_eval_losses.iter().map(f64::to_string));
            row
        })
        .collect();
    write_atomic(&out.join("comparison.csv"), csv_string(&header, &rows)?.as_bytes())?;

    let mut matrix = Vec::new();
    let mut pairs = Vec::new();
    for a in &results {
        let mut row = Vec::new();
        for b in &results {
            if std::ptr::eq(a, b) {
                row.push(None);
                continue;
            }
            let (record, significance) = compare_pair(&a.task_eval_losses, &b.task_eval_losses)?;
            row.push(Some((record, significance)));
            pairs.push(PairResult {
                model: a.name.clone(),
                baseline: b.name.clone(),
                record,
                significance,
            });
        }
        matrix.push(row);
    }
    write_atomic(&out.join("win_rates.csv"), win_rate_matrix_csv(&names, &matrix)?.as_bytes())?;

    let sig_header = ["model", "baseline", "wins", "losses", "ties", "win_rate", "p_value", "significant"].map(String::from);
    let sig_rows: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| {
            vec![
                p.model.clone(),
                p.baseline.clone(),
                p.record.wins.to_string(),
                p.record.losses.to_string(),
                p.record.ties.to_string(),
                p.record.rate().to_string(),
                p.significance.p_value.to_string(),
                p.significance.significant.to_string(),
            ]
        })
        .collect();
    write_atomic(&out.join("significance.csv"), csv_string(&sig_header, &sig_rows)?.as_bytes())?;
    write_json(
        &out.join("config.json"),
        &Echo {
            command: "compare",
            seed: Some(cfg.seed),
            config: &cfg,
        },
    )?;

    Ok(CompareSummary {
        out_dir: out,
        variants: results,
        pairs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PcaSummary {
    pub kind: SliceKind,
    pub k: usize,
    pub num_points: usize,
    pub dimension: usize,
    pub checkpoints: Vec<String>,
    pub explained_variance: Vec<f64>,
    /// Separation of the full slice vectors grouped by rank index.
    pub separation_by_rank_index: Option<f64>,
    pub separation_by_task: Option<f64>,
    /// Same scores computed on the `k`-dimensional projections.
    pub projected_separation_by_rank_index: Option<f64>,
    pub projected_separation_by_task: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct PcaArgsEcho<'a> {
    checkpoints: &'a str,
    kind: SliceKind,
    k: usize,
}

fn checkpoint_label(path: &Path, ckpt: &Checkpoint) -> String {
    ckpt.label.clone().unwrap_or_else(|| {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            Some(parent) => format!("{parent}/{stem}"),
            None => stem.to_string(),
        }
    })
}

/// Rank-slice PCA over LoRA checkpoints matched by `pattern`.
pub fn cmd_pca(pattern: &str, kind: SliceKind, k: usize, out: &Path) -> CliResult<PcaSummary> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| CliError::Config(format!("bad checkpoint pattern: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io(e.path().to_path_buf(), std::io::Error::from(e)))?;
    let mut paths = paths;
    paths.sort();
    if paths.len() < 2 {
        return Err(CliError::Config(format!(
            "pattern `{pattern}` matched {} checkpoint(s); need at least 2",
            paths.len()
        )));
    }
    let mut adapters: Vec<(String, LoraAdapter)> = Vec::new();
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let ckpt = Checkpoint::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        match ckpt.to_adapter()? {
            Adapter::Lora(a) => adapters.push((checkpoint_label(path, &ckpt), a)),
            other => {
                return Err(CliError::Config(format!(
                    "{}: rank-slice analysis needs lora checkpoints, found {}",
                    path.display(),
                    other.kind()
                )))
            }
        }
    }
    let slices = collect_rank_slices(&adapters, kind)?;
    let (model, projections) = pca(&slices, k)?;
    let full = slices.to_matrix()?;
    let by_rank: Vec<usize> = slices.slices.iter().map(|s| s.rank_index).collect();
    let by_task: Vec<&str> = slices.slices.iter().map(|s| s.task.as_str()).collect();

    let summary = PcaSummary {
        kind,
        k,
        num_points: slices.slices.len(),
        dimension: slices.dim,
        checkpoints: adapters.iter().map(|(l, _)| l.clone()).collect(),
        explained_variance: model.explained_variance.clone(),
        separation_by_rank_index: cluster_separation(&full, &by_rank).ok(),
        separation_by_task: cluster_separation(&full, &by_task).ok(),
        projected_separation_by_rank_index: cluster_separation(&projections, &by_rank).ok(),
        projected_separation_by_task: cluster_separation(&projections, &by_task).ok(),
    };
    ensure_dir(out)?;
    let name = kind.as_str();
    write_atomic(&out.join(format!("pca_{name}.csv")), projections_csv(&slices, &projections)?.as_bytes())?;
    write_json(&out.join(format!("pca_{name}_summary.json")), &summary)?;
    write_json(
        &out.join(format!("pca_{name}_config.json")),
        &Echo {
            command: "pca",
            seed: None,
            config: &PcaArgsEcho { checkpoints: pattern, kind, k },
        },
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetArgs {
    pub input_dim: usize,
    pub output_dim: usize,
    pub budget: u64,
    pub families: Vec<AdapterKind>,
    pub r_choices: Vec<usize>,
    pub p_choices: Vec<usize>,
    pub backbone: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub family: AdapterKind,
    pub m: usize,
    pub r: usize,
    pub p: usize,
    pub total: u64,
    pub percent: f64,
    /// `None` when `m^(r/p)` overflows.
    pub compositions: Option<u128>,
}

fn total_for(kind: AdapterKind, p_in: usize, q_out: usize, r: usize, m: usize, p: usize) -> CliResult<Option<u64>> {
    let cfg = AdapterConfig::new(p_in, q_out, r, m, p)?;
    match param_count(kind, &cfg) {
        Ok(b) => Ok(Some(b.total)),
        Err(mode_core::Error::Overflow(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Largest `m` whose total fits `budget`, if any.
fn max_experts(kind: AdapterKind, a: &BudgetArgs, r: usize, p: usize) -> CliResult<Option<(usize, u64)>> {
    let fits = |m: usize| -> CliResult<Option<u64>> {
        Ok(total_for(kind, a.input_dim, a.output_dim, r, m, p)?.filter(|&t| t <= a.budget))
    };
    let Some(t1) = fits(1)? else { return Ok(None) };
    if kind == AdapterKind::Lora {
        return Ok(Some((1, t1)));
    }
    // totals are affine in m
    let t2 = total_for(kind, a.input_dim, a.output_dim, r, 2, p)?
        .ok_or_else(|| CliError::Config("parameter count overflow".into()))?;
    let slope = t2 - t1;
    let mut m = 1 + usize::try_from((a.budget - t1) / slope).unwrap_or(usize::MAX - 1);
    while m > 1 && fits(m)?.is_none() {
        m -= 1;
    }
    while fits(m + 1)?.is_some() {
        m += 1;
    }
    Ok(fits(m)?.map(|t| (m, t)))
}

pub fn budget_rows(a: &BudgetArgs) -> CliResult<Vec<BudgetRow>> {
    if a.budget == 0 {
        return Err(CliError::Config("`budget` must be positive".into()));
    }
    if a.input_dim == 0 || a.output_dim == 0 {
        return Err(CliError::Config("`input_dim` and `output_dim` must be positive".into()));
    }
    if a.families.is_empty() || a.r_choices.is_empty() {
        return Err(CliError::Config("`families` and `r_choices` must be non-empty".into()));
    }
    if a.r_choices.contains(&0) || a.p_choices.contains(&0) {
        return Err(CliError::Config("rank choices must be positive".into()));
    }
    let backbone = a.backbone.unwrap_or((a.input_dim * a.output_dim) as u64);
    let mut rows = Vec::new();
    for &family in &a.families {
        for &r in &a.r_choices {
            let ps: Vec<usize> = match family {
                AdapterKind::Mode => a.p_choices.iter().copied().filter(|&p| p <= r && r % p == 0).collect(),
                _ => vec![r],
            };
            for p in ps {
                if let Some((m, total)) = max_experts(family, a, r, p)? {
                    let cfg = AdapterConfig::new(a.input_dim, a.output_dim, r, m, p)?;
                    rows.push(BudgetRow {
                        family,
                        m,
                        r,
                        p,
                        total,
                        percent: param_percent(total, backbone)?,
                        compositions: enumerate_compositions(&cfg).ok(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Iso-parametric search: the largest expert count per family and `(r, p)`
/// fitting the budget.
pub fn cmd_budget(args: &BudgetArgs, out: &Path) -> CliResult<Vec<BudgetRow>> {
    let rows = budget_rows(args)?;
    if rows.is_empty() {
        return Err(CliError::Infeasible(format!(
            "no configuration of {} with r in {:?} fits a budget of {} parameters",
            args.families.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", "),
            args.r_choices,
            args.budget
        )));
    }
    let header = ["family", "m", "r", "p", "total", "percent", "compositions"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.family.to_string(),
                r.m.to_string(),
                r.r.to_string(),
                r.p.to_string(),
                r.total.to_string(),
                format!("{:.2}", r.percent),
                r.compositions.map_or_else(|| "overflow".to_string(), |c| c.to_string()),
            ]
        })
        .collect();
    ensure_dir(out)?;
    write_atomic(&out.join("budget.csv"), csv_string(&header, &body)?.as_bytes())?;
    write_json(
        &out.join("budget_config.json"),
        &Echo {
            command: "budget",
            seed: None,
            config: args,
        },
    )?;
    Ok(rows)
}
