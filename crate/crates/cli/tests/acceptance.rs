use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mode_cli::{cmd_compare, cmd_pca, cmd_train, Overrides};
use mode_core::adapters::{
    dyadic_reconstruct, enumerate_compositions, init_adapter, lora_forward, mode_forward, molora_sd_forward, param_count, Adapter, AdapterConfig,
    AdapterKind, LoraAdapter, MoLoraSdAdapter, ModeAdapter, ModeGroup,
};
use mode_core::analysis::{binomial_significance, win_rate, SliceKind};
use mode_core::seed::{rng_from_seed, SeededRng};
use mode_core::tensor::{finite_diff_grad, relative_error, Matrix};
use mode_core::training::{loss_and_grads, mse_loss};
use rand::Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion<'a> = (u32, &'static str, Duration, Box<dyn Fn() -> Check + 'a>);

fn normal(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, rng)
}

fn random_config(rng: &mut SeededRng, max_dim: usize, max_rank: usize, max_experts: usize) -> AdapterConfig {
    let r = rng.random_range(1..=max_rank);
    let divisors: Vec<usize> = (1..=r).filter(|d| r % d == 0).collect();
    AdapterConfig::new(
        rng.random_range(1..=max_dim),
        rng.random_range(1..=max_dim),
        r,
        rng.random_range(1..=max_experts),
        divisors[rng.random_range(0..divisors.len())],
    )
    .unwrap()
}

fn randomized(kind: AdapterKind, cfg: &AdapterConfig, rng: &mut SeededRng) -> Adapter {
    let mut a = init_adapter(kind, cfg, rng.random()).unwrap();
    for m in a.params_mut() {
        *m = Matrix::random_normal(m.rows(), m.cols(), 0.5, rng);
    }
    a
}

fn equivalence() -> Check {
    let mut rng = rng_from_seed(1);
    let (mut worst_lora, mut worst_sd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (p_in, q_out, r, n) = (rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=8), rng.random_range(1..=6));
        let x = normal(n, p_in, &mut rng);
        let w0 = normal(p_in, q_out, &mut rng);
        let down = normal(p_in, r, &mut rng);
        let up = normal(q_out, r, &mut rng);
        let mode = ModeAdapter {
            down: down.clone(),
            groups: vec![ModeGroup {
                experts: vec![up.clone()],
                router: normal(p_in, 1, &mut rng),
            }],
        };
        let lora = LoraAdapter { down, up };
        worst_lora = worst_lora.max(mode_forward(&x, &w0, &mode).map_err(|e| e.to_string())?.max_abs_diff(&lora_forward(&x, &w0, &lora).unwrap()));
    }
    for _ in 0..100 {
        let (p_in, q_out, r, m, n) = (
            rng.random_range(1..=12),
            rng.random_range(1..=12),
            rng.random_range(1..=8),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let x = normal(n, p_in, &mut rng);
        let w0 = normal(p_in, q_out, &mut rng);
        let down = normal(p_in, r, &mut rng);
        let ups: Vec<Matrix> = (0..m).map(|_| normal(q_out, r, &mut rng)).collect();
        let router = normal(p_in, m, &mut rng);
        let mode = ModeAdapter {
            down: down.clone(),
            groups: vec![ModeGroup {
                experts: ups.clone(),
                router: router.clone(),
            }],
        };
        let sd = MoLoraSdAdapter { down, ups, router };
        worst_sd = worst_sd.max(mode_forward(&x, &w0, &mode).unwrap().max_abs_diff(&molora_sd_forward(&x, &w0, &sd).unwrap()));
    }
    let detail = format!("max |MoDE-LoRA| {worst_lora:.2e}, max |MoDE-SD| {worst_sd:.2e} over 100+100 instances (tol 1e-12)");
    if worst_lora <= 1e-12 && worst_sd <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dyadic() -> Check {
    let mut rng = rng_from_seed(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (p_in, q_out, r) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
        let a = normal(p_in, r, &mut rng);
        let b = normal(q_out, r, &mut rng);
        worst = worst.max(dyadic_reconstruct(&a, &b).unwrap().max_abs_diff(&a.matmul(&b.transpose()).unwrap()));
    }
    let detail = format!("max |sum of outer products - A B^T| {worst:.2e} over 100 shapes (tol 1e-12)");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Check {
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for kind in AdapterKind::ALL {
        for _ in 0..20 {
            let cfg = random_config(&mut rng, 6, 4, 3);
            let adapter = randomized(kind, &cfg, &mut rng);
            let n = rng.random_range(1..=4);
            let x = normal(n, cfg.input_dim, &mut rng);
            let w0 = normal(cfg.input_dim, cfg.output_dim, &mut rng);
            let y = normal(n, cfg.output_dim, &mut rng);
            let (_, analytic) = loss_and_grads(&adapter, &w0, &x, &y).map_err(|e| e.to_string())?;
            let params: Vec<Matrix> = adapter.params().into_iter().cloned().collect();
            let mut probe = adapter.clone();
            let numeric = finite_diff_grad(
                |ps| {
                    probe.set_params(ps)?;
                    mse_loss(&probe.forward(&x, &w0)?, &y)
                },
                &params,
                1e-5,
            )
            .map_err(|e| e.to_string())?;
            for (a, f) in analytic.iter().zip(&numeric) {
                worst = worst.max(relative_error(a, f));
                checked += 1;
            }
        }
    }
    let detail = format!("max relative error {worst:.2e} over {checked} matrices, 20 instances per family (tol 1e-6, h=1e-5)");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn accounting() -> Check {
    let mut rng = rng_from_seed(4);
    for i in 0..200 {
        let cfg = random_config(&mut rng, 64, 16, 8);
        for kind in AdapterKind::ALL {
            let adapter = init_adapter(kind, &cfg, 0).unwrap();
            let enumerated: u64 = adapter.params().iter().map(|m| m.len() as u64).sum();
            let counted = param_count(kind, &cfg).unwrap().total;
            if counted != enumerated {
                return Err(format!("config #{i} {kind} {cfg:?}: counted {counted}, enumerated {enumerated}"));
            }
        }
        let full = param_count(AdapterKind::MoLora, &cfg).unwrap().down;
        let shared = param_count(AdapterKind::MoLoraSd, &cfg).unwrap().down;
        if full != shared * cfg.num_experts as u64 {
            return Err(format!("config #{i}: MoLoRA down {full} != m * SD down {shared}"));
        }
    }
    let c = enumerate_compositions(&AdapterConfig::new(16, 16, 4, 4, 1).unwrap()).unwrap();
    if c != 256 {
        return Err(format!("m=4 r=4 p=1 gives {c} compositions"));
    }
    Ok("200 configs x 4 families match enumeration; SD down = MoLoRA down / m; 4^4 = 256 compositions".into())
}

fn zero_init() -> Check {
    let mut rng = rng_from_seed(5);
    for _ in 0..25 {
        let cfg = random_config(&mut rng, 16, 8, 4);
        let x = normal(4, cfg.input_dim, &mut rng);
        let w0 = normal(cfg.input_dim, cfg.output_dim, &mut rng);
        let base = x.matmul(&w0).unwrap();
        for kind in AdapterKind::ALL {
            let adapter = init_adapter(kind, &cfg, rng.random()).unwrap();
            if adapter.forward(&x, &w0).unwrap() != base {
                return Err(format!("{kind} {cfg:?} differs from x W0 at init"));
            }
        }
    }
    Ok("forward == x W0 bit-for-bit for 25 configs x 4 families".into())
}

fn synth_json() -> Value {
    json!({
        "num_tasks": 15, "input_dim": 32, "output_dim": 32, "true_rank": 4,
        "shared_down": true, "noise_std": 0.05, "samples_per_task": 2000
    })
}

fn write(path: &Path, value: &Value) -> PathBuf {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

fn motivating_observation(root: &Path) -> Check {
    let cfg = write(
        &root.join("c6.json"),
        &json!({
            "synth": synth_json(),
            "adapter": {"kind": "lora", "config": {"input_dim": 32, "output_dim": 32, "lora_rank": 4}},
        }),
    );
    let mut hits = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let runs = root.join(format!("c6_seed{seed}"));
        for t in 0..15 {
            cmd_train(
                &cfg,
                &Overrides {
                    out: Some(runs.join(format!("task_{t:02}"))),
                    seed: Some(seed),
                    task: Some(t),
                },
            )
            .map_err(|e| e.to_string())?;
        }
        let pattern = runs.join("*/checkpoint.json");
        let pattern = pattern.to_str().unwrap();
        let down = cmd_pca(pattern, SliceKind::Down, 3, &runs.join("pca")).map_err(|e| e.to_string())?;
        let up = cmd_pca(pattern, SliceKind::Up, 3, &runs.join("pca")).map_err(|e| e.to_string())?;
        let (d, u) = (down.separation_by_rank_index.unwrap(), up.separation_by_rank_index.unwrap());
        if d < u {
            hits += 1;
        }
        lines.push(format!("{d:.3}/{u:.3}"));
    }
    let detail = format!("down < up separation in {hits}/10 seeds (need >= 9); down/up per seed: {}", lines.join(" "));
    if hits >= 9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn architecture_ordering(root: &Path) -> Check {
    let variants = json!([
        {"name": "lora", "kind": "lora", "config": {"P": 32, "Q": 32, "r": 10}},
        {"name": "molora_sd", "kind": "molora_sd", "config": {"P": 32, "Q": 32, "r": 4, "m": 3}},
        {"name": "mode", "kind": "mode", "config": {"P": 32, "Q": 32, "r": 4, "m": 2, "p": 1}},
    ]);
    let budget = 640u64;
    for v in variants.as_array().unwrap() {
        let kind: AdapterKind = serde_json::from_value(v["kind"].clone()).unwrap();
        let cfg: AdapterConfig = serde_json::from_value(v["config"].clone()).unwrap();
        let total = param_count(kind, &cfg).unwrap().total;
        // |total - budget| <= 5% of budget, in exact arithmetic
        if total.abs_diff(budget) * 20 > budget {
            return Err(format!("{kind} has {total} params, outside 640 +/- 5%"));
        }
    }
    let cfg = write(&root.join("c7.json"), &json!({"synth": synth_json(), "variants": variants}));
    let mut sums = BTreeMap::<String, f64>::new();
    let mut mode_beats_lora = 0;
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let s = cmd_compare(
            &cfg,
            &Overrides {
                out: Some(root.join(format!("c7_seed{seed}"))),
                seed: Some(seed),
                task: None,
            },
        )
        .map_err(|e| e.to_string())?;
        let loss: BTreeMap<String, f64> = s.variants.iter().map(|v| (v.name.clone(), v.final_eval_loss)).collect();
        for (k, v) in &loss {
            *sums.entry(k.clone()).or_default() += v / 5.0;
        }
        if loss["mode"] < loss["lora"] {
            mode_beats_lora += 1;
        }
        per_seed.push(format!("{:.6}/{:.6}/{:.6}", loss["mode"], loss["molora_sd"], loss["lora"]));
    }
    let (m, sd, l) = (sums["mode"], sums["molora_sd"], sums["lora"]);
    let ordered = m <= sd && sd <= l;
    let detail = format!(
        "mean eval MSE mode {m:.6}, molora_sd {sd:.6}, lora {l:.6} (need mode <= sd <= lora: {ordered}); mode beats lora in {mode_beats_lora}/5 (need >= 4); mode/sd/lora per seed: {}",
        per_seed.join(" ")
    );
    if ordered && mode_beats_lora >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Exact `P[X >= k]` for `X ~ Bin(n, 1/2)` in integer arithmetic.
fn exact_half_tail(k: u64, n: u64) -> f64 {
    let mut c = 1u128;
    let mut total = 0u128;
    for j in 0..=n {
        if j >= k {
            total += c;
        }
        c = c * (n - j) as u128 / (j + 1) as u128;
    }
    total as f64 / 2f64.powi(n as i32)
}

fn significance() -> Check {
    let s10 = binomial_significance(10, 10, 0.5, 0.99).map_err(|e| e.to_string())?;
    let s6 = binomial_significance(6, 10, 0.5, 0.99).map_err(|e| e.to_string())?;
    let (o10, o6) = (exact_half_tail(10, 10), exact_half_tail(6, 10));
    if (s10.p_value - o10).abs() > 1e-15 || !s10.significant || (s10.p_value - 9.77e-4).abs() > 5e-7 {
        return Err(format!("(10,10): p = {}, significant = {}", s10.p_value, s10.significant));
    }
    if (s6.p_value - o6).abs() > 1e-15 || s6.significant || (s6.p_value - 0.377).abs() > 5e-4 {
        return Err(format!("(6,10): p = {}, significant = {}", s6.p_value, s6.significant));
    }
    let levels = [0.0, 1.0, 2.0];
    let mut fixtures = 0;
    for code in 0..729usize {
        let digit = |i: usize| levels[code / 3usize.pow(i as u32) % 3];
        let a = [digit(0), digit(1), digit(2)];
        let b = [digit(3), digit(4), digit(5)];
        let ab = win_rate(&a, &b).unwrap();
        let ba = win_rate(&b, &a).unwrap();
        let wins = (0..3).filter(|&i| a[i] > b[i]).count() as f64;
        let ties = (0..3).filter(|&i| a[i] == b[i]).count() as f64;
        if (ab + ba - 1.0).abs() > 1e-15 || (ab - (wins + ties / 2.0) / 3.0).abs() > 1e-15 || win_rate(&a, &a).unwrap() != 0.5 {
            return Err(format!("win-rate axiom violated on a={a:?} b={b:?}"));
        }
        fixtures += 1;
    }
    Ok(format!(
        "p(10/10) = {:.6e} significant, p(6/10) = {:.6} not significant; win-rate axioms hold on {fixtures} 3-task fixtures",
        s10.p_value, s6.p_value
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mode")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`mode {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every file under `dir`, with the wall-clock field of run reports zeroed.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path).unwrap();
            if path.file_name().unwrap() == "run_report.json" {
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                v["wall_clock_secs"] = json!(0.0);
                bytes = serde_json::to_vec(&v).unwrap();
            }
            files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), bytes);
        }
    }
    files
}

fn determinism(root: &Path) -> Check {
    let synth = json!({
        "num_tasks": 4, "input_dim": 16, "output_dim": 16, "true_rank": 3,
        "shared_down": true, "noise_std": 0.05, "samples_per_task": 400
    });
    let train = write(
        &root.join("c9_train.json"),
        &json!({
            "seed": 11, "synth": synth, "train": {"steps": 300},
            "adapter": {"kind": "mode", "config": {"P": 16, "Q": 16, "r": 4, "m": 3, "p": 1}},
        }),
    );
    let single = write(
        &root.join("c9_single.json"),
        &json!({
            "seed": 11, "synth": synth, "train": {"steps": 300},
            "adapter": {"kind": "lora", "config": {"P": 16, "Q": 16, "r": 3}},
        }),
    );
    let compare = write(
        &root.join("c9_compare.json"),
        &json!({
            "seed": 11, "synth": synth, "train": {"steps": 300},
            "variants": [
                {"kind": "lora", "config": {"P": 16, "Q": 16, "r": 4}},
                {"kind": "molora", "config": {"P": 16, "Q": 16, "r": 2, "m": 2}},
                {"kind": "molora_sd", "config": {"P": 16, "Q": 16, "r": 4, "m": 2}},
                {"kind": "mode", "config": {"P": 16, "Q": 16, "r": 4, "m": 2, "p": 2}},
            ],
        }),
    );
    let mut compared = 0;
    for rep in ["a", "b"] {
        let base = root.join(format!("c9_{rep}"));
        let s = |p: PathBuf| p.to_str().unwrap().to_string();
        run_cli(&["train", "--config", &s(train.clone()), "--out", &s(base.join("train"))])?;
        run_cli(&["compare", "--config", &s(compare.clone()), "--out", &s(base.join("compare"))])?;
        for t in 0..4 {
            run_cli(&["train", "--config", &s(single.clone()), "--task", &t.to_string(), "--out", &s(base.join(format!("tasks/t{t}")))])?;
        }
        let pattern = s(base.join("tasks/*/checkpoint.json"));
        run_cli(&["pca", "--checkpoints", &pattern, "--kind", "down", "--out", &s(base.join("pca"))])?;
        run_cli(&["pca", "--checkpoints", &pattern, "--kind", "up", "--out", &s(base.join("pca"))])?;
        run_cli(&[
            "budget", "--input-dim", "32", "--output-dim", "32", "--budget", "2000", "--r-choices", "2,4,8",
            "--p-choices", "1,2", "--out", &s(base.join("budget")),
        ])?;
    }
    for sub in ["train", "compare", "tasks", "budget"] {
        let a = snapshot(&root.join("c9_a").join(sub));
        let b = snapshot(&root.join("c9_b").join(sub));
        if a.keys().ne(b.keys()) {
            return Err(format!("{sub}: different file sets"));
        }
        for (path, bytes) in &a {
            if &b[path] != bytes {
                return Err(format!("{sub}/{} differs between reruns", path.display()));
            }
            compared += 1;
        }
    }
    // pca echoes the checkpoint glob, which names the run directory
    let a = snapshot(&root.join("c9_a/pca"));
    let b = snapshot(&root.join("c9_b/pca"));
    for (path, bytes) in &a {
        if path.to_str().unwrap().contains("_config") {
            continue;
        }
        if &b[path] != bytes {
            return Err(format!("pca/{} differs between reruns", path.display()));
        }
        compared += 1;
    }
    Ok(format!("train, compare, pca and budget reruns byte-identical across {compared} output files"))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let criteria: Vec<Criterion> = vec![
        (1, "equivalence suite", Duration::from_secs(10), Box::new(equivalence)),
        (2, "dyadic identity", Duration::from_secs(5), Box::new(dyadic)),
        (3, "gradient suite", Duration::from_secs(60), Box::new(gradients)),
        (4, "parameter accounting", Duration::from_secs(5), Box::new(accounting)),
        (5, "zero-init neutrality", Duration::from_secs(1), Box::new(zero_init)),
        (6, "motivating observation", Duration::from_secs(15 * 60), Box::new(|| motivating_observation(root))),
        (7, "architecture ordering", Duration::from_secs(30 * 60), Box::new(|| architecture_ordering(root))),
        (8, "significance machinery", Duration::from_secs(1), Box::new(significance)),
        (9, "determinism", Duration::from_secs(15 * 60), Box::new(|| determinism(root))),
    ];
    let mut failures = 0;
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
            Err(d) => (false, d),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "acceptance criterion {n} ({name}): {} [{:.2?}] {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
