//! Synthetic multi-task regression suites.
//!
//! Every task shares one frozen base `W0` and adds a low-rank delta
//! `ΔW_t = A* B*_tᵀ`. With `shared_down` all tasks use the same orthonormal
//! `A*`; otherwise each task draws its own. Targets are
//! `Y_t = X_t (W0 + ΔW_t) + noise` with standard normal inputs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::orthonormalize_columns;
use crate::seed::{derive_seed, rng_from_seed, SeededRng};
use crate::tensor::Matrix;

/// Fraction of each task held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub true_rank: usize,
    pub shared_down: bool,
    pub noise_std: f64,
    pub samples_per_task: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_tasks: 15,
            input_dim: 32,
            output_dim: 32,
            true_rank: 4,
            shared_down: true,
            noise_std: 0.05,
            samples_per_task: 2000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::config("`num_tasks` must be at least 1"));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("`input_dim` and `output_dim` must be positive"));
        }
        if self.true_rank == 0 || self.true_rank > self.input_dim.min(self.output_dim) {
            return Err(Error::config(format!(
                "`true_rank` must be in 1..={}, got {}",
                self.input_dim.min(self.output_dim),
                self.true_rank
            )));
        }
        if self.samples_per_task < 10 {
            return Err(Error::config("`samples_per_task` must be at least 10"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("`noise_std` must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub x: Matrix,
    pub y: Matrix,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Per-task examples. `split_seed` fixes the train/eval partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskData>,
    pub split_seed: u64,
}

/// Train/eval partition with the row indices used, for auditing.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
    pub train_rows: Vec<Vec<usize>>,
    pub eval_rows: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_rows(&self) -> usize {
        self.tasks.iter().map(TaskData::len).sum()
    }

    /// Holds out `round(0.1 N)` rows of every task (at least one, leaving at
    /// least one for training), chosen by a seeded shuffle.
    pub fn split(&self) -> Result<Split> {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        let mut train_rows = Vec::new();
        let mut eval_rows = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            let n = task.len();
            if n < 2 {
                return Err(Error::config(format!("task {t} has {n} rows; need at least 2 to split")));
            }
            let n_eval = ((n as f64 * EVAL_FRACTION).round() as usize).clamp(1, n - 1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng_from_seed(derive_seed(self.split_seed, &format!("split/{t}"))));
            let (ev, tr) = idx.split_at(n_eval);
            let (mut ev, mut tr) = (ev.to_vec(), tr.to_vec());
            ev.sort_unstable();
            tr.sort_unstable();
            train.push(TaskData {
                x: task.x.select_rows(&tr)?,
                y: task.y.select_rows(&tr)?,
            });
            eval.push(TaskData {
                x: task.x.select_rows(&ev)?,
                y: task.y.select_rows(&ev)?,
            });
            train_rows.push(tr);
            eval_rows.push(ev);
        }
        Ok(Split {
            train: Dataset {
                tasks: train,
                split_seed: self.split_seed,
            },
            eval: Dataset {
                tasks: eval,
                split_seed: self.split_seed,
            },
            train_rows,
            eval_rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSet {
    pub spec: SynthSpec,
    /// Frozen base weight `W0 (P x Q)`.
    pub base: Matrix,
    /// Orthonormal `A*`: one entry when `shared_down`, else one per task.
    pub true_down: Vec<Matrix>,
    /// `B*_t (Q x r*)`, scaled so that `‖ΔW_t‖_F = 1`.
    pub true_up: Vec<Matrix>,
    /// `ΔW_t = A*_t B*_tᵀ`
    pub deltas: Vec<Matrix>,
    pub data: Dataset,
}

/// Generates a task suite; a pure function of `spec`.
pub fn gen_multitask(spec: &SynthSpec) -> Result<SyntheticTaskSet> {
    spec.validate()?;
    let (p_in, q_out, r, n) = (spec.input_dim, spec.output_dim, spec.true_rank, spec.samples_per_task);
    let mut rng = rng_from_seed(spec.seed);

    let base = Matrix::random_normal(p_in, q_out, 1.0 / (p_in as f64).sqrt(), &mut rng);
    let draw_down = |rng: &mut SeededRng| orthonormalize_columns(&Matrix::random_normal(p_in, r, 1.0, rng));
    let shared = spec.shared_down.then(|| draw_down(&mut rng));

    let mut true_down = Vec::new();
    let mut true_up = Vec::new();
    let mut deltas = Vec::new();
    let mut tasks = Vec::new();
    if let Some(a) = &shared {
        true_down.push(a.clone());
    }
    for _ in 0..spec.num_tasks {
        let down = match &shared {
            Some(a) => a.clone(),
            None => {
                let a = draw_down(&mut rng);
                true_down.push(a.clone());
                a
            }
        };
        let up_raw = Matrix::random_normal(q_out, r, 1.0, &mut rng);
        let delta_raw = down.matmul(&up_raw.transpose())?;
        let norm = delta_raw.frobenius_norm();
        let up = up_raw.scale(1.0 / norm);
        let delta = down.matmul(&up.transpose())?;

        let x = Matrix::random_normal(n, p_in, 1.0, &mut rng);
        let clean = x.matmul(&base.add(&delta)?)?;
        let y = if spec.noise_std > 0.0 {
            clean.add(&Matrix::random_normal(n, q_out, spec.noise_std, &mut rng))?
        } else {
            clean
        };
        true_up.push(up);
        deltas.push(delta);
        tasks.push(TaskData { x, y });
    }

    Ok(SyntheticTaskSet {
        spec: spec.clone(),
        base,
        true_down,
        true_up,
        deltas,
        data: Dataset {
            tasks,
            split_seed: derive_seed(spec.seed, "split"),
        },
    })
}

/// The irreducible MSE of the generative model, `σ²`.
pub fn oracle_best_loss(taskset: &SyntheticTaskSet) -> f64 {
    taskset.spec.noise_std * taskset.spec.noise_std
}

/// Which tasks a sampler draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    Single(usize),
    Mixture,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
    pub task_ids: Vec<usize>,
}

/// Epoch-based minibatch sampler.
///
/// Rows are drawn without replacement from a shuffled pool (one task, or the
/// union of all tasks for [`TaskMix::Mixture`]). When the pool runs out the
/// sampler reshuffles and continues, so a batch straddling an epoch boundary
/// may repeat a row from the previous epoch.
#[derive(Debug)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    pool: Vec<(usize, usize)>,
    cursor: usize,
    rng: SeededRng,
    epoch: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, mix: TaskMix, seed: u64) -> Result<Self> {
        let pool: Vec<(usize, usize)> = match mix {
            TaskMix::Single(t) => {
                let task = dataset.tasks.get(t).ok_or(Error::Index {
                    what: "task",
                    index: t,
                    len: dataset.tasks.len(),
                })?;
                (0..task.len()).map(|i| (t, i)).collect()
            }
            TaskMix::Mixture => dataset
                .tasks
                .iter()
                .enumerate()
                .flat_map(|(t, task)| (0..task.len()).map(move |i| (t, i)))
                .collect(),
        };
        if pool.is_empty() {
            return Err(Error::Empty("sampler pool"));
        }
        let mut s = Self {
            dataset,
            pool,
            cursor: 0,
            rng: rng_from_seed(seed),
            epoch: 0,
        };
        s.pool.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 || batch_size > self.pool.len() {
            return Err(Error::config(format!(
                "batch size {batch_size} must be in 1..={} (available examples)",
                self.pool.len()
            )));
        }
        let first = &self.dataset.tasks[self.pool[0].0];
        let (p_in, q_out) = (first.x.cols(), first.y.cols());
        let mut xs = Vec::with_capacity(batch_size * p_in);
        let mut ys = Vec::with_capacity(batch_size * q_out);
        let mut task_ids = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.cursor == self.pool.len() {
                self.pool.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            let (t, i) = self.pool[self.cursor];
            self.cursor += 1;
            let task = &self.dataset.tasks[t];
            xs.extend_from_slice(task.x.row(i));
            ys.extend_from_slice(task.y.row(i));
            task_ids.push(t);
        }
        Ok(Batch {
            x: Matrix::new(batch_size, p_in, xs)?,
            y: Matrix::new(batch_size, q_out, ys)?,
            task_ids,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: SynthSpec,
    seed: u64,
    split_seed: u64,
    base: String,
    tasks: Vec<ManifestTask>,
    shared_down_files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTask {
    x: String,
    y: String,
    delta: String,
    up: String,
}

/// Writes a matrix as headerless CSV, one row per line.
pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::config(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::config(format!("csv: {other:?}")),
    }
}

impl SyntheticTaskSet {
    /// Persists the suite as CSV matrices plus `manifest.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_matrix_csv(&self.base, &dir.join("base.csv"))?;
        let mut tasks = Vec::new();
        for (t, task) in self.data.tasks.iter().enumerate() {
            let entry = ManifestTask {
                x: format!("task_{t}_x.csv"),
                y: format!("task_{t}_y.csv"),
                delta: format!("task_{t}_delta.csv"),
                up: format!("task_{t}_up.csv"),
            };
            write_matrix_csv(&task.x, &dir.join(&entry.x))?;
            write_matrix_csv(&task.y, &dir.join(&entry.y))?;
            write_matrix_csv(&self.deltas[t], &dir.join(&entry.delta))?;
            write_matrix_csv(&self.true_up[t], &dir.join(&entry.up))?;
            tasks.push(entry);
        }
        let mut shared_down_files = Vec::new();
        for (i, a) in self.true_down.iter().enumerate() {
            let name = format!("down_{i}.csv");
            write_matrix_csv(a, &dir.join(&name))?;
            shared_down_files.push(name);
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            seed: self.spec.seed,
            split_seed: self.data.split_seed,
            base: "base.csv".into(),
            tasks,
            shared_down_files,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let base = read_matrix_csv(&dir.join(&manifest.base))?;
        let mut tasks = Vec::new();
        let mut deltas = Vec::new();
        let mut true_up = Vec::new();
        for t in &manifest.tasks {
            tasks.push(TaskData {
                x: read_matrix_csv(&dir.join(&t.x))?,
                y: read_matrix_csv(&dir.join(&t.y))?,
            });
            deltas.push(read_matrix_csv(&dir.join(&t.delta))?);
            true_up.push(read_matrix_csv(&dir.join(&t.up))?);
        }
        let true_down = manifest
            .shared_down_files
            .iter()
            .map(|f| read_matrix_csv(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: manifest.spec,
            base,
            true_down,
            true_up,
            deltas,
            data: Dataset {
                tasks,
                split_seed: manifest.split_seed,
            },
        })
    }
}
