//! Post-hoc analysis of trained adapters and comparison results.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceKind {
    Down,
    Up,
}

impl SliceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SliceKind::Down => "down",
            SliceKind::Up => "up",
        }
    }
}

impl std::str::FromStr for SliceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(SliceKind::Down),
            "up" => Ok(SliceKind::Up),
            other => Err(Error::config(format!("slice kind must be `down` or `up`, got `{other}`"))),
        }
    }
}

/// One column of a down- or up-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSlice {
    pub vector: Vec<f64>,
    pub task: String,
    /// Position along the rank dimension, 0-based.
    pub rank_index: usize,
    pub kind: SliceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSliceSet {
    pub dim: usize,
    pub slices: Vec<RankSlice>,
}

impl RankSliceSet {
    /// Slices stacked as rows.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let rows: Vec<&[f64]> = self.slices.iter().map(|s| s.vector.as_slice()).collect();
        Matrix::from_rows(&rows)
    }
}

/// Emits every rank column of `A` (`kind = Down`) or `B` (`kind = Up`) of
/// each labelled adapter.
pub fn collect_rank_slices(adapters: &[(String, LoraAdapter)], kind: SliceKind) -> Result<RankSliceSet> {
    let (_, first) = adapters.first().ok_or(Error::Empty("collect_rank_slices"))?;
    let reference = (first.down.shape(), first.up.shape());
    let mut slices = Vec::new();
    for (task, a) in adapters {
        if (a.down.shape(), a.up.shape()) != reference {
            return Err(Error::Shape {
                op: "collect_rank_slices",
                lhs: reference.0,
                rhs: a.down.shape(),
            });
        }
        let m = match kind {
            SliceKind::Down => &a.down,
            SliceKind::Up => &a.up,
        };
        for j in 0..m.cols() {
            slices.push(RankSlice {
                vector: m.column(j),
                task: task.clone(),
                rank_index: j,
                kind,
            });
        }
    }
    let dim = match kind {
        SliceKind::Down => reference.0 .0,
        SliceKind::Up => reference.1 .0,
    };
    Ok(RankSliceSet { dim, slices })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x d`, one unit-norm direction per row.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn transform(&self, data: &Matrix) -> Result<Matrix> {
        center(data, &self.mean)?.matmul(&self.components.transpose())
    }
}

fn center(data: &Matrix, mean: &[f64]) -> Result<Matrix> {
    if data.cols() != mean.len() {
        return Err(Error::Shape {
            op: "pca center",
            lhs: data.shape(),
            rhs: (1, mean.len()),
        });
    }
    let mut out = data.clone();
    let d = data.cols();
    for row in out.data_mut().chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v -= m;
        }
    }
    Ok(out)
}

/// PCA of the rows of `data` via SVD of the centered matrix.
///
/// Components are sign-normalized so that each one's largest-magnitude
/// coordinate is positive (first such coordinate on ties).
pub fn pca_matrix(data: &Matrix, k: usize) -> Result<(PcaModel, Matrix)> {
    let (n, d) = data.shape();
    if k == 0 || k > d {
        return Err(Error::config(format!("pca needs 1 <= k <= dimension {d}, got k = {k}")));
    }
    if n < k + 1 {
        return Err(Error::config(format!("pca with k = {k} needs at least {} points, got {n}", k + 1)));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64).collect();
    let centered = center(data, &mean)?;

    let svd = centered.to_nalgebra().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut components = Matrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut dir: Vec<f64> = (0..d).map(|j| v_t[(i, j)]).collect();
        let pivot = dir
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (j, v)| if v.abs() > best.1.abs() { (j, *v) } else { best });
        if pivot.1 < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        for (j, v) in dir.into_iter().enumerate() {
            components.set(c, j, v);
        }
        explained_variance.push(if total > 0.0 { sv[i] * sv[i] / total } else { 0.0 });
    }
    // fewer singular values than k (n - 1 < k cannot happen, but d may be
    // small): pad with zero variance
    while explained_variance.len() < k {
        explained_variance.push(0.0);
    }

    let projections = centered.matmul(&components.transpose())?;
    Ok((
        PcaModel {
            mean,
            components,
            explained_variance,
        },
        projections,
    ))
}

pub fn pca(slices: &RankSliceSet, k: usize) -> Result<(PcaModel, Matrix)> {
    pca_matrix(&slices.to_matrix()?, k)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean within-label pairwise distance over mean between-label pairwise
/// distance (Euclidean, over the rows of `points`). Lower means tighter
/// clusters.
pub fn cluster_separation<L: Eq + Hash>(points: &Matrix, labels: &[L]) -> Result<f64> {
    if labels.len() != points.rows() {
        return Err(Error::Shape {
            op: "cluster_separation",
            lhs: points.shape(),
            rhs: (labels.len(), 1),
        });
    }
    let mut counts: HashMap<&L, usize> = HashMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::config(
            "cluster separation needs at least two labels with at least two points each",
        ));
    }
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..points.rows() {
        for j in (i + 1)..points.rows() {
            let d = distance(points.row(i), points.row(j));
            if labels[i] == labels[j] {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    let between = between / nb as f64;
    if between == 0.0 {
        return Err(Error::config("all points coincide; separation is undefined"));
    }
    Ok((within / nw as f64) / between)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRecord {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl WinRecord {
    pub fn n(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    /// `(wins + ties / 2) / n`
    pub fn rate(&self) -> f64 {
        (self.wins as f64 + 0.5 * self.ties as f64) / self.n() as f64
    }
}

/// Per-task comparison where higher scores win.
pub fn win_record(scores_a: &[f64], scores_b: &[f64]) -> Result<WinRecord> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Shape {
            op: "win_rate",
            lhs: (scores_a.len(), 1),
            rhs: (scores_b.len(), 1),
        });
    }
    if scores_a.is_empty() {
        return Err(Error::Empty("win_rate"));
    }
    let mut rec = WinRecord {
        wins: 0,
        losses: 0,
        ties: 0,
    };
    for (a, b) in scores_a.iter().zip(scores_b) {
        if a > b {
            rec.wins += 1;
        } else if a < b {
            rec.losses += 1;
        } else {
            rec.ties += 1;
        }
    }
    Ok(rec)
}

pub fn win_rate(scores_a: &[f64], scores_b: &[f64]) -> Result<f64> {
    Ok(win_record(scores_a, scores_b)?.rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub significant: bool,
    pub p_value: f64,
}

/// One-sided exact binomial test of `wins` out of `n` against success
/// probability `p0`: `p = P[X >= wins]`, significant iff `p < 1 - confidence`.
pub fn binomial_significance(wins: usize, n: usize, p0: f64, confidence: f64) -> Result<Significance> {
    if n == 0 {
        return Err(Error::config("binomial test needs n >= 1"));
    }
    if wins > n {
        return Err(Error::config(format!("wins ({wins}) exceed n ({n})")));
    }
    if !(p0 > 0.0 && p0 < 1.0) || !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config("p0 and confidence must lie strictly between 0 and 1"));
    }
    let p_value = binomial_upper_tail(wins, n, p0);
    Ok(Significance {
        significant: p_value < 1.0 - confidence,
        p_value,
    })
}

fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    // ln(i!) for i = 0..=n
    let mut ln_fact = vec![0.0; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let tail: f64 = (k..=n)
        .map(|j| (ln_fact[n] - ln_fact[j] - ln_fact[n - j] + j as f64 * lp + (n - j) as f64 * lq).exp())
        .sum();
    tail.min(1.0)
}

/// `100 * adapter_total / backbone`, rounded to two decimals.
pub fn param_percent(adapter_total: u64, backbone_nonembedding: u64) -> Result<f64> {
    if backbone_nonembedding == 0 {
        return Err(Error::config("backbone parameter count must be positive"));
    }
    let pct = 100.0 * adapter_total as f64 / backbone_nonembedding as f64;
    Ok((pct * 100.0).round() / 100.0)
}

/// Projected points as CSV: `pc1..pck,task_label,rank_index,kind`.
pub fn projections_csv(slices: &RankSliceSet, projections: &Matrix) -> Result<String> {
    if projections.rows() != slices.slices.len() {
        return Err(Error::Shape {
            op: "projections_csv",
            lhs: projections.shape(),
            rhs: (slices.slices.len(), slices.dim),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=projections.cols()).map(|i| format!("pc{i}")).collect();
    header.extend(["task_label", "rank_index", "kind"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (i, s) in slices.slices.iter().enumerate() {
        let mut rec: Vec<String> = projections.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(s.task.clone());
        rec.push(s.rank_index.to_string());
        rec.push(s.kind.as_str().to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    into_string(w)
}

/// Square win-rate table: row model vs column baseline, `rate` per cell with
/// a trailing `*` when significant, empty on the diagonal.
pub fn win_rate_matrix_csv(names: &[String], records: &[Vec<Option<(WinRecord, Significance)>>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in names.iter().zip(records) {
        let mut rec = vec![name.clone()];
        for cell in row {
            rec.push(match cell {
                None => String::new(),
                Some((r, s)) => format!("{:.4}{}", r.rate(), if s.significant { "*" } else { "" }),
            });
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::config(format!("csv: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::config(format!("csv: {e}"))
}
