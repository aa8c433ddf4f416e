//! GZSL metrics, manifold precision/recall, the ridge-regression reference
//! classifier, and the ablation and sweep drivers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::pipeline::{Ablation, RunConfig};

/// How accuracies are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Mean of per-class accuracies.
    #[default]
    PerClass,
    /// Fraction of all samples correct.
    Overall,
}

/// Accuracy (percent) of each class in `classes`, keyed by class id.
pub fn class_accuracies(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::invalid("empty class set"));
    }
    let mut out = BTreeMap::new();
    for &c in classes {
        let (mut hit, mut n) = (0usize, 0usize);
        for (p, l) in predictions.iter().zip(labels) {
            if *l == c {
                n += 1;
                hit += usize::from(p == l);
            }
        }
        if n == 0 {
            return Err(Error::invalid(format!("class {c} has no samples")));
        }
        out.insert(c, 100.0 * hit as f64 / n as f64);
    }
    Ok(out)
}

/// Mean over `classes` of per-class top-1 accuracy, in percent.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    let acc = class_accuracies(predictions, labels, classes)?;
    Ok(acc.values().sum::<f64>() / acc.len() as f64)
}

/// Plain top-1 accuracy over the samples whose label is in `classes`.
pub fn overall_accuracy(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, l) in predictions.iter().zip(labels) {
        if classes.contains(l) {
            n += 1;
            hit += usize::from(p == l);
        }
    }
    if n == 0 {
        return Err(Error::invalid("no samples in the class set"));
    }
    Ok(100.0 * hit as f64 / n as f64)
}

pub fn accuracy(mode: AccuracyMode, predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    match mode {
        AccuracyMode::PerClass => per_class_accuracy(predictions, labels, classes),
        AccuracyMode::Overall => overall_accuracy(predictions, labels, classes),
    }
}

/// `2SU/(S+U)`, zero when both are zero.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64> {
    if !(s >= 0.0) || !(u >= 0.0) {
        return Err(Error::invalid(format!("accuracies must be non-negative, got S={s}, U={u}")));
    }
    if s + u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * s * u / (s + u))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each row to its k-th nearest other row.
fn knn_radii(set: &Tensor, k: usize) -> Vec<f64> {
    let n = set.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(set.row(i), set.row(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// Fraction of `probe` rows inside at least one k-NN ball of `support`.
fn coverage(support: &Tensor, radii: &[f64], probe: &Tensor) -> f64 {
    let inside = (0..probe.rows())
        .filter(|&i| (0..support.rows()).any(|j| sq_dist(probe.row(i), support.row(j)) <= radii[j]))
        .count();
    inside as f64 / probe.rows() as f64
}

/// k-NN-radius manifold precision (generated rows inside the real manifold)
/// and recall (real rows inside the generated manifold).
pub fn precision_recall(real: &Tensor, generated: &Tensor, k: usize) -> Result<(f64, f64)> {
    if real.cols() != generated.cols() {
        return Err(Error::Dimension {
            what: "generated set",
            expected: real.cols(),
            got: generated.cols(),
        });
    }
    if k == 0 || k >= real.rows() || k >= generated.rows() {
        return Err(Error::invalid(format!(
            "k = {k} needs 0 < k < set size (real {}, generated {})",
            real.rows(),
            generated.rows()
        )));
    }
    let precision = coverage(real, &knn_radii(real, k), generated);
    let recall = coverage(generated, &knn_radii(generated, k), real);
    Ok((precision, recall))
}

/// S/U/H of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gzsl {
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
}

impl Gzsl {
    pub fn new(seen: f64, unseen: f64) -> Result<Self> {
        Ok(Self {
            seen,
            unseen,
            harmonic: harmonic_mean(seen, unseen)?,
        })
    }
}

/// Scores GZSL predictions for the test pools of `split`.
pub fn gzsl_scores(
    mode: AccuracyMode,
    split: &SplitSpec,
    labels: &[usize],
    pred_seen: &[usize],
    pred_unseen: &[usize],
) -> Result<Gzsl> {
    let ys: Vec<usize> = split.test_seen.iter().map(|&i| labels[i]).collect();
    let yu: Vec<usize> = split.test_unseen.iter().map(|&i| labels[i]).collect();
    Gzsl::new(
        accuracy(mode, pred_seen, &ys, &split.seen_classes)?,
        accuracy(mode, pred_unseen, &yu, &split.unseen_classes)?,
    )
}

/// Reference classifier: ridge regression from attributes (plus a bias) to
/// seen-class feature means, then nearest predicted mean over all classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeOracle {
    pub rho: f64,
    pub scores: Gzsl,
}

pub const RIDGE_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

fn design(attributes: &Tensor, classes: &[usize]) -> DMatrix<f64> {
    let d = attributes.cols();
    DMatrix::from_fn(classes.len(), d + 1, |i, j| if j < d { attributes.row(classes[i])[j] } else { 1.0 })
}

fn ridge_fit(a: &DMatrix<f64>, m: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    let p = a.ncols();
    let gram = a.transpose() * a + DMatrix::identity(p, p) * rho;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("ridge system is not positive definite"))?;
    Ok(chol.solve(&(a.transpose() * m)))
}

fn class_means(ds: &Dataset, idx: &[usize], classes: &[usize]) -> DMatrix<f64> {
    let v = ds.visual_dim();
    let mut m = DMatrix::zeros(classes.len(), v);
    for (r, &c) in classes.iter().enumerate() {
        let rows: Vec<usize> = idx.iter().copied().filter(|&i| ds.labels[i] == c).collect();
        for &i in &rows {
            for (j, x) in ds.features.row(i).iter().enumerate() {
                m[(r, j)] += x;
            }
        }
        let n = rows.len().max(1) as f64;
        for j in 0..v {
            m[(r, j)] /= n;
        }
    }
    m
}

/// Leave-one-seen-class-out choice of the ridge strength.
fn choose_rho(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    let mut best = (f64::INFINITY, RIDGE_GRID[0]);
    for &rho in &RIDGE_GRID {
        let mut err = 0.0;
        for hold in 0..n {
            let keep: Vec<usize> = (0..n).filter(|&i| i != hold).collect();
            let ak = a.select_rows(&keep);
            let mk = m.select_rows(&keep);
            let w = ridge_fit(&ak, &mk, rho)?;
            let pred = a.row(hold) * &w;
            err += (pred - m.row(hold)).norm_squared();
        }
        if err < best.0 {
            best = (err, rho);
        }
    }
    Ok(best.1)
}

/// Predicted feature means `[C, visual]` for every class.
pub fn ridge_class_means(ds: &Dataset, split: &SplitSpec, rho: Option<f64>) -> Result<(f64, Tensor)> {
    let a = design(&ds.attributes, &split.seen_classes);
    let m = class_means(ds, &split.train_seen, &split.seen_classes);
    let rho = match rho {
        Some(r) => r,
        None => choose_rho(&a, &m)?,
    };
    let w = ridge_fit(&a, &m, rho)?;
    let all: Vec<usize> = (0..ds.num_classes()).collect();
    let pred = design(&ds.attributes, &all) * w;
    let data = (0..pred.nrows())
        .flat_map(|i| (0..pred.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| pred[(i, j)])
        .collect();
    Ok((rho, Tensor::new(vec![pred.nrows(), pred.ncols()], data)?))
}

fn nearest_mean(means: &Tensor, x: &[f64]) -> usize {
    (0..means.rows()).fold(0, |b, c| if sq_dist(x, means.row(c)) < sq_dist(x, means.row(b)) { c } else { b })
}

pub fn ridge_oracle(ds: &Dataset, split: &SplitSpec, mode: AccuracyMode) -> Result<RidgeOracle> {
    let (rho, means) = ridge_class_means(ds, split, None)?;
    let pred = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| nearest_mean(&means, ds.features.row(i))).collect() };
    let scores = gzsl_scores(mode, split, &ds.labels, &pred(&split.test_seen), &pred(&split.test_unseen))?;
    Ok(RidgeOracle { rho, scores })
}

/// Everything recorded about one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Seen-class accuracy, percent.
    pub s: f64,
    /// Unseen-class accuracy, percent.
    pub u: f64,
    pub h: f64,
    pub accuracy_mode: AccuracyMode,
    /// Unseen accuracy when only unseen classes are candidates.
    pub zsl_unseen: f64,
    /// Plain sample accuracy over the whole test pool.
    pub overall_accuracy: f64,
    /// Per-class accuracy (percent) keyed by class id.
    pub per_class: BTreeMap<usize, f64>,
    pub precision: f64,
    pub recall: f64,
    /// Average KL per latent dimension of the trained semantic VAE.
    pub vae_kl_per_dim: f64,
    /// Average KL per latent dimension of the trained CVAE.
    pub cvae_kl_per_dim: f64,
    /// Loss curves keyed by stage, one value per epoch (or generator
    /// iteration for the WGAN).
    pub curves: BTreeMap<String, Vec<f64>>,
    pub ablation: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Wall-clock seconds; excluded when comparing runs.
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Copy with wall-clock fields cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Writes `sample_id,split,class,d0,…` rows.
pub fn write_embeddings(path: &Path, rows: &[(usize, &str, usize, Vec<f64>)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let d = rows.first().map_or(0, |r| r.3.len());
    let mut header = vec!["sample_id".to_string(), "split".into(), "class".into()];
    header.extend((0..d).map(|j| format!("d{j}")));
    w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for (id, split, class, v) in rows {
        let mut rec = vec![id.to_string(), split.to_string(), class.to_string()];
        rec.extend(v.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains the pipeline with `drop` replaced by isotropic noise and returns
/// its report. `Ablation::None` is the full model.
pub fn ablate_run(config: &RunConfig, drop: Ablation, seed: u64) -> Result<MetricsReport> {
    let cfg = RunConfig {
        ablation: drop,
        seed,
        ..config.clone()
    };
    Ok(crate::pipeline::train_full(&cfg)?.metrics)
}

/// Axes of a hyperparameter sweep. An empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub beta_vae: Vec<f64>,
    pub beta_cvae: Vec<f64>,
    pub lambda: Vec<f64>,
    pub z_dim: Vec<usize>,
}

/// One grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta_vae: f64,
    pub beta_cvae: f64,
    pub lambda: f64,
    pub z_dim: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("beta_vae", &self.beta_vae), ("beta_cvae", &self.beta_cvae), ("lambda", &self.lambda)] {
            if let Some(v) = axis.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::invalid(format!("sweep {name} value {v} must be finite and non-negative")));
            }
        }
        if let Some(z) = self.z_dim.iter().find(|&&z| z < 2) {
            return Err(Error::invalid(format!("sweep z_dim value {z} must be at least 2")));
        }
        Ok(())
    }

    /// Cartesian product of the axes, with `base` filling empty ones.
    pub fn points(&self, base: &RunConfig) -> Vec<SweepPoint> {
        let or = |axis: &[f64], v: f64| if axis.is_empty() { vec![v] } else { axis.to_vec() };
        let zs = if self.z_dim.is_empty() { vec![base.z_dim] } else { self.z_dim.clone() };
        let mut out = Vec::new();
        for &beta_vae in &or(&self.beta_vae, base.beta_vae) {
            for &beta_cvae in &or(&self.beta_cvae, base.beta_cvae) {
                for &lambda in &or(&self.lambda, base.lambda) {
                    for &z_dim in &zs {
                        out.push(SweepPoint {
                            beta_vae,
                            beta_cvae,
                            lambda,
                            z_dim,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One finished sweep run.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// Worker threads for concurrent runs: `SEER_THREADS` if set, else rayon's default.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("SEER_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::invalid(format!("SEER_THREADS={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

const RUNS_HEADER: [&str; 11] = ["run", "beta_vae", "beta_cvae", "lambda", "z_dim", "seed", "S", "U", "H", "precision", "recall"];

/// Runs every grid point under every seed. With `out`, each run gets its own
/// directory `out/run_NNN` and finished runs are appended to `out/runs.csv`.
/// Rows come back in grid-then-seed order regardless of completion order.
pub fn sweep_run(base: &RunConfig, grid: &SweepGrid, seeds: &[u64], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    base.validate()?;
    grid.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    let jobs: Vec<(SweepPoint, u64)> = grid
        .points(base)
        .into_iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let table = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("runs.csv");
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(&path)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            w.write_record(RUNS_HEADER).map_err(|e| Error::format(&path, e.to_string()))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            Some((Mutex::new(w), path))
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads()?)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let results: Vec<Result<SweepRow>> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(i, &(point, seed))| {
                let cfg = RunConfig {
                    beta_vae: point.beta_vae,
                    beta_cvae: point.beta_cvae,
                    lambda: point.lambda,
                    z_dim: point.z_dim,
                    seed,
                    out_dir: out.map(|d| d.join(format!("run_{i:03}"))),
                    ..base.clone()
                };
                let metrics = crate::pipeline::train_full(&cfg)?.metrics;
                if let Some((w, path)) = &table {
                    let m = &metrics;
                    let rec = [
                        i.to_string(),
                        point.beta_vae.to_string(),
                        point.beta_cvae.to_string(),
                        point.lambda.to_string(),
                        point.z_dim.to_string(),
                        seed.to_string(),
                        m.s.to_string(),
                        m.u.to_string(),
                        m.h.to_string(),
                        m.precision.to_string(),
                        m.recall.to_string(),
                    ];
                    let mut w = w.lock().unwrap_or_else(|e| e.into_inner());
                    w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
                    w.flush().map_err(|e| Error::io(path, e))?;
                }
                Ok(SweepRow { point, seed, metrics })
            })
            .collect()
    });
    results.into_iter().collect()
}
