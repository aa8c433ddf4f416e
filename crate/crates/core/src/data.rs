//! Datasets, the on-disk directory format, GZSL splits and the synthetic
//! benchmark generator.
//!
//! Directory layout:
//!
//! ```text
//! features.csv    n rows, visual_dim comma-separated floats
//! labels.csv      n rows, one 0-based class id each
//! attributes.csv  C rows, d_sem floats (one row per class)
//! classes.txt     optional, C class names
//! split.json      optional, a serialized SplitSpec
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, SeerRng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, visual_dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// `[C, d_sem]`, one row per class.
    pub attributes: Tensor,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, attributes: Tensor, class_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            attributes,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn d_sem(&self) -> usize {
        self.attributes.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 || self.attributes.rank() != 2 {
            return Err(Error::invalid("features and attributes must be matrices"));
        }
        if self.labels.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        if self.features.rows() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                self.features.rows(),
                self.labels.len()
            )));
        }
        let c = self.num_classes();
        if c < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::invalid(format!("label {l} at row {i} out of range for {c} classes")));
        }
        if self.class_names.len() != c {
            return Err(Error::invalid(format!("{} class names for {c} classes", self.class_names.len())));
        }
        for (what, t) in [("features", &self.features), ("attributes", &self.attributes)] {
            if let Some(k) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{what} value at row {}, column {}",
                    k / t.cols(),
                    k % t.cols()
                )));
            }
        }
        Ok(())
    }

    /// Row indices of samples with label `class`.
    pub fn samples_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_dataset(dir)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(&dir.join("features.csv"), &self.features)?;
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        write_file(&dir.join("labels.csv"), &labels)?;
        write_matrix(&dir.join("attributes.csv"), &self.attributes)?;
        let names: String = self.class_names.iter().map(|n| format!("{n}\n")).collect();
        write_file(&dir.join("classes.txt"), &names)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for r in 0..t.rows() {
        w.write_record(t.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Err(Error::format(path, "missing file"));
    }
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, format!("ragged or unreadable row: {e}")))?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    Ok(rows)
}

pub(crate) fn read_matrix(path: &Path) -> Result<Tensor> {
    let rows = read_rows(path)?;
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (i, row) in rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::format(path, format!("row {i}, column {j}: cannot parse {cell:?}")))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("row {i}, column {j}: non-finite value {cell}")));
            }
            data.push(v);
        }
    }
    Tensor::new(vec![rows.len(), cols], data).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let features = read_matrix(&dir.join("features.csv"))?;
    let attributes = read_matrix(&dir.join("attributes.csv"))?;
    let labels_path = dir.join("labels.csv");
    let mut labels = Vec::new();
    for (i, row) in read_rows(&labels_path)?.iter().enumerate() {
        if row.len() != 1 {
            return Err(Error::format(&labels_path, format!("row {i}: expected one label")));
        }
        let l: usize = row[0]
            .parse()
            .map_err(|_| Error::format(&labels_path, format!("row {i}: bad label {:?}", row[0])))?;
        if l >= attributes.rows() {
            return Err(Error::format(
                &labels_path,
                format!("row {i}: label {l} out of range for {} attribute rows", attributes.rows()),
            ));
        }
        labels.push(l);
    }
    let names_path = dir.join("classes.txt");
    let class_names = if names_path.exists() {
        let text = fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?;
        text.lines().map(str::to_owned).collect()
    } else {
        (0..attributes.rows()).map(|c| format!("class_{c}")).collect()
    };
    Dataset::new(features, labels, attributes, class_names)
}

/// Ground truth kept alongside a synthetic dataset for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// `[d_sem, visual_dim]`; class means are `a_y · map`.
    pub map: Tensor,
    /// `[C, visual_dim]`
    pub class_means: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub d_sem: usize,
    pub visual_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            per_class: 60,
            d_sem: 16,
            visual_dim: 64,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Linear-Gaussian benchmark: attributes `a_y ~ U[0,1]^d_sem`, a random map
/// `M` with `N(0, 1/d_sem)` entries, class means `μ_y = M·a_y` and features
/// `μ_y + N(0, σ²I)`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticTruth)> {
    let SyntheticSpec {
        classes,
        per_class,
        d_sem,
        visual_dim,
        noise_sigma,
        seed,
    } = *spec;
    if classes < 4 || d_sem < 2 || per_class == 0 || visual_dim == 0 || !(noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("invalid synthetic spec {spec:?}")));
    }
    let mut rng = rng::named_stream(seed, "synthetic");
    let attributes = rng::uniform_tensor(&[classes, d_sem], 0.0, 1.0, &mut rng);
    let scale = 1.0 / (d_sem as f64).sqrt();
    let map = rng::normal_tensor(&[d_sem, visual_dim], &mut rng).map(|v| v * scale);
    let class_means = crate::autodiff::matmul(&attributes, &map, false, false);

    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * visual_dim);
    let mut labels = Vec::with_capacity(n);
    let noise = rng::normal_tensor(&[n, visual_dim], &mut rng);
    for c in 0..classes {
        for k in 0..per_class {
            let row = c * per_class + k;
            let mean = class_means.row(c);
            features.extend(mean.iter().zip(noise.row(row)).map(|(m, e)| m + noise_sigma * e));
            labels.push(c);
        }
    }
    let ds = Dataset::new(
        Tensor::new(vec![n, visual_dim], features)?,
        labels,
        attributes,
        (0..classes).map(|c| format!("class_{c}")).collect(),
    )?;
    Ok((ds, SyntheticTruth { map, class_means }))
}

/// Which evaluation pool a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    TrainSeen,
    TestSeen,
    TestUnseen,
}

/// Disjoint seen/unseen classes and a per-sample partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_seen: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let seen: BTreeSet<_> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<_> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return Err(Error::invalid("duplicate class ids in split"));
        }
        if !seen.is_disjoint(&unseen) {
            return Err(Error::invalid("seen and unseen classes overlap"));
        }
        if seen.iter().chain(&unseen).any(|&c| c >= ds.num_classes()) {
            return Err(Error::invalid("split references an unknown class"));
        }
        let mut count = vec![0u8; ds.len()];
        for (part, idx) in [
            (Partition::TrainSeen, &self.train_seen),
            (Partition::TestSeen, &self.test_seen),
            (Partition::TestUnseen, &self.test_unseen),
        ] {
            for &i in idx {
                if i >= ds.len() {
                    return Err(Error::invalid(format!("sample {i} out of range")));
                }
                count[i] += 1;
                let want_seen = part != Partition::TestUnseen;
                if seen.contains(&ds.labels[i]) != want_seen {
                    return Err(Error::invalid(format!("sample {i} placed in {part:?} against its class")));
                }
            }
        }
        if let Some(i) = count.iter().position(|&c| c != 1) {
            let in_split = seen.contains(&ds.labels[i]) || unseen.contains(&ds.labels[i]);
            if in_split || count[i] > 1 {
                return Err(Error::invalid(format!("sample {i} assigned {} times", count[i])));
            }
        }
        Ok(())
    }

    pub fn partition_of(&self, ds_len: usize) -> Vec<Option<Partition>> {
        let mut out = vec![None; ds_len];
        for &i in &self.train_seen {
            out[i] = Some(Partition::TrainSeen);
        }
        for &i in &self.test_seen {
            out[i] = Some(Partition::TestSeen);
        }
        for &i in &self.test_unseen {
            out[i] = Some(Partition::TestUnseen);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_file(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

/// Fraction of each seen class held out as `test_seen`.
pub const TEST_SEEN_FRACTION: f64 = 0.2;

/// Partitions classes into seen/unseen and holds out 20% (floor, at least
/// one) of every seen class for testing.
pub fn gzsl_split(ds: &Dataset, unseen_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let c = ds.num_classes();
    if !(0.0..1.0).contains(&unseen_fraction) {
        return Err(Error::invalid(format!("unseen fraction {unseen_fraction} not in [0, 1)")));
    }
    let n_unseen = (c as f64 * unseen_fraction).round() as usize;
    if n_unseen < 2 || c - n_unseen < 2 {
        return Err(Error::invalid(format!(
            "unseen fraction {unseen_fraction} leaves {} seen / {n_unseen} unseen of {c} classes; need at least 2 each",
            c - n_unseen
        )));
    }
    let mut rng = rng::named_stream(seed, "split");
    let order = rng::permutation(c, &mut rng);
    let mut unseen_classes: Vec<usize> = order[..n_unseen].to_vec();
    let mut seen_classes: Vec<usize> = order[n_unseen..].to_vec();
    unseen_classes.sort_unstable();
    seen_classes.sort_unstable();

    let (mut train_seen, mut test_seen, mut test_unseen) = (Vec::new(), Vec::new(), Vec::new());
    for &cls in &seen_classes {
        let mut idx = ds.samples_of(cls);
        if idx.len() < 2 {
            return Err(Error::invalid(format!("seen class {cls} needs at least two samples")));
        }
        shuffle(&mut idx, &mut rng);
        let k = ((idx.len() as f64 * TEST_SEEN_FRACTION).floor() as usize).max(1);
        test_seen.extend_from_slice(&idx[..k]);
        train_seen.extend_from_slice(&idx[k..]);
    }
    for &cls in &unseen_classes {
        test_unseen.extend(ds.samples_of(cls));
    }
    train_seen.sort_unstable();
    test_seen.sort_unstable();
    test_unseen.sort_unstable();
    let split = SplitSpec {
        seen_classes,
        unseen_classes,
        train_seen,
        test_seen,
        test_unseen,
    };
    split.validate(ds)?;
    Ok(split)
}

fn shuffle(idx: &mut [usize], rng: &mut SeerRng) {
    let p = rng::permutation(idx.len(), rng);
    let orig = idx.to_vec();
    for (dst, &src) in idx.iter_mut().zip(&p) {
        *dst = orig[src];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 20,
            per_class: 30,
            d_sem: 16,
            visual_dim: 64,
            noise_sigma: noise,
            seed: 3,
        }
    }

    #[test]
    fn noiseless_classes_are_points() {
        let (ds, truth) = make_synthetic(&spec(0.0)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features.row(i), truth.class_means.row(ds.labels[i]));
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = make_synthetic(&spec(0.1)).unwrap();
        let b = make_synthetic(&spec(0.1)).unwrap();
        assert_eq!(a, b);
        let mut s = spec(0.1);
        s.seed = 4;
        assert_ne!(a.0, make_synthetic(&s).unwrap().0);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        let mut s = spec(0.1);
        s.classes = 3;
        assert!(make_synthetic(&s).is_err());
        let mut s = spec(0.1);
        s.d_sem = 1;
        assert!(make_synthetic(&s).is_err());
    }

    #[test]
    fn nearest_class_mean_oracle_is_accurate() {
        let (ds, truth) = make_synthetic(&spec(0.1)).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let x = ds.features.row(i);
            let best = (0..ds.num_classes())
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(truth.class_means.row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(truth.class_means.row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(best == ds.labels[i]);
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn class_sample_means_converge() {
        let s = spec(0.1);
        let (ds, truth) = make_synthetic(&s).unwrap();
        let tol = 3.0 * s.noise_sigma / (s.per_class as f64).sqrt();
        for c in 0..ds.num_classes() {
            let idx = ds.samples_of(c);
            for j in 0..ds.visual_dim() {
                let m: f64 = idx.iter().map(|&i| ds.features.row(i)[j]).sum::<f64>() / idx.len() as f64;
                // 3σ per coordinate; allow the rare 3σ excursion across 1280 coordinates
                assert!((m - truth.class_means.row(c)[j]).abs() < tol * 1.5);
            }
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let (ds, _) = make_synthetic(&spec(0.1)).unwrap();
        let split = gzsl_split(&ds, 0.25, 0).unwrap();
        assert_eq!(split.seen_classes.len(), 15);
        assert_eq!(split.unseen_classes.len(), 5);
        assert!(split.seen_classes.iter().all(|c| !split.unseen_classes.contains(c)));
        assert_eq!(split.train_seen.len() + split.test_seen.len() + split.test_unseen.len(), ds.len());
        // 30 samples per class → 6 held out
        assert_eq!(split.test_seen.len(), 15 * 6);
        assert_eq!(gzsl_split(&ds, 0.25, 0).unwrap(), split);
    }

    #[test]
    fn twenty_percent_of_ten_is_two() {
        let mut s = spec(0.1);
        s.per_class = 10;
        let (ds, _) = make_synthetic(&s).unwrap();
        let split = gzsl_split(&ds, 0.25, 1).unwrap();
        for &c in &split.seen_classes {
            assert_eq!(split.test_seen.iter().filter(|&&i| ds.labels[i] == c).count(), 2);
        }
    }

    #[test]
    fn split_rejects_empty_side() {
        let (ds, _) = make_synthetic(&spec(0.1)).unwrap();
        assert!(gzsl_split(&ds, 0.0, 0).is_err());
        assert!(gzsl_split(&ds, 0.95, 0).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let (ds, _) = make_synthetic(&spec(0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let split = gzsl_split(&ds, 0.25, 2).unwrap();
        split.save(dir.path().join("split.json")).unwrap();
        assert_eq!(SplitSpec::load(dir.path().join("split.json")).unwrap(), split);
    }

    fn write_fixture(dir: &Path, labels: &str, features: &str) {
        fs::write(dir.join("features.csv"), features).unwrap();
        fs::write(dir.join("labels.csv"), labels).unwrap();
        fs::write(dir.join("attributes.csv"), "0.1,0.2\n0.3,0.4\n").unwrap();
    }

    #[test]
    fn minimal_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "0\n0\n1\n1\n", "1,2,3\n4,5,6\n7,8,9\n1,1,1\n");
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.class_names, vec!["class_0", "class_1"]);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "0\n5\n", "1,2\n3,4\n");
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("label 5"), "{err}");

        write_fixture(dir.path(), "0\n1\n", "1,2\n3,NaN\n");
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 1, column 1"), "{err}");

        write_fixture(dir.path(), "0\n1\n", "1,2\n3\n");
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("ragged"));

        write_fixture(dir.path(), "0\n1\n", "1,2\n3,4\n");
        fs::remove_file(dir.path().join("labels.csv")).unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("missing"));
    }

    proptest::proptest! {
        #[test]
        fn split_partitions_every_sample(seed in 0u64..50, frac in 0.15f64..0.6) {
            let (ds, _) = make_synthetic(&SyntheticSpec { classes: 10, per_class: 7, seed, ..SyntheticSpec::default() }).unwrap();
            let split = gzsl_split(&ds, frac, seed).unwrap();
            let parts = split.partition_of(ds.len());
            proptest::prop_assert!(parts.iter().all(Option::is_some));
            let total = split.train_seen.len() + split.test_seen.len() + split.test_unseen.len();
            proptest::prop_assert_eq!(total, ds.len());
        }
    }
}
