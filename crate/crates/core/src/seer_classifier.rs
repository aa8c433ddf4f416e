//! Prototype classification in the aligned latent space.
//!
//! Every class gets an anchor: the mean embedding of features generated from
//! its attributes. A test feature is embedded once per candidate class (paired
//! with that class's attributes) and assigned to the class whose embedding sits
//! closest, in cosine distance, to the class anchor.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeerRng;

/// What classification needs from a trained model.
pub trait SeerEmbedding {
    /// One generated feature per row of class attributes `s`.
    fn generate_features(&self, s: &Tensor, rng: &mut SeerRng) -> Result<Tensor>;

    /// Aligned embeddings (posterior means) of `(x ⊕ s, s)` pairs, row by row.
    fn embed(&self, x: &Tensor, s: &Tensor) -> Result<Tensor>;
}

/// `1 − u·v / (‖u‖‖v‖)`, in `[0, 2]`. A single zero vector has no direction
/// and is treated as orthogonal to everything.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            what: "cosine operand",
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    match (nu > 0.0, nv > 0.0) {
        (false, false) => Err(Error::invalid("cosine distance between two zero vectors")),
        (true, true) => Ok((1.0 - dot / (nu.sqrt() * nv.sqrt())).clamp(0.0, 2.0)),
        _ => Ok(1.0),
    }
}

/// Which end of the distance ranking wins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Closest anchor (largest cosine similarity).
    #[default]
    MinDistance,
    /// Smallest cosine similarity, taken at face value; for debugging only.
    LiteralMinSimilarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAnchors {
    /// Class ids in ascending order.
    pub classes: Vec<usize>,
    /// `[classes.len(), d]`
    pub anchors: Tensor,
    /// Samples averaged into each anchor.
    pub counts: Vec<usize>,
}

impl ClassAnchors {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.classes.binary_search(&class).ok().map(|i| self.anchors.row(i))
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    /// Writes `class_id,v0,…,v{d-1}` rows with a header.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("class_id");
        for j in 0..self.dim() {
            out.push_str(&format!(",d{j}"));
        }
        out.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            out.push_str(&c.to_string());
            for v in self.anchors.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn repeat_row(row: &[f64], n: usize) -> Tensor {
    let data = row.iter().copied().cycle().take(n * row.len()).collect();
    Tensor::new(vec![n, row.len()], data).expect("n and row length are positive")
}

fn column_mean(t: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (a, v) in m.iter_mut().zip(t.row(i)) {
            *a += v;
        }
    }
    let n = t.rows() as f64;
    m.into_iter().map(|v| v / n).collect()
}

/// Anchors for `classes` from `per_class_samples` generated features each.
/// `attributes` holds one row per class id.
pub fn build_anchors(
    model: &dyn SeerEmbedding,
    attributes: &Tensor,
    classes: &[usize],
    per_class_samples: usize,
    rng: &mut SeerRng,
) -> Result<ClassAnchors> {
    if per_class_samples == 0 {
        return Err(Error::invalid("per_class_samples must be positive"));
    }
    if classes.is_empty() {
        return Err(Error::invalid("no classes to anchor"));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for &c in &sorted {
        if c >= attributes.rows() {
            return Err(Error::invalid(format!("class {c} has no attribute row")));
        }
        let s = repeat_row(attributes.row(c), per_class_samples);
        let x = model.generate_features(&s, rng)?;
        let e = model.embed(&x, &s)?;
        rows.push(column_mean(&e));
    }
    let anchors = Tensor::from_rows(&rows)?;
    if !anchors.is_finite() {
        return Err(Error::NonFinite("class anchors".into()));
    }
    Ok(ClassAnchors {
        counts: vec![per_class_samples; sorted.len()],
        classes: sorted,
        anchors,
    })
}

/// `[n, candidates.len()]` cosine distances between each sample's
/// class-conditioned embedding and that class's anchor. Candidate columns are
/// in ascending class order, which is also returned.
pub fn candidate_distances(
    model: &dyn SeerEmbedding,
    x: &Tensor,
    candidates: &[usize],
    attributes: &Tensor,
    anchors: &ClassAnchors,
) -> Result<(Vec<usize>, Tensor)> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let n = x.rows();
    let k = cands.len();
    let mut dist = vec![0.0; n * k];
    for (j, &c) in cands.iter().enumerate() {
        let anchor = anchors
            .get(c)
            .ok_or_else(|| Error::invalid(format!("no anchor for candidate class {c}")))?;
        if c >= attributes.rows() {
            return Err(Error::invalid(format!("class {c} has no attribute row")));
        }
        let s = repeat_row(attributes.row(c), n);
        let e = model.embed(x, &s)?;
        for i in 0..n {
            dist[i * k + j] = cosine_distance(e.row(i), anchor)?;
        }
    }
    Ok((cands, Tensor::new(vec![n, k], dist)?))
}

/// Predicted class id per row of `x`; ties go to the lowest class id.
pub fn classify(
    model: &dyn SeerEmbedding,
    x: &Tensor,
    candidates: &[usize],
    attributes: &Tensor,
    anchors: &ClassAnchors,
    rule: DecisionRule,
) -> Result<Vec<usize>> {
    let (cands, dist) = candidate_distances(model, x, candidates, attributes, anchors)?;
    Ok(decide(&cands, &dist, rule))
}

/// Applies the decision rule to a precomputed distance table.
pub fn decide(cands: &[usize], dist: &Tensor, rule: DecisionRule) -> Vec<usize> {
    (0..dist.rows())
        .map(|i| {
            let row = dist.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                let better = match rule {
                    DecisionRule::MinDistance => row[j] < row[best],
                    DecisionRule::LiteralMinSimilarity => row[j] > row[best],
                };
                if better {
                    best = j;
                }
            }
            cands[best]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Embeds `(x, s)` as `x·scale − s`, generates `s` itself.
    struct Toy {
        scale: f64,
    }

    impl SeerEmbedding for Toy {
        fn generate_features(&self, s: &Tensor, _rng: &mut SeerRng) -> Result<Tensor> {
            Ok(s.clone())
        }

        fn embed(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
            let data = x.data().iter().zip(s.data()).map(|(a, b)| a * self.scale + b).collect();
            Ok(Tensor::new(x.shape().to_vec(), data)?)
        }
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    fn attrs() -> Tensor {
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap()
    }

    #[test]
    fn anchors_are_generated_means() {
        let toy = Toy { scale: 1.0 };
        let a = build_anchors(&toy, &attrs(), &[2, 0], 3, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(a.classes, vec![0, 2]);
        assert_eq!(a.get(0).unwrap(), &[2.0, 0.0]);
        assert_eq!(a.get(2).unwrap(), &[2.0, 2.0]);
        assert!(a.get(1).is_none());
        assert!(build_anchors(&toy, &attrs(), &[9], 3, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn identical_semantics_identical_anchors_and_lowest_id_wins() {
        let toy = Toy { scale: 1.0 };
        let a = build_anchors(&toy, &attrs(), &[0, 1, 2, 3], 2, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(a.get(2), a.get(3));
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let p = classify(&toy, &x, &[3, 2], &attrs(), &a, DecisionRule::MinDistance).unwrap();
        assert_eq!(p, vec![2]);
    }

    #[test]
    fn single_candidate_and_empty_set() {
        let toy = Toy { scale: 1.0 };
        let a = build_anchors(&toy, &attrs(), &[0, 1], 1, &mut rng::stream(0, 0)).unwrap();
        let x = rng::normal_tensor(&[5, 2], &mut rng::stream(1, 0));
        assert_eq!(classify(&toy, &x, &[1], &attrs(), &a, DecisionRule::MinDistance).unwrap(), vec![1; 5]);
        assert!(classify(&toy, &x, &[], &attrs(), &a, DecisionRule::MinDistance).is_err());
        assert!(classify(&toy, &x, &[2], &attrs(), &a, DecisionRule::MinDistance).is_err());
    }

    #[test]
    fn sample_at_generated_mean_is_recovered() {
        let toy = Toy { scale: 1.0 };
        let a = build_anchors(&toy, &attrs(), &[0, 1, 2], 4, &mut rng::stream(0, 0)).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let p = classify(&toy, &x, &[0, 1, 2], &attrs(), &a, DecisionRule::MinDistance).unwrap();
        assert_eq!(p, vec![0, 1, 2]);
        let lit = classify(&toy, &x, &[0, 1, 2], &attrs(), &a, DecisionRule::LiteralMinSimilarity).unwrap();
        assert_ne!(lit, p);
    }

    #[test]
    fn export_writes_one_row_per_class() {
        let toy = Toy { scale: 1.0 };
        let a = build_anchors(&toy, &attrs(), &[0, 1], 1, &mut rng::stream(0, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("anchors.csv");
        a.export(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "class_id,d0,d1\n0,2,0\n1,0,2\n");
    }

    proptest::proptest! {
        #[test]
        fn positive_rescaling_leaves_decisions_unchanged(seed in 0u64..100, c in 0.01f64..100.0) {
            let mut r = rng::stream(seed, 0);
            let s = rng::normal_tensor(&[4, 3], &mut r);
            let x = rng::normal_tensor(&[6, 3], &mut r);
            let base = Toy { scale: 0.7 };
            let a = build_anchors(&base, &s, &[0, 1, 2, 3], 1, &mut r).unwrap();
            let p = classify(&base, &x, &[0, 1, 2, 3], &s, &a, DecisionRule::MinDistance).unwrap();
            let scaled_s = s.map(|v| v * c);
            let scaled_x = x.map(|v| v * c);
            let a2 = build_anchors(&base, &scaled_s, &[0, 1, 2, 3], 1, &mut r).unwrap();
            let q = classify(&base, &scaled_x, &[0, 1, 2, 3], &scaled_s, &a2, DecisionRule::MinDistance).unwrap();
            proptest::prop_assert_eq!(p, q);
        }

        #[test]
        fn restricting_candidates_never_loses_a_correct_answer(seed in 0u64..100) {
            let mut r = rng::stream(seed, 1);
            let s = rng::normal_tensor(&[5, 3], &mut r);
            let x = rng::normal_tensor(&[20, 3], &mut r);
            let toy = Toy { scale: 1.0 };
            let a = build_anchors(&toy, &s, &[0, 1, 2, 3, 4], 1, &mut r).unwrap();
            let full = classify(&toy, &x, &[0, 1, 2, 3, 4], &s, &a, DecisionRule::MinDistance).unwrap();
            let sub = classify(&toy, &x, &[3, 4], &s, &a, DecisionRule::MinDistance).unwrap();
            for (f, g) in full.iter().zip(&sub) {
                if *f >= 3 {
                    proptest::prop_assert_eq!(f, g);
                }
            }
        }
    }
}
