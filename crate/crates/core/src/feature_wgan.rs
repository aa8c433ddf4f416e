//! Stage two: a Wasserstein generator from semantic latents to visual
//! features, a gradient-penalised critic, and a frozen softmax classifier
//! whose cross-entropy steers the generator toward the right class.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{grads_wrt, Activation, AdamConfig, AdamState, Direction, Mlp, TrainControls};
use crate::rng::{self, SeerRng};

/// Added under the square root of the interpolate gradient norm so the
/// penalty stays differentiable where a critic gradient vanishes.
pub const GP_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WganConfig {
    /// Generator hidden widths; the critic mirrors them in reverse.
    pub hidden: Vec<usize>,
    pub n_critic: usize,
    /// Gradient-penalty weight.
    pub alpha: f64,
    /// Guidance (classification) weight.
    pub lambda: f64,
    /// Keep updating the guidance classifier on real features during
    /// generator training instead of freezing it.
    pub joint_guidance: bool,
    /// Refit the guidance classifier at every outer iteration.
    pub retrain_guidance: bool,
}

impl Default for WganConfig {
    fn default() -> Self {
        Self {
            hidden: vec![215, 516, 1024],
            n_critic: 5,
            alpha: 10.0,
            lambda: 1.0,
            joint_guidance: false,
            retrain_guidance: false,
        }
    }
}

impl WganConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_critic == 0 {
            return Err(Error::invalid("n_critic must be at least 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha {} must be non-negative", self.alpha)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("generator widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub mlp: Mlp,
}

impl Generator {
    pub fn new(z_dim: usize, hidden: &[usize], visual_dim: usize, rng: &mut SeerRng) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(z_dim).chain(hidden.iter().copied()).chain([visual_dim]).collect();
        Ok(Self {
            mlp: Mlp::new(&widths, Activation::Relu, Activation::None, rng)?,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn visual_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Pseudo visual features for a `[n, z_dim]` batch of latents.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        ensure_dim("generator input", self.z_dim(), z.cols())?;
        let x = self.mlp.infer(z);
        if !x.is_finite() {
            return Err(Error::NonFinite("generator output".into()));
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub mlp: Mlp,
}

impl Critic {
    /// `visual → reversed(hidden) → 1`.
    pub fn new(visual_dim: usize, hidden: &[usize], rng: &mut SeerRng) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(visual_dim)
            .chain(hidden.iter().rev().copied())
            .chain([1])
            .collect();
        Ok(Self {
            mlp: Mlp::new(&widths, Activation::Relu, Activation::None, rng)?,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// One score per row, in input order.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        ensure_dim("critic input", self.visual_dim(), x.cols())?;
        let s = self.mlp.infer(x);
        if !s.is_finite() {
            return Err(Error::NonFinite("critic score".into()));
        }
        Ok(s.into_data())
    }
}

/// Affine map to seen-class logits with a softmax readout.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceClassifier {
    /// `[visual, classes.len()]`
    pub weight: Tensor,
    pub bias: Tensor,
    /// Global class id of each output column.
    pub classes: Vec<usize>,
}

impl GuidanceClassifier {
    pub fn new(visual_dim: usize, classes: Vec<usize>) -> Self {
        let k = classes.len();
        Self {
            weight: Tensor::zeros(&[visual_dim, k]),
            bias: Tensor::zeros(&[k]),
            classes,
        }
    }

    pub fn visual_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Column index of a global class id.
    pub fn local(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        ensure_dim("guidance classifier input", self.visual_dim(), x.cols())?;
        let mut z = crate::autodiff::matmul(x, &self.weight, false, false);
        let k = self.classes.len();
        for row in z.data_mut().chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::autodiff::softmax_rows(&self.logits(x)?))
    }

    /// Predicted global class ids.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                self.classes[best]
            })
            .collect())
    }

    /// Mean cross-entropy against global labels.
    pub fn cross_entropy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let local = self.to_local(labels)?;
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let p = self.bind_frozen(&mut g);
        let z = self.record(&mut g, xi, &p)?;
        let ce = g.softmax_cross_entropy(z, &local)?;
        Ok(g.scalar(ce)?)
    }

    fn to_local(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                self.local(l)
                    .ok_or_else(|| Error::invalid(format!("class {l} is not covered by the guidance classifier")))
            })
            .collect()
    }

    fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        vec![g.param(self.weight.clone()), g.param(self.bias.clone())]
    }

    fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        vec![g.input(self.weight.clone()), g.input(self.bias.clone())]
    }

    fn record(&self, g: &mut Graph, x: NodeId, p: &[NodeId]) -> Result<NodeId> {
        let z = g.matmul(x, p[0])?;
        Ok(g.add_bias(z, p[1])?)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    /// One Adam step on the cross-entropy of a labelled batch.
    pub fn train_step(&mut self, adam: &mut AdamState, x: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
        let local = self.to_local(labels)?;
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let p = self.bind(&mut g);
        let z = self.record(&mut g, xi, &p)?;
        let ce = g.softmax_cross_entropy(z, &local)?;
        let loss = g.scalar(ce)?;
        let grads = grads_wrt(&mut g, ce, &p)?;
        adam.step(&mut self.params_mut(), &grads, lr)?;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            holdout: 0.1,
        }
    }
}

/// Fits the softmax classifier on real seen-class features, stopping early
/// on the cross-entropy of a held-out slice of each class, and returns the
/// best snapshot.
pub fn train_guidance_classifier(
    features: &Tensor,
    labels: &[usize],
    classes: &[usize],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GuidanceClassifier> {
    if features.rows() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    if classes.len() < 2 {
        return Err(Error::invalid("the guidance classifier needs at least two classes"));
    }
    let mut rng = rng::named_stream(seed, "guidance");
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for &c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Err(Error::invalid(format!("seen class {c} has no training samples")));
        }
        let perm = rng::permutation(idx.len(), &mut rng);
        idx = perm.into_iter().map(|p| idx[p]).collect();
        let k = if idx.len() >= 2 {
            ((idx.len() as f64 * cfg.holdout).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    if labels.iter().any(|l| !classes.contains(l)) {
        return Err(Error::invalid("labels outside the seen class set"));
    }
    let mut clf = GuidanceClassifier::new(features.cols(), classes.to_vec());
    let mut adam = AdamState::new(&clf.params(), AdamConfig::default());
    let mut controls = TrainControls::new(cfg.lr, 1.0, cfg.patience, Direction::Minimize)?;
    let held_x = features.gather_rows(&held);
    let held_y: Vec<usize> = held.iter().map(|&i| labels[i]).collect();
    let mut best = clf.clone();
    let mut best_loss = f64::INFINITY;
    for epoch in 0..cfg.max_epochs {
        let perm = rng::permutation(train.len(), &mut rng);
        for chunk in perm.chunks(cfg.batch_size.max(1)) {
            let idx: Vec<usize> = chunk.iter().map(|&p| train[p]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            clf.train_step(&mut adam, &features.gather_rows(&idx), &y, cfg.lr)?;
        }
        let metric = if held.is_empty() {
            let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            clf.cross_entropy(&features.gather_rows(&train), &y)?
        } else {
            clf.cross_entropy(&held_x, &held_y)?
        };
        if metric < best_loss {
            best_loss = metric;
            best = clf.clone();
        }
        if controls.schedule_step(epoch, metric).1 {
            break;
        }
    }
    Ok(best)
}

fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Tensor {
    let d = real.cols();
    let data = real
        .data()
        .chunks(d)
        .zip(fake.data().chunks(d))
        .zip(eps)
        .flat_map(|((r, f), &e)| r.iter().zip(f).map(move |(a, b)| e * a + (1.0 - e) * b))
        .collect();
    Tensor::new(real.shape().to_vec(), data).expect("same shape as real")
}

fn check_batches(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.shape() != fake.shape() {
        return Err(Error::invalid(format!(
            "real batch {:?} and generated batch {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    Ok(())
}

/// Records `α · mean((‖∇D(x̃)‖ − 1)²)` at `x̃ = εx + (1−ε)x̂`, one `ε` per row.
pub fn gradient_penalty_node(
    g: &mut Graph,
    critic: &Critic,
    params: &[NodeId],
    real: &Tensor,
    fake: &Tensor,
    alpha: f64,
    eps: &[f64],
) -> Result<NodeId> {
    check_batches(real, fake)?;
    let xt = g.param(interpolate(real, fake, eps));
    let d = critic.mlp.forward(g, xt, params, None)?;
    let total = g.sum(d)?;
    let norms = g.grad_norm_rows(total, xt, GP_NORM_EPS)?;
    let dev = g.add_scalar(norms, -1.0)?;
    let sq = g.square(dev)?;
    let m = g.mean(sq)?;
    Ok(g.scale(m, alpha)?)
}

/// Gradient penalty with interpolation weights drawn from `seed`.
pub fn gradient_penalty(critic: &Critic, real: &Tensor, fake: &Tensor, alpha: f64, seed: u64) -> Result<f64> {
    check_batches(real, fake)?;
    let eps = uniform_weights(real.rows(), &mut rng::named_stream(seed, "gp"));
    let mut g = Graph::new();
    let p = critic.mlp.bind_frozen(&mut g);
    let gp = gradient_penalty_node(&mut g, critic, &p, real, fake, alpha, &eps)?;
    Ok(g.scalar(gp)?)
}

/// Critic input-gradient norms at fresh random interpolates.
pub fn interpolate_grad_norms(critic: &Critic, real: &Tensor, fake: &Tensor, rng: &mut SeerRng) -> Result<Vec<f64>> {
    check_batches(real, fake)?;
    let eps = uniform_weights(real.rows(), rng);
    let mut g = Graph::new();
    let p = critic.mlp.bind_frozen(&mut g);
    let xt = g.param(interpolate(real, fake, &eps));
    let d = critic.mlp.forward(&mut g, xt, &p, None)?;
    let total = g.sum(d)?;
    let norms = g.grad_norm_rows(total, xt, 0.0)?;
    Ok(g.value(norms)?.data().to_vec())
}

fn uniform_weights(n: usize, rng: &mut SeerRng) -> Vec<f64> {
    rng::uniform_tensor(&[n], 0.0, 1.0, rng).into_data()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticStats {
    pub loss: f64,
    /// `mean D(real) − mean D(fake)`
    pub wasserstein: f64,
    pub penalty: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStats {
    pub loss: f64,
    pub adversarial: f64,
    pub guidance: f64,
}

fn record_critic_loss(
    g: &mut Graph,
    critic: &Critic,
    p: &[NodeId],
    real: &Tensor,
    fake: &Tensor,
    alpha: f64,
    eps: &[f64],
) -> Result<(NodeId, CriticStats)> {
    let xr = g.input(real.clone());
    let xf = g.input(fake.clone());
    let dr = critic.mlp.forward(g, xr, p, None)?;
    let df = critic.mlp.forward(g, xf, p, None)?;
    let dr = g.mean(dr)?;
    let df = g.mean(df)?;
    let w = g.sub(df, dr)?;
    let gp = gradient_penalty_node(g, critic, p, real, fake, alpha, eps)?;
    let loss = g.add(w, gp)?;
    let stats = CriticStats {
        loss: g.scalar(loss)?,
        wasserstein: -g.scalar(w)?,
        penalty: g.scalar(gp)?,
    };
    Ok((loss, stats))
}

/// `mean D(x̂) − mean D(x) + GP`, the quantity the critic minimises.
pub fn critic_loss(critic: &Critic, real: &Tensor, fake: &Tensor, alpha: f64, seed: u64) -> Result<CriticStats> {
    check_batches(real, fake)?;
    let eps = uniform_weights(real.rows(), &mut rng::named_stream(seed, "gp"));
    let mut g = Graph::new();
    let p = critic.mlp.bind_frozen(&mut g);
    Ok(record_critic_loss(&mut g, critic, &p, real, fake, alpha, &eps)?.1)
}

/// Guidance inputs for a generator step: the frozen classifier and the
/// global class id each latent was drawn for.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub classifier: &'a GuidanceClassifier,
    pub labels: &'a [usize],
}

fn record_generator_loss(
    g: &mut Graph,
    gen: &Generator,
    gp: &[NodeId],
    critic: &Critic,
    z: &Tensor,
    guidance: Option<Guidance>,
    lambda: f64,
) -> Result<(NodeId, GeneratorStats)> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be non-negative")));
    }
    ensure_dim("generator input", gen.z_dim(), z.cols())?;
    let zi = g.input(z.clone());
    let xf = gen.mlp.forward(g, zi, gp, None)?;
    let cp = critic.mlp.bind_frozen(g);
    let d = critic.mlp.forward(g, xf, &cp, None)?;
    let d = g.mean(d)?;
    let adv = g.neg(d)?;
    let (loss, guidance_value) = match guidance {
        Some(gd) if lambda > 0.0 => {
            if gd.labels.len() != z.rows() {
                return Err(Error::invalid("one guidance label is needed per latent"));
            }
            let local = gd.classifier.to_local(gd.labels)?;
            let kp = gd.classifier.bind_frozen(g);
            let logits = gd.classifier.record(g, xf, &kp)?;
            let ce = g.softmax_cross_entropy(logits, &local)?;
            let v = g.scalar(ce)?;
            let wce = g.scale(ce, lambda)?;
            (g.add(adv, wce)?, v)
        }
        Some(gd) => (adv, gd.classifier.cross_entropy(&gen.generate(z)?, gd.labels)?),
        None => (adv, 0.0),
    };
    let stats = GeneratorStats {
        loss: g.scalar(loss)?,
        adversarial: g.scalar(adv)?,
        guidance: guidance_value,
    };
    Ok((loss, stats))
}

/// `−mean D(G(z)) + λ · CE(classifier(G(z)), labels)`.
pub fn generator_loss(
    gen: &Generator,
    critic: &Critic,
    z: &Tensor,
    guidance: Option<Guidance>,
    lambda: f64,
) -> Result<GeneratorStats> {
    let mut g = Graph::new();
    let p = gen.mlp.bind_frozen(&mut g);
    Ok(record_generator_loss(&mut g, gen, &p, critic, z, guidance, lambda)?.1)
}

/// Optimiser state and step counters for alternating critic/generator
/// updates.
#[derive(Clone, Debug)]
pub struct WganTrainer {
    pub generator_adam: AdamState,
    pub critic_adam: AdamState,
    pub guidance_adam: Option<AdamState>,
    pub critic_steps: u64,
    pub generator_steps: u64,
    pub n_critic: usize,
    pub alpha: f64,
    pub lambda: f64,
}

/// One batch of training material for a generator iteration.
pub struct WganBatch {
    pub real: Tensor,
    pub real_labels: Vec<usize>,
    pub z: Tensor,
    pub z_labels: Vec<usize>,
}

impl WganTrainer {
    pub fn new(gen: &Generator, critic: &Critic, cfg: &WganConfig, adam: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            generator_adam: AdamState::new(&gen.mlp.params(), adam.clone()),
            critic_adam: AdamState::new(&critic.mlp.params(), adam),
            guidance_adam: None,
            critic_steps: 0,
            generator_steps: 0,
            n_critic: cfg.n_critic,
            alpha: cfg.alpha,
            lambda: cfg.lambda,
        })
    }

    /// One critic update against generated features `G(z)`.
    pub fn critic_step(
        &mut self,
        gen: &Generator,
        critic: &mut Critic,
        real: &Tensor,
        z: &Tensor,
        lr: f64,
        rng: &mut SeerRng,
    ) -> Result<CriticStats> {
        let fake = gen.generate(z)?;
        let eps = uniform_weights(real.rows(), rng);
        let mut g = Graph::new();
        let p = critic.mlp.bind(&mut g);
        let (loss, stats) = record_critic_loss(&mut g, critic, &p, real, &fake, self.alpha, &eps)?;
        let grads = grads_wrt(&mut g, loss, &p)?;
        self.critic_adam.step(&mut critic.mlp.params_mut(), &grads, lr)?;
        self.critic_steps += 1;
        Ok(stats)
    }

    /// One generator update with the critic (and classifier) held fixed.
    pub fn generator_step(
        &mut self,
        gen: &mut Generator,
        critic: &Critic,
        z: &Tensor,
        guidance: Option<Guidance>,
        lr: f64,
    ) -> Result<GeneratorStats> {
        let mut g = Graph::new();
        let p = gen.mlp.bind(&mut g);
        let (loss, stats) = record_generator_loss(&mut g, gen, &p, critic, z, guidance, self.lambda)?;
        let grads = grads_wrt(&mut g, loss, &p)?;
        self.generator_adam.step(&mut gen.mlp.params_mut(), &grads, lr)?;
        self.generator_steps += 1;
        Ok(stats)
    }

    /// Exactly `n_critic` critic steps followed by one generator step.
    /// `sample` supplies a fresh batch for every step.
    pub fn iteration(
        &mut self,
        gen: &mut Generator,
        critic: &mut Critic,
        classifier: Option<&mut GuidanceClassifier>,
        sample: &mut dyn FnMut(&mut SeerRng) -> Result<WganBatch>,
        lr: f64,
        rng: &mut SeerRng,
    ) -> Result<(CriticStats, GeneratorStats)> {
        let mut last = CriticStats::default();
        for _ in 0..self.n_critic {
            let b = sample(rng)?;
            last = self.critic_step(gen, critic, &b.real, &b.z, lr, rng)?;
        }
        let b = sample(rng)?;
        let stats = match classifier {
            Some(clf) => {
                if let Some(adam) = self.guidance_adam.as_mut() {
                    clf.train_step(adam, &b.real, &b.real_labels, lr)?;
                }
                let guidance = Guidance {
                    classifier: clf,
                    labels: &b.z_labels,
                };
                self.generator_step(gen, critic, &b.z, Some(guidance), lr)?
            }
            None => self.generator_step(gen, critic, &b.z, None, lr)?,
        };
        debug_assert_eq!(self.critic_steps, self.generator_steps * self.n_critic as u64);
        Ok((last, stats))
    }
}
