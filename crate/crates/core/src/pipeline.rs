//! End-to-end training: semantic VAE → feature WGAN → alignment CVAE for a
//! number of outer iterations, then anchors and GZSL evaluation.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align_cvae::{mixed_batch, AlignCvae, CvaeConfig};
use crate::archive;
use crate::autodiff::Tensor;
use crate::data::{gzsl_split, load_dataset, make_synthetic, Dataset, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, AccuracyMode, MetricsReport};
use crate::feature_wgan::{
    train_guidance_classifier, Critic, Generator, GuidanceClassifier, GuidanceConfig, WganBatch, WganConfig,
    WganTrainer,
};
use crate::latent;
use crate::nn::{AdamConfig, AdamState, Direction, TrainControls};
use crate::rng::{self, SeerRng};
use crate::seer_classifier::{build_anchors, candidate_distances, decide, ClassAnchors, DecisionRule, SeerEmbedding};
use crate::semantic_vae::{SemanticVae, VaeConfig};

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Stage whose output is replaced by isotropic Gaussian noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    Vae,
    Wgan,
    Cvae,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Vae => "vae",
            Ablation::Wgan => "wgan",
            Ablation::Cvae => "cvae",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "vae" => Ok(Ablation::Vae),
            "wgan" => Ok(Ablation::Wgan),
            "cvae" => Ok(Ablation::Cvae),
            other => Err(Error::invalid(format!("unknown stage {other:?}; expected vae, wgan, cvae or none"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub unseen_fraction: f64,
    pub split_seed: u64,

    pub z_dim: usize,
    pub beta_vae: f64,
    pub beta_cvae: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub n_critic: usize,

    pub vae_hidden: usize,
    pub generator_hidden: Vec<usize>,
    pub cvae_hidden: usize,

    pub outer_iterations: usize,
    /// VAE epochs per outer iteration; an epoch is `vae_steps_per_epoch`
    /// full-batch steps over the seen-class attributes.
    pub vae_epochs: usize,
    pub vae_steps_per_epoch: usize,
    /// WGAN epochs per outer iteration; an epoch is
    /// `wgan_iterations_per_epoch` generator steps.
    pub wgan_epochs: usize,
    pub wgan_iterations_per_epoch: usize,
    /// CVAE epochs per outer iteration; an epoch is one pass over the
    /// real training pairs.
    pub cvae_epochs: usize,
    pub batch_size: usize,

    pub lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    /// Dropout on the semantic VAE's hidden layer.
    pub vae_dropout: f64,
    /// Dropout on the alignment CVAE's hidden layers.
    pub cvae_dropout: f64,

    pub guidance: GuidanceConfig,
    pub retrain_guidance: bool,
    pub joint_guidance: bool,

    /// Share of real pairs in each CVAE batch.
    pub real_fraction: f64,
    /// Generated features per class in the CVAE training pool.
    pub generated_per_class: usize,
    pub per_class_samples: usize,
    pub pr_k: usize,
    pub accuracy_mode: AccuracyMode,
    pub decision_rule: DecisionRule,
    pub ablation: Ablation,
    pub export_embeddings: bool,

    pub seed: u64,
    /// Run directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            unseen_fraction: 0.25,
            split_seed: 0,
            z_dim: 48,
            beta_vae: 0.1,
            beta_cvae: 0.01,
            lambda: 1.0,
            alpha: 10.0,
            n_critic: 5,
            vae_hidden: 256,
            generator_hidden: vec![215, 516, 1024],
            cvae_hidden: 512,
            outer_iterations: 3,
            vae_epochs: 20,
            vae_steps_per_epoch: 500,
            wgan_epochs: 10,
            wgan_iterations_per_epoch: 10,
            cvae_epochs: 20,
            batch_size: 64,
            lr: 0.001,
            lr_decay: 0.97,
            patience: 20,
            vae_dropout: 0.0,
            cvae_dropout: 0.0,
            guidance: GuidanceConfig::default(),
            retrain_guidance: false,
            joint_guidance: false,
            real_fraction: 0.5,
            generated_per_class: 100,
            per_class_samples: 100,
            pr_k: 3,
            accuracy_mode: AccuracyMode::PerClass,
            decision_rule: DecisionRule::MinDistance,
            ablation: Ablation::None,
            export_embeddings: false,
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("beta_vae", self.beta_vae),
            ("beta_cvae", self.beta_cvae),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("{name} = {w} must be a non-negative number")));
            }
        }
        if self.z_dim < 2 {
            return Err(Error::invalid(format!("z_dim {} must be at least 2", self.z_dim)));
        }
        if self.outer_iterations == 0 {
            return Err(Error::invalid("outer_iterations must be at least 1"));
        }
        let positive = [
            ("n_critic", self.n_critic),
            ("batch_size", self.batch_size),
            ("vae_hidden", self.vae_hidden),
            ("cvae_hidden", self.cvae_hidden),
            ("vae_steps_per_epoch", self.vae_steps_per_epoch),
            ("wgan_iterations_per_epoch", self.wgan_iterations_per_epoch),
            ("per_class_samples", self.per_class_samples),
            ("generated_per_class", self.generated_per_class),
            ("pr_k", self.pr_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr must be positive and lr_decay in (0, 1]"));
        }
        for (name, d) in [("vae_dropout", self.vae_dropout), ("cvae_dropout", self.cvae_dropout)] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(format!("{name} {d} not in [0, 1)")));
            }
        }
        self.wgan_config().validate()?;
        self.cvae_config().validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            hidden: self.vae_hidden,
            z_dim: self.z_dim,
            beta: self.beta_vae,
        }
    }

    pub fn wgan_config(&self) -> WganConfig {
        WganConfig {
            hidden: self.generator_hidden.clone(),
            n_critic: self.n_critic,
            alpha: self.alpha,
            lambda: self.lambda,
            joint_guidance: self.joint_guidance,
            retrain_guidance: self.retrain_guidance,
        }
    }

    pub fn cvae_config(&self) -> CvaeConfig {
        CvaeConfig {
            hidden: self.cvae_hidden,
            beta: self.beta_cvae,
            real_fraction: self.real_fraction,
        }
    }

    /// The configuration as recorded in reports: everything except where the
    /// run happened to be written.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.out_dir = None;
        serde_json::to_value(c).expect("config serialises")
    }
}

/// Per-dimension affine standardisation fitted on seen training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub feature_mean: Tensor,
    pub feature_std: Tensor,
    pub attr_mean: Tensor,
    pub attr_std: Tensor,
}

fn col_stats(t: &Tensor, rows: &[usize]) -> (Tensor, Tensor) {
    let d = t.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in rows {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std = var.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
    (Tensor::vector(mean), Tensor::vector(std))
}

fn affine(t: &Tensor, mean: &Tensor, std: &Tensor) -> Tensor {
    let d = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean.data()).zip(std.data()) {
            *v = (*v - m) / s;
        }
    }
    out
}

impl Standardizer {
    pub fn fit(ds: &Dataset, split: &SplitSpec) -> Self {
        let (feature_mean, feature_std) = col_stats(&ds.features, &split.train_seen);
        let (attr_mean, attr_std) = col_stats(&ds.attributes, &split.seen_classes);
        Self {
            feature_mean,
            feature_std,
            attr_mean,
            attr_std,
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Dataset::new(
            affine(&ds.features, &self.feature_mean, &self.feature_std),
            ds.labels.clone(),
            affine(&ds.attributes, &self.attr_mean, &self.attr_std),
            ds.class_names.clone(),
        )
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("feature_mean".into(), &self.feature_mean),
            ("feature_std".into(), &self.feature_std),
            ("attr_mean".into(), &self.attr_mean),
            ("attr_std".into(), &self.attr_std),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("feature_mean".into(), &mut self.feature_mean),
            ("feature_std".into(), &mut self.feature_std),
            ("attr_mean".into(), &mut self.attr_mean),
            ("attr_std".into(), &mut self.attr_std),
        ]
    }
}

/// Optimiser moments of every trained component.
#[derive(Clone, Debug)]
pub struct OptimizerStates {
    pub vae: AdamState,
    pub wgan: WganTrainer,
    pub cvae: AdamState,
}

/// All learnable state of a run.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub vae: SemanticVae,
    pub generator: Generator,
    pub critic: Critic,
    pub guidance: GuidanceClassifier,
    pub cvae: AlignCvae,
    pub standardizer: Standardizer,
    pub optim: OptimizerStates,
}

impl ModelBundle {
    pub fn new(cfg: &RunConfig, ds: &Dataset, split: &SplitSpec) -> Result<Self> {
        let mut r = rng::named_stream(cfg.seed, "init");
        let (v, d) = (ds.visual_dim(), ds.d_sem());
        let vae = SemanticVae::new(d, &cfg.vae_config(), &mut r)?;
        let generator = Generator::new(cfg.z_dim, &cfg.generator_hidden, v, &mut r)?;
        let critic = Critic::new(v, &cfg.generator_hidden, &mut r)?;
        let cvae = AlignCvae::new(v, d, &cfg.cvae_config(), &mut r)?;
        let guidance = GuidanceClassifier::new(v, split.seen_classes.clone());
        let adam = AdamConfig::default();
        let optim = OptimizerStates {
            vae: AdamState::new(&vae.params(), adam.clone()),
            wgan: WganTrainer::new(&generator, &critic, &cfg.wgan_config(), adam.clone())?,
            cvae: AdamState::new(&cvae.params(), adam),
        };
        Ok(Self {
            vae,
            generator,
            critic,
            guidance,
            cvae,
            standardizer: Standardizer::fit(ds, split),
            optim,
        })
    }

    fn archives(&self) -> Vec<(&'static str, Vec<(String, &Tensor)>)> {
        vec![
            ("vae", self.vae.named_params()),
            ("generator", self.generator.mlp.named_params("generator")),
            ("critic", self.critic.mlp.named_params("critic")),
            (
                "guidance",
                vec![
                    ("guidance.weight".into(), &self.guidance.weight),
                    ("guidance.bias".into(), &self.guidance.bias),
                ],
            ),
            ("cvae", self.cvae.named_params()),
            ("standardizer", self.standardizer.named()),
        ]
    }

    fn optimizer_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let states = [
            ("vae", &self.optim.vae),
            ("generator", &self.optim.wgan.generator_adam),
            ("critic", &self.optim.wgan.critic_adam),
            ("cvae", &self.optim.cvae),
        ];
        for (prefix, s) in states {
            out.push((format!("{prefix}.t"), Tensor::scalar(s.t as f64)));
            for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
                out.push((format!("{prefix}.m.{i}"), m.clone()));
                out.push((format!("{prefix}.v.{i}"), v.clone()));
            }
        }
        out
    }

    /// Writes one archive per component plus the optimiser state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (stem, entries) in self.archives() {
            archive::write_archive(dir, stem, &entries)?;
        }
        let opt = self.optimizer_entries();
        let refs: Vec<(String, &Tensor)> = opt.iter().map(|(n, t)| (n.clone(), t)).collect();
        archive::write_archive(dir, "optimizer", &refs)
    }

    /// Rebuilds the architecture from `cfg` and restores saved parameters.
    pub fn load(dir: &Path, cfg: &RunConfig, ds: &Dataset, split: &SplitSpec) -> Result<Self> {
        let mut b = Self::new(cfg, ds, split)?;
        let read = |stem: &str| archive::read_archive(dir, stem);
        let vae = read("vae")?;
        let names: Vec<String> = b.vae.named_params().into_iter().map(|(n, _)| n).collect();
        archive::restore(&vae, names.into_iter().zip(b.vae.params_mut()).collect())?;
        let gen = read("generator")?;
        let names: Vec<String> = b.generator.mlp.named_params("generator").into_iter().map(|(n, _)| n).collect();
        archive::restore(&gen, names.into_iter().zip(b.generator.mlp.params_mut()).collect())?;
        let critic = read("critic")?;
        let names: Vec<String> = b.critic.mlp.named_params("critic").into_iter().map(|(n, _)| n).collect();
        archive::restore(&critic, names.into_iter().zip(b.critic.mlp.params_mut()).collect())?;
        let guidance = read("guidance")?;
        archive::restore(
            &guidance,
            vec![
                ("guidance.weight".into(), &mut b.guidance.weight),
                ("guidance.bias".into(), &mut b.guidance.bias),
            ],
        )?;
        let cvae = read("cvae")?;
        let names: Vec<String> = b.cvae.named_params().into_iter().map(|(n, _)| n).collect();
        archive::restore(&cvae, names.into_iter().zip(b.cvae.params_mut()).collect())?;
        let std = read("standardizer")?;
        archive::restore(&std, b.standardizer.named_mut())?;
        Ok(b)
    }

    /// Inference view with the configured ablation applied.
    pub fn view(&self, ablation: Ablation, seed: u64) -> ModelView<'_> {
        ModelView {
            bundle: self,
            ablation,
            noise: RefCell::new(rng::named_stream(seed, "ablation-embed")),
        }
    }
}

/// A bundle seen through an ablation: dropped stages emit `N(0, I)`.
pub struct ModelView<'a> {
    bundle: &'a ModelBundle,
    ablation: Ablation,
    noise: RefCell<SeerRng>,
}

impl ModelView<'_> {
    /// Generator inputs for class attribute rows `s`.
    pub fn latents(&self, s: &Tensor, rng: &mut SeerRng) -> Result<Tensor> {
        match self.ablation {
            Ablation::Vae => Ok(rng::normal_tensor(&[s.rows(), self.bundle.vae.z_dim()], rng)),
            _ => self.bundle.vae.sample_latent(s, rng),
        }
    }
}

impl SeerEmbedding for ModelView<'_> {
    fn generate_features(&self, s: &Tensor, rng: &mut SeerRng) -> Result<Tensor> {
        let z = self.latents(s, rng)?;
        match self.ablation {
            Ablation::Wgan => Ok(rng::normal_tensor(&[s.rows(), self.bundle.generator.visual_dim()], rng)),
            _ => self.bundle.generator.generate(&z),
        }
    }

    fn embed(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        match self.ablation {
            Ablation::Cvae => Ok(rng::normal_tensor(
                &[x.rows(), self.bundle.cvae.latent_dim()],
                &mut self.noise.borrow_mut(),
            )),
            _ => self.bundle.cvae.embed(x, s),
        }
    }
}

/// Loaded, split and standardised data for a run.
#[derive(Debug)]
pub struct Prepared {
    pub raw: Dataset,
    pub split: SplitSpec,
    /// Features and attributes standardised with seen-training statistics.
    pub data: Dataset,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let (raw, stored_split) = match &cfg.data {
        DataSource::Synthetic(spec) => (make_synthetic(spec)?.0, None),
        DataSource::Directory { path } => {
            let ds = load_dataset(path)?;
            let sp = path.join("split.json");
            let split = if sp.exists() { Some(SplitSpec::load(&sp)?) } else { None };
            (ds, split)
        }
    };
    let split = match stored_split {
        Some(s) => {
            s.validate(&raw)?;
            s
        }
        None => gzsl_split(&raw, cfg.unseen_fraction, cfg.split_seed)?,
    };
    let data = Standardizer::fit(&raw, &split).apply(&raw)?;
    Ok(Prepared { raw, split, data })
}

fn repeat_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    t.gather_rows(rows)
}

fn diverged(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(d) => Error::Diverged { stage, detail: d },
        Error::Autodiff(a @ crate::autodiff::AutodiffError::NonFinite { .. }) => Error::Diverged {
            stage,
            detail: a.to_string(),
        },
        other => other,
    }
}

fn check_loss(stage: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage,
            detail: format!("loss became {v}"),
        })
    }
}

/// Training progress kept across outer iterations.
struct Schedules {
    vae: TrainControls,
    wgan: TrainControls,
    cvae: TrainControls,
    vae_epoch: usize,
    wgan_epoch: usize,
    cvae_epoch: usize,
}

impl Schedules {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let c = || TrainControls::new(cfg.lr, cfg.lr_decay, cfg.patience, Direction::Minimize);
        Ok(Self {
            vae: c()?,
            wgan: c()?,
            cvae: c()?,
            vae_epoch: 0,
            wgan_epoch: 0,
            cvae_epoch: 0,
        })
    }
}

fn reset_patience(c: &mut TrainControls) {
    c.best = None;
    c.since_best = 0;
}

fn train_vae(b: &mut ModelBundle, cfg: &RunConfig, p: &Prepared, sch: &mut Schedules, curves: &mut Vec<f64>) -> Result<()> {
    let s = p.data.attributes.gather_rows(&p.split.seen_classes);
    let mut r = rng::stream(cfg.seed, 0x5641_4500 + sch.vae_epoch as u64);
    reset_patience(&mut sch.vae);
    for _ in 0..cfg.vae_epochs {
        let lr = sch.vae.lr_at(sch.vae_epoch);
        let mut last = 0.0;
        for _ in 0..cfg.vae_steps_per_epoch {
            let parts = b.vae.train_step(&mut b.optim.vae, &s, lr, cfg.vae_dropout, &mut r).map_err(diverged("vae"))?;
            check_loss("vae", parts.total)?;
            last = parts.total;
        }
        curves.push(last);
        let metric = b
            .vae
            .evaluate(&s, &mut rng::named_stream(cfg.seed, "vae-val"))
            .map_err(diverged("vae"))?
            .total;
        let (_, stop) = sch.vae.schedule_step(sch.vae_epoch, metric);
        sch.vae_epoch += 1;
        if stop {
            break;
        }
    }
    Ok(())
}

fn train_wgan(
    b: &mut ModelBundle,
    cfg: &RunConfig,
    p: &Prepared,
    sch: &mut Schedules,
    critic_curve: &mut Vec<f64>,
    gen_curve: &mut Vec<f64>,
) -> Result<()> {
    let train = &p.split.train_seen;
    let n = cfg.batch_size;
    let mut r = rng::stream(cfg.seed, 0x5747_0000 + sch.wgan_epoch as u64);
    let ModelBundle {
        vae,
        generator,
        critic,
        guidance,
        optim,
        ..
    } = b;
    let ablate_vae = cfg.ablation == Ablation::Vae;
    let z_dim = vae.z_dim();
    let vae = &*vae;
    let mut sample = |r: &mut SeerRng| -> Result<WganBatch> {
        let idx: Vec<usize> = (0..n).map(|_| train[r.random_range(0..train.len())]).collect();
        let real = p.data.features.gather_rows(&idx);
        let real_labels: Vec<usize> = idx.iter().map(|&i| p.data.labels[i]).collect();
        let zi: Vec<usize> = (0..n).map(|_| train[r.random_range(0..train.len())]).collect();
        let z_labels: Vec<usize> = zi.iter().map(|&i| p.data.labels[i]).collect();
        let z = if ablate_vae {
            rng::normal_tensor(&[n, z_dim], r)
        } else {
            let s = repeat_rows(&p.data.attributes, &z_labels);
            vae.sample_latent(&s, r)?
        };
        Ok(WganBatch {
            real,
            real_labels,
            z,
            z_labels,
        })
    };
    for _ in 0..cfg.wgan_epochs {
        let lr = sch.wgan.lr_at(sch.wgan_epoch);
        let mut w_sum = 0.0;
        for _ in 0..cfg.wgan_iterations_per_epoch {
            let clf = if cfg.lambda > 0.0 || cfg.joint_guidance {
                Some(&mut *guidance)
            } else {
                None
            };
            let (cs, gs) = optim
                .wgan
                .iteration(generator, critic, clf, &mut sample, lr, &mut r)
                .map_err(diverged("wgan"))?;
            check_loss("wgan", cs.loss)?;
            check_loss("wgan", gs.loss)?;
            critic_curve.push(cs.wasserstein);
            gen_curve.push(gs.loss);
            w_sum += cs.wasserstein;
        }
        // the critic's estimate only says how far apart the two sets are; the
        // schedule uses it for decay bookkeeping, not for stopping
        let _ = sch.wgan.schedule_step(sch.wgan_epoch, w_sum);
        sch.wgan_epoch += 1;
    }
    Ok(())
}

/// Generated features for every class, `per_class` each, with their labels.
fn generated_pool(b: &ModelBundle, cfg: &RunConfig, p: &Prepared, per_class: usize, r: &mut SeerRng) -> Result<(Tensor, Vec<usize>)> {
    let labels: Vec<usize> = (0..p.data.num_classes()).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let s = repeat_rows(&p.data.attributes, &labels);
    let view = b.view(cfg.ablation, cfg.seed);
    Ok((view.generate_features(&s, r)?, labels))
}

fn train_cvae(b: &mut ModelBundle, cfg: &RunConfig, p: &Prepared, sch: &mut Schedules, curve: &mut Vec<f64>) -> Result<()> {
    let mut r = rng::stream(cfg.seed, 0x4356_0000 + sch.cvae_epoch as u64);
    let (gen_x, gen_y) = generated_pool(b, cfg, p, cfg.generated_per_class, &mut r)?;
    let gen_s = repeat_rows(&p.data.attributes, &gen_y);

    // 10% of the real seen training pairs are held out for early stopping
    let mut train = p.split.train_seen.clone();
    let perm = rng::permutation(train.len(), &mut rng::named_stream(cfg.seed, "cvae-holdout"));
    train = perm.into_iter().map(|i| train[i]).collect();
    let n_val = (train.len() / 10).max(1).min(train.len() - 1);
    let (val, fit) = train.split_at(n_val);
    let real_x = p.data.features.gather_rows(fit);
    let real_s = repeat_rows(&p.data.attributes, &fit.iter().map(|&i| p.data.labels[i]).collect::<Vec<_>>());
    let val_x = p.data.features.gather_rows(val);
    let val_s = repeat_rows(&p.data.attributes, &val.iter().map(|&i| p.data.labels[i]).collect::<Vec<_>>());
    let val_xp = crate::align_cvae::build_conditional_input(&val_x, &val_s)?;

    let steps = fit.len().div_ceil(cfg.batch_size).max(1);
    reset_patience(&mut sch.cvae);
    for _ in 0..cfg.cvae_epochs {
        let lr = sch.cvae.lr_at(sch.cvae_epoch);
        let mut total = 0.0;
        for _ in 0..steps {
            let (xp, s) = mixed_batch((&real_x, &real_s), (&gen_x, &gen_s), cfg.batch_size, cfg.real_fraction, &mut r)?;
            let parts = b
                .cvae
                .train_step(&mut b.optim.cvae, &xp, &s, lr, cfg.cvae_dropout, &mut r)
                .map_err(diverged("cvae"))?;
            check_loss("cvae", parts.total)?;
            total += parts.total;
        }
        curve.push(total / steps as f64);
        let metric = b
            .cvae
            .evaluate(&val_xp, &val_s, &mut rng::named_stream(cfg.seed, "cvae-val"))
            .map_err(diverged("cvae"))?
            .total;
        let (_, stop) = sch.cvae.schedule_step(sch.cvae_epoch, metric);
        sch.cvae_epoch += 1;
        if stop {
            break;
        }
    }
    Ok(())
}

fn fit_guidance(b: &mut ModelBundle, cfg: &RunConfig, p: &Prepared) -> Result<()> {
    let idx = &p.split.train_seen;
    let x = p.data.features.gather_rows(idx);
    let y: Vec<usize> = idx.iter().map(|&i| p.data.labels[i]).collect();
    b.guidance = train_guidance_classifier(&x, &y, &p.split.seen_classes, &cfg.guidance, cfg.seed)?;
    if cfg.joint_guidance {
        b.optim.wgan.guidance_adam = Some(AdamState::new(&b.guidance.params(), AdamConfig::default()));
    }
    Ok(())
}

/// Outputs of a completed run.
#[derive(Debug)]
pub struct RunOutput {
    pub bundle: ModelBundle,
    pub anchors: ClassAnchors,
    pub metrics: MetricsReport,
    pub prepared: Prepared,
}

/// Trains every stage, evaluates, and (when `out_dir` is set) writes the run
/// directory. A diverging stage aborts the run and leaves a `FAILED` marker.
pub fn train_full(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let _ = fs::remove_file(dir.join("FAILED"));
        let _ = fs::remove_file(dir.join("metrics.json"));
        cfg.save(dir.join("config.json"))?;
        fs::write(dir.join("seed"), format!("{}\n", cfg.seed)).map_err(|e| Error::io(dir, e))?;
    }
    let prepared = prepare_data(cfg)?;
    if let Some(dir) = &cfg.out_dir {
        prepared.split.save(dir.join("split.json"))?;
    }
    let mut bundle = ModelBundle::new(cfg, &prepared.raw, &prepared.split)?;
    match run_stages(cfg, &prepared, &mut bundle) {
        Ok(curves) => {
            let (anchors, mut metrics) = evaluate(&bundle, cfg, &prepared)?;
            metrics.curves = curves;
            metrics.wall_clock_secs = start.elapsed().as_secs_f64();
            if let Some(dir) = &cfg.out_dir {
                bundle.save(dir)?;
                anchors.export(dir.join("anchors.csv"))?;
                if cfg.export_embeddings {
                    export_embeddings(&bundle, cfg, &prepared, &dir.join("embeddings.csv"))?;
                }
                metrics.save(dir.join("metrics.json"))?;
            }
            Ok(RunOutput {
                bundle,
                anchors,
                metrics,
                prepared,
            })
        }
        Err(e) => {
            if let Some(dir) = &cfg.out_dir {
                let _ = bundle.save(dir);
                let _ = fs::write(dir.join("FAILED"), format!("{e}\n"));
            }
            Err(e)
        }
    }
}

fn run_stages(cfg: &RunConfig, p: &Prepared, b: &mut ModelBundle) -> Result<std::collections::BTreeMap<String, Vec<f64>>> {
    let mut sch = Schedules::new(cfg)?;
    let (mut vae_c, mut critic_c, mut gen_c, mut cvae_c) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for it in 0..cfg.outer_iterations {
        if cfg.ablation != Ablation::Vae {
            train_vae(b, cfg, p, &mut sch, &mut vae_c)?;
        }
        if cfg.ablation != Ablation::Wgan {
            if it == 0 || cfg.retrain_guidance {
                fit_guidance(b, cfg, p)?;
            }
            train_wgan(b, cfg, p, &mut sch, &mut critic_c, &mut gen_c)?;
        }
        if cfg.ablation != Ablation::Cvae {
            train_cvae(b, cfg, p, &mut sch, &mut cvae_c)?;
        }
    }
    let mut curves = std::collections::BTreeMap::new();
    curves.insert("vae".to_string(), vae_c);
    curves.insert("wasserstein".to_string(), critic_c);
    curves.insert("generator".to_string(), gen_c);
    curves.insert("cvae".to_string(), cvae_c);
    Ok(curves)
}

/// Anchors plus all metrics for a trained bundle.
pub fn evaluate(b: &ModelBundle, cfg: &RunConfig, p: &Prepared) -> Result<(ClassAnchors, MetricsReport)> {
    let view = b.view(cfg.ablation, cfg.seed);
    let all: Vec<usize> = (0..p.data.num_classes()).collect();
    let anchors = build_anchors(
        &view,
        &p.data.attributes,
        &all,
        cfg.per_class_samples,
        &mut rng::named_stream(cfg.seed, "anchors"),
    )?;
    let split = &p.split;
    let test: Vec<usize> = split.test_seen.iter().chain(&split.test_unseen).copied().collect();
    let x = p.data.features.gather_rows(&test);
    let (cands, dist) = candidate_distances(&view, &x, &all, &p.data.attributes, &anchors)?;
    let pred = decide(&cands, &dist, cfg.decision_rule);
    let (pred_seen, pred_unseen) = pred.split_at(split.test_seen.len());
    let scores = eval::gzsl_scores(cfg.accuracy_mode, split, &p.data.labels, pred_seen, pred_unseen)?;

    // unseen-only candidates: columns restricted to the unseen classes
    let ucols: Vec<usize> = split.unseen_classes.iter().map(|c| cands.binary_search(c).expect("all classes")).collect();
    let n_seen = split.test_seen.len();
    let udist: Vec<f64> = (n_seen..dist.rows())
        .flat_map(|i| ucols.iter().map(move |&j| (i, j)))
        .map(|(i, j)| dist.row(i)[j])
        .collect();
    let udist = Tensor::new(vec![split.test_unseen.len(), ucols.len()], udist)?;
    let zsl_pred = decide(&split.unseen_classes, &udist, cfg.decision_rule);
    let yu: Vec<usize> = split.test_unseen.iter().map(|&i| p.data.labels[i]).collect();
    let zsl_unseen = eval::accuracy(cfg.accuracy_mode, &zsl_pred, &yu, &split.unseen_classes)?;

    let y: Vec<usize> = test.iter().map(|&i| p.data.labels[i]).collect();
    let mut per_class = eval::class_accuracies(pred_seen, &y[..n_seen], &split.seen_classes)?;
    per_class.extend(eval::class_accuracies(pred_unseen, &y[n_seen..], &split.unseen_classes)?);
    let overall = eval::overall_accuracy(&pred, &y, &all)?;

    // manifold precision/recall of generated features against the test pool,
    // matched class by class in count
    let s = repeat_rows(&p.data.attributes, &y);
    let generated = view.generate_features(&s, &mut rng::named_stream(cfg.seed, "pr"))?;
    let (precision, recall) = eval::precision_recall(&x, &generated, cfg.pr_k)?;

    let seen_s = p.data.attributes.gather_rows(&split.seen_classes);
    let (mu, lv) = b.vae.encode(&seen_s)?;
    let vae_kl = latent::kl_standard_normal(&mu, &lv)? / mu.cols() as f64;
    let train_x = p.data.features.gather_rows(&split.train_seen);
    let train_s = repeat_rows(&p.data.attributes, &split.train_seen.iter().map(|&i| p.data.labels[i]).collect::<Vec<_>>());
    let (cmu, clv) = b.cvae.encode(&crate::align_cvae::build_conditional_input(&train_x, &train_s)?, &train_s)?;
    let cvae_kl = latent::kl_standard_normal(&cmu, &clv)? / cmu.cols() as f64;

    let metrics = MetricsReport {
        s: scores.seen,
        u: scores.unseen,
        h: scores.harmonic,
        accuracy_mode: cfg.accuracy_mode,
        zsl_unseen,
        overall_accuracy: overall,
        per_class,
        precision,
        recall,
        vae_kl_per_dim: vae_kl,
        cvae_kl_per_dim: cvae_kl,
        curves: Default::default(),
        ablation: cfg.ablation.name().to_string(),
        seed: cfg.seed,
        config: cfg.snapshot(),
        wall_clock_secs: 0.0,
    };
    Ok((anchors, metrics))
}

/// Writes the aligned embedding of every test sample (paired with its true
/// class attributes).
pub fn export_embeddings(b: &ModelBundle, cfg: &RunConfig, p: &Prepared, path: &Path) -> Result<()> {
    let view = b.view(cfg.ablation, cfg.seed);
    let mut rows = Vec::new();
    for (name, idx) in [("test_seen", &p.split.test_seen), ("test_unseen", &p.split.test_unseen)] {
        let x = p.data.features.gather_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| p.data.labels[i]).collect();
        let s = repeat_rows(&p.data.attributes, &labels);
        let e = view.embed(&x, &s)?;
        for (k, &i) in idx.iter().enumerate() {
            rows.push((i, name, labels[k], e.row(k).to_vec()));
        }
    }
    eval::write_embeddings(path, &rows)
}

/// Re-evaluates a finished run directory.
pub fn evaluate_run_dir(
    dir: &Path,
    accuracy: Option<AccuracyMode>,
    export: bool,
) -> Result<MetricsReport> {
    if dir.join("FAILED").exists() {
        return Err(Error::invalid(format!("{} holds a failed run", dir.display())));
    }
    let mut cfg = RunConfig::load(dir.join("config.json"))?;
    if let Some(mode) = accuracy {
        cfg.accuracy_mode = mode;
    }
    let mut prepared = prepare_data(&cfg)?;
    let split = SplitSpec::load(dir.join("split.json"))?;
    split.validate(&prepared.raw)?;
    let bundle = ModelBundle::load(dir, &cfg, &prepared.raw, &split)?;
    prepared.data = bundle.standardizer.apply(&prepared.raw)?;
    prepared.split = split;
    let (_, mut metrics) = evaluate(&bundle, &cfg, &prepared)?;
    if let Ok(prev) = MetricsReport::load(dir.join("metrics.json")) {
        metrics.curves = prev.curves;
    }
    if export {
        export_embeddings(&bundle, &cfg, &prepared, &dir.join("embeddings.csv"))?;
    }
    Ok(metrics)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                classes: 8,
                per_class: 20,
                d_sem: 4,
                visual_dim: 6,
                noise_sigma: 0.1,
                seed: 0,
            }),
            z_dim: 4,
            vae_hidden: 16,
            generator_hidden: vec![16, 16],
            cvae_hidden: 16,
            outer_iterations: 1,
            vae_epochs: 2,
            vae_steps_per_epoch: 2,
            wgan_epochs: 1,
            wgan_iterations_per_epoch: 2,
            cvae_epochs: 2,
            batch_size: 16,
            per_class_samples: 5,
            generated_per_class: 5,
            guidance: GuidanceConfig {
                max_epochs: 5,
                ..GuidanceConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_outer_iterations_is_invalid() {
        let cfg = RunConfig {
            outer_iterations: 0,
            ..tiny_config()
        };
        assert!(matches!(train_full(&cfg), Err(e) if e.is_validation()));
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig { beta_vae: -1.0, ..RunConfig::default() },
            RunConfig { lambda: -0.5, ..RunConfig::default() },
            RunConfig { z_dim: 1, ..RunConfig::default() },
            RunConfig { n_critic: 0, ..RunConfig::default() },
            RunConfig { vae_dropout: 1.0, ..RunConfig::default() },
            RunConfig { cvae_dropout: -0.1, ..RunConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = tiny_config();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"no_such_field": 1}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.z_dim, 48);
    }

    #[test]
    fn tiny_run_writes_a_complete_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: Some(dir.path().to_path_buf()),
            export_embeddings: true,
            ..tiny_config()
        };
        let out = train_full(&cfg).unwrap();
        for f in [
            "config.json",
            "seed",
            "split.json",
            "metrics.json",
            "anchors.csv",
            "embeddings.csv",
            "vae.bin",
            "vae.manifest",
            "generator.bin",
            "critic.bin",
            "guidance.bin",
            "cvae.bin",
            "standardizer.bin",
            "optimizer.bin",
        ] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        assert!(!dir.path().join("FAILED").exists());
        let m = &out.metrics;
        assert!((0.0..=100.0).contains(&m.s) && (0.0..=100.0).contains(&m.u));
        assert!((m.h - eval::harmonic_mean(m.s, m.u).unwrap()).abs() < 1e-12);
        // restricting candidates to unseen classes never hurts unseen accuracy
        assert!(m.zsl_unseen >= m.u);

        let again = evaluate_run_dir(dir.path(), None, false).unwrap();
        assert_eq!(again.without_timing(), m.without_timing());
    }

    #[test]
    fn ablation_none_is_the_full_model() {
        let a = train_full(&tiny_config()).unwrap().metrics;
        let b = train_full(&RunConfig {
            ablation: Ablation::None,
            ..tiny_config()
        })
        .unwrap()
        .metrics;
        assert_eq!(a.without_timing(), b.without_timing());
    }

    #[test]
    fn divergence_leaves_a_failure_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: Some(dir.path().to_path_buf()),
            lr: 1e200,
            ..tiny_config()
        };
        let err = train_full(&cfg).unwrap_err();
        assert!(!err.is_validation(), "{err}");
        assert!(dir.path().join("FAILED").exists());
        assert!(!dir.path().join("metrics.json").exists());
    }

    #[test]
    fn ablation_names_parse() {
        for a in [Ablation::None, Ablation::Vae, Ablation::Wgan, Ablation::Cvae] {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("critic".parse::<Ablation>().is_err());
    }
}
