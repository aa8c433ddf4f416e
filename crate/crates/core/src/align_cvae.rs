//! Stage three: a conditional VAE that embeds (feature, attribute) pairs in a
//! latent space of the attribute dimension, where classification happens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{ensure_dim, Error, Result};
use crate::latent;
use crate::nn::{grads_wrt, Activation, AdamState, Dropout, Mlp};
use crate::rng::{self, SeerRng};
use crate::semantic_vae::LossParts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub hidden: usize,
    pub beta: f64,
    /// Fraction of each batch drawn from real seen pairs; the rest are
    /// generated.
    pub real_fraction: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            beta: 1.0,
            real_fraction: 0.5,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("CVAE hidden width must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta_cvae {} must be non-negative", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return Err(Error::invalid(format!("real fraction {} not in [0, 1]", self.real_fraction)));
        }
        Ok(())
    }
}

/// Row-wise `x ⊕ s`.
pub fn build_conditional_input(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    concat_rows(x, s)
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::invalid(format!("{} rows cannot be joined with {} rows", a.rows(), b.rows())));
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.rows() * (ca + cb));
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Ok(Tensor::new(vec![a.rows(), ca + cb], data)?)
}

/// Splits columns `[..at]` and `[at..]`.
pub fn split_cols(t: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let c = t.cols();
    if at == 0 || at >= c {
        return Err(Error::invalid(format!("cannot split {c} columns at {at}")));
    }
    let (mut l, mut r) = (Vec::with_capacity(t.rows() * at), Vec::with_capacity(t.rows() * (c - at)));
    for row in t.data().chunks(c) {
        l.extend_from_slice(&row[..at]);
        r.extend_from_slice(&row[at..]);
    }
    Ok((Tensor::new(vec![t.rows(), at], l)?, Tensor::new(vec![t.rows(), c - at], r)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignCvae {
    /// `x′ ⊕ s → hidden → 2d`, head `[μ | logσ²]`.
    pub encoder: Mlp,
    /// `z ⊕ s → hidden → dim(x′)`
    pub decoder: Mlp,
    pub beta: f64,
    visual_dim: usize,
    d_sem: usize,
}

impl AlignCvae {
    pub fn new(visual_dim: usize, d_sem: usize, cfg: &CvaeConfig, rng: &mut SeerRng) -> Result<Self> {
        cfg.validate()?;
        let xp = visual_dim + d_sem;
        Ok(Self {
            encoder: Mlp::new(&[xp + d_sem, cfg.hidden, 2 * d_sem], Activation::Relu, Activation::None, rng)?,
            decoder: Mlp::new(&[2 * d_sem, cfg.hidden, xp], Activation::Relu, Activation::None, rng)?,
            beta: cfg.beta,
            visual_dim,
            d_sem,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn d_sem(&self) -> usize {
        self.d_sem
    }

    /// Latent dimension; equal to the attribute dimension.
    pub fn latent_dim(&self) -> usize {
        self.d_sem
    }

    fn check(&self, x_prime: &Tensor, s: &Tensor) -> Result<()> {
        ensure_dim("CVAE conditional input", self.visual_dim + self.d_sem, x_prime.cols())?;
        ensure_dim("CVAE semantics", self.d_sem, s.cols())?;
        if x_prime.rows() != s.rows() {
            return Err(Error::invalid("conditional input and semantics differ in rows"));
        }
        Ok(())
    }

    /// Posterior mean and log-variance of the aligned latent.
    pub fn encode(&self, x_prime: &Tensor, s: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(x_prime, s)?;
        let h = self.encoder.infer(&concat_rows(x_prime, s)?);
        let (mu, lv) = split_cols(&h, self.d_sem)?;
        if !mu.is_finite() || !lv.is_finite() {
            return Err(Error::NonFinite("CVAE encoder output".into()));
        }
        Ok((mu, lv))
    }

    /// Posterior means only, which is what classification compares.
    pub fn embed(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let xp = build_conditional_input(x, s)?;
        Ok(self.encode(&xp, s)?.0)
    }

    pub fn decode(&self, z: &Tensor, s: &Tensor) -> Result<Tensor> {
        ensure_dim("CVAE latent", self.d_sem, z.cols())?;
        ensure_dim("CVAE semantics", self.d_sem, s.cols())?;
        let out = self.decoder.infer(&concat_rows(z, s)?);
        if !out.is_finite() {
            return Err(Error::NonFinite("CVAE decoder output".into()));
        }
        Ok(out)
    }

    /// Loss on a batch without dropout.
    pub fn evaluate(&self, x_prime: &Tensor, s: &Tensor, rng: &mut SeerRng) -> Result<LossParts> {
        let (mu, lv) = self.encode(x_prime, s)?;
        let eps = rng::normal_tensor(mu.shape(), rng);
        let z = latent::reparameterize(&mu, &lv, &eps)?;
        let recon = self.decode(&z, s)?;
        cvae_loss_parts(x_prime, &recon, &mu, &lv, self.beta)
    }

    pub fn train_step(
        &mut self,
        adam: &mut AdamState,
        x_prime: &Tensor,
        s: &Tensor,
        lr: f64,
        dropout: f64,
        rng: &mut SeerRng,
    ) -> Result<LossParts> {
        self.check(x_prime, s)?;
        let d = self.d_sem;
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g);
        let dec = self.decoder.bind(&mut g);
        let xp = g.input(x_prime.clone());
        let si = g.input(s.clone());
        let inp = g.concat(&[xp, si])?;
        let mut drop = Dropout { rate: dropout, rng };
        let h = self.encoder.forward(&mut g, inp, &enc, Some(&mut drop))?;
        let mu = g.slice(h, 0, d)?;
        let lv = g.slice(h, d, 2 * d)?;
        let eps = rng::normal_tensor(&[s.rows(), d], drop.rng);
        let z = latent::reparameterize_node(&mut g, mu, lv, eps)?;
        let zs = g.concat(&[z, si])?;
        let out = self.decoder.forward(&mut g, zs, &dec, Some(&mut drop))?;
        let (loss, parts) = record_loss(&mut g, xp, out, mu, lv, self.beta)?;
        let ids: Vec<NodeId> = enc.into_iter().chain(dec).collect();
        let grads = grads_wrt(&mut g, loss, &ids)?;
        let mut params = self.params_mut();
        adam.step(&mut params, &grads, lr)?;
        Ok(parts)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = self.encoder.named_params("cvae.encoder");
        p.extend(self.decoder.named_params("cvae.decoder"));
        p
    }
}

fn record_loss(
    g: &mut Graph,
    target: NodeId,
    recon: NodeId,
    mu: NodeId,
    lv: NodeId,
    beta: f64,
) -> Result<(NodeId, LossParts)> {
    let r = latent::recon_node(g, target, recon)?;
    let kl = latent::kl_node(g, mu, lv)?;
    let wkl = g.scale(kl, beta)?;
    let loss = g.add(r, wkl)?;
    let parts = LossParts {
        total: g.scalar(loss)?,
        recon: g.scalar(r)?,
        kl: g.scalar(kl)?,
    };
    Ok((loss, parts))
}

/// Reconstruction of the full `x′` plus `β·KL`, averaged over the batch.
pub fn cvae_loss_parts(x_prime: &Tensor, recon: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<LossParts> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta {beta} must be non-negative")));
    }
    if !x_prime.is_finite() || !recon.is_finite() {
        return Err(Error::NonFinite("CVAE loss input".into()));
    }
    let r = latent::recon_value(x_prime, recon)?;
    let kl = latent::kl_standard_normal(mu, logvar)?;
    let total = r + beta * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite("CVAE loss".into()));
    }
    Ok(LossParts { total, recon: r, kl })
}

pub fn cvae_loss(x_prime: &Tensor, recon: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<f64> {
    Ok(cvae_loss_parts(x_prime, recon, mu, logvar, beta)?.total)
}

/// Assembles a training batch of `(x ⊕ s, s)` pairs: `round(size·real_fraction)`
/// rows drawn from the real pool and the rest from the generated pool.
pub fn mixed_batch(
    real: (&Tensor, &Tensor),
    generated: (&Tensor, &Tensor),
    size: usize,
    real_fraction: f64,
    rng: &mut SeerRng,
) -> Result<(Tensor, Tensor)> {
    use rand::Rng;
    let n_real = (size as f64 * real_fraction).round() as usize;
    let n_gen = size - n_real;
    let pick = |pool: (&Tensor, &Tensor), n: usize, rng: &mut SeerRng| -> Result<(Tensor, Tensor)> {
        if pool.0.rows() == 0 {
            return Err(Error::invalid("empty pool"));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..pool.0.rows())).collect();
        Ok((pool.0.gather_rows(&idx), pool.1.gather_rows(&idx)))
    };
    let mut xs = Vec::new();
    let mut ss = Vec::new();
    for (pool, n) in [(real, n_real), (generated, n_gen)] {
        if n > 0 {
            let (x, s) = pick(pool, n, rng)?;
            xs.extend_from_slice(x.data());
            ss.extend_from_slice(s.data());
        }
    }
    let (vx, ds) = (real.0.cols(), real.1.cols());
    let x = Tensor::new(vec![size, vx], xs)?;
    let s = Tensor::new(vec![size, ds], ss)?;
    Ok((build_conditional_input(&x, &s)?, s))
}
