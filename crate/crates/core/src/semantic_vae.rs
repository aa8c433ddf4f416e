//! Stage one: a β-weighted VAE over class attribute vectors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{ensure_dim, Error, Result};
use crate::latent;
use crate::nn::{collect_grads, Activation, AdamState, Dropout, Mlp};
use crate::rng::{self, SeerRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub hidden: usize,
    pub z_dim: usize,
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            z_dim: 48,
            beta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVae {
    /// `d_sem → hidden → 2·z_dim`; the head holds `[μ | logσ²]`.
    pub encoder: Mlp,
    /// `z_dim → hidden → d_sem`
    pub decoder: Mlp,
    pub beta: f64,
}

impl SemanticVae {
    pub fn new(d_sem: usize, cfg: &VaeConfig, rng: &mut SeerRng) -> Result<Self> {
        if cfg.z_dim < 2 {
            return Err(Error::invalid(format!("z_dim {} must be at least 2", cfg.z_dim)));
        }
        if !(cfg.beta >= 0.0) {
            return Err(Error::invalid(format!("beta {} must be non-negative", cfg.beta)));
        }
        Ok(Self {
            encoder: Mlp::new(&[d_sem, cfg.hidden, 2 * cfg.z_dim], Activation::Relu, Activation::None, rng)?,
            decoder: Mlp::new(&[cfg.z_dim, cfg.hidden, d_sem], Activation::Relu, Activation::None, rng)?,
            beta: cfg.beta,
        })
    }

    pub fn d_sem(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn z_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    /// Posterior mean and log-variance for each row of `s`.
    pub fn encode(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        ensure_dim("semantic encoder input", self.d_sem(), s.cols())?;
        let h = self.encoder.infer(s);
        let z = self.z_dim();
        let (mut mu, mut lv) = (Vec::with_capacity(h.rows() * z), Vec::with_capacity(h.rows() * z));
        for row in h.data().chunks(2 * z) {
            mu.extend_from_slice(&row[..z]);
            lv.extend_from_slice(&row[z..]);
        }
        let shape = vec![h.rows(), z];
        let (mu, lv) = (Tensor::new(shape.clone(), mu)?, Tensor::new(shape, lv)?);
        if !mu.is_finite() || !lv.is_finite() {
            return Err(Error::NonFinite("semantic encoder output".into()));
        }
        Ok((mu, lv))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        ensure_dim("semantic decoder input", self.z_dim(), z.cols())?;
        let s = self.decoder.infer(z);
        if !s.is_finite() {
            return Err(Error::NonFinite("semantic decoder output".into()));
        }
        Ok(s)
    }

    /// Draws one latent per row of `s` via the reparameterisation.
    pub fn sample_latent(&self, s: &Tensor, rng: &mut SeerRng) -> Result<Tensor> {
        let (mu, lv) = self.encode(s)?;
        let eps = rng::normal_tensor(mu.shape(), rng);
        latent::reparameterize(&mu, &lv, &eps)
    }

    /// Loss on a batch without dropout, using fresh noise.
    pub fn evaluate(&self, s: &Tensor, rng: &mut SeerRng) -> Result<LossParts> {
        let (mu, lv) = self.encode(s)?;
        let eps = rng::normal_tensor(mu.shape(), rng);
        let z = latent::reparameterize(&mu, &lv, &eps)?;
        let s_hat = self.decode(&z)?;
        vae_loss_parts(s, &s_hat, &mu, &lv, self.beta)
    }

    /// One optimiser step on a batch of (standardised) attribute rows.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState,
        s: &Tensor,
        lr: f64,
        dropout: f64,
        rng: &mut SeerRng,
    ) -> Result<LossParts> {
        ensure_dim("semantic encoder input", self.d_sem(), s.cols())?;
        let z_dim = self.z_dim();
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g);
        let dec = self.decoder.bind(&mut g);
        let x = g.input(s.clone());
        let mut drop = Dropout { rate: dropout, rng };
        let h = self.encoder.forward(&mut g, x, &enc, Some(&mut drop))?;
        let mu = g.slice(h, 0, z_dim)?;
        let lv = g.slice(h, z_dim, 2 * z_dim)?;
        let eps = rng::normal_tensor(&[s.rows(), z_dim], drop.rng);
        let z = latent::reparameterize_node(&mut g, mu, lv, eps)?;
        let s_hat = self.decoder.forward(&mut g, z, &dec, Some(&mut drop))?;
        let recon = latent::recon_node(&mut g, x, s_hat)?;
        let kl = latent::kl_node(&mut g, mu, lv)?;
        let wkl = g.scale(kl, self.beta)?;
        let loss = g.add(recon, wkl)?;
        let parts = LossParts {
            total: g.scalar(loss)?,
            recon: g.scalar(recon)?,
            kl: g.scalar(kl)?,
        };
        let grads = g.backward(loss)?;
        let ids: Vec<_> = enc.into_iter().chain(dec).collect();
        let grads = collect_grads(&g, &grads, &ids)?;
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
        let mut p = self.encoder.named_params("vae.encoder");
        p.extend(self.decoder.named_params("vae.decoder"));
        p
    }
}

/// Reconstruction and β-weighted KL for already computed statistics.
pub fn vae_loss_parts(s: &Tensor, s_hat: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<LossParts> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta {beta} must be non-negative")));
    }
    if !s.is_finite() || !s_hat.is_finite() {
        return Err(Error::NonFinite("VAE loss input".into()));
    }
    let recon = latent::recon_value(s, s_hat)?;
    let kl = latent::kl_standard_normal(mu, logvar)?;
    Ok(LossParts {
        total: recon + beta * kl,
        recon,
        kl,
    })
}

/// `MSE·d_sem/2 + β·KL`, averaged over the batch.
pub fn vae_loss(s: &Tensor, s_hat: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<f64> {
    Ok(vae_loss_parts(s, s_hat, mu, logvar, beta)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;

    fn small(beta: f64) -> SemanticVae {
        let cfg = VaeConfig {
            hidden: 16,
            z_dim: 4,
            beta,
        };
        SemanticVae::new(6, &cfg, &mut rng::stream(1, 0)).unwrap()
    }

    #[test]
    fn zero_heads_give_prior_and_zero_reconstruction() {
        let mut vae = small(1.0);
        vae.encoder.zero_last();
        vae.decoder.zero_last();
        let s = rng::normal_tensor(&[3, 6], &mut rng::stream(0, 0));
        let (mu, lv) = vae.encode(&s).unwrap();
        assert!(mu.data().iter().chain(lv.data()).all(|&v| v == 0.0));
        assert_eq!(mu.shape(), lv.shape());
        let s_hat = vae.decode(&mu).unwrap();
        assert!(s_hat.data().iter().all(|&v| v == 0.0));
        assert_eq!(s_hat.cols(), 6);
    }

    #[test]
    fn encode_is_deterministic_and_checks_dims() {
        let vae = small(1.0);
        let s = rng::normal_tensor(&[2, 6], &mut rng::stream(0, 0));
        assert_eq!(vae.encode(&s).unwrap(), vae.encode(&s).unwrap());
        let z = rng::normal_tensor(&[2, 4], &mut rng::stream(0, 1));
        assert_eq!(vae.decode(&z).unwrap(), vae.decode(&z).unwrap());
        let bad = Tensor::zeros(&[2, 5]);
        assert!(matches!(vae.encode(&bad), Err(Error::Dimension { .. })));
        assert!(matches!(vae.decode(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn loss_examples() {
        let s = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let zero = Tensor::zeros(&[1, 1]);
        assert_eq!(vae_loss(&s, &s, &zero, &zero, 3.0).unwrap(), 0.0);

        let mu = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let parts = vae_loss_parts(&s, &s, &mu, &zero, 1.0).unwrap();
        assert!((parts.kl - 0.5).abs() < 1e-15);

        let s_hat = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = vae_loss(&s, &s_hat, &mu, &zero, 0.0).unwrap();
        // MSE·d/2 = ½(0.09 + 0.04)
        assert!((l - 0.065).abs() < 1e-15);
        assert!(vae_loss(&s, &s, &mu, &zero, -1.0).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let mut vae = small(0.1);
        let mut adam = AdamState::new(&vae.params(), AdamConfig::default());
        let mut r = rng::stream(4, 0);
        let s = rng::normal_tensor(&[8, 6], &mut r);
        let first = vae.evaluate(&s, &mut rng::stream(9, 9)).unwrap().total;
        for _ in 0..300 {
            vae.train_step(&mut adam, &s, 0.003, 0.0, &mut r).unwrap();
        }
        let last = vae.evaluate(&s, &mut rng::stream(9, 9)).unwrap().total;
        assert!(last < 0.5 * first, "{first} → {last}");
    }
}
