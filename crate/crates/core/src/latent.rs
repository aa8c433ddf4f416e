//! Diagonal-Gaussian latent helpers shared by both autoencoders.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over latent dims and averaged over rows.
pub fn kl_standard_normal(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    check_pair(mu, logvar)?;
    let mut total = 0.0;
    for (m, lv) in mu.data().iter().zip(logvar.data()) {
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    let kl = total / mu.rows() as f64;
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    Ok(kl)
}

/// Per-dimension KL averaged over rows; length is the latent dimension.
pub fn kl_per_dim(mu: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    check_pair(mu, logvar)?;
    let d = mu.cols();
    let mut out = vec![0.0; d];
    for (mr, lr) in mu.data().chunks(d).zip(logvar.data().chunks(d)) {
        for j in 0..d {
            out[j] += 0.5 * (mr[j] * mr[j] + lr[j].exp() - 1.0 - lr[j]);
        }
    }
    let n = mu.rows() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// Recorded KL term, a scalar node.
pub fn kl_node(g: &mut Graph, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let rows = g.shape(mu)[0] as f64;
    let m2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let t = g.add(m2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum(t)?;
    Ok(g.scale(s, 0.5 / rows)?)
}

/// `z = μ + exp(logσ²/2) ⊙ ε`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_pair(mu, logvar)?;
    if eps.shape() != mu.shape() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match {:?}",
            eps.shape(),
            mu.shape()
        )));
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor::new(mu.shape().to_vec(), data)?)
}

/// Recorded reparameterisation; differentiable in `mu` and `logvar`.
pub fn reparameterize_node(g: &mut Graph, mu: NodeId, logvar: NodeId, eps: Tensor) -> Result<NodeId> {
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let e = g.input(eps);
    let noise = g.mul(std, e)?;
    Ok(g.add(mu, noise)?)
}

/// Gaussian reconstruction term `½ Σ_dims (x − x̂)²`, averaged over rows.
pub fn recon_node(g: &mut Graph, target: NodeId, recon: NodeId) -> Result<NodeId> {
    let rows = g.shape(target)[0] as f64;
    let d = g.sub(target, recon)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 0.5 / rows)?)
}

pub fn recon_value(target: &Tensor, recon: &Tensor) -> Result<f64> {
    if target.shape() != recon.shape() {
        return Err(Error::invalid(format!(
            "reconstruction shape {:?} does not match {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let s: f64 = target.data().iter().zip(recon.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(0.5 * s / target.rows() as f64)
}

fn check_pair(mu: &Tensor, logvar: &Tensor) -> Result<()> {
    if mu.shape() != logvar.shape() {
        return Err(Error::invalid(format!(
            "mean shape {:?} and log-variance shape {:?} differ",
            mu.shape(),
            logvar.shape()
        )));
    }
    if !mu.is_finite() || !logvar.is_finite() {
        return Err(Error::NonFinite("latent statistics".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kl_unit_mean_is_half() {
        let mu = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let lv = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!((kl_standard_normal(&mu, &lv).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_only_at_prior() {
        let mu = Tensor::zeros(&[2, 3]);
        let lv = Tensor::zeros(&[2, 3]);
        assert_eq!(kl_standard_normal(&mu, &lv).unwrap(), 0.0);
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Tensor::vector(vec![0.5, -1.0]);
        let lv = Tensor::vector(vec![0.3, 0.0]);
        let z = reparameterize(&mu, &lv, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(z, mu);
        let lv0 = Tensor::zeros(&[2]);
        let z = reparameterize(&mu, &lv0, &Tensor::ones(&[2])).unwrap();
        assert_eq!(z.data(), &[1.5, 0.0]);
    }

    #[test]
    fn reparameterized_variance_is_unit() {
        // Monte-Carlo oracle: 1e5 draws, sample variance within 1 ± 0.02
        let mut r = rng::stream(2, 0);
        let n = 100_000;
        let eps = Tensor::vector((0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
        let z = reparameterize(&Tensor::zeros(&[n]), &Tensor::zeros(&[n]), &eps).unwrap();
        let m = z.mean();
        let var = z.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn kl_node_matches_value() {
        let mut r = rng::stream(3, 0);
        let mu = rng::normal_tensor(&[4, 5], &mut r);
        let lv = rng::normal_tensor(&[4, 5], &mut r);
        let mut g = Graph::new();
        let m = g.input(mu.clone());
        let l = g.input(lv.clone());
        let k = kl_node(&mut g, m, l).unwrap();
        let a = g.scalar(k).unwrap();
        let b = kl_standard_normal(&mu, &lv).unwrap();
        assert!((a - b).abs() < 1e-12);
        let per: f64 = kl_per_dim(&mu, &lv).unwrap().iter().sum();
        assert!((per - b).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative(
            mu in proptest::collection::vec(-5.0f64..5.0, 1..10),
            seed in 0u64..1000,
        ) {
            let mut r = rng::stream(seed, 1);
            let n = mu.len();
            let lv = rng::uniform_tensor(&[1, n], -4.0, 4.0, &mut r);
            let mu = Tensor::new(vec![1, n], mu).unwrap();
            let kl = kl_standard_normal(&mu, &lv).unwrap();
            proptest::prop_assert!(kl >= 0.0);
        }
    }
}
