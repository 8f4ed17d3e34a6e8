//! Closed-form diagonal-Gaussian quantities: KL divergence, differential
//! entropy, negative log-likelihood, and reparameterized sampling.
//!
//! Each quantity also has a `*_contrib` form returning the per-entry
//! contribution matrix before reduction; the loss assembly uses those to take
//! masked subset means.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Mean and log-variance tensors of equal shape. Rows are batch entries.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl DiagGaussian {
    pub fn new(g: &Graph, mean: Tensor, logvar: Tensor) -> Result<Self> {
        if g.shape(mean) != g.shape(logvar) {
            return Err(Error::shape(
                "diag_gaussian",
                format!(
                    "mean shape {:?} != logvar shape {:?}",
                    g.shape(mean),
                    g.shape(logvar)
                ),
            ));
        }
        Ok(DiagGaussian { mean, logvar })
    }

    /// Standard normal of the given shape.
    pub fn standard(g: &mut Graph, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mean = g.leaf(shape, vec![0.0; n])?;
        let logvar = g.leaf(shape, vec![0.0; n])?;
        Ok(DiagGaussian { mean, logvar })
    }
}

fn same_width(g: &Graph, op: &str, a: Tensor, b: Tensor) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            op,
            format!("widths differ: {:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Per-entry KL contribution between two diagonal Gaussians:
/// `(lp - lq)/2 + (var_q + (mu_q - mu_p)^2) / (2 var_p) - 1/2`.
pub fn kl_contrib(g: &mut Graph, q: &DiagGaussian, p: &DiagGaussian) -> Result<Tensor> {
    same_width(g, "kl_diag", q.mean, p.mean)?;
    same_width(g, "kl_diag", q.logvar, p.logvar)?;
    same_width(g, "kl_diag", q.mean, q.logvar)?;

    let lv_diff = g.sub(p.logvar, q.logvar)?;
    let half_lv_diff = g.scale(lv_diff, 0.5)?;

    let var_q = g.exp(q.logvar)?;
    let mean_diff = g.sub(q.mean, p.mean)?;
    let mean_diff_sq = g.square(mean_diff)?;
    let numer = g.add(var_q, mean_diff_sq)?;
    let neg_lp = g.scale(p.logvar, -1.0)?;
    let inv_var_p = g.exp(neg_lp)?;
    let ratio = g.mul(numer, inv_var_p)?;
    let half_ratio = g.scale(ratio, 0.5)?;

    let half = g.constant(0.5);
    let partial = g.add(half_lv_diff, half_ratio)?;
    g.sub(partial, half)
}

/// KL divergence `D_KL(q || p)` summed over every entry.
pub fn kl_diag(g: &mut Graph, q: &DiagGaussian, p: &DiagGaussian) -> Result<Tensor> {
    let contrib = kl_contrib(g, q, p)?;
    g.sum(contrib)
}

/// Per-entry differential-entropy contribution: `0.5 (ln 2pi + 1 + logvar)`.
pub fn entropy_contrib(g: &mut Graph, q: &DiagGaussian) -> Result<Tensor> {
    let c = g.constant(LN_2PI + 1.0);
    let shifted = g.add(q.logvar, c)?;
    g.scale(shifted, 0.5)
}

/// Closed-form differential entropy of a diagonal Gaussian, summed over
/// every entry.
pub fn gauss_entropy(g: &mut Graph, q: &DiagGaussian) -> Result<Tensor> {
    let contrib = entropy_contrib(g, q)?;
    g.sum(contrib)
}

/// Per-entry negative log-likelihood contribution of `target` under `q`:
/// `0.5 (ln 2pi + logvar + (target - mu)^2 / var)`.
pub fn nll_contrib(g: &mut Graph, q: &DiagGaussian, target: Tensor) -> Result<Tensor> {
    same_width(g, "gauss_nll", q.mean, target)?;

    let c = g.constant(LN_2PI);
    let diff = g.sub(target, q.mean)?;
    let diff_sq = g.square(diff)?;
    let neg_lv = g.scale(q.logvar, -1.0)?;
    let inv_var = g.exp(neg_lv)?;
    let maha = g.mul(diff_sq, inv_var)?;
    let partial = g.add(q.logvar, maha)?;
    let partial = g.add(partial, c)?;
    g.scale(partial, 0.5)
}

/// Negative log-likelihood summed over every entry.
pub fn gauss_nll(g: &mut Graph, q: &DiagGaussian, target: Tensor) -> Result<Tensor> {
    let contrib = nll_contrib(g, q, target)?;
    g.sum(contrib)
}

/// `mean + exp(logvar / 2) * noise`, with the noise behind a stop-gradient so
/// gradients reach only the distribution parameters.
pub fn reparameterize(g: &mut Graph, q: &DiagGaussian, noise: Tensor) -> Result<Tensor> {
    same_width(g, "reparameterize", q.mean, noise)?;
    let half_lv = g.scale(q.logvar, 0.5)?;
    let sd = g.exp(half_lv)?;
    let noise_fixed = g.stop_grad(noise);
    let scaled = g.mul(sd, noise_fixed)?;
    g.add(q.mean, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, Param};

    fn gaussian(g: &mut Graph, mean: &[f64], logvar: &[f64]) -> DiagGaussian {
        let shape = [mean.len()];
        let m = g.leaf(&shape, mean.to_vec()).unwrap();
        let lv = g.leaf(&shape, logvar.to_vec()).unwrap();
        DiagGaussian::new(g, m, lv).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[0.3, -1.2], &[0.5, -0.4]);
        let p = gaussian(&mut g, &[0.3, -1.2], &[0.5, -0.4]);
        let kl = kl_diag(&mut g, &q, &p).unwrap();
        assert!(g.scalar(kl).abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[1.0], &[0.0]);
        let p = gaussian(&mut g, &[0.0], &[0.0]);
        let kl = kl_diag(&mut g, &q, &p).unwrap();
        assert!((g.scalar(kl) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn kl_variance_two_against_one() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[0.0], &[2.0_f64.ln()]);
        let p = gaussian(&mut g, &[0.0], &[0.0]);
        let kl = kl_diag(&mut g, &q, &p).unwrap();
        let expect = 0.5 * (-(2.0_f64.ln())) + 1.0 - 0.5;
        assert!((g.scalar(kl) - expect).abs() < 1e-10);
        assert!((g.scalar(kl) - 0.153426).abs() < 1e-6);
    }

    #[test]
    fn kl_width_mismatch() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[0.0, 1.0], &[0.0, 0.0]);
        let p = gaussian(&mut g, &[0.0], &[0.0]);
        assert!(kl_diag(&mut g, &q, &p).is_err());
    }

    #[test]
    fn entropy_closed_forms() {
        let mut g = Graph::new();
        let q1 = gaussian(&mut g, &[3.7], &[0.0]);
        let h1 = gauss_entropy(&mut g, &q1).unwrap();
        assert!((g.scalar(h1) - 1.418939).abs() < 1e-6);

        let q2 = gaussian(&mut g, &[0.0, 0.0], &[0.0, 0.0]);
        let h2 = gauss_entropy(&mut g, &q2).unwrap();
        assert!((g.scalar(h2) - 2.837877).abs() < 1e-6);

        let q3 = gaussian(&mut g, &[0.0], &[4.0_f64.ln()]);
        let h3 = gauss_entropy(&mut g, &q3).unwrap();
        assert!((g.scalar(h3) - 2.112086).abs() < 1e-6);
    }

    #[test]
    fn nll_closed_forms() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[0.7], &[0.0]);
        let at_mode = g.leaf(&[1], vec![0.7]).unwrap();
        let nll = gauss_nll(&mut g, &q, at_mode).unwrap();
        assert!((g.scalar(nll) - 0.918939).abs() < 1e-6);

        let off_one = g.leaf(&[1], vec![1.7]).unwrap();
        let nll2 = gauss_nll(&mut g, &q, off_one).unwrap();
        assert!((g.scalar(nll2) - 1.418939).abs() < 1e-6);
    }

    #[test]
    fn nll_matches_direct_density_evaluation() {
        // Independent oracle: -sum_i ln N(t_i | mu_i, var_i) evaluated from
        // the density formula with plain scalar arithmetic.
        let mean = [0.4, -1.1, 2.3];
        let logvar = [0.3, -0.8, 0.1];
        let target = [0.9, -1.5, 2.0];
        let oracle: f64 = (0..3)
            .map(|i| {
                let var: f64 = f64::exp(logvar[i]);
                let d: f64 = target[i] - mean[i];
                -(-0.5 * d * d / var - 0.5 * var.ln() - 0.5 * LN_2PI)
            })
            .sum();

        let mut g = Graph::new();
        let q = gaussian(&mut g, &mean, &logvar);
        let t = g.leaf(&[3], target.to_vec()).unwrap();
        let nll = gauss_nll(&mut g, &q, t).unwrap();
        assert!((g.scalar(nll) - oracle).abs() < 1e-12, "{} vs {}", g.scalar(nll), oracle);
    }

    #[test]
    fn reparameterize_zero_noise_returns_mean() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[0.4, -0.9], &[0.7, -0.2]);
        let noise = g.leaf(&[2], vec![0.0, 0.0]).unwrap();
        let s = reparameterize(&mut g, &q, noise).unwrap();
        assert_eq!(g.values(s), &[0.4, -0.9]);
    }

    #[test]
    fn reparameterize_unit_variance_unit_noise() {
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[0.25], &[0.0]);
        let noise = g.leaf(&[1], vec![1.0]).unwrap();
        let s = reparameterize(&mut g, &q, noise).unwrap();
        assert!((g.values(s)[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_blocks_noise_gradient() {
        let mut g = Graph::new();
        let mean = g.leaf(&[1], vec![0.1]).unwrap();
        let logvar = g.leaf(&[1], vec![0.4]).unwrap();
        let q = DiagGaussian::new(&g, mean, logvar).unwrap();
        let noise = g.leaf(&[1], vec![0.7]).unwrap();
        let s = reparameterize(&mut g, &q, noise).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(noise), &[0.0]);
        assert_eq!(grads.wrt(mean), &[1.0]);
        // d/dlogvar [exp(lv/2) * n] = 0.5 exp(lv/2) n
        let expect = 0.5 * (0.4_f64 / 2.0).exp() * 0.7;
        assert!((grads.wrt(logvar)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_sample_mean_approaches_q_mean() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let (mu, lv) = (0.8, 0.6);
        let sd = (lv / 2.0_f64).exp();
        let n = 100_000;
        let mut acc = 0.0;
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[mu], &[lv]);
        for _ in 0..n {
            // Box-Muller standard normal.
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let noise = g.leaf(&[1], vec![z]).unwrap();
            let s = reparameterize(&mut g, &q, noise).unwrap();
            acc += g.values(s)[0];
        }
        let sample_mean = acc / n as f64;
        let stderr = sd / (n as f64).sqrt();
        assert!(
            (sample_mean - mu).abs() < 3.0 * stderr,
            "sample mean {sample_mean} vs {mu} (3 se = {})",
            3.0 * stderr
        );
    }

    #[test]
    fn entropy_equals_expected_nll_under_q() {
        // H(q) == E_{x~q}[ -ln q(x) ], cross-checked by Monte Carlo.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (mu, lv) = (-0.3, 0.9);
        let sd = (lv / 2.0_f64).exp();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let x = mu + sd * z;
            let d: f64 = x - mu;
            acc += 0.5 * (LN_2PI + lv + d * d / lv.exp());
        }
        let mc_nll = acc / n as f64;
        let mut g = Graph::new();
        let q = gaussian(&mut g, &[mu], &[lv]);
        let h = gauss_entropy(&mut g, &q).unwrap();
        // MC std of the NLL estimator is ~ 1/sqrt(2n); allow 5 sigma.
        let tol = 5.0 / (2.0 * n as f64).sqrt();
        assert!((g.scalar(h) - mc_nll).abs() < tol, "{} vs {}", g.scalar(h), mc_nll);
    }

    #[test]
    fn all_ops_pass_gradient_checks() {
        let mut params = vec![
            Param::new("mu_q", vec![3], vec![0.4, -0.7, 1.1]),
            Param::new("lv_q", vec![3], vec![0.3, -0.5, 0.2]),
            Param::new("mu_p", vec![3], vec![-0.2, 0.6, 0.9]),
            Param::new("lv_p", vec![3], vec![-0.1, 0.4, -0.6]),
        ];
        let noise_vals = [0.7, -1.3, 0.4];
        let target_vals = [0.5, 0.1, -0.9];

        let max_rel = check_gradients(
            |g, leaves| {
                let q = DiagGaussian::new(g, leaves[0], leaves[1])?;
                let p = DiagGaussian::new(g, leaves[2], leaves[3])?;
                let kl = kl_diag(g, &q, &p)?;
                let h = gauss_entropy(g, &q)?;
                let target = g.leaf(&[3], target_vals.to_vec())?;
                let nll = gauss_nll(g, &q, target)?;
                let noise = g.leaf(&[3], noise_vals.to_vec())?;
                let sample = reparameterize(g, &q, noise)?;
                let sample_sq = g.square(sample)?;
                let s = g.sum(sample_sq)?;
                let t1 = g.add(kl, h)?;
                let t2 = g.add(nll, s)?;
                g.add(t1, t2)
            },
            &mut params,
            1e-6,
        )
        .unwrap();
        assert!(max_rel < 1e-6, "max_rel = {max_rel}");
    }
}
