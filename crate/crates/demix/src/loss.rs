//! Training objectives: twin-Gaussian likelihood heads plus the hierarchical
//! KL term for HVAE mode, and plain MSE for HAE / U-Net modes.
//!
//! Every quantity exists twice: as a plain array function (reports, tests)
//! and as a tape composition (training). A unit test pins the two together.

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{DemixError, Result};
use crate::model::arch::ForwardOut;
use crate::model::{LatentState, Prediction};
use crate::tensor::{Graph, Scalar, Var};

pub const LOG_2PI: f64 = 1.8378770664093453;
/// Lower bound on likelihood and latent sigmas.
pub const SIGMA_FLOOR: f64 = 0.006737946999085467; // exp(-5)

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    /// recon_d1 + recon_d2 + kl_weight * sum(kl_per_level), nats per pixel.
    pub total: f64,
    pub recon_d1: f64,
    pub recon_d2: f64,
    pub kl_per_level: Vec<f64>,
    pub kl_weight: f64,
}

impl LossReport {
    pub fn kl_sum(&self) -> f64 {
        self.kl_per_level.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.recon_d1.is_finite()
            && self.recon_d2.is_finite()
            && self.kl_per_level.iter().all(|k| k.is_finite())
    }
}

/// Mean over pixels of the Gaussian negative log-likelihood with the
/// sigma floor: 0.5 * (log 2pi + 2 log s + (t - mu)^2 / s^2),
/// s = max(exp(logvar / 2), exp(-5)).
pub fn gaussian_nll<T: Scalar>(
    mu: &Array2<T>,
    logvar: &Array2<T>,
    target: &Array2<T>,
) -> Result<f64> {
    if mu.dim() != logvar.dim() || mu.dim() != target.dim() {
        return Err(DemixError::Shape("gaussian_nll shape mismatch".into()));
    }
    let mut acc = 0.0f64;
    for ((&m, &lv), &t) in mu.iter().zip(logvar.iter()).zip(target.iter()) {
        let (m, lv, t) = (m.to_f64(), lv.to_f64(), t.to_f64());
        if !(m.is_finite() && lv.is_finite() && t.is_finite()) {
            return Err(DemixError::Data("non-finite input to gaussian_nll".into()));
        }
        let s = (lv / 2.0).exp().max(SIGMA_FLOOR);
        let r = (t - m) / s;
        acc += 0.5 * (LOG_2PI + 2.0 * s.ln() + r * r);
    }
    Ok(acc / mu.len() as f64)
}

/// Analytic KL between diagonal Gaussians, summed over latent channels
/// (axis 0) and averaged over the spatial axes.
pub fn gaussian_kl<T: Scalar>(
    mu_q: &Array3<T>,
    sigma_q: &Array3<T>,
    mu_p: &Array3<T>,
    sigma_p: &Array3<T>,
) -> f64 {
    let (_, h, w) = mu_q.dim();
    let mut acc = 0.0f64;
    for (((&mq, &sq), &mp), &sp) in mu_q
        .iter()
        .zip(sigma_q.iter())
        .zip(mu_p.iter())
        .zip(sigma_p.iter())
    {
        let (mq, sq, mp, sp) = (mq.to_f64(), sq.to_f64(), mp.to_f64(), sp.to_f64());
        acc += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    acc / (h * w) as f64
}

/// Modified evidence bound: twin Gaussian likelihoods under conditional
/// independence plus the weighted hierarchical KL.
pub fn elbo_loss<T: Scalar>(
    pred: &Prediction<T>,
    d1: &Array2<T>,
    d2: &Array2<T>,
    latents: &LatentState<T>,
    kl_weight: f64,
) -> Result<LossReport> {
    let (Some(lv1), Some(lv2)) = (&pred.logvar1, &pred.logvar2) else {
        return Err(DemixError::Config("elbo needs log-variance heads".into()));
    };
    let recon_d1 = gaussian_nll(&pred.mu1, lv1, d1)?;
    let recon_d2 = gaussian_nll(&pred.mu2, lv2, d2)?;
    let kl_per_level: Vec<f64> = latents
        .levels
        .iter()
        .map(|l| gaussian_kl(&l.mu_q, &l.sigma_q, &l.mu_p, &l.sigma_p))
        .collect();
    let total = recon_d1 + recon_d2 + kl_weight * kl_per_level.iter().sum::<f64>();
    Ok(LossReport {
        total,
        recon_d1,
        recon_d2,
        kl_per_level,
        kl_weight,
    })
}

/// Mean over pixels of (mu1 - d1)^2 + (mu2 - d2)^2; KL terms zero.
pub fn mse_loss<T: Scalar>(
    pred: &Prediction<T>,
    d1: &Array2<T>,
    d2: &Array2<T>,
) -> Result<LossReport> {
    let sq = |a: &Array2<T>, b: &Array2<T>| -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(DemixError::Shape("mse shape mismatch".into()));
        }
        Ok(a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let d = x.to_f64() - y.to_f64();
                d * d
            })
            .sum::<f64>()
            / a.len() as f64)
    };
    let recon_d1 = sq(&pred.mu1, d1)?;
    let recon_d2 = sq(&pred.mu2, d2)?;
    Ok(LossReport {
        total: recon_d1 + recon_d2,
        recon_d1,
        recon_d2,
        kl_per_level: Vec::new(),
        kl_weight: 0.0,
    })
}

/// Loss nodes on a training tape.
pub struct LossVars {
    pub total: Var,
    pub recon_d1: Var,
    pub recon_d2: Var,
    pub kl_per_level: Vec<Var>,
}

/// Tape version of `gaussian_nll`.
pub fn gaussian_nll_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var, target: Var) -> Var {
    let half_lv = g.scale(logvar, T::from_f64(0.5));
    let sigma_raw = g.exp(half_lv);
    let sigma = g.max_scalar(sigma_raw, T::from_f64(SIGMA_FLOOR));
    let diff = g.sub(target, mu);
    let r = g.div(diff, sigma);
    let r2 = g.square(r);
    let ln_s = g.ln(sigma);
    let two_ln_s = g.scale(ln_s, T::from_f64(2.0));
    let inner = g.add(two_ln_s, r2);
    let inner = g.add_scalar(inner, T::from_f64(LOG_2PI));
    let half = g.scale(inner, T::from_f64(0.5));
    g.mean_all(half)
}

/// Tape version of `elbo_loss`. Uses the per-level KL nodes the forward
/// pass produced.
pub fn elbo_graph<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOut<Var>,
    d1: Var,
    d2: Var,
    kl_weight: f64,
) -> LossVars {
    let lv1 = out.logvar1.expect("elbo needs log-variance heads");
    let lv2 = out.logvar2.expect("elbo needs log-variance heads");
    let recon_d1 = gaussian_nll_graph(g, out.mu1, lv1, d1);
    let recon_d2 = gaussian_nll_graph(g, out.mu2, lv2, d2);
    let mut total = g.add(recon_d1, recon_d2);
    let kl_per_level: Vec<Var> = out.latents.iter().map(|l| l.kl).collect();
    if !kl_per_level.is_empty() && kl_weight != 0.0 {
        let mut kl_sum = kl_per_level[0];
        for &k in &kl_per_level[1..] {
            kl_sum = g.add(kl_sum, k);
        }
        let weighted = g.scale(kl_sum, T::from_f64(kl_weight));
        total = g.add(total, weighted);
    }
    LossVars {
        total,
        recon_d1,
        recon_d2,
        kl_per_level,
    }
}

/// Tape version of `mse_loss`.
pub fn mse_graph<T: Scalar>(g: &mut Graph<T>, out: &ForwardOut<Var>, d1: Var, d2: Var) -> LossVars {
    let e1 = g.sub(out.mu1, d1);
    let e1 = g.square(e1);
    let recon_d1 = g.mean_all(e1);
    let e2 = g.sub(out.mu2, d2);
    let e2 = g.square(e2);
    let recon_d2 = g.mean_all(e2);
    let total = g.add(recon_d1, recon_d2);
    LossVars {
        total,
        recon_d1,
        recon_d2,
        kl_per_level: Vec::new(),
    }
}
