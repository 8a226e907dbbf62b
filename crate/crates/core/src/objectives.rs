//! Closed-form Gaussian divergences and expected log-likelihoods, each with
//! the partial derivatives the training losses need.

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn check(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveVariance(v))
    }
}

/// `D_KL[N(μ_q, σ_q²) ‖ N(μ_p, σ_p²)]`; arguments are `(mean, variance)`.
pub fn kl_gaussians(q: (f64, f64), p: (f64, f64)) -> Result<f64> {
    check(q.1)?;
    check(p.1)?;
    Ok(kl_with_grad(q.0, q.1, p.0, p.1).value)
}

/// `E_{f∼q}[−log N(y | f, σ_n²)]`.
pub fn expected_nll_gaussian(q: (f64, f64), y: f64, noise_var: f64) -> Result<f64> {
    check(q.1)?;
    check(noise_var)?;
    Ok(ell_with_grad(q.0, q.1, y, noise_var).value)
}

/// `−log N(y | μ_q, σ_q² + σ_n²)`.
pub fn predictive_nll_gaussian(q: (f64, f64), y: f64, noise_var: f64) -> Result<f64> {
    check(q.1)?;
    check(noise_var)?;
    Ok(pred_nll_with_grad(q.0, q.1, y, noise_var).value)
}

/// A scalar term with its partials in `(mean, variance, noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermGrad {
    pub value: f64,
    pub d_mean: f64,
    pub d_var: f64,
    pub d_noise: f64,
}

/// KL with partials in the `q` moments only (`d_noise` is zero).
pub fn kl_with_grad(mq: f64, vq: f64, mp: f64, vp: f64) -> TermGrad {
    let diff = mq - mp;
    TermGrad {
        value: 0.5 * (vp / vq).ln() + (vq + diff * diff) / (2.0 * vp) - 0.5,
        d_mean: diff / vp,
        d_var: 0.5 / vp - 0.5 / vq,
        d_noise: 0.0,
    }
}

pub fn ell_with_grad(mq: f64, vq: f64, y: f64, noise: f64) -> TermGrad {
    let r2 = (y - mq) * (y - mq);
    TermGrad {
        value: 0.5 * (LN_2PI + noise.ln() + (r2 + vq) / noise),
        d_mean: (mq - y) / noise,
        d_var: 0.5 / noise,
        d_noise: 0.5 / noise - 0.5 * (r2 + vq) / (noise * noise),
    }
}

pub fn pred_nll_with_grad(mq: f64, vq: f64, y: f64, noise: f64) -> TermGrad {
    let s = vq + noise;
    let r2 = (y - mq) * (y - mq);
    let d_s = 0.5 / s - 0.5 * r2 / (s * s);
    TermGrad {
        value: 0.5 * (LN_2PI + s.ln() + r2 / s),
        d_mean: (mq - y) / s,
        d_var: d_s,
        d_noise: d_s,
    }
}
