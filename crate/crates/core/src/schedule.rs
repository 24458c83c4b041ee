//! Noise schedules and the forward diffusion process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Per-step variance grows linearly from `beta_start` to `beta_end`.
    Linear,
    /// Squared-cosine cumulative schedule; `beta_start`/`beta_end` are kept
    /// only as clamp bounds for the derived per-step variances.
    Cosine,
}

/// Cumulative noise-level table `alpha_bar[t]` for `t = 0..=T`.
///
/// `alpha_bar[0] == 1.0` exactly, the table is strictly decreasing and
/// every entry stays in (0, 1].
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_count: usize,
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn t_count(&self) -> usize {
        self.t_count
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step variance, indexed from 1.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_count);
        self.betas[t - 1]
    }
}

pub fn build_schedule(
    t_count: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(Error::parameter("T", format!("{t_count} < 1")));
    }
    if !(beta_start > 0.0) {
        return Err(Error::parameter(
            "beta_start",
            format!("{beta_start} must be > 0"),
        ));
    }
    if beta_end < beta_start {
        return Err(Error::parameter(
            "beta_end",
            format!("{beta_end} < beta_start {beta_start}"),
        ));
    }
    if !(beta_end < 1.0) {
        return Err(Error::parameter(
            "beta_end",
            format!("{beta_end} must be < 1"),
        ));
    }

    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_count)
            .map(|i| {
                if t_count == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            // squared-cosine cumulative curve; betas derived from its ratios
            let s = 0.008;
            let f = |t: f64| {
                let v = ((t / t_count as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                v.cos().powi(2)
            };
            let f0 = f(0.0);
            (0..t_count)
                .map(|i| {
                    let a_prev = f(i as f64) / f0;
                    let a_cur = f((i + 1) as f64) / f0;
                    (1.0 - a_cur / a_prev).clamp(beta_start, beta_end.min(0.999))
                })
                .collect()
        }
    };

    let mut alpha_bar = Vec::with_capacity(t_count + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    for t in 0..t_count {
        debug_assert!(alpha_bar[t + 1] < alpha_bar[t] && alpha_bar[t + 1] > 0.0);
    }

    Ok(NoiseSchedule {
        t_count,
        alpha_bar,
        betas,
        beta_start,
        beta_end,
        kind,
    })
}

/// `sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps`, elementwise.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_diffuse",
            format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape()),
        ));
    }
    if t > sched.t_count() {
        return Err(Error::parameter(
            "t",
            format!("{t} out of range [0, {}]", sched.t_count()),
        ));
    }
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z0.scale(sa);
    out.axpy(sb, eps);
    Ok(out)
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::shape(
            "cfg_combine",
            format!("{:?} vs {:?}", eps_uncond.shape(), eps_cond.shape()),
        ));
    }
    let mut out = eps_uncond.scale(1.0 - scale);
    out.axpy(scale, eps_cond);
    Ok(out)
}
