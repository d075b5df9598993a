//! Noise schedule, forward noising, the denoising loss and the DDIM update.
//!
//! Timesteps run from 1 to `T`. `ᾱ_0` is defined as 1 so that the final
//! reverse step lands on the clean estimate.

use serde::{Deserialize, Serialize};

use crate::codec::LatentBlock;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// β linear in `sqrt(β)` between 8.5e-4 and 1.2e-2.
    ScaledLinear,
    /// β linear between 1e-4 and 2e-2.
    Linear,
    /// Squared-cosine ᾱ with offset 0.008, β capped at 0.999.
    Cosine,
}

impl ScheduleKind {
    /// Numeric tag used in checkpoints.
    pub fn tag(self) -> f32 {
        match self {
            ScheduleKind::ScaledLinear => 0.0,
            ScheduleKind::Linear => 1.0,
            ScheduleKind::Cosine => 2.0,
        }
    }

    pub fn from_tag(tag: f32) -> Option<Self> {
        match tag as i64 {
            0 => Some(ScheduleKind::ScaledLinear),
            1 => Some(ScheduleKind::Linear),
            2 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: Option<ScheduleKind>,
    /// `alpha_bar[t - 1]` is ᾱ_t.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas `β_1..β_T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::contract("schedule", "need at least two timesteps"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::contract("schedule", "every beta must lie in (0, 1)"));
        }
        let alpha_bar = betas
            .iter()
            .scan(1.0f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { kind: None, alpha_bar })
    }

    /// Schedule from stored ᾱ values, as found in a checkpoint.
    pub fn from_alpha_bar(kind: Option<ScheduleKind>, alpha_bar: Vec<f64>) -> Result<Self> {
        let decreasing = alpha_bar.windows(2).all(|w| w[1] < w[0]);
        if alpha_bar.len() < 2 || !decreasing || alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::contract(
                "schedule",
                "alpha_bar must be strictly decreasing within (0, 1]",
            ));
        }
        Ok(Self { kind, alpha_bar })
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    /// Total number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// ᾱ_t for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(
                op,
                format!("timestep {t} outside [1, {}]", self.steps()),
            ));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::contract("schedule", "need at least two timesteps"));
    }
    let n = steps as f64;
    let betas: Vec<f64> = match kind {
        ScheduleKind::ScaledLinear => {
            let (lo, hi) = (8.5e-4f64.sqrt(), 1.2e-2f64.sqrt());
            (0..steps)
                .map(|i| {
                    let s = lo + (hi - lo) * i as f64 / (n - 1.0);
                    s * s
                })
                .collect()
        }
        ScheduleKind::Linear => (0..steps)
            .map(|i| 1e-4 + (2e-2 - 1e-4) * i as f64 / (n - 1.0))
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / n + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(0.999))
                .collect()
        }
    };
    let mut s = NoiseSchedule::from_betas(&betas)?;
    s.kind = Some(kind);
    Ok(s)
}

fn same_dims(op: &'static str, a: &LatentBlock, b: &LatentBlock) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(
            op,
            format!("shapes {:?} and {:?} differ", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

fn zip_map(a: &LatentBlock, b: &LatentBlock, f: impl Fn(f64, f64) -> f64) -> LatentBlock {
    let [fr, c, h, w] = a.dims();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x as f64, y as f64) as f32)
        .collect();
    LatentBlock::new(fr, c, h, w, data).expect("same dims")
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 - ᾱ_t)·eps`.
pub fn add_noise(z0: &LatentBlock, eps: &LatentBlock, t: usize, sched: &NoiseSchedule) -> Result<LatentBlock> {
    same_dims("add_noise", z0, eps)?;
    sched.check_t("add_noise", t)?;
    Ok(noise_with(z0, eps, sched.alpha_bar(t)))
}

/// [`add_noise`] at an explicit ᾱ.
pub fn noise_with(z0: &LatentBlock, eps: &LatentBlock, alpha_bar: f64) -> LatentBlock {
    zip_map(z0, eps, |z, e| noised(z, e, alpha_bar))
}

/// Scalar forward noising in `f64`.
#[inline]
pub fn noised(z0: f64, eps: f64, alpha_bar: f64) -> f64 {
    alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps
}

/// Scalar clean estimate `(z_t - sqrt(1 - ᾱ)·eps) / sqrt(ᾱ)` in `f64`.
#[inline]
pub fn predicted_z0(z_t: f64, eps: f64, alpha_bar: f64) -> f64 {
    (z_t - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()
}

/// Mean squared error over every element.
pub fn training_loss(eps_true: &LatentBlock, eps_pred: &LatentBlock) -> Result<f64> {
    same_dims("training_loss", eps_true, eps_pred)?;
    let n = eps_true.data().len();
    if n == 0 {
        return Err(Error::contract("training_loss", "empty latent"));
    }
    let s: f64 = eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s / n as f64)
}

/// Deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    z_t: &LatentBlock,
    eps_pred: &LatentBlock,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentBlock> {
    same_dims("ddim_step", z_t, eps_pred)?;
    sched.check_t("ddim_step", t)?;
    if t_prev >= t {
        return Err(Error::contract(
            "ddim_step",
            format!("t_prev {t_prev} must be below t {t}"),
        ));
    }
    Ok(ddim_with(z_t, eps_pred, sched.alpha_bar(t), sched.alpha_bar(t_prev)))
}

/// [`ddim_step`] at explicit ᾱ values.
pub fn ddim_with(z_t: &LatentBlock, eps_pred: &LatentBlock, ab_t: f64, ab_prev: f64) -> LatentBlock {
    zip_map(z_t, eps_pred, |z, e| noised(predicted_z0(z, e, ab_t), e, ab_prev))
}

/// Descending inference timesteps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DdimPlan {
    timesteps: Vec<usize>,
}

impl DdimPlan {
    /// `t_i = T - floor(i·T/S)` for `i = 0..S`: starts at `T`, evenly spaced.
    pub fn new(total: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > total {
            return Err(Error::contract(
                "ddim_plan",
                format!("need 1 ≤ S ≤ T, got S={steps}, T={total}"),
            ));
        }
        Ok(Self {
            timesteps: (0..steps).map(|i| total - i * total / steps).collect(),
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `(t, t_prev)` pairs, ending at `t_prev = 0`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }
}
