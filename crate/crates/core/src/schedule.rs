//! Noise schedules and the closed-form forward / reverse diffusion kernels.
//!
//! All schedule tables are kept in `f64`; coefficients are cast to the tensor
//! dtype only when they are applied.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters that fully determine a linear schedule.
///
/// The beta bounds are given for `reference_steps` diffusion steps. When
/// `steps` differs, both bounds are multiplied by `reference_steps / steps`
/// so the total amount of injected noise stays comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub reference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            reference_steps: 1000,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.reference_steps == 0 {
            return Err(Error::InvalidArgument("reference_steps must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("schedule steps must be positive".into()));
        }
        let scale = self.reference_steps as f64 / self.steps as f64;
        make_linear_schedule(self.steps, self.beta_start * scale, self.beta_end * scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Linear beta schedule from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("number of diffusion steps must be positive".into()));
    }
    let valid = |b: f64| b > 0.0 && b < 1.0;
    if !valid(beta_start) || !valid(beta_end) {
        return Err(Error::InvalidArgument(format!(
            "beta bounds must lie in (0, 1), got [{beta_start}, {beta_end}]"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::InvalidArgument(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (steps - 1) as f64;
        let mut b: Vec<f64> = (0..steps).map(|i| beta_start + span * i as f64).collect();
        b[steps - 1] = beta_end;
        b
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Builds all derived tables from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `posterior_vars[0]` is zero because the cumulative product before the
    /// first step is taken as one. The last reverse step never draws noise, so
    /// that entry is never used as a sampling variance.
    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            Err(Error::Timestep {
                t,
                max: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Cumulative signal retention at 1-based timestep `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// Selects `steps` evenly spaced timesteps of this schedule and derives the
    /// betas of the shortened chain from the retained cumulative products.
    ///
    /// Returns the new schedule together with the original timestep each new
    /// step corresponds to, which is what a noise predictor trained on `self`
    /// must be conditioned on.
    pub fn respaced(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidArgument(format!(
                "cannot respace a {total}-step schedule to {steps} steps"
            )));
        }
        if steps == total {
            return Ok((self.clone(), (1..=total).collect()));
        }
        // Evenly spaced 1-based timesteps ending exactly at T.
        let mut kept: Vec<usize> = (0..steps)
            .map(|i| ((i as f64 + 1.0) * total as f64 / steps as f64).round() as usize)
            .collect();
        kept.dedup();
        let mut betas = Vec::with_capacity(kept.len());
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok((NoiseSchedule::from_betas(betas)?, kept))
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Draws `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` for a single timestep.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "q_sample x0/eps")?;
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let xt = (x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(xt)
}

/// Batched forward sampling where every leading-axis example has its own timestep.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "q_sample x0/eps")?;
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
    }
    for &t in ts {
        sched.check_timestep(t)?;
    }
    let mut bshape = vec![1usize; x0.rank()];
    bshape[0] = b;
    let signal: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let noise: Vec<f64> = ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    let dev = x0.device();
    let signal = Tensor::from_vec(signal, bshape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    let noise = Tensor::from_vec(noise, bshape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// One reverse transition `x_t -> x_{t-1}`.
///
/// `z` must be present for `t > 1` and absent for `t == 1`, where the mean is
/// returned without noise.
pub fn p_sample(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    check_same_shape(x_t, eps_hat, "p_sample x_t/eps_hat")?;
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let eps_coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let mean = (x_t - eps_hat.affine(eps_coef, 0.0)?)?.affine(inv_sqrt_alpha, 0.0)?;
    match (t, z) {
        (1, None) => Ok(mean),
        (1, Some(_)) => Err(Error::Contract(
            "noise supplied to the final reverse step (t = 1)".into(),
        )),
        (_, None) => Err(Error::Contract(format!("no noise supplied at t = {t}"))),
        (_, Some(z)) => {
            check_same_shape(x_t, z, "p_sample x_t/z")?;
            let sigma = sched.posterior_var(t).sqrt();
            Ok((mean + z.affine(sigma, 0.0)?)?)
        }
    }
}
