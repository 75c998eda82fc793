//! Linear beta schedule, cumulative signal fractions, and the DDIM step
//! coefficients derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters a [`NoiseSchedule`] is rebuilt from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Immutable noise schedule. Timesteps are 1-based; index 0 of
/// [`alphas_cum`](Self::alphas_cum) holds the empty product 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0) {
            return Err(Error::Schedule(format!("betas must lie in (0,1), got [{beta_start}, {beta_end}]")));
        }
        if beta_start > beta_end {
            return Err(Error::Schedule(format!("beta_start {beta_start} exceeds beta_end {beta_end}")));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alphas_cum = Vec::with_capacity(timesteps + 1);
        alphas_cum.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cum.push(acc);
        }
        Ok(NoiseSchedule { params: ScheduleParams { timesteps, beta_start, beta_end }, betas, alphas_cum })
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::new(p.timesteps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Total number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alphas_cum[t]` for `t` in `0..=T`.
    pub fn alpha_cum(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepRange { t, total: self.len() });
        }
        Ok(())
    }

    pub fn check_pair(&self, t_lo: usize, t_hi: usize) -> Result<()> {
        if t_lo >= t_hi || t_hi > self.len() {
            return Err(Error::TimestepPair { t_lo, t_hi, total: self.len() });
        }
        Ok(())
    }

    fn noise_ratio(&self, t: usize) -> f64 {
        (1.0 / self.alphas_cum[t] - 1.0).sqrt()
    }

    /// Denoising coefficient for a step from `t_hi` down to `t_lo`; never positive.
    pub fn gamma(&self, t_hi: usize, t_lo: usize) -> Result<f64> {
        self.check_pair(t_lo, t_hi)?;
        Ok(self.noise_ratio(t_lo) - self.noise_ratio(t_hi))
    }

    /// Inversion coefficient for a step from `t_lo` up to `t_hi`; equals
    /// `-gamma(t_hi, t_lo)`.
    pub fn gamma_bar(&self, t_lo: usize, t_hi: usize) -> Result<f64> {
        self.check_pair(t_lo, t_hi)?;
        Ok(self.noise_ratio(t_hi) - self.noise_ratio(t_lo))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::from_params(&ScheduleParams::default()).expect("default schedule is valid")
    }
}

/// Strictly increasing timesteps in `1..=T` ending at `T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSubsequence(Vec<usize>);

impl StepSubsequence {
    /// `steps` timesteps spread as evenly as integer rounding allows, ending at
    /// `total`. Element `i` is `ceil((i + 1) * total / steps)`, so rounding
    /// always resolves toward the larger timestep.
    pub fn uniform(total: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > total {
            return Err(Error::Config(format!("subsequence length {steps} must lie in 1..={total}")));
        }
        let ts = (1..=steps).map(|i| (i * total).div_ceil(steps)).collect();
        Ok(StepSubsequence(ts))
    }

    pub fn from_vec(total: usize, ts: Vec<usize>) -> Result<Self> {
        let ok = !ts.is_empty()
            && ts[0] >= 1
            && ts.windows(2).all(|w| w[0] < w[1])
            && ts.last() == Some(&total);
        if !ok {
            return Err(Error::Config(format!("{ts:?} is not a valid subsequence of 1..={total}")));
        }
        Ok(StepSubsequence(ts))
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(t_lo, t_hi)` pairs in ascending order, starting with `(0, first)`.
    pub fn ascending_pairs(&self) -> Vec<(usize, usize)> {
        std::iter::once(0).chain(self.0.iter().copied()).zip(self.0.iter().copied()).collect()
    }
}
