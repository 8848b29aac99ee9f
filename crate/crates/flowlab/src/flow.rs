//! Noising schedules, solution-operator parameterizations and the time
//! samplers used by the training objectives.
//!
//! A noising schedule defines the interpolant `x_t = alpha(t) x0 + beta(t) x1`
//! between data (`t=0`) and noise (`t=1`). The solution operator is modeled
//! as `f(x, t, s) = a(t, s) x + b(t, s) F(x, t, s)` where `a(t, t) = 1` and
//! `b(t, t) = 0` hold exactly in floating point, so the identity `f(x, t, t)
//! = x` is structural rather than learned.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::arr::Arr;
use crate::tape::sigmoid;

/// Margin keeping target and jump times strictly below the current time.
pub const TIME_GAP: f64 = 1e-4;

// ─── Noising schedule ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoisingSchedule {
    /// `alpha = 1 - t`, `beta = t`.
    Linear,
    /// `alpha = cos(pi t / 2)`, `beta = sin(pi t / 2)`.
    Trigonometric,
}

impl NoisingSchedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            NoisingSchedule::Linear => 1.0 - t,
            NoisingSchedule::Trigonometric => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    pub fn beta(self, t: f64) -> f64 {
        match self {
            NoisingSchedule::Linear => t,
            NoisingSchedule::Trigonometric => (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn alpha_prime(self, t: f64) -> f64 {
        match self {
            NoisingSchedule::Linear => -1.0,
            NoisingSchedule::Trigonometric => {
                let c = std::f64::consts::FRAC_PI_2;
                -c * (c * t).sin()
            }
        }
    }

    pub fn beta_prime(self, t: f64) -> f64 {
        match self {
            NoisingSchedule::Linear => 1.0,
            NoisingSchedule::Trigonometric => {
                let c = std::f64::consts::FRAC_PI_2;
                c * (c * t).cos()
            }
        }
    }

    /// `alpha(t) x0 + beta(t) x1` with a per-sample `t`.
    pub fn interpolate(self, x0: &Arr, x1: &Arr, t: &[f64]) -> Arr {
        let (r, c) = x0.dims();
        assert_eq!(x0.dims(), x1.dims());
        assert_eq!(r, t.len());
        Arr::from_rows(r, c, |i, row| {
            let (a, b) = (self.alpha(t[i]), self.beta(t[i]));
            for (o, (&u, &v)) in row.iter_mut().zip(x0.row(i).iter().zip(x1.row(i))) {
                *o = a * u + b * v;
            }
        })
    }

    /// Per-sample conditional velocity `alpha'(t) x0 + beta'(t) x1`.
    pub fn velocity_target(self, x0: &Arr, x1: &Arr, t: &[f64]) -> Arr {
        let (r, c) = x0.dims();
        assert_eq!(x0.dims(), x1.dims());
        assert_eq!(r, t.len());
        Arr::from_rows(r, c, |i, row| {
            let (da, db) = (self.alpha_prime(t[i]), self.beta_prime(t[i]));
            for (o, (&u, &v)) in row.iter_mut().zip(x0.row(i).iter().zip(x1.row(i))) {
                *o = da * u + db * v;
            }
        })
    }
}

// ─── Solution-operator parameterization ──────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolutionParam {
    /// `a = 1`, `b = s - t`.
    Euler,
    /// `a = cos(pi (s - t) / 2)`, `b = sin(pi (s - t) / 2)`.
    Trigonometric,
}

impl SolutionParam {
    pub fn a(self, t: f64, s: f64) -> f64 {
        match self {
            SolutionParam::Euler => 1.0,
            SolutionParam::Trigonometric => (std::f64::consts::FRAC_PI_2 * (s - t)).cos(),
        }
    }

    pub fn b(self, t: f64, s: f64) -> f64 {
        match self {
            SolutionParam::Euler => s - t,
            SolutionParam::Trigonometric => (std::f64::consts::FRAC_PI_2 * (s - t)).sin(),
        }
    }

    /// `d a(t, s) / d s` evaluated at `s = t`. Zero for both variants.
    pub fn da_ds_on_diag(self, _t: f64) -> f64 {
        match self {
            SolutionParam::Euler => 0.0,
            // -c sin(c (s - t)) at s = t
            SolutionParam::Trigonometric => 0.0,
        }
    }

    /// `d b(t, s) / d s` evaluated at `s = t`.
    pub fn db_ds_on_diag(self, _t: f64) -> f64 {
        match self {
            SolutionParam::Euler => 1.0,
            SolutionParam::Trigonometric => std::f64::consts::FRAC_PI_2,
        }
    }
}

// ─── Time samplers ───────────────────────────────────────────────────────

/// Sigmoid of a Gaussian: draws lie strictly inside (0, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl LogitNormal {
    pub fn new(mu: f64, sigma: f64) -> Self {
        assert!(mu.is_finite() && sigma.is_finite() && sigma >= 0.0, "bad logit-normal params");
        LogitNormal { mu, sigma }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        sigmoid(self.mu + self.sigma * z)
    }

    pub fn draw_many<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

// ─── Jump-size schedule ──────────────────────────────────────────────────

/// How far the intermediate jump time `l` sits between `t` and `s` as a
/// fraction `r` of the gap, annealed over training progress `k / total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpScheduleKind {
    Exponential,
    Cosine,
    Linear,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpSchedule {
    pub kind: JumpScheduleKind,
    pub r_init: f64,
    pub r_end: f64,
}

impl JumpSchedule {
    /// Fraction at step `k` of `total`. Stays within
    /// `[min(r_init, r_end), max(r_init, r_end)]` for every kind.
    pub fn ratio(&self, k: usize, total: usize) -> f64 {
        assert!(total > 0 && k <= total, "bad schedule step {k}/{total}");
        let frac = k as f64 / total as f64;
        match self.kind {
            JumpScheduleKind::Exponential => self.r_init * (self.r_end / self.r_init).powf(frac),
            JumpScheduleKind::Cosine => {
                self.r_end
                    + (self.r_init - self.r_end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            JumpScheduleKind::Linear => self.r_init + (self.r_end - self.r_init) * frac,
            JumpScheduleKind::Constant => self.r_end,
        }
    }
}

// ─── Joint (t, l, s) sampling ────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeTriple {
    pub t: f64,
    pub l: f64,
    pub s: f64,
}

/// Draws `n` triples with `s <= l <= t - TIME_GAP`.
///
/// Order matters: `s` is clamped below `t` first, then `l` is interpolated
/// from the clamped `s`, then clamped itself. Doing it in this order
/// guarantees the ordering invariant for every draw.
pub fn sample_time_triples<R: Rng>(
    t_sampler: &LogitNormal,
    s_sampler: &LogitNormal,
    jump: &JumpSchedule,
    k: usize,
    total: usize,
    n: usize,
    t_rng: &mut R,
    s_rng: &mut R,
) -> Vec<TimeTriple> {
    let r = jump.ratio(k, total);
    (0..n)
        .map(|_| {
            let t = t_sampler.draw(t_rng);
            let s = s_sampler.draw(s_rng).min(t - TIME_GAP);
            let l = (t + (s - t) * r).min(t - TIME_GAP);
            TimeTriple { t, l, s }
        })
        .collect()
}
