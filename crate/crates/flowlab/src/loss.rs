//! Training objectives: a velocity-matching loss at the diagonal s = t and a
//! solution consistency loss across (t, l, s), each with an adaptive
//! per-sample weight, plus the batch split combining them.
//!
//! Weighting contract: the adaptive weights are computed from detached
//! per-sample errors and enter the graph as constants. Gradients flow only
//! through the raw squared error. Likewise the consistency target is an
//! off-tape evaluation of the current parameters, which is exactly the
//! stop-gradient semantics: same forward value, no gradient path.

use rand::Rng;
use thiserror::Error;

use crate::arr::Arr;
use crate::flow::{NoisingSchedule, SolutionParam, TimeTriple};
use crate::guide::{prepare_guided_batch, GuidanceConfig};
use crate::net::{
    eval_solution, forward_solution, predicted_velocity, BoundParams, ModelParams, NetError,
};
use crate::tape::{Tape, TapeError, Value};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite {kind} loss at sample {sample}")]
    NonFinite { kind: &'static str, sample: usize },
    #[error("consistency gap t-l = {gap:e} too small at sample {sample}")]
    DegenerateGap { gap: f64, sample: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    VelocityMatch,
    Consistency,
}

impl LossKind {
    fn name(self) -> &'static str {
        match self {
            LossKind::VelocityMatch => "velocity-match",
            LossKind::Consistency => "consistency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Fraction of each batch trained with the velocity-matching loss.
    pub lambda: f64,
    /// Adaptive weight exponent; 0 disables the error-dependent part.
    pub p: f64,
    /// Smoothing floor inside the adaptive weight.
    pub epsilon: f64,
    pub schedule: NoisingSchedule,
    pub sol: SolutionParam,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.75,
            p: 1.0,
            epsilon: 1e-3,
            schedule: NoisingSchedule::Linear,
            sol: SolutionParam::Euler,
        }
    }
}

impl LossConfig {
    /// Velocity-match sample count for a batch of `n`.
    pub fn split(&self, n: usize) -> usize {
        (self.lambda * n as f64).floor() as usize
    }
}

/// One loss term's scalar (on the tape) plus detached diagnostics.
#[derive(Debug)]
pub struct LossOutput<'t> {
    pub kind: LossKind,
    pub loss: Value<'t>,
    pub per_sample_mse: Vec<f64>,
    pub per_sample_weight: Vec<f64>,
    pub t: Vec<f64>,
    /// Empty for the velocity-match loss.
    pub l: Vec<f64>,
    /// Empty for the velocity-match loss.
    pub s: Vec<f64>,
}

/// Per-sample mean squared error of `pred` against a constant target:
/// a vector Value on the tape plus its detached data.
fn mse_rows<'t>(
    tape: &'t Tape,
    kind: LossKind,
    pred: Value<'t>,
    target: &Arr,
) -> Result<(Value<'t>, Vec<f64>), LossError> {
    let diff = pred.sub(tape.input(target.clone()))?;
    let mse = diff.square().row_mean()?;
    let data = mse.data().into_data();
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(LossError::NonFinite { kind: kind.name(), sample: i });
        }
    }
    Ok((mse, data))
}

/// `mean(weights . mse)` with the weights entering as constants.
fn weighted_mean<'t>(
    tape: &'t Tape,
    mse: Value<'t>,
    weights: &[f64],
) -> Result<Value<'t>, LossError> {
    Ok(mse.mul(tape.input(Arr::vector(weights.to_vec())))?.mean())
}

fn fm_weight(cfg: &LossConfig, t: f64, mse: f64) -> f64 {
    let db = cfg.sol.db_ds_on_diag(t).abs();
    1.0 / (db * (mse + cfg.epsilon).powf(cfg.p))
}

fn scm_weight(cfg: &LossConfig, t: f64, l: f64, s: f64, mse: f64) -> f64 {
    let gap = t - l;
    1.0 / ((gap * cfg.sol.b(t, s).abs()) * (mse / (gap * gap) + cfg.epsilon).powf(cfg.p))
}

/// Velocity-matching loss against an explicit per-sample velocity target
/// (raw conditional or guided): per-sample MSE of the model's instantaneous
/// velocity, weighted by `1 / (|db/ds(t,t)| (MSE + eps)^p)`.
pub fn fm_loss_with_target<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ModelParams,
    cfg: &LossConfig,
    x_t: &Arr,
    t: &[f64],
    labels: &[usize],
    target_v: &Arr,
) -> Result<LossOutput<'t>, LossError> {
    assert!(!t.is_empty());
    let pred = predicted_velocity(tape, bound, &params.cfg, cfg.sol, x_t, t, labels)?;
    let (mse, mse_data) = mse_rows(tape, LossKind::VelocityMatch, pred, target_v)?;
    let weights: Vec<f64> =
        t.iter().zip(&mse_data).map(|(&ti, &m)| fm_weight(cfg, ti, m)).collect();
    let loss = weighted_mean(tape, mse, &weights)?;
    Ok(LossOutput {
        kind: LossKind::VelocityMatch,
        loss,
        per_sample_mse: mse_data,
        per_sample_weight: weights,
        t: t.to_vec(),
        l: Vec::new(),
        s: Vec::new(),
    })
}

/// Velocity-matching loss from raw pairs: noise the data to `x_t` and
/// regress onto the conditional velocity `alpha' x0 + beta' x1`.
pub fn fm_loss<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ModelParams,
    cfg: &LossConfig,
    x0: &Arr,
    x1: &Arr,
    labels: &[usize],
    t: &[f64],
) -> Result<LossOutput<'t>, LossError> {
    let x_t = cfg.schedule.interpolate(x0, x1, t);
    let target = cfg.schedule.velocity_target(x0, x1, t);
    fm_loss_with_target(tape, bound, params, cfg, &x_t, t, labels, &target)
}

/// Consistency loss against an explicit velocity: the live model's jump
/// `f(x_t, t, s)` regresses onto the frozen model's jump from the advanced
/// point `x_t + v (l - t)` at time `l`. The target branch runs off-tape on
/// `params` (stop-gradient semantics); `bound` must be a binding of the same
/// parameter values.
pub fn scm_loss_with_target<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ModelParams,
    cfg: &LossConfig,
    x_t: &Arr,
    times: &[TimeTriple],
    labels: &[usize],
    target_v: &Arr,
) -> Result<LossOutput<'t>, LossError> {
    assert!(!times.is_empty());
    for (i, tr) in times.iter().enumerate() {
        let gap = tr.t - tr.l;
        if gap < 1e-12 {
            return Err(LossError::DegenerateGap { gap, sample: i });
        }
    }
    let (n, d) = x_t.dims();
    let t: Vec<f64> = times.iter().map(|tr| tr.t).collect();
    let l: Vec<f64> = times.iter().map(|tr| tr.l).collect();
    let s: Vec<f64> = times.iter().map(|tr| tr.s).collect();

    let x_adv = Arr::from_rows(n, d, |i, row| {
        let xs = x_t.row(i);
        let vs = target_v.row(i);
        let dt = l[i] - t[i];
        for (j, o) in row.iter_mut().enumerate() {
            *o = xs[j] + vs[j] * dt;
        }
    });
    let target = eval_solution(params, cfg.sol, &x_adv, &l, &s, labels)?;

    let pred = forward_solution(tape, bound, &params.cfg, cfg.sol, x_t, &t, &s, labels)?;
    let (mse, mse_data) = mse_rows(tape, LossKind::Consistency, pred, &target)?;
    let weights: Vec<f64> = times
        .iter()
        .zip(&mse_data)
        .map(|(tr, &m)| scm_weight(cfg, tr.t, tr.l, tr.s, m))
        .collect();
    let loss = weighted_mean(tape, mse, &weights)?;
    Ok(LossOutput {
        kind: LossKind::Consistency,
        loss,
        per_sample_mse: mse_data,
        per_sample_weight: weights,
        t,
        l,
        s,
    })
}

/// Velocity-matching loss with every detached quantity supplied explicitly:
/// the target and weights enter as constants. This is the function a
/// finite-difference probe of the training gradient must differentiate,
/// since the regular loss recomputes weights from the perturbed parameters
/// while backpropagation treats them as constants.
pub fn fm_loss_pinned<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ModelParams,
    cfg: &LossConfig,
    x_t: &Arr,
    t: &[f64],
    labels: &[usize],
    target_v: &Arr,
    weights: &[f64],
) -> Result<Value<'t>, LossError> {
    let pred = predicted_velocity(tape, bound, &params.cfg, cfg.sol, x_t, t, labels)?;
    let (mse, _) = mse_rows(tape, LossKind::VelocityMatch, pred, target_v)?;
    weighted_mean(tape, mse, weights)
}

/// Consistency loss with the frozen-branch output and weights pinned to
/// constants; counterpart of [`fm_loss_pinned`] for gradient verification.
#[allow(clippy::too_many_arguments)]
pub fn scm_loss_pinned<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ModelParams,
    cfg: &LossConfig,
    x_t: &Arr,
    t: &[f64],
    s: &[f64],
    labels: &[usize],
    target_f: &Arr,
    weights: &[f64],
) -> Result<Value<'t>, LossError> {
    let pred = forward_solution(tape, bound, &params.cfg, cfg.sol, x_t, t, s, labels)?;
    let (mse, _) = mse_rows(tape, LossKind::Consistency, pred, target_f)?;
    weighted_mean(tape, mse, weights)
}

/// Consistency loss from raw pairs, using the conditional velocity for the
/// advance.
pub fn scm_loss<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ModelParams,
    cfg: &LossConfig,
    x0: &Arr,
    x1: &Arr,
    labels: &[usize],
    times: &[TimeTriple],
) -> Result<LossOutput<'t>, LossError> {
    let t: Vec<f64> = times.iter().map(|tr| tr.t).collect();
    let x_t = cfg.schedule.interpolate(x0, x1, &t);
    let target = cfg.schedule.velocity_target(x0, x1, &t);
    scm_loss_with_target(tape, bound, params, cfg, &x_t, times, labels, &target)
}

/// Both loss terms on one tape: the first `split(B)` samples feed the
/// velocity-matching term, the rest the consistency term, and the total is
/// `lambda L_vm + (1 - lambda) L_c` with sub-batch means. An empty
/// sub-batch (lambda 0 or 1) simply drops its term. When guidance is given,
/// both sub-batches get guided targets and label dropout; the dropout draws
/// consume the rng in sub-batch order (velocity-match first).
pub struct CombinedOutput<'t> {
    pub loss: Value<'t>,
    pub fm: Option<LossOutput<'t>>,
    pub scm: Option<LossOutput<'t>>,
}

#[allow(clippy::too_many_arguments)]
pub fn combined_loss<'t, R: Rng>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ModelParams,
    cfg: &LossConfig,
    x0: &Arr,
    x1: &Arr,
    labels: &[usize],
    fm_t: &[f64],
    scm_times: &[TimeTriple],
    mut guidance: Option<(&GuidanceConfig, &mut R)>,
) -> Result<CombinedOutput<'t>, LossError> {
    let n = x0.dims().0;
    let n_fm = fm_t.len();
    assert_eq!(n_fm + scm_times.len(), n, "time samples must cover the batch");

    fn prepare<R: Rng>(
        guidance: &mut Option<(&GuidanceConfig, &mut R)>,
        params: &ModelParams,
        sol: SolutionParam,
        x_t: &Arr,
        t: &[f64],
        lab: &[usize],
        raw: &Arr,
    ) -> Result<(Arr, Vec<usize>), LossError> {
        match guidance {
            Some((g, rng)) => {
                let prep = prepare_guided_batch(g, params, sol, x_t, t, lab, raw, &mut **rng)?;
                Ok((prep.targets, prep.labels))
            }
            None => Ok((raw.clone(), lab.to_vec())),
        }
    }

    let fm = if n_fm > 0 {
        let x0s = x0.slice_rows(0, n_fm);
        let x1s = x1.slice_rows(0, n_fm);
        let x_t = cfg.schedule.interpolate(&x0s, &x1s, fm_t);
        let raw = cfg.schedule.velocity_target(&x0s, &x1s, fm_t);
        let (target, lab) =
            prepare(&mut guidance, params, cfg.sol, &x_t, fm_t, &labels[..n_fm], &raw)?;
        Some(fm_loss_with_target(tape, bound, params, cfg, &x_t, fm_t, &lab, &target)?)
    } else {
        None
    };

    let scm = if !scm_times.is_empty() {
        let x0s = x0.slice_rows(n_fm, n);
        let x1s = x1.slice_rows(n_fm, n);
        let t: Vec<f64> = scm_times.iter().map(|tr| tr.t).collect();
        let x_t = cfg.schedule.interpolate(&x0s, &x1s, &t);
        let raw = cfg.schedule.velocity_target(&x0s, &x1s, &t);
        let (target, lab) =
            prepare(&mut guidance, params, cfg.sol, &x_t, &t, &labels[n_fm..], &raw)?;
        Some(scm_loss_with_target(tape, bound, params, cfg, &x_t, scm_times, &lab, &target)?)
    } else {
        None
    };

    let loss = match (&fm, &scm) {
        (Some(f), Some(c)) => {
            let a = f.loss.scalar_mul(cfg.lambda);
            let b = c.loss.scalar_mul(1.0 - cfg.lambda);
            a.add(b)?
        }
        (Some(f), None) => f.loss,
        (None, Some(c)) => c.loss,
        (None, None) => panic!("empty batch"),
    };
    if !loss.item().is_finite() {
        return Err(LossError::NonFinite { kind: "combined", sample: 0 });
    }
    Ok(CombinedOutput { loss, fm, scm })
}
