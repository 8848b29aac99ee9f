//! Numerical verification of a trained solution map: the boundary identity,
//! the velocity identity at s=t, the transport-equation residual, and the
//! global error bound against the reference integrator. Everything is
//! derivative-free on the model side: all derivative estimates are finite
//! differences (central by default, h = 1e-3), so the checks exercise the
//! same forward passes that sampling uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::arr::Arr;
use crate::data::GmmSpec;
use crate::flow::{NoisingSchedule, SolutionParam};
use crate::net::{eval_solution, eval_velocity, ModelParams, NetError};
use crate::sample::{integrate_field, seeded_noise, OdeMethod, SampleError, EDGE};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("probe step h={h} does not fit the gap t={t}, s={s}")]
    Gap { t: f64, s: f64, h: f64 },
    #[error("non-finite {what} at probe {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdScheme {
    /// One-sided probe at t-h; first-order accurate.
    Forward,
    /// Symmetric probes at t+-h; second-order accurate.
    Central,
}

// ─── Boundary identity ───────────────────────────────────────────────────

/// Max over probes of the l2 deviation of f(x, t, t) from x. The solution
/// parameterizations pin this to zero by construction, so any nonzero
/// reading beyond rounding noise means the architecture was broken.
pub fn boundary_check(
    params: &ModelParams,
    sol: SolutionParam,
    x: &Arr,
    t: &[f64],
    labels: &[usize],
) -> Result<f64, VerifyError> {
    let out = eval_solution(params, sol, x, t, t, labels)?;
    let n = x.dims().0;
    let mut worst = 0.0f64;
    for i in 0..n {
        let d = crate::arr::dist(out.row(i), x.row(i));
        if !d.is_finite() {
            return Err(VerifyError::NonFinite { what: "boundary deviation", index: i });
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

// ─── Velocity identity at s = t ──────────────────────────────────────────

/// Per-probe deviation between the one-sided difference quotient
/// `[f(x,t,t+h) - x] / h` and the model's instantaneous velocity. The
/// quotient converges at first order in h, which the acceptance suite
/// checks by halving h.
pub fn velocity_identity_errors(
    params: &ModelParams,
    sol: SolutionParam,
    x: &Arr,
    t: &[f64],
    labels: &[usize],
    h: f64,
) -> Result<Vec<f64>, VerifyError> {
    assert!(h > 0.0);
    let n = x.dims().0;
    let ahead: Vec<f64> = t.iter().map(|&ti| ti + h).collect();
    let f = eval_solution(params, sol, x, t, &ahead, labels)?;
    let v = eval_velocity(params, sol, x, t, labels)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let err: f64 = f
            .row(i)
            .iter()
            .zip(x.row(i))
            .zip(v.row(i))
            .map(|((&fj, &xj), &vj)| {
                let d = (fj - xj) / h - vj;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        if !err.is_finite() {
            return Err(VerifyError::NonFinite { what: "velocity identity error", index: i });
        }
        out.push(err);
    }
    Ok(out)
}

// ─── Transport-equation residual ─────────────────────────────────────────

/// Directional derivative of a solution map along the flow of `v_fn`,
/// estimated by finite differences: with `phi(tau) = f(x + v(x,t) tau,
/// t + tau, s)`, the true solution map has `phi` constant in `tau`, so the
/// difference quotient estimates the residual `d1 f . v + d2 f` directly.
/// `f` is any batch map `(x, t, s) -> f(x, t, s)`; one row per probe.
pub fn directional_residual<F, V>(
    mut f: F,
    mut v_fn: V,
    x: &Arr,
    t: &[f64],
    s: &[f64],
    h: f64,
    scheme: FdScheme,
) -> Result<Arr, VerifyError>
where
    F: FnMut(&Arr, &[f64], &[f64]) -> Result<Arr, VerifyError>,
    V: FnMut(&[f64], f64) -> Vec<f64>,
{
    assert!(h > 0.0);
    let (n, d) = x.dims();
    assert_eq!(t.len(), n);
    assert_eq!(s.len(), n);
    for i in 0..n {
        if !(s[i] < t[i]) || h >= t[i] - s[i] {
            return Err(VerifyError::Gap { t: t[i], s: s[i], h });
        }
    }
    let vel = Arr::from_rows(n, d, |i, row| row.copy_from_slice(&v_fn(x.row(i), t[i])));
    let shift = |dir: f64| {
        let mut pts = x.clone();
        pts.axpy(dir * h, &vel);
        let times: Vec<f64> = t.iter().map(|&ti| ti + dir * h).collect();
        (pts, times)
    };
    let res = match scheme {
        FdScheme::Forward => {
            let (back_x, back_t) = shift(-1.0);
            let mut diff = f(&back_x, &back_t, s)?;
            diff.axpy(-1.0, &f(x, t, s)?);
            diff.scale(-1.0 / h);
            diff
        }
        FdScheme::Central => {
            let (fwd_x, fwd_t) = shift(1.0);
            let (back_x, back_t) = shift(-1.0);
            let mut diff = f(&fwd_x, &fwd_t, s)?;
            diff.axpy(-1.0, &f(&back_x, &back_t, s)?);
            diff.scale(1.0 / (2.0 * h));
            diff
        }
    };
    Ok(res)
}

/// [`directional_residual`] of the model's solution map.
pub fn pde_residual<V>(
    params: &ModelParams,
    sol: SolutionParam,
    v_fn: V,
    x: &Arr,
    t: &[f64],
    s: &[f64],
    labels: &[usize],
    h: f64,
    scheme: FdScheme,
) -> Result<Arr, VerifyError>
where
    V: FnMut(&[f64], f64) -> Vec<f64>,
{
    directional_residual(
        |pts, pt, ps| Ok(eval_solution(params, sol, pts, pt, ps, labels)?),
        v_fn,
        x,
        t,
        s,
        h,
        scheme,
    )
}

fn row_norms(a: &Arr, what: &'static str) -> Result<Vec<f64>, VerifyError> {
    let n = a.dims().0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let norm = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(VerifyError::NonFinite { what, index: i });
        }
        out.push(norm);
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Residual norms over a probe grid plus the summary the rest of the
/// tooling consumes: the median tracks training progress, the max is the
/// measured residual bound.
#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub norms: Vec<f64>,
    pub median: f64,
    pub max: f64,
    pub h: f64,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
}

pub fn residual_report<V>(
    params: &ModelParams,
    sol: SolutionParam,
    v_fn: V,
    x: &Arr,
    t: &[f64],
    s: &[f64],
    labels: &[usize],
    h: f64,
) -> Result<ResidualReport, VerifyError>
where
    V: FnMut(&[f64], f64) -> Vec<f64>,
{
    let res = pde_residual(params, sol, v_fn, x, t, s, labels, h, FdScheme::Central)?;
    let norms = row_norms(&res, "residual")?;
    let max = norms.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(ResidualReport { median: median(&norms), max, norms, h, t: t.to_vec(), s: s.to_vec() })
}

/// Fixed probe grid for tracking the residual across a training run:
/// marginal samples x_t at a cycle of interior times, jumping either all
/// the way to 0 or half way. Deterministic in `seed`, so reports taken at
/// different checkpoints are comparable point for point.
pub fn residual_probe_grid(
    gmm: &GmmSpec,
    schedule: NoisingSchedule,
    count: usize,
    seed: u64,
) -> (Arr, Vec<f64>, Vec<f64>) {
    const T_LEVELS: [f64; 5] = [0.95, 0.8, 0.6, 0.4, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Vec::with_capacity(count);
    let mut s = Vec::with_capacity(count);
    let x = Arr::from_rows(count, gmm.dim, |i, row| {
        let ti = T_LEVELS[i % T_LEVELS.len()];
        t.push(ti);
        s.push(if i % 2 == 0 { 0.0 } else { 0.5 * ti });
        let (x0, _) = gmm.sample_one(&mut rng);
        let a = schedule.alpha(ti);
        let b = schedule.beta(ti);
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = a * x0[j] + b * z;
        }
    });
    (x, t, s)
}

// ─── Global error bound ──────────────────────────────────────────────────

/// Per-trajectory comparison of the one-jump model map against reference
/// integration, relative to the trajectory's own measured residual bound.
#[derive(Clone, Debug)]
pub struct GlobalErrorReport {
    /// ||f_ref(x) - f_model(x, 1, 0)|| per test point.
    pub errors: Vec<f64>,
    /// Max residual norm over the probe times of each trajectory.
    pub delta_hats: Vec<f64>,
    /// Fraction of points with error <= slack * |s - t| * delta_hat.
    pub fraction_ok: f64,
    pub slack: f64,
    pub probe_times: usize,
}

/// Checks the bound `||f - f_model|| <= slack * |s-t| * delta_hat` on the
/// full jump t=1 -> s=0, with delta_hat measured per trajectory as the max
/// residual over `probe_times` states along the reference path. The slack
/// absorbs the gap between a finite probe grid and the supremum the bound
/// actually quantifies over.
#[allow(clippy::too_many_arguments)]
pub fn global_error_check(
    params: &ModelParams,
    sol: SolutionParam,
    gmm: &GmmSpec,
    schedule: NoisingSchedule,
    label: usize,
    count: usize,
    rk4_steps: usize,
    probe_times: usize,
    slack: f64,
    h: f64,
    seed: u64,
) -> Result<GlobalErrorReport, VerifyError> {
    assert!(probe_times >= 1 && count >= 1 && rk4_steps >= probe_times);
    let restricted;
    let target = if label == gmm.num_classes() {
        gmm
    } else {
        restricted = gmm.restrict_to_class(label);
        &restricted
    };
    let field = |x: &[f64], t: f64| {
        crate::sample::gmm_velocity(target, schedule, x, t.clamp(EDGE, 1.0 - EDGE)).unwrap()
    };

    let dim = gmm.dim;
    let noise = seeded_noise(count, dim, seed);
    let seg_steps = rk4_steps.div_ceil(probe_times);
    // States along each reference trajectory at times 1 - k/P, plus the
    // endpoint, integrated segment by segment so probes sit on exact grid
    // times.
    let mut probe_states = Arr::zeros(crate::arr::Shape::Matrix(count * probe_times, dim));
    let mut probe_t = Vec::with_capacity(count * probe_times);
    let mut finals = Arr::zeros(crate::arr::Shape::Matrix(count, dim));
    for i in 0..count {
        let mut state = noise.row(i).to_vec();
        for k in 0..probe_times {
            let t_here = 1.0 - k as f64 / probe_times as f64;
            let t_next = 1.0 - (k + 1) as f64 / probe_times as f64;
            probe_states.row_mut(i * probe_times + k).copy_from_slice(&state);
            probe_t.push(t_here);
            state = integrate_field(field, &state, t_here, t_next, seg_steps, OdeMethod::Rk4)?;
        }
        finals.row_mut(i).copy_from_slice(&state);
    }

    let probe_s = vec![0.0; count * probe_times];
    let probe_labels = vec![label; count * probe_times];
    let res = pde_residual(
        params,
        sol,
        field,
        &probe_states,
        &probe_t,
        &probe_s,
        &probe_labels,
        h,
        FdScheme::Central,
    )?;
    let norms = row_norms(&res, "trajectory residual")?;

    let labels = vec![label; count];
    let model_out =
        eval_solution(params, sol, &noise, &vec![1.0; count], &vec![0.0; count], &labels)?;

    let mut errors = Vec::with_capacity(count);
    let mut delta_hats = Vec::with_capacity(count);
    let mut ok = 0usize;
    for i in 0..count {
        let err = crate::arr::dist(finals.row(i), model_out.row(i));
        if !err.is_finite() {
            return Err(VerifyError::NonFinite { what: "global error", index: i });
        }
        let delta = norms[i * probe_times..(i + 1) * probe_times]
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        // |s - t| = 1 for the full jump.
        if err <= slack * delta {
            ok += 1;
        }
        errors.push(err);
        delta_hats.push(delta);
    }
    Ok(GlobalErrorReport {
        errors,
        delta_hats,
        fraction_ok: ok as f64 / count as f64,
        slack,
        probe_times,
    })
}

// ─── ODE error in the jump target ────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct OdeErrorReport {
    /// ||d3 f(x,t,s) - v(f(x,t,s), s)|| per probe.
    pub norms: Vec<f64>,
    pub median: f64,
    pub max: f64,
    /// Max residual over the same probes; theory predicts the ODE error
    /// scales like its square root.
    pub delta_hat: f64,
    pub ratio_median_to_sqrt_delta: f64,
    pub h: f64,
}

/// How fast the jump target drifts as the target time moves: estimates
/// `d3 f` by central differences in s and compares it against the exact
/// field evaluated at the predicted point.
#[allow(clippy::too_many_arguments)]
pub fn ode_error_check(
    params: &ModelParams,
    sol: SolutionParam,
    gmm: &GmmSpec,
    schedule: NoisingSchedule,
    label: usize,
    x: &Arr,
    t: &[f64],
    s: &[f64],
    h: f64,
) -> Result<OdeErrorReport, VerifyError> {
    assert!(h > 0.0);
    let n = x.dims().0;
    let restricted;
    let target_gmm = if label == gmm.num_classes() {
        gmm
    } else {
        restricted = gmm.restrict_to_class(label);
        &restricted
    };
    let labels = vec![label; n];
    for i in 0..n {
        if !(s[i] < t[i]) || h >= t[i] - s[i] {
            return Err(VerifyError::Gap { t: t[i], s: s[i], h });
        }
    }
    let s_fwd: Vec<f64> = s.iter().map(|&v| v + h).collect();
    let s_back: Vec<f64> = s.iter().map(|&v| v - h).collect();
    let mut d3 = eval_solution(params, sol, x, t, &s_fwd, &labels)?;
    d3.axpy(-1.0, &eval_solution(params, sol, x, t, &s_back, &labels)?);
    d3.scale(1.0 / (2.0 * h));
    let at = eval_solution(params, sol, x, t, s, &labels)?;
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let v = crate::sample::gmm_velocity(
            target_gmm,
            schedule,
            at.row(i),
            s[i].clamp(EDGE, 1.0 - EDGE),
        )?;
        let err: f64 = d3
            .row(i)
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if !err.is_finite() {
            return Err(VerifyError::NonFinite { what: "ode error", index: i });
        }
        norms.push(err);
    }
    let field = |p: &[f64], tt: f64| {
        crate::sample::gmm_velocity(target_gmm, schedule, p, tt.clamp(EDGE, 1.0 - EDGE)).unwrap()
    };
    let res = pde_residual(params, sol, field, x, t, s, &labels, h, FdScheme::Central)?;
    let res_norms = row_norms(&res, "residual")?;
    let delta_hat = res_norms.iter().fold(0.0f64, |a, &b| a.max(b));
    let med = median(&norms);
    let max = norms.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(OdeErrorReport {
        norms,
        median: med,
        max,
        delta_hat,
        ratio_median_to_sqrt_delta: med / delta_hat.sqrt().max(f64::MIN_POSITIVE),
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn probe_points(n: usize, dim: usize, seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_rows(n, dim, |_, row| {
            for v in row.iter_mut() {
                *v = rng.gen::<f64>() * 6.0 - 3.0;
            }
        })
    }

    fn small_net(seed: u64) -> ModelParams {
        let cfg = NetConfig {
            data_dim: 2,
            hidden_width: 16,
            hidden_layers: 2,
            embed_dim: 8,
            label_embed_dim: 4,
            freq_base: 100.0,
            num_classes: 3,
            ..NetConfig::default()
        };
        let mut p = ModelParams::init(cfg, seed);
        // The output layer starts at zero; fill it so the map is nontrivial.
        let li = p.weights.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
        for v in p.weights[li].data_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        for v in p.biases[li].data_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        p
    }

    #[test]
    fn boundary_deviation_is_zero_for_both_parameterizations() {
        let params = small_net(3);
        let x = probe_points(500, 2, 4);
        let t: Vec<f64> = (0..500).map(|i| i as f64 / 499.0).collect();
        let labels: Vec<usize> = (0..500).map(|i| i % 4).collect();
        for sol in [SolutionParam::Euler, SolutionParam::Trigonometric] {
            let dev = boundary_check(&params, sol, &x, &t, &labels).unwrap();
            assert!(dev <= 1e-12, "{sol:?} deviated by {dev}");
        }
    }

    #[test]
    fn residual_estimator_is_exact_for_a_constant_field_solution() {
        let c = [0.7, -1.3];
        let f = |x: &Arr, t: &[f64], s: &[f64]| {
            let (n, d) = x.dims();
            Ok(Arr::from_rows(n, d, |i, row| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = x.row(i)[j] + (s[i] - t[i]) * c[j];
                }
            }))
        };
        let v = |_: &[f64], _: f64| c.to_vec();
        let x = probe_points(64, 2, 9);
        let t = vec![0.8; 64];
        let s = vec![0.1; 64];
        for scheme in [FdScheme::Forward, FdScheme::Central] {
            let res = directional_residual(f, v, &x, &t, &s, 1e-3, scheme).unwrap();
            let worst = row_norms(&res, "r").unwrap().into_iter().fold(0.0f64, f64::max);
            assert!(worst < 1e-12, "{scheme:?}: {worst}");
        }
    }

    #[test]
    fn residual_convergence_orders_match_the_schemes() {
        // Exact solution of v(x, t) = x is f(x,t,s) = x e^(s-t); the
        // estimator's error must shrink ~2x per halving for the forward
        // scheme and ~4x for the central one.
        let f = |x: &Arr, t: &[f64], s: &[f64]| {
            let (n, d) = x.dims();
            Ok(Arr::from_rows(n, d, |i, row| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = x.row(i)[j] * (s[i] - t[i]).exp();
                }
            }))
        };
        let v = |x: &[f64], _: f64| x.to_vec();
        let x = probe_points(32, 2, 10);
        let t = vec![0.9; 32];
        let s = vec![0.2; 32];
        let err = |h: f64, scheme: FdScheme| {
            let res = directional_residual(f, v, &x, &t, &s, h, scheme).unwrap();
            row_norms(&res, "r").unwrap().into_iter().fold(0.0f64, f64::max)
        };
        let fwd = err(1e-3, FdScheme::Forward) / err(5e-4, FdScheme::Forward);
        let cen = err(1e-3, FdScheme::Central) / err(5e-4, FdScheme::Central);
        assert!((1.8..2.2).contains(&fwd), "forward ratio {fwd}");
        assert!((3.6..4.4).contains(&cen), "central ratio {cen}");
    }

    #[test]
    fn identity_map_residual_equals_the_field_norm() {
        // A freshly initialized network has a zero output layer, so the
        // solution map is the identity and the residual against a constant
        // field c is exactly c.
        let cfg = NetConfig { data_dim: 2, hidden_width: 8, num_classes: 1, ..NetConfig::default() };
        let params = ModelParams::init(cfg, 0);
        let c = [2.0, -1.0];
        let x = probe_points(16, 2, 11);
        let t = vec![0.7; 16];
        let s = vec![0.0; 16];
        let labels = vec![0usize; 16];
        let res = pde_residual(
            &params,
            SolutionParam::Euler,
            |_: &[f64], _: f64| c.to_vec(),
            &x,
            &t,
            &s,
            &labels,
            1e-3,
            FdScheme::Central,
        )
        .unwrap();
        let want = (c[0] * c[0] + c[1] * c[1]).sqrt();
        for norm in row_norms(&res, "r").unwrap() {
            assert!((norm - want).abs() < 1e-9, "{norm} vs {want}");
        }
    }

    #[test]
    fn too_large_h_is_rejected() {
        let params = small_net(5);
        let x = probe_points(4, 2, 12);
        let err = pde_residual(
            &params,
            SolutionParam::Euler,
            |_: &[f64], _: f64| vec![0.0, 0.0],
            &x,
            &[0.5; 4],
            &[0.45; 4],
            &[0usize; 4],
            0.1,
            FdScheme::Central,
        )
        .unwrap_err();
        assert!(matches!(err, VerifyError::Gap { .. }));
    }

    #[test]
    fn median_handles_even_and_odd_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn probe_grid_is_reproducible_and_in_range() {
        let gmm = GmmSpec::ring8();
        let (x1, t1, s1) = residual_probe_grid(&gmm, NoisingSchedule::Linear, 40, 7);
        let (x2, t2, s2) = residual_probe_grid(&gmm, NoisingSchedule::Linear, 40, 7);
        assert_eq!(x1, x2);
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
        for (ti, si) in t1.iter().zip(&s1) {
            assert!(*si < *ti && *ti < 1.0 && *si >= 0.0);
            assert!(ti - si > 1e-2, "grid must leave room for the probe step");
        }
        let (x3, ..) = residual_probe_grid(&gmm, NoisingSchedule::Linear, 40, 8);
        assert_ne!(x1, x3);
    }

    #[test]
    fn untrained_identity_map_still_satisfies_the_global_bound() {
        // The bound is scale-aware: a useless model has a large measured
        // residual, so the inequality holds anyway.
        let cfg = NetConfig { data_dim: 2, hidden_width: 8, num_classes: 1, ..NetConfig::default() };
        let params = ModelParams::init(cfg, 0);
        let gmm = GmmSpec::gauss1();
        let report = global_error_check(
            &params,
            SolutionParam::Euler,
            &gmm,
            NoisingSchedule::Linear,
            1,
            64,
            208,
            16,
            3.0,
            1e-3,
            21,
        )
        .unwrap();
        assert_eq!(report.fraction_ok, 1.0);
        assert!(report.delta_hats.iter().all(|&d| d > 1e-3), "identity map must show residual");
    }

    #[test]
    fn ode_error_of_identity_map_is_the_field_norm_at_the_probe() {
        let cfg = NetConfig { data_dim: 2, hidden_width: 8, num_classes: 1, ..NetConfig::default() };
        let params = ModelParams::init(cfg, 0);
        let gmm = GmmSpec::gauss1();
        let x = probe_points(32, 2, 13);
        let t = vec![0.9; 32];
        let s = vec![0.3; 32];
        let report = ode_error_check(
            &params,
            SolutionParam::Euler,
            &gmm,
            NoisingSchedule::Linear,
            1,
            &x,
            &t,
            &s,
            1e-3,
        )
        .unwrap();
        // d3 of the identity map is 0, so the error is ||v(x, s)||.
        for (i, norm) in report.norms.iter().enumerate() {
            let v = crate::sample::gmm_velocity(&gmm, NoisingSchedule::Linear, x.row(i), 0.3)
                .unwrap();
            let want = (v[0] * v[0] + v[1] * v[1]).sqrt();
            assert!((norm - want).abs() < 1e-6, "{norm} vs {want}");
        }
        assert!(report.median > 0.0 && report.delta_hat > 0.0);
        assert!(report.ratio_median_to_sqrt_delta.is_finite());
    }

    #[test]
    fn velocity_identity_error_shrinks_first_order() {
        let params = small_net(6);
        let x = probe_points(200, 2, 14);
        let t: Vec<f64> = (0..200).map(|i| 0.1 + 0.8 * (i as f64 / 199.0)).collect();
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let sol = SolutionParam::Trigonometric;
        let coarse = velocity_identity_errors(&params, sol, &x, &t, &labels, 1e-3).unwrap();
        let fine = velocity_identity_errors(&params, sol, &x, &t, &labels, 5e-4).unwrap();
        let mc: f64 = coarse.iter().sum::<f64>() / 200.0;
        let mf: f64 = fine.iter().sum::<f64>() / 200.0;
        assert!(mc > 0.0, "nontrivial map must show discretization error");
        let ratio = mf / mc;
        assert!((0.4..0.6).contains(&ratio), "ratio {ratio}");
    }
}
