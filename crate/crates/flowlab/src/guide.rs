//! Classifier-free guidance folded into the training targets.
//!
//! Instead of mixing two velocity fields at sampling time, the per-sample
//! regression target is replaced by a guided mixture during training, so the
//! one-step sampler stays a single forward pass. The mixture uses the live
//! model's own (detached) conditional and unconditional velocity estimates;
//! no gradient flows through them.

use rand::Rng;

use crate::arr::Arr;
use crate::flow::SolutionParam;
use crate::net::{eval_velocity, ModelParams, NetError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Guidance strength `w`. 1 disables amplification.
    pub strength: f64,
    /// Mixing weight `m` between the explicit guided target and the model's
    /// own guided estimate. 1 uses the explicit target only.
    pub mix: f64,
    /// Probability of replacing a sample's label with the no-label class.
    pub drop_rate: f64,
    /// Time above which the strength decays toward 1 (high-noise region).
    pub t_decay: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { strength: 2.0, mix: 0.25, drop_rate: 0.1, t_decay: 0.8 }
    }
}

impl GuidanceConfig {
    /// True when the target mixture reduces to the raw conditional velocity
    /// for every sample, making the model estimates unnecessary.
    pub fn is_plain(&self) -> bool {
        self.strength == 1.0 && self.mix == 1.0
    }

    /// Time-dependent strength: `w` up to `t_decay`, then a smooth decay to
    /// 1 as `t` approaches 1, where the conditional and unconditional
    /// marginals coincide and amplification only adds variance.
    pub fn effective_strength(&self, t: f64) -> f64 {
        if t <= self.t_decay {
            return self.strength;
        }
        let tp = ((1.0 - t) / (1.0 - self.t_decay)).min(1.0 - 1e-6);
        let g = 1.0 - (-(1.0 / 40.0) * tp / (1.0 - tp)).exp();
        1.0 + (self.strength - 1.0) * g
    }
}

/// One coordinate of the guided mixture: the amplified conditional target
/// blended with the model's own guided estimate.
fn mix_one(m: f64, w: f64, cond: f64, uncond: f64, guided: f64) -> f64 {
    m * (w * cond + (1.0 - w) * uncond) + (1.0 - m) * guided
}

/// Per-sample guided velocity target:
/// `m (w_eff c + (1 - w_eff) v_uncond) + (1 - m) v_guided`,
/// where `c` is the raw conditional velocity and `v_uncond` / `v_guided` are
/// the model's detached velocity estimates with the no-label and true labels.
pub fn velocity_mix(
    cfg: &GuidanceConfig,
    params: &ModelParams,
    sol: SolutionParam,
    x_t: &Arr,
    t: &[f64],
    labels: &[usize],
    cond_target: &Arr,
) -> Result<Arr, NetError> {
    let n = t.len();
    let phi = vec![params.cfg.empty_label(); n];
    let v_uncond = eval_velocity(params, sol, x_t, t, &phi)?;
    let v_guided = eval_velocity(params, sol, x_t, t, labels)?;
    let (_, d) = x_t.dims();
    Ok(Arr::from_rows(n, d, |i, row| {
        let w = cfg.effective_strength(t[i]);
        for (j, o) in row.iter_mut().enumerate() {
            *o = mix_one(cfg.mix, w, cond_target.row(i)[j], v_uncond.row(i)[j], v_guided.row(i)[j]);
        }
    }))
}

/// A batch's training targets and labels after guidance and label dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTargets {
    pub targets: Arr,
    pub labels: Vec<usize>,
}

/// Applies the guided mixture and per-sample label dropout. Dropped samples
/// keep the raw conditional velocity as target and train the no-label class.
/// The dropout draws happen first, one per sample, so toggling guidance
/// parameters never shifts the dropout stream.
pub fn prepare_guided_batch<R: Rng>(
    cfg: &GuidanceConfig,
    params: &ModelParams,
    sol: SolutionParam,
    x_t: &Arr,
    t: &[f64],
    labels: &[usize],
    cond_target: &Arr,
    drop_rng: &mut R,
) -> Result<PreparedTargets, NetError> {
    let n = t.len();
    let drops: Vec<bool> = (0..n).map(|_| drop_rng.gen::<f64>() < cfg.drop_rate).collect();
    let mut targets = if cfg.is_plain() {
        cond_target.clone()
    } else {
        velocity_mix(cfg, params, sol, x_t, t, labels, cond_target)?
    };
    let mut out_labels = labels.to_vec();
    for (i, &dropped) in drops.iter().enumerate() {
        if dropped {
            targets.row_mut(i).copy_from_slice(cond_target.row(i));
            out_labels[i] = params.cfg.empty_label();
        }
    }
    Ok(PreparedTargets { targets, labels: out_labels })
}
