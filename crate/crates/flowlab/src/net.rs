//! The solution-operator network: an MLP over `[x, emb(t), emb(s - t),
//! label]` with SiLU activations, plus the heads that turn its raw output
//! into a solution map or an instantaneous velocity.
//!
//! The raw network `F(x, t, s, c)` is wrapped as `f = a(t, s) x + b(t, s) F`.
//! Because `b(t, t) = 0` exactly, `f(x, t, t) = x` holds to the last bit for
//! any parameters. The final linear layer is zero-initialized so that the
//! map starts as the identity flow and both objectives are finite at step 0.
//!
//! The label table has `num_classes + 1` rows; the extra last row embeds the
//! "no label" class used for unconditional training and sampling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arr::{Arr, Shape};
use crate::flow::SolutionParam;
use crate::tape::{Tape, TapeError, Value};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("label {label} out of range 0..={max} (last id is the no-label class)")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("batch shape {got:?} does not match {expect} samples x {dim} features")]
    BadBatch { got: Shape, expect: usize, dim: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

type Result<T> = std::result::Result<T, NetError>;

// ─── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Size of each sinusoidal time embedding (even; two are concatenated,
    /// one for `t` and one for `s - t`).
    pub embed_dim: usize,
    pub label_embed_dim: usize,
    /// Highest sinusoid frequency. Frequencies are geometrically spaced from
    /// 1 to this value. Kept moderate so the network stays smooth on the
    /// `h ~ 1e-3` scale probed by the finite-difference checks.
    pub freq_base: f64,
    /// Number of real classes; the label table gets one extra row.
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            data_dim: 2,
            hidden_width: 128,
            hidden_layers: 3,
            embed_dim: 32,
            label_embed_dim: 16,
            freq_base: 100.0,
            num_classes: 1,
        }
    }
}

impl NetConfig {
    pub fn input_width(&self) -> usize {
        self.data_dim + 2 * self.embed_dim + self.label_embed_dim
    }

    /// Label id of the "no label" row.
    pub fn empty_label(&self) -> usize {
        self.num_classes
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        for &l in labels {
            if l > self.num_classes {
                return Err(NetError::LabelOutOfRange { label: l, max: self.num_classes });
            }
        }
        Ok(())
    }

    fn check_batch(&self, x: &Arr, n: usize) -> Result<()> {
        if *x.shape() != Shape::Matrix(n, self.data_dim) {
            return Err(NetError::BadBatch {
                got: x.shape().clone(),
                expect: n,
                dim: self.data_dim,
            });
        }
        Ok(())
    }
}

/// Sinusoidal features of a scalar: `embed_dim / 2` sines followed by the
/// matching cosines, at frequencies geometrically spaced in `[1, freq_base]`.
pub fn time_embedding(u: f64, embed_dim: usize, freq_base: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), embed_dim);
    let half = embed_dim / 2;
    let denom = (half - 1).max(1) as f64;
    for j in 0..half {
        let w = freq_base.powf(j as f64 / denom);
        out[j] = (u * w).sin();
        out[half + j] = (u * w).cos();
    }
}

// ─── Parameters ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub cfg: NetConfig,
    /// One weight matrix per layer, `(fan_in, fan_out)` each.
    pub weights: Vec<Arr>,
    pub biases: Vec<Arr>,
    /// `(num_classes + 1, label_embed_dim)` embedding rows.
    pub label_table: Arr,
}

impl ModelParams {
    /// Fan-in-scaled uniform init for hidden layers, zeros for the output
    /// layer. Deterministic in `seed`.
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // gen::<f64>() is uniform in [0, 1).
        let draw = |rng: &mut ChaCha8Rng, bound: f64| (rng.gen::<f64>() * 2.0 - 1.0) * bound;
        let dims = layer_dims(&cfg);
        let mut weights = Vec::with_capacity(dims.len());
        let mut biases = Vec::with_capacity(dims.len());
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let last = li == dims.len() - 1;
            let bound = 1.0 / (fan_in as f64).sqrt();
            if last {
                weights.push(Arr::zeros(Shape::Matrix(fan_in, fan_out)));
                biases.push(Arr::zeros(Shape::Vector(fan_out)));
            } else {
                let mut w = Arr::zeros(Shape::Matrix(fan_in, fan_out));
                for v in w.data_mut() {
                    *v = draw(&mut rng, bound);
                }
                let mut b = Arr::zeros(Shape::Vector(fan_out));
                for v in b.data_mut() {
                    *v = draw(&mut rng, bound);
                }
                weights.push(w);
                biases.push(b);
            }
        }
        let lbound = 1.0 / (cfg.label_embed_dim as f64).sqrt();
        let mut label_table = Arr::zeros(Shape::Matrix(cfg.num_classes + 1, cfg.label_embed_dim));
        for v in label_table.data_mut() {
            *v = draw(&mut rng, lbound);
        }
        ModelParams { cfg, weights, biases, label_table }
    }

    /// All parameter arrays in a fixed order (layer weights and biases
    /// interleaved, label table last). The checkpoint format, the optimizer
    /// state and EMA all rely on this order.
    pub fn arrays(&self) -> Vec<&Arr> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.label_table);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Arr> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.label_table);
        out
    }

    /// Names aligned with [`ModelParams::arrays`].
    pub fn array_names(cfg: &NetConfig) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..=cfg.hidden_layers {
            out.push(format!("w{i}"));
            out.push(format!("b{i}"));
        }
        out.push("labels".to_string());
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }
}

fn layer_dims(cfg: &NetConfig) -> Vec<(usize, usize)> {
    assert!(cfg.hidden_layers >= 1, "need at least one hidden layer");
    let mut dims = vec![(cfg.input_width(), cfg.hidden_width)];
    for _ in 1..cfg.hidden_layers {
        dims.push((cfg.hidden_width, cfg.hidden_width));
    }
    dims.push((cfg.hidden_width, cfg.data_dim));
    dims
}

// ─── EMA shadow weights ──────────────────────────────────────────────────

/// Exponential moving average of the live parameters; used for all sampling
/// and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParams {
    pub decay: f64,
    pub params: ModelParams,
}

impl EmaParams {
    pub fn new(live: &ModelParams, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must be in [0, 1)");
        EmaParams { decay, params: live.clone() }
    }

    /// `shadow <- d * shadow + (1 - d) * live` with the warmed-up decay
    /// `d = min(decay, (1 + step) / (10 + step))`. The ramp keeps the shadow
    /// close to the live weights while they are still in free fall and only
    /// widens the averaging window once training flattens out; `step` is the
    /// 1-based ordinal of this update, so resuming from a checkpoint at the
    /// stored step reproduces the uninterrupted sequence.
    pub fn update(&mut self, live: &ModelParams, step: usize) {
        let ramp = (1.0 + step as f64) / (10.0 + step as f64);
        let d = self.decay.min(ramp);
        for (s, l) in self.params.arrays_mut().into_iter().zip(live.arrays()) {
            s.scale(d);
            s.axpy(1.0 - d, l);
        }
    }
}

// ─── Forward passes ──────────────────────────────────────────────────────

/// Parameters bound onto a tape. `bind` records them as trainable leaves;
/// [`BoundParams::stopped`] wraps every leaf in a stop-gradient for frozen
/// target branches that share the same underlying tensors.
pub struct BoundParams<'t> {
    pub weights: Vec<Value<'t>>,
    pub biases: Vec<Value<'t>>,
    pub label_table: Value<'t>,
}

pub fn bind<'t>(tape: &'t Tape, params: &ModelParams) -> BoundParams<'t> {
    BoundParams {
        weights: params.weights.iter().map(|w| tape.input(w.clone())).collect(),
        biases: params.biases.iter().map(|b| tape.input(b.clone())).collect(),
        label_table: tape.input(params.label_table.clone()),
    }
}

impl<'t> BoundParams<'t> {
    pub fn stopped(&self) -> BoundParams<'t> {
        BoundParams {
            weights: self.weights.iter().map(|w| w.stop_gradient()).collect(),
            biases: self.biases.iter().map(|b| b.stop_gradient()).collect(),
            label_table: self.label_table.stop_gradient(),
        }
    }

    /// Leaves in [`ModelParams::arrays`] order, for gradient collection.
    pub fn values(&self) -> Vec<Value<'t>> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.label_table);
        out
    }
}

/// Raw network output `F(x, t, s, c)` for a batch, on the tape.
pub fn forward_raw<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &NetConfig,
    x: &Arr,
    t: &[f64],
    s: &[f64],
    labels: &[usize],
) -> Result<Value<'t>> {
    let xv = tape.input(x.clone());
    forward_core(tape, bound, cfg, xv, t, s, labels)
}

fn forward_core<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &NetConfig,
    xv: Value<'t>,
    t: &[f64],
    s: &[f64],
    labels: &[usize],
) -> Result<Value<'t>> {
    let n = t.len();
    assert_eq!(s.len(), n);
    assert_eq!(labels.len(), n);
    cfg.check_batch(&xv.data(), n)?;
    cfg.check_labels(labels)?;

    // Time features are plain inputs: gradients flow only through the
    // parameters, never through t or s.
    let fdim = 2 * cfg.embed_dim;
    let feats = Arr::from_rows(n, fdim, |i, row| {
        time_embedding(t[i], cfg.embed_dim, cfg.freq_base, &mut row[..cfg.embed_dim]);
        time_embedding(s[i] - t[i], cfg.embed_dim, cfg.freq_base, &mut row[cfg.embed_dim..]);
    });
    let fv = tape.input(feats);
    let lab = bound.label_table.gather_rows(labels)?;
    let mut h = tape.concat_cols(&[xv, fv, lab])?;
    let layers = bound.weights.len();
    for li in 0..layers {
        h = h.matmul(bound.weights[li])?.add(bound.biases[li].broadcast_rows(n)?)?;
        if li + 1 < layers {
            h = h.silu();
        }
    }
    Ok(h)
}

/// Solution map `f(x, t, s, c) = a(t, s) x + b(t, s) F(x, t, s, c)` with
/// per-sample times, on the tape.
pub fn forward_solution<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &NetConfig,
    sol: SolutionParam,
    x: &Arr,
    t: &[f64],
    s: &[f64],
    labels: &[usize],
) -> Result<Value<'t>> {
    let xv = tape.input(x.clone());
    let raw = forward_core(tape, bound, cfg, xv, t, s, labels)?;
    let a: Vec<f64> = t.iter().zip(s).map(|(&ti, &si)| sol.a(ti, si)).collect();
    let b: Vec<f64> = t.iter().zip(s).map(|(&ti, &si)| sol.b(ti, si)).collect();
    let ax = xv.row_scale(tape.input(Arr::vector(a)))?;
    let bf = raw.row_scale(tape.input(Arr::vector(b)))?;
    Ok(ax.add(bf)?)
}

/// Instantaneous velocity of the solution map at `s = t`:
/// `(d a/d s)(t, t) x + (d b/d s)(t, t) F(x, t, t, c)`.
pub fn predicted_velocity<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &NetConfig,
    sol: SolutionParam,
    x: &Arr,
    t: &[f64],
    labels: &[usize],
) -> Result<Value<'t>> {
    let xv = tape.input(x.clone());
    let raw = forward_core(tape, bound, cfg, xv, t, t, labels)?;
    let da: Vec<f64> = t.iter().map(|&ti| sol.da_ds_on_diag(ti)).collect();
    let db: Vec<f64> = t.iter().map(|&ti| sol.db_ds_on_diag(ti)).collect();
    let ax = xv.row_scale(tape.input(Arr::vector(da)))?;
    let bf = raw.row_scale(tape.input(Arr::vector(db)))?;
    Ok(ax.add(bf)?)
}

// ─── Detached evaluation ─────────────────────────────────────────────────
//
// These run the same forward code on a scratch tape and return plain
// arrays. Used by samplers, guidance targets and verification, where no
// gradient is wanted.

pub fn eval_raw(params: &ModelParams, x: &Arr, t: &[f64], s: &[f64], labels: &[usize]) -> Result<Arr> {
    let tape = Tape::new();
    let bound = bind(&tape, params);
    Ok(forward_raw(&tape, &bound, &params.cfg, x, t, s, labels)?.data())
}

pub fn eval_solution(
    params: &ModelParams,
    sol: SolutionParam,
    x: &Arr,
    t: &[f64],
    s: &[f64],
    labels: &[usize],
) -> Result<Arr> {
    let tape = Tape::new();
    let bound = bind(&tape, params);
    Ok(forward_solution(&tape, &bound, &params.cfg, sol, x, t, s, labels)?.data())
}

pub fn eval_velocity(
    params: &ModelParams,
    sol: SolutionParam,
    x: &Arr,
    t: &[f64],
    labels: &[usize],
) -> Result<Arr> {
    let tape = Tape::new();
    let bound = bind(&tape, params);
    Ok(predicted_velocity(&tape, &bound, &params.cfg, sol, x, t, labels)?.data())
}
