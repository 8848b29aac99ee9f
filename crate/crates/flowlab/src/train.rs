//! The training loop: batches from the mixture, time draws, the combined
//! objective, Adam, EMA shadow weights, periodic metrics and checkpoints.
//!
//! Determinism contract: every random draw the loop consumes comes from one
//! of six named ChaCha streams (data, noise, fm_t, scm_t, scm_s, drop), all
//! derived from the config seed and all captured in checkpoints, so a
//! resumed run replays the exact draw sequence of an uninterrupted one.
//! Evaluation draws use throwaway generators keyed by (seed, step) instead
//! of stream state, which keeps observation strictly outside the training
//! state: logging more or less often cannot change what is learned.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::arr::Arr;
use crate::checkpoint::{Checkpoint, CheckpointError, StreamState};
use crate::config::TrainConfig;
use crate::data::{energy_distance, GmmSpec};
use crate::flow::{sample_time_triples, JumpSchedule, LogitNormal};
use crate::loss::{combined_loss, LossConfig, LossError};
use crate::net::{bind, EmaParams, ModelParams};
use crate::sample::{generate, gmm_velocity, SampleError, EDGE};
use crate::tape::{Tape, TapeError};
use crate::verify::{residual_probe_grid, residual_report, VerifyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step}: {detail}")]
    Aborted { step: usize, detail: String },
    #[error("checkpoint is missing stream `{name}`")]
    MissingStream { name: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ─── Random streams ──────────────────────────────────────────────────────

const STREAM_NAMES: [&str; 6] = ["data", "noise", "fm_t", "scm_t", "scm_s", "drop"];

/// One generator per consumption site. Stream 0 of the seed is reserved for
/// parameter initialization, so the loop's streams start at 1.
struct Streams {
    data: ChaCha8Rng,
    noise: ChaCha8Rng,
    fm_t: ChaCha8Rng,
    scm_t: ChaCha8Rng,
    scm_s: ChaCha8Rng,
    drop: ChaCha8Rng,
}

impl Streams {
    fn fresh(seed: u64) -> Streams {
        let mk = |idx: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx);
            rng
        };
        Streams { data: mk(1), noise: mk(2), fm_t: mk(3), scm_t: mk(4), scm_s: mk(5), drop: mk(6) }
    }

    fn capture(&self) -> Vec<StreamState> {
        [&self.data, &self.noise, &self.fm_t, &self.scm_t, &self.scm_s, &self.drop]
            .iter()
            .zip(STREAM_NAMES)
            .map(|(rng, name)| StreamState::capture(name, rng))
            .collect()
    }

    fn restore(states: &[StreamState]) -> Result<Streams, TrainError> {
        let get = |name: &str| {
            states
                .iter()
                .find(|s| s.name == name)
                .map(StreamState::restore)
                .ok_or_else(|| TrainError::MissingStream { name: name.to_string() })
        };
        Ok(Streams {
            data: get("data")?,
            noise: get("noise")?,
            fm_t: get("fm_t")?,
            scm_t: get("scm_t")?,
            scm_s: get("scm_s")?,
            drop: get("drop")?,
        })
    }
}

// Salts decorrelating evaluation generators from the training streams; the
// step index is spread with a multiplicative mix before xoring so nearby
// steps get unrelated seeds.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const EVAL_NOISE_SALT: u64 = 0x6576_6e;
const EVAL_DATA_SALT: u64 = 0x6576_64;
const PROBE_SALT: u64 = 0x7072_62;

fn eval_seed(seed: u64, salt: u64, step: usize) -> u64 {
    seed ^ salt ^ (step as u64).wrapping_mul(GOLDEN)
}

// ─── Trainer state ───────────────────────────────────────────────────────

pub struct Trainer {
    pub config: TrainConfig,
    pub live: ModelParams,
    pub ema: EmaParams,
    pub step: usize,
    adam_m: Vec<Arr>,
    adam_v: Vec<Arr>,
    streams: Streams,
    gmm: GmmSpec,
    loss_cfg: LossConfig,
    jump: JumpSchedule,
    fm_sampler: LogitNormal,
    t_sampler: LogitNormal,
    s_sampler: LogitNormal,
    probe: (Arr, Vec<f64>, Vec<f64>),
}

/// Detached per-step readings for the metrics log. The loss values carry
/// the adaptive weights (which pin them near 1 until the errors approach
/// the weight floor); the raw mean squared errors are the better progress
/// signal.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub fm: Option<f64>,
    pub scm: Option<f64>,
    pub total: f64,
    pub fm_mse: Option<f64>,
    pub scm_mse: Option<f64>,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Trainer, TrainError> {
        let live = ModelParams::init(config.net_config(), config.seed);
        let ema = EmaParams::new(&live, config.ema_decay);
        let adam_m: Vec<Arr> = live.arrays().iter().map(|a| Arr::zeros(*a.shape())).collect();
        let adam_v = adam_m.clone();
        let streams = Streams::fresh(config.seed);
        Ok(Trainer::assemble(config.clone(), live, ema, adam_m, adam_v, streams, 0))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Trainer, TrainError> {
        let streams = Streams::restore(&ck.streams)?;
        Ok(Trainer::assemble(ck.config, ck.live, ck.ema, ck.adam_m, ck.adam_v, streams, ck.step))
    }

    fn assemble(
        config: TrainConfig,
        live: ModelParams,
        ema: EmaParams,
        adam_m: Vec<Arr>,
        adam_v: Vec<Arr>,
        streams: Streams,
        step: usize,
    ) -> Trainer {
        let gmm = config.gmm();
        let probe = residual_probe_grid(
            &gmm,
            config.schedule,
            256,
            eval_seed(config.seed, PROBE_SALT, 0),
        );
        Trainer {
            loss_cfg: config.loss_config(),
            jump: config.jump_schedule(),
            fm_sampler: config.fm_sampler(),
            t_sampler: config.t_sampler(),
            s_sampler: config.s_sampler(),
            gmm,
            probe,
            config,
            live,
            ema,
            step,
            adam_m,
            adam_v,
            streams,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.config,
            self.step,
            self.streams.capture(),
            self.live.clone(),
            self.ema.clone(),
            self.adam_m.clone(),
            self.adam_v.clone(),
        )
    }

    /// One optimizer step. Draw order is fixed: batch, noise, velocity-loss
    /// times, consistency triples, guidance dropout.
    pub fn train_step(&mut self) -> Result<StepStats, TrainError> {
        let cfg = &self.config;
        let n = cfg.batch_size;
        let step = self.step + 1;

        let (x0, labels) = self.gmm.sample(n, &mut self.streams.data);
        let x1 = Arr::from_rows(n, self.gmm.dim, |_, row| {
            for v in row.iter_mut() {
                *v = self.streams.noise.sample(StandardNormal);
            }
        });
        let n_fm = self.loss_cfg.split(n);
        let fm_t = self.fm_sampler.draw_many(n_fm, &mut self.streams.fm_t);
        let scm_times = sample_time_triples(
            &self.t_sampler,
            &self.s_sampler,
            &self.jump,
            step - 1,
            cfg.steps.max(1),
            n - n_fm,
            &mut self.streams.scm_t,
            &mut self.streams.scm_s,
        );

        let guidance_cfg = cfg.guidance();
        let tape = Tape::new();
        let bound = bind(&tape, &self.live);
        let out = combined_loss(
            &tape,
            &bound,
            &self.live,
            &self.loss_cfg,
            &x0,
            &x1,
            &labels,
            &fm_t,
            &scm_times,
            Some((&guidance_cfg, &mut self.streams.drop)),
        )
        .map_err(|e| diagnose(e, step, n_fm, &x0, &x1))?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let stats = StepStats {
            fm: out.fm.as_ref().map(|o| o.loss.item()),
            scm: out.scm.as_ref().map(|o| o.loss.item()),
            total: out.loss.item(),
            fm_mse: out.fm.as_ref().map(|o| mean(&o.per_sample_mse)),
            scm_mse: out.scm.as_ref().map(|o| mean(&o.per_sample_mse)),
        };
        let grads = out.loss.backward()?;

        // Adam with bias correction; moment slots follow arrays() order.
        let t = step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        let leaves: Vec<Arr> = {
            let mut v = Vec::with_capacity(self.adam_m.len());
            for (w, b) in bound.weights.iter().zip(&bound.biases) {
                v.push(grads.wrt_or_zero(*w));
                v.push(grads.wrt_or_zero(*b));
            }
            v.push(grads.wrt_or_zero(bound.label_table));
            v
        };
        for (((param, g), m), vv) in self
            .live
            .arrays_mut()
            .into_iter()
            .zip(&leaves)
            .zip(self.adam_m.iter_mut())
            .zip(self.adam_v.iter_mut())
        {
            let (gd, md, vd, pd) = (g.data(), m.data_mut(), vv.data_mut(), param.data_mut());
            for j in 0..gd.len() {
                md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gd[j];
                vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gd[j] * gd[j];
                pd[j] -= cfg.lr * (md[j] / c1) / ((vd[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
        if !self.live.arrays().iter().all(|a| a.is_finite()) {
            return Err(TrainError::Aborted {
                step,
                detail: "parameters left the finite range after the update".to_string(),
            });
        }
        self.ema.update(&self.live, step);
        self.step = step;
        Ok(stats)
    }

    /// Residual median and energy distance of the EMA model, both against
    /// throwaway generators keyed by (seed, step).
    pub fn eval_metrics(&self) -> Result<(f64, f64), TrainError> {
        let cfg = &self.config;
        let ema = &self.ema.params;
        let gmm = &self.gmm;
        let schedule = cfg.schedule;
        let (px, pt, ps) = &self.probe;
        let phi = gmm.num_classes();
        let field =
            |x: &[f64], t: f64| gmm_velocity(gmm, schedule, x, t.clamp(EDGE, 1.0 - EDGE)).unwrap();
        let report = residual_report(
            ema,
            cfg.parameterization,
            field,
            px,
            pt,
            ps,
            &vec![phi; px.dims().0],
            1e-3,
        )?;

        let labels = vec![phi; cfg.eval_count];
        let samples = generate(
            ema,
            cfg.parameterization,
            schedule,
            &[1.0, 0.0],
            &labels,
            eval_seed(cfg.seed, EVAL_NOISE_SALT, self.step),
        )?;
        let mut data_rng =
            ChaCha8Rng::seed_from_u64(eval_seed(cfg.seed, EVAL_DATA_SALT, self.step));
        let (fresh, _) = gmm.sample(cfg.eval_count, &mut data_rng);
        Ok((report.median, energy_distance(&samples, &fresh)))
    }

    /// Full run to `config.steps` with logging and periodic checkpoints;
    /// returns (and writes) the final checkpoint.
    pub fn run(&mut self) -> Result<Checkpoint, TrainError> {
        let cfg = self.config.clone();
        fs::create_dir_all(&cfg.checkpoint_dir)?;
        if let Some(parent) = Path::new(&cfg.log_path).parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut log = MetricsLog::open(Path::new(&cfg.log_path))?;
        let start = Instant::now();

        if self.step == 0 {
            let (resid, ed) = self.eval_metrics()?;
            log.row(0, None, None, None, Some(resid), Some(ed), start.elapsed().as_secs_f64())?;
        }
        while self.step < cfg.steps {
            let stats = self.train_step()?;
            let step = self.step;
            let last = step == cfg.steps;
            let evaled = if step % cfg.eval_every == 0 || last {
                Some(self.eval_metrics()?)
            } else {
                None
            };
            if step % cfg.log_every == 0 || last || evaled.is_some() {
                log.row(
                    step,
                    stats.fm,
                    stats.scm,
                    Some(stats.total),
                    evaled.map(|e| e.0),
                    evaled.map(|e| e.1),
                    start.elapsed().as_secs_f64(),
                )?;
            }
            if step % cfg.checkpoint_every == 0 {
                crate::checkpoint::save(
                    &step_checkpoint_path(&cfg.checkpoint_dir, step),
                    &self.checkpoint(),
                )?;
            }
        }
        let final_ck = self.checkpoint();
        crate::checkpoint::save(&final_checkpoint_path(&cfg.checkpoint_dir), &final_ck)?;
        Ok(final_ck)
    }
}

/// Attach the offending rows to a loss failure. Indices inside the
/// consistency sub-batch count from the split point.
fn diagnose(e: LossError, step: usize, n_fm: usize, x0: &Arr, x1: &Arr) -> TrainError {
    let dump = |sample: usize, offset: bool| {
        let i = (if offset { n_fm + sample } else { sample }).min(x0.dims().0 - 1);
        format!("batch row {i}: x0={:?} x1={:?}", x0.row(i), x1.row(i))
    };
    match &e {
        LossError::NonFinite { kind, sample } => TrainError::Aborted {
            step,
            detail: format!("non-finite {kind} loss; {}", dump(*sample, *kind == "consistency")),
        },
        LossError::DegenerateGap { gap, sample } => TrainError::Aborted {
            step,
            detail: format!("degenerate consistency gap {gap:e}; {}", dump(*sample, true)),
        },
        _ => TrainError::Loss(e),
    }
}

pub fn train(config: &TrainConfig) -> Result<Checkpoint, TrainError> {
    Trainer::new(config)?.run()
}

pub fn resume(ck: Checkpoint) -> Result<Checkpoint, TrainError> {
    Trainer::from_checkpoint(ck)?.run()
}

pub fn step_checkpoint_path(dir: &str, step: usize) -> PathBuf {
    Path::new(dir).join(format!("ck_{step:07}.flowck"))
}

pub fn final_checkpoint_path(dir: &str) -> PathBuf {
    Path::new(dir).join("final.flowck")
}

// ─── Metrics log ─────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str =
    "step,fm_loss,scm_loss,total,residual_median,energy_distance,wall_clock_s";

struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<MetricsLog, std::io::Error> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut log = MetricsLog { file };
        if file_len(&log.file)? == 0 {
            log.file.write_all(METRICS_HEADER.as_bytes())?;
            log.file.write_all(b"\n")?;
        }
        Ok(log)
    }

    /// One CSV row in a single write call; empty cells for readings this
    /// step did not take.
    fn row(
        &mut self,
        step: usize,
        fm: Option<f64>,
        scm: Option<f64>,
        total: Option<f64>,
        residual: Option<f64>,
        ed: Option<f64>,
        wall: f64,
    ) -> Result<(), std::io::Error> {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let line = format!(
            "{step},{},{},{},{},{},{wall:.3}\n",
            cell(fm),
            cell(scm),
            cell(total),
            cell(residual),
            cell(ed),
        );
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

fn file_len(f: &fs::File) -> Result<u64, std::io::Error> {
    Ok(f.metadata()?.len())
}

/// The wall-clock column is the one legitimately run-dependent field;
/// determinism comparisons are made on everything else.
pub fn strip_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}
