//! Low-rank slider adapters on a toy linear denoiser.
//!
//! An adapter holds `down` (`r x d_in`) and `up` (`d_out x r`); applying it at
//! scale `s` turns weights `W` into `W + s * up * down`. Several adapters
//! combine by summing their scaled deltas.
//!
//! The toy denoiser predicts `eps(x, c) = W x + U e_c`. Training pushes the
//! adapted prediction for concept `c` towards `eps(x, c) + eta * eps(x, c_plus)`
//! under a mean squared error, with the adapter at a fixed training scale.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    /// `r x d_in`
    pub down: DMatrix<f64>,
    /// `d_out x r`
    pub up: DMatrix<f64>,
}

impl LowRankAdapter {
    pub fn new(down: DMatrix<f64>, up: DMatrix<f64>) -> Result<Self> {
        if down.nrows() == 0 || down.nrows() != up.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "down is {}x{}, up is {}x{}",
                down.nrows(),
                down.ncols(),
                up.nrows(),
                up.ncols()
            )));
        }
        Ok(LowRankAdapter { down, up })
    }

    /// `up = 0`, `down` uniform in `[-init_scale, init_scale]`: the initial
    /// delta is exactly zero.
    pub fn init(
        rank: usize,
        d_in: usize,
        d_out: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let down = DMatrix::from_fn(rank, d_in, |_, _| {
            rng.random_range(-init_scale..=init_scale)
        });
        LowRankAdapter {
            down,
            up: DMatrix::zeros(d_out, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.down.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.up.nrows()
    }

    pub fn delta(&self) -> DMatrix<f64> {
        &self.up * &self.down
    }
}

/// `W + sum_i s_i * up_i * down_i`.
pub fn apply_sliders(
    w: &DMatrix<f64>,
    adapters: &[(&LowRankAdapter, f64)],
) -> Result<DMatrix<f64>> {
    let mut out = w.clone();
    for (a, s) in adapters {
        if a.d_out() != w.nrows() || a.d_in() != w.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "adapter delta {}x{} vs weights {}x{}",
                a.d_out(),
                a.d_in(),
                w.nrows(),
                w.ncols()
            )));
        }
        out += a.delta() * *s;
    }
    Ok(out)
}

/// Whether the adapter is on at denoising step `step_index` (0 = noisiest)
/// when it covers the last `active_fraction` of `total_steps`.
pub fn timestep_gate(step_index: usize, total_steps: usize, active_fraction: f64) -> Result<bool> {
    if step_index >= total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step_index} of {total_steps}"
        )));
    }
    if !(0.0..=1.0).contains(&active_fraction) {
        return Err(Error::OutOfRange(format!(
            "active fraction {active_fraction}"
        )));
    }
    let first_active = ((1.0 - active_fraction) * total_steps as f64 - 1e-9)
        .ceil()
        .max(0.0) as usize;
    Ok(step_index >= first_active)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    /// `d_out x d_in`
    pub w: DMatrix<f64>,
    /// `d_out x n_concepts`
    pub concepts: DMatrix<f64>,
}

impl ToyDenoiser {
    pub fn new(w: DMatrix<f64>, concepts: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != concepts.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "weights have {} rows, concept table {}",
                w.nrows(),
                concepts.nrows()
            )));
        }
        Ok(ToyDenoiser { w, concepts })
    }

    pub fn random(d_in: usize, d_out: usize, n_concepts: usize, rng: &mut impl Rng) -> Self {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let w = DMatrix::from_fn(d_out, d_in, |_, _| normal());
        let concepts = DMatrix::from_fn(d_out, n_concepts, |_, _| normal());
        ToyDenoiser { w, concepts }
    }

    pub fn d_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn predict(&self, x: &DVector<f64>, concept: usize) -> DVector<f64> {
        self.predict_with(&self.w, x, concept)
    }

    /// Prediction with substituted weights (the timestep is ignored by the
    /// linear model).
    pub fn predict_with(&self, w: &DMatrix<f64>, x: &DVector<f64>, concept: usize) -> DVector<f64> {
        w * x + self.concepts.column(concept)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliderSample {
    pub x: DVector<f64>,
    pub concept: usize,
    pub concept_plus: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliderTrainConfig {
    /// Weight of the target concept.
    pub eta: f64,
    pub train_scale: f64,
    pub rank: usize,
    /// First trial step of the backtracking line search.
    pub learning_rate: f64,
    pub iterations: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SliderTrainConfig {
    fn default() -> Self {
        SliderTrainConfig {
            eta: 1.0,
            train_scale: 1.0,
            rank: 1,
            learning_rate: 1.0,
            iterations: 20_000,
            tolerance: 1e-10,
            init_scale: 0.5,
            seed: 0,
        }
    }
}

impl SliderTrainConfig {
    fn validate(&self, model: &ToyDenoiser) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        if self.rank == 0 || self.rank > model.d_in().min(model.d_out()) {
            return Err(Error::InvalidArgument(format!(
                "rank {} outside [1, {}]",
                self.rank,
                model.d_in().min(model.d_out())
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta {} must be non-negative",
                self.eta
            )));
        }
        if self.train_scale == 0.0 {
            return Err(Error::InvalidArgument(
                "train_scale must be non-zero".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian inputs for one `(concept, concept_plus)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub samples: usize,
    pub concept: usize,
    pub concept_plus: usize,
    pub std: f64,
    pub seed: u64,
}

impl SampleSpec {
    pub fn draw(&self, d_in: usize) -> Vec<SliderSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.samples)
            .map(|_| SliderSample {
                x: DVector::from_fn(d_in, |_, _| self.std * rng.sample::<f64, _>(StandardNormal)),
                concept: self.concept,
                concept_plus: self.concept_plus,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliderLoss {
    pub loss: f64,
    pub grad_down: DMatrix<f64>,
    pub grad_up: DMatrix<f64>,
}

impl SliderLoss {
    pub fn grad_norm(&self) -> f64 {
        (self.grad_down.norm_squared() + self.grad_up.norm_squared()).sqrt()
    }
}

/// Mean over the batch of
/// `|eps_adapted(x, c) - (eps(x, c) + eta * eps(x, c_plus))|^2`
/// and its gradient with respect to `down` and `up`.
pub fn slider_loss(
    model: &ToyDenoiser,
    adapter: &LowRankAdapter,
    cfg: &SliderTrainConfig,
    batch: &[SliderSample],
) -> Result<SliderLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let adapted = apply_sliders(&model.w, &[(adapter, cfg.train_scale)])?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    // d loss / d delta
    let mut g = DMatrix::zeros(model.d_out(), model.d_in());
    for sample in batch {
        if sample.x.len() != model.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} inputs, model expects {}",
                sample.x.len(),
                model.d_in()
            )));
        }
        let pred = model.predict_with(&adapted, &sample.x, sample.concept);
        let target = model.predict(&sample.x, sample.concept)
            + model.predict(&sample.x, sample.concept_plus) * cfg.eta;
        let r = pred - target;
        loss += r.norm_squared();
        g += &r * sample.x.transpose() * (2.0 * cfg.train_scale);
    }
    loss /= n;
    g /= n;
    Ok(SliderLoss {
        loss,
        grad_down: adapter.up.transpose() * &g,
        grad_up: &g * adapter.down.transpose(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub adapter: LowRankAdapter,
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Gradient descent on [`slider_loss`] over samples drawn from `data`.
///
/// Each step starts from the Barzilai-Borwein length and backtracks until the
/// loss drops below the worst of the last few losses by the Armijo margin.
pub fn train_toy_slider(
    model: &ToyDenoiser,
    cfg: &SliderTrainConfig,
    data: &SampleSpec,
) -> Result<TrainOutcome> {
    let batch = data.draw(model.d_in());
    train_on_batch(model, cfg, &batch)
}

const NONMONOTONE_WINDOW: usize = 10;

pub fn train_on_batch(
    model: &ToyDenoiser,
    cfg: &SliderTrainConfig,
    batch: &[SliderSample],
) -> Result<TrainOutcome> {
    cfg.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapter = LowRankAdapter::init(
        cfg.rank,
        model.d_in(),
        model.d_out(),
        cfg.init_scale,
        &mut rng,
    );
    let mut current = slider_loss(model, &adapter, cfg, batch)?;
    let mut losses = vec![current.loss];
    let mut step = cfg.learning_rate;
    for it in 0..cfg.iterations {
        let gn2 = current.grad_norm().powi(2);
        if gn2.sqrt() < cfg.tolerance {
            return Ok(TrainOutcome {
                adapter,
                losses,
                iterations: it,
                grad_norm: gn2.sqrt(),
            });
        }
        // backtrack from the trial step until sufficient decrease
        loop {
            let trial = LowRankAdapter {
                down: &adapter.down - &current.grad_down * step,
                up: &adapter.up - &current.grad_up * step,
            };
            let next = slider_loss(model, &trial, cfg, batch)?;
            let wanted = 0.5 * step * gn2;
            // non-monotone reference: worst of the recent losses
            let reference = losses[losses.len().saturating_sub(NONMONOTONE_WINDOW)..]
                .iter()
                .copied()
                .fold(current.loss, f64::max);
            // below the loss's rounding noise, fall back to gradient decrease
            let accept = if wanted > 1e-13 * current.loss.abs().max(1e-300) {
                next.loss <= reference - wanted
            } else {
                next.grad_norm() < gn2.sqrt()
                    && next.loss <= current.loss + 1e-13 * current.loss.abs()
            };
            if accept || step < 1e-18 {
                // Barzilai-Borwein length for the next trial step
                let s_dot_y = step
                    * ((&current.grad_down - &next.grad_down).dot(&current.grad_down)
                        + (&current.grad_up - &next.grad_up).dot(&current.grad_up));
                let s_dot_s = step * step * gn2;
                step = if s_dot_y > 0.0 {
                    (s_dot_s / s_dot_y).clamp(1e-12, 1e12)
                } else {
                    step * 2.0
                };
                adapter = trial;
                current = next;
                break;
            }
            step *= 0.5;
        }
        losses.push(current.loss);
    }
    let grad_norm = current.grad_norm();
    if grad_norm < cfg.tolerance {
        return Ok(TrainOutcome {
            adapter,
            losses,
            iterations: cfg.iterations,
            grad_norm,
        });
    }
    Err(Error::NonConvergence {
        iterations: cfg.iterations,
        loss: current.loss,
        grad_norm,
    })
}

/// Unconstrained least-squares optimum of the slider objective:
/// `train_scale * delta * x_i ~= eta * (W x_i + U e_{c_plus,i})`.
pub fn least_squares_delta(
    model: &ToyDenoiser,
    cfg: &SliderTrainConfig,
    batch: &[SliderSample],
) -> Result<DMatrix<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d_in = model.d_in();
    let mut xxt = DMatrix::zeros(d_in, d_in);
    let mut txt = DMatrix::zeros(model.d_out(), d_in);
    for s in batch {
        let target = model.predict(&s.x, s.concept_plus) * cfg.eta;
        xxt += &s.x * s.x.transpose();
        txt += target * s.x.transpose();
    }
    let chol = xxt.cholesky().ok_or_else(|| {
        Error::InvalidArgument("sample inputs do not span the input space".into())
    })?;
    // delta * xxt = txt / s  <=>  xxt * delta^T = txt^T / s
    let delta_t = chol.solve(&txt.transpose());
    Ok(delta_t.transpose() / cfg.train_scale)
}

#[derive(Clone, Debug, Serialize)]
pub struct SliderDemoTrace {
    pub config: SliderTrainConfig,
    pub data: SampleSpec,
    pub d_in: usize,
    pub d_out: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
    /// Loss every `loss_stride` iterations, then the final loss.
    pub loss_curve: Vec<f64>,
    pub loss_stride: usize,
    pub final_delta: Vec<Vec<f64>>,
    pub closed_form_delta: Vec<Vec<f64>>,
    /// Largest absolute entry of `final_delta - closed_form_delta`.
    pub closed_form_residual: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Trains a full-rank slider on a random toy model and records the run.
pub fn slider_demo(
    d_in: usize,
    d_out: usize,
    cfg: SliderTrainConfig,
    data: SampleSpec,
) -> Result<SliderDemoTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n_concepts = data.concept.max(data.concept_plus) + 1;
    let model = ToyDenoiser::random(d_in, d_out, n_concepts, &mut rng);
    let batch = data.draw(d_in);
    let out = train_on_batch(&model, &cfg, &batch)?;
    let closed = least_squares_delta(&model, &cfg, &batch)?;
    let delta = out.adapter.delta();
    let residual = (&delta - &closed).amax();
    let stride = (out.losses.len() / 50).max(1);
    let mut curve: Vec<f64> = out.losses.iter().step_by(stride).copied().collect();
    if let Some(last) = out.losses.last() {
        curve.push(*last);
    }
    Ok(SliderDemoTrace {
        d_in,
        d_out,
        iterations: out.iterations,
        final_loss: *out.losses.last().unwrap_or(&f64::NAN),
        grad_norm: out.grad_norm,
        loss_curve: curve,
        loss_stride: stride,
        final_delta: rows(&delta),
        closed_form_delta: rows(&closed),
        closed_form_residual: residual,
        config: cfg,
        data,
    })
}
