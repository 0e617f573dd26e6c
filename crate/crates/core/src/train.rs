//! Next-step training: sliding windows, MSE, a hand-written reverse pass
//! through the FNO, AdamW and a cosine schedule with linear warmup.

use std::io::Write;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{rfft_channel, Field};
use crate::fno::{synthesize, Dense, FnoModel, FnoParams, ModeSet, Trace};

/// Time-ordered solution frames plus optional static auxiliary channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Field>,
    /// Glued to every model input (velocity, reaction, ...).
    pub aux: Option<Field>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(frames: Vec<Field>, aux: Option<Field>, dt: f64) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::InvalidInput("empty trajectory".into()))?;
        if frames.iter().any(|f| f.grid() != first.grid() || f.channels() != first.channels()) {
            return Err(Error::ShapeMismatch("trajectory frames differ in grid or channels".into()));
        }
        if let Some(a) = &aux {
            if a.grid() != first.grid() {
                return Err(Error::ShapeMismatch("auxiliary channels on a different grid".into()));
            }
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { frames, aux, dt })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn state_channels(&self) -> usize {
        self.frames[0].channels()
    }

    pub fn aux_channels(&self) -> usize {
        self.aux.as_ref().map_or(0, Field::channels)
    }

    /// Model input built from `frames` (oldest first) with the auxiliary channels appended.
    pub fn stack_input(&self, frames: &[Field]) -> Result<Field> {
        let mut parts: Vec<&Field> = frames.iter().collect();
        if let Some(a) = &self.aux {
            parts.push(a);
        }
        Field::concat(&parts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub input: Field,
    pub target: Field,
}

/// All stride-1 windows of `window` frames with the following frame as target.
pub fn windows(traj: &Trajectory, window: usize) -> Result<Vec<WindowPair>> {
    if window == 0 || traj.len() <= window {
        return Err(Error::InvalidInput(format!(
            "trajectory of length {} too short for window {window}",
            traj.len()
        )));
    }
    (0..traj.len() - window)
        .map(|i| {
            Ok(WindowPair {
                input: traj.stack_input(&traj.frames[i..i + window])?,
                target: traj.frames[i + window].clone(),
            })
        })
        .collect()
}

/// Mean over channels and points of the squared residual.
pub fn mse_loss(pred: &Field, target: &Field) -> Result<f64> {
    check_same_shape(pred, target)?;
    let n = pred.values().len() as f64;
    Ok(pred.values().iter().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub(crate) fn check_same_shape(a: &Field, b: &Field) -> Result<()> {
    if a.grid() != b.grid() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "fields differ: {:?}x{} vs {:?}x{}",
            a.grid().shape(),
            a.channels(),
            b.grid().shape(),
            b.channels()
        )));
    }
    Ok(())
}

fn dense_backward(layer: &Dense, x: &[f64], dy: &[f64], n: usize, grad: &mut Dense, dx: Option<&mut [f64]>) {
    for o in 0..layer.rows {
        let dyo = &dy[o * n..(o + 1) * n];
        grad.bias[o] += dyo.iter().sum::<f64>();
        for i in 0..layer.cols {
            grad.weight[o * layer.cols + i] += dyo.iter().zip(&x[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..layer.rows {
            let dyo = &dy[o * n..(o + 1) * n];
            for i in 0..layer.cols {
                let w = layer.weight[o * layer.cols + i];
                for (d, g) in dx[i * n..(i + 1) * n].iter_mut().zip(dyo) {
                    *d += w * g;
                }
            }
        }
    }
}

/// Reverse pass: parameter gradient given `∂L/∂output` on the working grid.
pub(crate) fn backward(model: &FnoModel, trace: &Trace, d_out: &[f64]) -> FnoParams {
    let cfg = model.config();
    let act = cfg.activation;
    let p = model.params();
    let grid = &trace.grid;
    let n = grid.len();
    let d = cfg.hidden_channels;
    let modes = ModeSet::new(grid, cfg.modes).expect("mode set validated in forward");
    let mut g = FnoParams::zeros(cfg, model.ndim());

    let proj_hidden: Vec<f64> = trace.proj_pre.iter().map(|&u| act.apply(u)).collect();
    let mut d_hidden = vec![0.0; proj_hidden.len()];
    dense_backward(&p.projection.second, &proj_hidden, d_out, n, &mut g.projection.second, Some(&mut d_hidden));
    for (dh, &u) in d_hidden.iter_mut().zip(&trace.proj_pre) {
        *dh *= act.derivative(u);
    }
    let mut dv = vec![0.0; d * n];
    dense_backward(&p.projection.first, &trace.last, &d_hidden, n, &mut g.projection.first, Some(&mut dv));

    let mut spec = vec![Complex64::new(0.0, 0.0); grid.spectral_len()];
    for (l, bt) in trace.blocks.iter().enumerate().rev() {
        let block = &p.blocks[l];
        let gb = &mut g.blocks[l];
        let dz: Vec<f64> = dv.iter().zip(&bt.pre).map(|(g, &z)| g * act.derivative(z)).collect();
        let mut dv_in = vec![0.0; d * n];
        for i in 0..d {
            let dzi = &dz[i * n..(i + 1) * n];
            gb.bias[i] += dzi.iter().sum::<f64>();
            for j in 0..d {
                gb.weight[i * d + j] += dzi.iter().zip(&bt.input[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                let w = block.weight[i * d + j];
                for (o, a) in dv_in[j * n..(j + 1) * n].iter_mut().zip(dzi) {
                    *o += w * a;
                }
            }
        }
        // Spectral path: G = scale·rfft(dz) on retained bins.
        let mut g_modes = vec![Complex64::new(0.0, 0.0); modes.len() * d];
        for i in 0..d {
            rfft_channel(grid, &dz[i * n..(i + 1) * n], &mut spec);
            for (m, &b) in modes.bins.iter().enumerate() {
                g_modes[m * d + i] = spec[b] * modes.scale[m];
            }
        }
        let mut gh = vec![Complex64::new(0.0, 0.0); modes.len() * d];
        for m in 0..modes.len() {
            for i in 0..d {
                let gmi = g_modes[m * d + i];
                for j in 0..d {
                    let k = (m * d + i) * d + j;
                    gb.spectral[k] += gmi * bt.h_hat[m * d + j].conj();
                    gh[m * d + j] += block.spectral[k].conj() * gmi;
                }
            }
        }
        // ∂L/∂v(x) = Σ_m Re(gh_m e^{iωx}); synthesize divides by scale.
        for m in 0..modes.len() {
            for j in 0..d {
                gh[m * d + j] /= modes.scale[m];
            }
        }
        let mut dv_spec = vec![0.0; d * n];
        synthesize(grid, &modes, &gh, d, &mut dv_spec);
        for (a, b) in dv_in.iter_mut().zip(&dv_spec) {
            *a += b;
        }
        dv = dv_in;
    }

    let lift_hidden: Vec<f64> = trace.lift_pre.iter().map(|&u| act.apply(u)).collect();
    let mut d_lift = vec![0.0; lift_hidden.len()];
    dense_backward(&p.lifting.second, &lift_hidden, &dv, n, &mut g.lifting.second, Some(&mut d_lift));
    for (dh, &u) in d_lift.iter_mut().zip(&trace.lift_pre) {
        *dh *= act.derivative(u);
    }
    dense_backward(&p.lifting.first, &trace.input, &d_lift, n, &mut g.lifting.first, None);
    g
}

/// Loss and gradient of one pair; the residual only counts on the target grid.
fn pair_loss_grad(model: &FnoModel, pair: &WindowPair) -> Result<(f64, Vec<f64>)> {
    let trace = model.trace(&pair.input)?;
    let pred = model.crop_output(&trace.grid, trace.output.clone(), pair.target.grid())?;
    let loss = mse_loss(&pred, &pair.target)?;
    let count = pred.values().len() as f64;
    let resid = Field::new(
        pair.target.grid().clone(),
        pair.target.channels(),
        pred.values().iter().zip(pair.target.values()).map(|(a, b)| 2.0 * (a - b) / count).collect(),
    )?;
    let d_out = resid.pad_zeros(model.config().padding)?;
    let g = backward(model, &trace, d_out.values());
    Ok((loss, g.flatten()))
}

/// Mean batch loss and its exact gradient (flattened in `FnoParams` order).
pub fn grad(model: &FnoModel, batch: &[WindowPair]) -> Result<(f64, FnoParams)> {
    let (loss, flat) = grad_flat(model, batch)?;
    let mut g = FnoParams::zeros(model.config(), model.ndim());
    g.assign_flat(&flat)?;
    Ok((loss, g))
}

fn grad_flat(model: &FnoModel, batch: &[WindowPair]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let parts: Vec<(f64, Vec<f64>)> =
        batch.par_iter().map(|p| pair_loss_grad(model, p)).collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = vec![0.0; model.n_params()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total.iter_mut().for_each(|t| *t *= scale);
    Ok((loss * scale, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 5,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::InvalidConfig("warmup_fraction must lie in (0, 1)".into()));
        }
        if self.peak_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rate and weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps.max(1));
        Self { peak, warmup_steps, total_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps) + self.weight_decay * *p;
            *p -= lr * update;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains on `groups` (one group of window pairs per trajectory). Every epoch
/// draws one pair per group, shuffles, and steps through minibatches.
pub fn fit(model: &FnoModel, groups: &[Vec<WindowPair>], cfg: &TrainConfig) -> Result<(FnoModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("training set has an empty trajectory".into()));
    }
    let steps_per_epoch = groups.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.peak_lr, cfg.warmup_fraction, cfg.epochs * steps_per_epoch);
    let mut model = model.clone();
    let mut flat = model.params().flatten();
    let mut opt = AdamW::new(flat.len(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = crate::rng::stream(cfg.seed, epoch as u64);
        let mut picks: Vec<(usize, usize)> = groups.iter().enumerate().map(|(g, v)| (g, rng.random_range(0..v.len()))).collect();
        picks.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in picks.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<WindowPair> = chunk.iter().map(|&(g, i)| groups[g][i].clone()).collect();
            let (loss, g) = grad_flat(&model, &batch)?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch, step: b, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            lr = schedule.lr(step);
            opt.step(&mut flat, &g, lr);
            model.params_mut().assign_flat(&flat)?;
            step += 1;
        }
        history.push(EpochRecord { epoch, loss: epoch_loss / picks.len() as f64, lr });
    }
    Ok((model, history))
}

pub fn write_loss_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,loss,lr")?;
    for r in history {
        writeln!(w, "{},{:.17e},{:.17e}", r.epoch, r.loss, r.lr)?;
    }
    Ok(())
}
