//! Fourier neural operator: pointwise lifting MLP, a stack of Fourier blocks
//! `v ↦ σ(F⁻¹[R · F[v]] + W v + b)`, and a pointwise projection MLP.
//!
//! Spectral weights act on the `modes` lowest non-negative frequencies per
//! dim (the tensor-product corner in 2D). The activation is applied after
//! every block, including the last one.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{irfft_channel, rfft_channel, Field, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact erf-based GELU.
    Gelu,
    Relu,
    /// Identity; used to check the linear structure of the architecture.
    Linear,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_channels: usize,
    pub n_blocks: usize,
    /// Retained modes per spatial dim, DC included.
    pub modes: usize,
    pub activation: Activation,
    pub lifting_width: usize,
    pub projection_width: usize,
    /// Constant-zero points appended per dim before the forward pass.
    #[serde(default)]
    pub padding: usize,
}

impl FnoConfig {
    /// Lifting and projection widths default to twice the hidden width.
    pub fn new(in_channels: usize, out_channels: usize, hidden: usize, n_blocks: usize, modes: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            hidden_channels: hidden,
            n_blocks,
            modes,
            activation: Activation::Gelu,
            lifting_width: 2 * hidden,
            projection_width: 2 * hidden,
            padding: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("hidden_channels", self.hidden_channels),
            ("n_blocks", self.n_blocks),
            ("modes", self.modes),
            ("lifting_width", self.lifting_width),
            ("projection_width", self.projection_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Number of retained spectral modes on a grid of `ndim` dims.
    pub fn n_modes(&self, ndim: usize) -> usize {
        self.modes.pow(ndim as u32)
    }

    /// Dimension of the last-block parameter vector `(Re R, Im R, W)`.
    pub fn theta_last_len(&self, ndim: usize) -> usize {
        let d = self.hidden_channels;
        2 * self.n_modes(ndim) * d * d + d * d
    }
}

/// Retained spectral bins of a grid for a given mode count.
#[derive(Debug, Clone)]
pub(crate) struct ModeSet {
    pub bins: Vec<usize>,
    /// `w_b / ∏N` per retained bin.
    pub scale: Vec<f64>,
}

impl ModeSet {
    pub fn new(grid: &Grid, modes: usize) -> Result<Self> {
        let bins: Vec<usize> = match grid.ndim() {
            1 => {
                let nb = grid.shape()[0] / 2 + 1;
                if modes > nb {
                    return Err(Error::ShapeMismatch(format!(
                        "{modes} modes exceed the {nb} real-FFT bins of the grid"
                    )));
                }
                (0..modes).collect()
            }
            _ => {
                let (n1, h2) = (grid.shape()[0], grid.shape()[1] / 2 + 1);
                if modes > n1 / 2 || modes > h2 {
                    return Err(Error::ShapeMismatch(format!(
                        "{modes} modes per dim do not fit grid {:?}",
                        grid.shape()
                    )));
                }
                (0..modes).flat_map(|k1| (0..modes).map(move |k2| k1 * h2 + k2)).collect()
            }
        };
        let inv_n = 1.0 / grid.len() as f64;
        let scale = bins.iter().map(|&b| grid.bin_weight(b) * inv_n).collect();
        Ok(Self { bins, scale })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }
}

/// Affine map applied independently at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weight: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    /// `out[o·n + p] = b_o + Σ_i W_oi · x[i·n + p]` on channel-outer arrays.
    pub(crate) fn apply(&self, x: &[f64], n: usize, out: &mut [f64]) {
        for o in 0..self.rows {
            let dst = &mut out[o * n..(o + 1) * n];
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.cols {
                let w = self.weight[o * self.cols + i];
                if w != 0.0 {
                    for (d, s) in dst.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                        *d += w * s;
                    }
                }
            }
        }
    }
}

/// `second(σ(first(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseMlp {
    pub first: Dense,
    pub second: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierBlock {
    /// `R[m][i][j]`: mode-major, output channel `i`, input channel `j`.
    pub spectral: Vec<Complex64>,
    /// `W[i][j]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All trainable tensors; doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoParams {
    pub lifting: PointwiseMlp,
    pub blocks: Vec<FourierBlock>,
    pub projection: PointwiseMlp,
}

impl FnoParams {
    /// All-zero tensors shaped for `config` on an `ndim`-dimensional grid.
    pub fn zeros(config: &FnoConfig, ndim: usize) -> Self {
        let d = config.hidden_channels;
        let m = config.n_modes(ndim);
        Self {
            lifting: PointwiseMlp {
                first: Dense::zeros(config.lifting_width, config.in_channels),
                second: Dense::zeros(d, config.lifting_width),
            },
            blocks: (0..config.n_blocks)
                .map(|_| FourierBlock {
                    spectral: vec![Complex64::new(0.0, 0.0); m * d * d],
                    weight: vec![0.0; d * d],
                    bias: vec![0.0; d],
                })
                .collect(),
            projection: PointwiseMlp {
                first: Dense::zeros(config.projection_width, d),
                second: Dense::zeros(config.out_channels, config.projection_width),
            },
        }
    }

    /// Named tensors in the canonical flattening order. Complex spectral
    /// weights appear as separate real and imaginary tensors.
    pub fn named_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mlp = |out: &mut Vec<(String, Vec<f64>)>, name: &str, m: &PointwiseMlp| {
            out.push((format!("{name}.0.weight"), m.first.weight.clone()));
            out.push((format!("{name}.0.bias"), m.first.bias.clone()));
            out.push((format!("{name}.1.weight"), m.second.weight.clone()));
            out.push((format!("{name}.1.bias"), m.second.bias.clone()));
        };
        mlp(&mut out, "lifting", &self.lifting);
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.spectral.re"), b.spectral.iter().map(|c| c.re).collect()));
            out.push((format!("blocks.{l}.spectral.im"), b.spectral.iter().map(|c| c.im).collect()));
            out.push((format!("blocks.{l}.weight"), b.weight.clone()));
            out.push((format!("blocks.{l}.bias"), b.bias.clone()));
        }
        mlp(&mut out, "projection", &self.projection);
        out
    }

    pub fn len(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors().into_iter().flat_map(|(_, t)| t).collect()
    }

    /// Overwrites every tensor from a flat vector in `flatten` order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        let mlp = |m: &mut PointwiseMlp, take: &mut dyn FnMut(&mut [f64])| {
            take(&mut m.first.weight);
            take(&mut m.first.bias);
            take(&mut m.second.weight);
            take(&mut m.second.bias);
        };
        mlp(&mut self.lifting, &mut take);
        for b in &mut self.blocks {
            let mut re: Vec<f64> = b.spectral.iter().map(|c| c.re).collect();
            let mut im: Vec<f64> = b.spectral.iter().map(|c| c.im).collect();
            take(&mut re);
            take(&mut im);
            for (c, (r, i)) in b.spectral.iter_mut().zip(re.into_iter().zip(im)) {
                *c = Complex64::new(r, i);
            }
            take(&mut b.weight);
            take(&mut b.bias);
        }
        mlp(&mut self.projection, &mut take);
        Ok(())
    }
}

/// Activations of one forward pass, on the (possibly padded) working grid.
#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    pub input: Vec<f64>,
    pub h_hat: Vec<Complex64>,
    pub pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub grid: Grid,
    pub input: Vec<f64>,
    pub lift_pre: Vec<f64>,
    pub blocks: Vec<BlockTrace>,
    pub last: Vec<f64>,
    pub proj_pre: Vec<f64>,
    pub output: Vec<f64>,
}

/// Hidden activations exposed for the last-block linearization.
#[derive(Debug, Clone)]
pub struct HiddenState {
    /// Working grid (padded when the model pads its inputs).
    pub grid: Grid,
    /// `v^(1) … v^(L−1)`: the inputs of each Fourier block.
    pub block_inputs: Vec<Field>,
    /// Retained coefficients of `rfft(v^(L−1))`, mode-major `[m][j]`.
    pub last_hat: Vec<Complex64>,
    /// Pre-activation `z^(L−1)` of the last block, bias included.
    pub last_preactivation: Field,
}

impl HiddenState {
    pub fn last_input(&self) -> &Field {
        self.block_inputs.last().expect("at least one block")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnoModel {
    config: FnoConfig,
    params: FnoParams,
    ndim: usize,
}

impl FnoModel {
    pub fn from_params(config: FnoConfig, ndim: usize, params: FnoParams) -> Result<Self> {
        config.validate()?;
        if params.len() != FnoParams::zeros(&config, ndim).len() {
            return Err(Error::ShapeMismatch("parameter shapes do not match config".into()));
        }
        if params.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { config, params, ndim })
    }

    pub fn zeros(config: FnoConfig, ndim: usize) -> Result<Self> {
        config.validate()?;
        let params = FnoParams::zeros(&config, ndim);
        Ok(Self { config, params, ndim })
    }

    /// Glorot-uniform dense weights, `N(0, 1/d²)` real and imaginary spectral
    /// entries, zero biases; deterministic in `seed`.
    pub fn init(config: FnoConfig, ndim: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config, ndim)?;
        let mut rng = crate::rng::stream(seed, 0);
        let glorot = |rng: &mut rand_chacha::ChaCha8Rng, w: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
            w.iter_mut().for_each(|v| *v = dist.sample(rng));
        };
        let d = model.config.hidden_channels;
        let spectral = Normal::new(0.0, 1.0 / d as f64).expect("positive std");
        let p = &mut model.params;
        let mlp = &mut p.lifting;
        glorot(&mut rng, &mut mlp.first.weight, mlp.first.cols, mlp.first.rows);
        glorot(&mut rng, &mut mlp.second.weight, mlp.second.cols, mlp.second.rows);
        for b in &mut p.blocks {
            for c in &mut b.spectral {
                *c = Complex64::new(spectral.sample(&mut rng), spectral.sample(&mut rng));
            }
            glorot(&mut rng, &mut b.weight, d, d);
        }
        let mlp = &mut p.projection;
        glorot(&mut rng, &mut mlp.first.weight, mlp.first.cols, mlp.first.rows);
        glorot(&mut rng, &mut mlp.second.weight, mlp.second.cols, mlp.second.rows);
        Ok(model)
    }

    pub fn config(&self) -> &FnoConfig {
        &self.config
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn params(&self) -> &FnoParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut FnoParams {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Last-block parameters flattened as `(Re R row-major, Im R, W)`.
    pub fn theta_last(&self) -> Vec<f64> {
        let b = self.params.blocks.last().expect("at least one block");
        let mut out = Vec::with_capacity(self.config.theta_last_len(self.ndim));
        out.extend(b.spectral.iter().map(|c| c.re));
        out.extend(b.spectral.iter().map(|c| c.im));
        out.extend_from_slice(&b.weight);
        out
    }

    pub fn set_theta_last(&mut self, theta: &[f64]) -> Result<()> {
        let p = self.config.theta_last_len(self.ndim);
        if theta.len() != p {
            return Err(Error::ShapeMismatch(format!("theta has {} entries, expected {p}", theta.len())));
        }
        let b = self.params.blocks.last_mut().expect("at least one block");
        let s = b.spectral.len();
        for (k, c) in b.spectral.iter_mut().enumerate() {
            *c = Complex64::new(theta[k], theta[s + k]);
        }
        b.weight.copy_from_slice(&theta[2 * s..]);
        Ok(())
    }

    /// Working grid after padding.
    pub fn working_grid(&self, grid: &Grid) -> Result<Grid> {
        grid.padded(self.config.padding)
    }

    fn check_input(&self, input: &Field) -> Result<()> {
        if input.channels() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                input.channels()
            )));
        }
        if input.grid().ndim() != self.ndim {
            return Err(Error::ShapeMismatch(format!(
                "model built for {}-d grids, input is {}-d",
                self.ndim,
                input.grid().ndim()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, input: &Field) -> Result<Trace> {
        self.check_input(input)?;
        let padded = input.pad_zeros(self.config.padding)?;
        let grid = padded.grid().clone();
        let modes = ModeSet::new(&grid, self.config.modes)?;
        let n = grid.len();
        let act = self.config.activation;
        let p = &self.params;

        let x = padded.into_values();
        let mut lift_pre = vec![0.0; p.lifting.first.rows * n];
        p.lifting.first.apply(&x, n, &mut lift_pre);
        let hidden: Vec<f64> = lift_pre.iter().map(|&u| act.apply(u)).collect();
        let mut v = vec![0.0; self.config.hidden_channels * n];
        p.lifting.second.apply(&hidden, n, &mut v);

        let mut blocks = Vec::with_capacity(p.blocks.len());
        for block in &p.blocks {
            let (h_hat, pre) = block_preactivation(block, &grid, &modes, &v, &block.spectral, &block.weight);
            let next = pre.iter().map(|&z| act.apply(z)).collect();
            blocks.push(BlockTrace { input: std::mem::replace(&mut v, next), h_hat, pre });
        }

        let mut proj_pre = vec![0.0; p.projection.first.rows * n];
        p.projection.first.apply(&v, n, &mut proj_pre);
        let hidden: Vec<f64> = proj_pre.iter().map(|&u| act.apply(u)).collect();
        let mut output = vec![0.0; self.config.out_channels * n];
        p.projection.second.apply(&hidden, n, &mut output);

        Ok(Trace { grid, input: x, lift_pre, blocks, last: v, proj_pre, output })
    }

    pub(crate) fn crop_output(&self, trace_grid: &Grid, values: Vec<f64>, target: &Grid) -> Result<Field> {
        let out = Field::new(trace_grid.clone(), self.config.out_channels, values)?;
        out.crop_to(target)
    }

    pub fn forward(&self, input: &Field) -> Result<Field> {
        let trace = self.trace(input)?;
        self.crop_output(&trace.grid, trace.output, input.grid())
    }

    pub fn forward_with_hidden(&self, input: &Field) -> Result<(Field, HiddenState)> {
        let trace = self.trace(input)?;
        let d = self.config.hidden_channels;
        let grid = trace.grid.clone();
        let block_inputs = trace
            .blocks
            .iter()
            .map(|b| Field::new(grid.clone(), d, b.input.clone()))
            .collect::<Result<Vec<_>>>()?;
        let last = trace.blocks.last().expect("at least one block");
        let hidden = HiddenState {
            grid: grid.clone(),
            block_inputs,
            last_hat: last.h_hat.clone(),
            last_preactivation: Field::new(grid.clone(), d, last.pre.clone())?,
        };
        let out = self.crop_output(&grid, trace.output, input.grid())?;
        Ok((out, hidden))
    }

    /// Output of the last block and projection from a cached hidden state,
    /// with the last-block parameters replaced by `theta` (cropped to `target`).
    pub fn forward_last_block(&self, hidden: &HiddenState, theta: &[f64], target: &Grid) -> Result<Field> {
        let p = self.config.theta_last_len(self.ndim);
        if theta.len() != p {
            return Err(Error::ShapeMismatch(format!("theta has {} entries, expected {p}", theta.len())));
        }
        let grid = &hidden.grid;
        let modes = ModeSet::new(grid, self.config.modes)?;
        let n = grid.len();
        let s = modes.len() * self.config.hidden_channels * self.config.hidden_channels;
        let spectral: Vec<Complex64> = (0..s).map(|k| Complex64::new(theta[k], theta[s + k])).collect();
        let block = self.params.blocks.last().expect("at least one block");
        let mut pre = block_preactivation_from_hat(
            block,
            grid,
            &modes,
            hidden.last_input().values(),
            &hidden.last_hat,
            &spectral,
            &theta[2 * s..],
        );
        let act = self.config.activation;
        pre.iter_mut().for_each(|z| *z = act.apply(*z));
        let out = self.project(&pre, n);
        self.crop_output(grid, out, target)
    }

    /// Projection MLP on channel-outer values at `n` points.
    pub(crate) fn project(&self, v: &[f64], n: usize) -> Vec<f64> {
        let proj = &self.params.projection;
        let act = self.config.activation;
        let mut pre = vec![0.0; proj.first.rows * n];
        proj.first.apply(v, n, &mut pre);
        pre.iter_mut().for_each(|u| *u = act.apply(*u));
        let mut out = vec![0.0; self.config.out_channels * n];
        proj.second.apply(&pre, n, &mut out);
        out
    }

    /// `Q̃(z) = Q(σ(z))` and its Jacobian `∂Q̃/∂z` (row-major `out × d`) at one point.
    pub fn projected_with_jacobian(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let act = self.config.activation;
        let proj = &self.params.projection;
        let d = self.config.hidden_channels;
        let w = proj.first.rows;
        let o = proj.second.rows;
        let s: Vec<f64> = z.iter().map(|&x| act.apply(x)).collect();
        let ds: Vec<f64> = z.iter().map(|&x| act.derivative(x)).collect();
        let mut u = proj.first.bias.clone();
        for (a, ua) in u.iter_mut().enumerate() {
            for j in 0..d {
                *ua += proj.first.weight[a * d + j] * s[j];
            }
        }
        let hu: Vec<f64> = u.iter().map(|&x| act.apply(x)).collect();
        let du: Vec<f64> = u.iter().map(|&x| act.derivative(x)).collect();
        let mut out = proj.second.bias.clone();
        let mut jac = vec![0.0; o * d];
        for c in 0..o {
            for a in 0..w {
                let w2 = proj.second.weight[c * w + a];
                out[c] += w2 * hu[a];
                let g = w2 * du[a];
                if g != 0.0 {
                    for j in 0..d {
                        jac[c * d + j] += g * proj.first.weight[a * d + j] * ds[j];
                    }
                }
            }
        }
        (out, jac)
    }
}

/// Last-block pre-activation `z = F⁻¹[R·ĥ] + W v + b`, returning `ĥ` as well.
pub(crate) fn block_preactivation(
    block: &FourierBlock,
    grid: &Grid,
    modes: &ModeSet,
    v: &[f64],
    spectral: &[Complex64],
    weight: &[f64],
) -> (Vec<Complex64>, Vec<f64>) {
    let h_hat = truncated_rfft(grid, modes, v);
    let pre = block_preactivation_from_hat(block, grid, modes, v, &h_hat, spectral, weight);
    (h_hat, pre)
}

/// `rfft` of each channel of `v`, restricted to the retained modes, `[m][j]`.
pub(crate) fn truncated_rfft(grid: &Grid, modes: &ModeSet, v: &[f64]) -> Vec<Complex64> {
    let n = grid.len();
    let d = v.len() / n;
    let mut spec = vec![Complex64::new(0.0, 0.0); grid.spectral_len()];
    let mut h_hat = vec![Complex64::new(0.0, 0.0); modes.len() * d];
    for j in 0..d {
        rfft_channel(grid, &v[j * n..(j + 1) * n], &mut spec);
        for (m, &b) in modes.bins.iter().enumerate() {
            h_hat[m * d + j] = spec[b];
        }
    }
    h_hat
}

/// `F⁻¹` of per-mode spectra `[m][i]` onto `d` channels of the grid.
pub(crate) fn synthesize(grid: &Grid, modes: &ModeSet, coeffs: &[Complex64], d: usize, out: &mut [f64]) {
    let n = grid.len();
    let mut spec = vec![Complex64::new(0.0, 0.0); grid.spectral_len()];
    for i in 0..d {
        for (m, &b) in modes.bins.iter().enumerate() {
            spec[b] = coeffs[m * d + i];
        }
        irfft_channel(grid, &spec, &mut out[i * n..(i + 1) * n]);
    }
}

pub(crate) fn block_preactivation_from_hat(
    block: &FourierBlock,
    grid: &Grid,
    modes: &ModeSet,
    v: &[f64],
    h_hat: &[Complex64],
    spectral: &[Complex64],
    weight: &[f64],
) -> Vec<f64> {
    let n = grid.len();
    let d = block.bias.len();
    let mut mixed = vec![Complex64::new(0.0, 0.0); modes.len() * d];
    for m in 0..modes.len() {
        for i in 0..d {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..d {
                acc += spectral[(m * d + i) * d + j] * h_hat[m * d + j];
            }
            mixed[m * d + i] = acc;
        }
    }
    let mut pre = vec![0.0; d * n];
    synthesize(grid, modes, &mixed, d, &mut pre);
    for i in 0..d {
        let dst = &mut pre[i * n..(i + 1) * n];
        let b = block.bias[i];
        dst.iter_mut().for_each(|z| *z += b);
        for j in 0..d {
            let w = weight[i * d + j];
            if w != 0.0 {
                for (z, x) in dst.iter_mut().zip(&v[j * n..(j + 1) * n]) {
                    *z += w * x;
                }
            }
        }
    }
    pre
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Offset in f64 elements into `params.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: FnoConfig,
    pub ndim: usize,
    pub seed: u64,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub const MODEL_MANIFEST: &str = "manifest.json";
pub const MODEL_PARAMS: &str = "params.bin";

/// Writes `manifest.json` and a concatenated raw f64 LE `params.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &FnoModel, seed: u64, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut w = BufWriter::new(fs::File::create(dir.join(MODEL_PARAMS))?);
    let mut offset = 0;
    for (name, t) in model.params.named_tensors() {
        for v in &t {
            w.write_all(&v.to_le_bytes())?;
        }
        tensors.push(TensorEntry { name, offset, len: t.len() });
        offset += t.len();
    }
    w.flush()?;
    let manifest = ModelManifest { config: model.config.clone(), ndim: model.ndim, seed, metadata, tensors };
    fs::write(dir.join(MODEL_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(FnoModel, ModelManifest)> {
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(dir.join(MODEL_MANIFEST))?)?;
    let bytes = fs::read(dir.join(MODEL_PARAMS))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("parameter file is not a whole number of f64 values".into()));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = FnoParams::zeros(&manifest.config, manifest.ndim);
    let expected = params.named_tensors();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Format("checkpoint tensor list does not match config".into()));
    }
    let mut ordered = Vec::with_capacity(flat.len());
    for ((name, t), entry) in expected.iter().zip(&manifest.tensors) {
        if name != &entry.name || t.len() != entry.len || entry.offset + entry.len > flat.len() {
            return Err(Error::Format(format!("tensor {name} missing or misshapen in checkpoint")));
        }
        ordered.extend_from_slice(&flat[entry.offset..entry.offset + entry.len]);
    }
    params.assign_flat(&ordered)?;
    let model = FnoModel::from_params(manifest.config.clone(), manifest.ndim, params)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{rfft, Grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tiny(act: Activation) -> FnoConfig {
        let mut c = FnoConfig::new(2, 1, 3, 2, 4);
        c.activation = act;
        c
    }

    fn random_input(grid: &Grid, channels: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.len() * channels;
        Field::new(grid.clone(), channels, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Reference forward with O(N²) DFTs and per-point loops.
    fn dft_reference(model: &FnoModel, input: &Field) -> Vec<f64> {
        let grid = input.grid();
        let n = grid.len();
        let cfg = model.config();
        let act = cfg.activation;
        let p = model.params();
        let point = |layer: &Dense, x: &[f64]| -> Vec<f64> {
            (0..layer.rows)
                .map(|o| layer.bias[o] + (0..layer.cols).map(|i| layer.weight[o * layer.cols + i] * x[i]).sum::<f64>())
                .collect()
        };
        let mlp = |m: &PointwiseMlp, x: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = point(&m.first, x).into_iter().map(|u| act.apply(u)).collect();
            point(&m.second, &h)
        };
        let d = cfg.hidden_channels;
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|q| {
                let a: Vec<f64> = (0..cfg.in_channels).map(|c| input.channel(c)[q]).collect();
                mlp(&p.lifting, &a)
            })
            .collect();
        let k_list: Vec<usize> = (0..cfg.modes).collect();
        for block in &p.blocks {
            let mut next = vec![vec![0.0; d]; n];
            for q in 0..n {
                let xq = grid.coordinate(q)[0];
                for i in 0..d {
                    let mut z = block.bias[i];
                    for j in 0..d {
                        z += block.weight[i * d + j] * v[q][j];
                        for (m, &k) in k_list.iter().enumerate() {
                            let w = 2.0 * PI * k as f64 / grid.lengths()[0];
                            let mut hat = Complex64::new(0.0, 0.0);
                            for (r, vr) in v.iter().enumerate() {
                                let ph = -w * grid.coordinate(r)[0];
                                hat += vr[j] * Complex64::new(ph.cos(), ph.sin());
                            }
                            let c = block.spectral[(m * d + i) * d + j] * hat;
                            let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                            let e = Complex64::new((w * xq).cos(), (w * xq).sin());
                            let mut term = c * e;
                            if k == n / 2 {
                                term = c * (w * xq).cos();
                            }
                            z += weight * term.re / n as f64;
                        }
                    }
                    next[q][i] = act.apply(z);
                }
            }
            v = next;
        }
        let mut out = vec![0.0; cfg.out_channels * n];
        for q in 0..n {
            let y = mlp(&p.projection, &v[q]);
            for c in 0..cfg.out_channels {
                out[c * n + q] = y[c];
            }
        }
        out
    }

    #[test]
    fn forward_matches_dft_reference() {
        let grid = Grid::line(16, 2.0).unwrap();
        let model = FnoModel::init(tiny(Activation::Gelu), 1, 3).unwrap();
        let input = random_input(&grid, 2, 4);
        let out = model.forward(&input).unwrap();
        let reference = dft_reference(&model, &input);
        for (a, b) in out.values().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_matches_dft_reference_with_nyquist_mode() {
        let grid = Grid::line(8, 1.0).unwrap();
        let mut cfg = tiny(Activation::Relu);
        cfg.modes = 5;
        let model = FnoModel::init(cfg, 1, 8).unwrap();
        let input = random_input(&grid, 2, 9);
        let out = model.forward(&input).unwrap();
        let reference = dft_reference(&model, &input);
        for (a, b) in out.values().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_model_gives_zero_output() {
        let grid = Grid::line(16, 1.0).unwrap();
        let model = FnoModel::zeros(tiny(Activation::Gelu), 1).unwrap();
        let out = model.forward(&random_input(&grid, 2, 1)).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_spectral_block_is_identity() {
        let grid = Grid::line(16, 1.0).unwrap();
        let d = 3;
        let modes = ModeSet::new(&grid, 9).unwrap();
        let mut spectral = vec![Complex64::new(0.0, 0.0); 9 * d * d];
        for m in 0..9 {
            for i in 0..d {
                spectral[(m * d + i) * d + i] = Complex64::new(1.0, 0.0);
            }
        }
        let block = FourierBlock { spectral: spectral.clone(), weight: vec![0.0; d * d], bias: vec![0.0; d] };
        let v = random_input(&grid, d, 2);
        let (_, z) = block_preactivation(&block, &grid, &modes, v.values(), &spectral, &block.weight);
        for (a, b) in z.iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn hidden_state_is_consistent_with_forward() {
        let grid = Grid::line(16, 1.0).unwrap();
        let model = FnoModel::init(tiny(Activation::Gelu), 1, 5).unwrap();
        let input = random_input(&grid, 2, 6);
        let (out, hidden) = model.forward_with_hidden(&input).unwrap();
        assert_eq!(out, model.forward(&input).unwrap());

        let lifted = model.project_lifting(&input);
        for (a, b) in hidden.block_inputs[0].values().iter().zip(&lifted) {
            assert_eq!(a, b);
        }

        let spec = rfft(hidden.last_input());
        let d = model.config().hidden_channels;
        for m in 0..model.config().modes {
            for j in 0..d {
                let expect = spec.channel(j)[m];
                assert!((hidden.last_hat[m * d + j] - expect).norm() < 1e-12);
            }
        }
    }

    impl FnoModel {
        fn project_lifting(&self, input: &Field) -> Vec<f64> {
            let n = input.npoints();
            let l = &self.params.lifting;
            let mut pre = vec![0.0; l.first.rows * n];
            l.first.apply(input.values(), n, &mut pre);
            pre.iter_mut().for_each(|u| *u = self.config.activation.apply(*u));
            let mut out = vec![0.0; l.second.rows * n];
            l.second.apply(&pre, n, &mut out);
            out
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = FnoModel::init(tiny(Activation::Gelu), 1, 11).unwrap();
        let b = FnoModel::init(tiny(Activation::Gelu), 1, 11).unwrap();
        let c = FnoModel::init(tiny(Activation::Gelu), 1, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().blocks.iter().all(|b| b.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn spectral_init_variance() {
        let mut cfg = FnoConfig::new(1, 1, 5, 1, 20);
        cfg.projection_width = 1;
        cfg.lifting_width = 1;
        let model = FnoModel::init(cfg, 2, 21).unwrap();
        let r = &model.params().blocks[0].spectral;
        let draws: Vec<f64> = r.iter().flat_map(|c| [c.re, c.im]).collect();
        assert!(draws.len() >= 10_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var / (1.0 / 25.0) - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn resolution_agnostic_for_band_limited_input_linear() {
        let mut cfg = tiny(Activation::Linear);
        cfg.in_channels = 1;
        let model = FnoModel::init(cfg, 1, 2).unwrap();
        let f = |x: f64| 0.3 + (2.0 * PI * x).sin() - 0.5 * (4.0 * PI * x).cos();
        let coarse = Field::from_fn(Grid::line(16, 1.0).unwrap(), 1, |_, x| f(x[0])).unwrap();
        let fine = Field::from_fn(Grid::line(32, 1.0).unwrap(), 1, |_, x| f(x[0])).unwrap();
        let a = model.forward(&coarse).unwrap();
        let b = model.forward(&fine).unwrap();
        for p in 0..16 {
            assert!((a.values()[p] - b.values()[2 * p]).abs() < 1e-8);
        }
    }

    #[test]
    fn resolution_agnostic_with_gelu_up_to_aliasing() {
        let mut cfg = tiny(Activation::Gelu);
        cfg.in_channels = 1;
        let model = FnoModel::init(cfg, 1, 2).unwrap();
        let f = |x: f64| 0.2 * (2.0 * PI * x).sin();
        let coarse = Field::from_fn(Grid::line(64, 1.0).unwrap(), 1, |_, x| f(x[0])).unwrap();
        let fine = Field::from_fn(Grid::line(128, 1.0).unwrap(), 1, |_, x| f(x[0])).unwrap();
        let a = model.forward(&coarse).unwrap();
        let b = model.forward(&fine).unwrap();
        for p in 0..64 {
            assert!((a.values()[p] - b.values()[2 * p]).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_input_gives_constant_hidden_states() {
        let mut model = FnoModel::init(tiny(Activation::Gelu), 1, 4).unwrap();
        for b in &mut model.params_mut().blocks {
            b.bias.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        }
        let grid = Grid::line(16, 1.0).unwrap();
        let (_, hidden) = model.forward_with_hidden(&Field::zeros(grid, 2)).unwrap();
        for f in hidden.block_inputs.iter().chain([&hidden.last_preactivation]) {
            for c in 0..f.channels() {
                let ch = f.channel(c);
                assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn forward_is_continuous_in_parameters() {
        let grid = Grid::line(16, 1.0).unwrap();
        let model = FnoModel::init(tiny(Activation::Gelu), 1, 7).unwrap();
        let input = random_input(&grid, 2, 8);
        let base = model.forward(&input).unwrap();
        let flat = model.params().flatten();
        for k in (0..flat.len()).step_by(7) {
            let mut p = flat.clone();
            p[k] += 1e-7;
            let mut m = model.clone();
            m.params_mut().assign_flat(&p).unwrap();
            let out = m.forward(&input).unwrap();
            let diff = out.values().iter().zip(base.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff.is_finite() && diff < 1e-4);
        }
    }

    #[test]
    fn padding_wrapper_crops_back() {
        let mut cfg = tiny(Activation::Gelu);
        cfg.padding = 2;
        let model = FnoModel::init(cfg, 1, 1).unwrap();
        let grid = Grid::line(16, 1.0).unwrap();
        let input = random_input(&grid, 2, 2);
        let out = model.forward(&input).unwrap();
        assert_eq!(out.grid(), &grid);
        let (_, hidden) = model.forward_with_hidden(&input).unwrap();
        assert_eq!(hidden.grid.shape(), &[18]);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let model = FnoModel::init(tiny(Activation::Gelu), 1, 1).unwrap();
        assert!(model.forward(&Field::zeros(Grid::line(16, 1.0).unwrap(), 3)).is_err());
        assert!(model.forward(&Field::zeros(Grid::line(4, 1.0).unwrap(), 2)).is_err());
        assert!(model.forward(&Field::zeros(Grid::plane(16, 16, 1.0, 1.0).unwrap(), 2)).is_err());
    }

    #[test]
    fn forward_last_block_reproduces_forward() {
        let grid = Grid::line(16, 1.0).unwrap();
        let model = FnoModel::init(tiny(Activation::Gelu), 1, 3).unwrap();
        let input = random_input(&grid, 2, 3);
        let (out, hidden) = model.forward_with_hidden(&input).unwrap();
        let again = model.forward_last_block(&hidden, &model.theta_last(), &grid).unwrap();
        for (a, b) in out.values().iter().zip(again.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn theta_last_round_trip_and_layout() {
        let mut model = FnoModel::init(tiny(Activation::Gelu), 1, 3).unwrap();
        let theta = model.theta_last();
        assert_eq!(theta.len(), 2 * 4 * 9 + 9);
        let b = model.params().blocks.last().unwrap();
        assert_eq!(theta[1], b.spectral[1].re);
        assert_eq!(theta[36 + 1], b.spectral[1].im);
        assert_eq!(theta[72 + 4], b.weight[4]);
        let shifted: Vec<f64> = theta.iter().map(|t| t + 1.0).collect();
        model.set_theta_last(&shifted).unwrap();
        assert_eq!(model.theta_last(), shifted);
    }

    #[test]
    fn projection_jacobian_matches_differences() {
        let model = FnoModel::init(tiny(Activation::Gelu), 1, 9).unwrap();
        let z = [0.3, -0.7, 1.1];
        let (_, jac) = model.projected_with_jacobian(&z);
        let h = 1e-6;
        for j in 0..3 {
            let (mut zp, mut zm) = (z, z);
            zp[j] += h;
            zm[j] -= h;
            let fd = (model.projected_with_jacobian(&zp).0[0] - model.projected_with_jacobian(&zm).0[0]) / (2.0 * h);
            assert!((fd - jac[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = FnoModel::init(tiny(Activation::Gelu), 1, 3).unwrap();
        save_checkpoint(dir.path(), &model, 3, serde_json::json!({"note": "x"})).unwrap();
        let (back, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.seed, 3);
        std::fs::write(dir.path().join(MODEL_PARAMS), [0u8; 12]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
