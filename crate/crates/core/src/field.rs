//! Fields on regular periodic grids and the real-FFT primitives built on them.
//!
//! The forward transform is unnormalized and the inverse carries `1/∏N`:
//!
//! ```text
//! c_k = Σ_n v_n · exp(−i⟨ω_k, x_n⟩)
//! v_n = (1/∏N) Σ_k w_k · Re(c_k · exp(i⟨ω_k, x_n⟩))
//! ```
//!
//! where `w_k = 2` for bins strictly between DC and Nyquist along the last
//! (halved) axis and `w_k = 1` otherwise. Imaginary parts that the real
//! inverse cannot represent (DC and Nyquist along the last axis) are dropped.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let plan = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

/// Regular periodic grid on `[0, L_1) × … × [0, L_d)` with `d ∈ {1, 2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    shape: Vec<usize>,
    lengths: Vec<f64>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, lengths: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "expected 1 or 2 spatial dims, got {}",
                shape.len()
            )));
        }
        if shape.len() != lengths.len() {
            return Err(Error::InvalidGrid("shape and lengths differ in rank".into()));
        }
        for &n in &shape {
            if n < 4 || n % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "points per dim must be even and >= 4, got {n}"
                )));
            }
        }
        for &l in &lengths {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidGrid(format!("domain length must be positive, got {l}")));
            }
        }
        Ok(Self { shape, lengths })
    }

    pub fn line(n: usize, length: f64) -> Result<Self> {
        Self::new(vec![n], vec![length])
    }

    pub fn plane(n1: usize, n2: usize, l1: f64, l2: f64) -> Result<Self> {
        Self::new(vec![n1, n2], vec![l1, l2])
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, dim: usize) -> f64 {
        self.lengths[dim] / self.shape[dim] as f64
    }

    /// Multi-index of flat point `p` (row-major).
    pub fn point_index(&self, p: usize) -> [usize; 2] {
        match self.ndim() {
            1 => [p, 0],
            _ => [p / self.shape[1], p % self.shape[1]],
        }
    }

    /// Coordinates of flat point `p`, `x_i = i·L/N`.
    pub fn coordinate(&self, p: usize) -> [f64; 2] {
        let idx = self.point_index(p);
        let mut x = [0.0; 2];
        for d in 0..self.ndim() {
            x[d] = idx[d] as f64 * self.spacing(d);
        }
        x
    }

    pub fn points(&self) -> Points {
        let mut coords = Vec::with_capacity(self.len() * self.ndim());
        for p in 0..self.len() {
            coords.extend_from_slice(&self.coordinate(p)[..self.ndim()]);
        }
        Points { ndim: self.ndim(), coords }
    }

    /// Bin counts of the real-FFT layout: `N/2+1` on the last axis, `N` on the first.
    pub fn spectral_shape(&self) -> Vec<usize> {
        match self.ndim() {
            1 => vec![self.shape[0] / 2 + 1],
            _ => vec![self.shape[0], self.shape[1] / 2 + 1],
        }
    }

    pub fn spectral_len(&self) -> usize {
        self.spectral_shape().iter().product()
    }

    /// Bin multi-index (unsigned, as stored) of flat spectral bin `b`.
    pub fn bin_index(&self, b: usize) -> [usize; 2] {
        match self.ndim() {
            1 => [b, 0],
            _ => {
                let n2 = self.shape[1] / 2 + 1;
                [b / n2, b % n2]
            }
        }
    }

    /// Signed integer wavenumber per dim; the full (first) axis wraps above `N/2`.
    pub fn bin_wavenumber(&self, b: usize) -> [i64; 2] {
        let idx = self.bin_index(b);
        let mut k = [0i64; 2];
        for d in 0..self.ndim() {
            let n = self.shape[d];
            let last = d + 1 == self.ndim();
            k[d] = if !last && idx[d] > n / 2 {
                idx[d] as i64 - n as i64
            } else {
                idx[d] as i64
            };
        }
        k
    }

    /// Angular frequency `ω = 2πk/L` per dim.
    pub fn bin_frequency(&self, b: usize) -> [f64; 2] {
        let k = self.bin_wavenumber(b);
        let mut w = [0.0; 2];
        for d in 0..self.ndim() {
            w[d] = 2.0 * PI * k[d] as f64 / self.lengths[d];
        }
        w
    }

    fn is_nyquist(&self, b: usize, dim: usize) -> bool {
        self.bin_index(b)[dim] == self.shape[dim] / 2
    }

    /// Hermitian multiplicity of a bin along the halved last axis.
    pub fn bin_weight(&self, b: usize) -> f64 {
        let last = self.ndim() - 1;
        let k = self.bin_index(b)[last];
        if k == 0 || k == self.shape[last] / 2 {
            1.0
        } else {
            2.0
        }
    }

    /// Synthesis basis of bin `b` at `x`: `∏_d exp(iω_d x_d)`, with Nyquist
    /// axes contributing the real factor `cos(ω_d x_d)` instead.
    ///
    /// A field reconstructs as `v(x) = (1/∏N) Σ_b w_b Re(c_b · basis_b(x))`,
    /// which is exact at grid points and band-limited in between.
    pub fn bin_basis(&self, b: usize, x: &[f64]) -> Complex64 {
        let w = self.bin_frequency(b);
        let mut acc = Complex64::new(1.0, 0.0);
        for d in 0..self.ndim() {
            let phase = w[d] * x[d];
            if self.is_nyquist(b, d) {
                acc *= phase.cos();
            } else {
                acc *= Complex64::new(phase.cos(), phase.sin());
            }
        }
        acc
    }

    /// `bin_basis` at grid point `p`, with the phase reduced exactly modulo `N`.
    pub fn bin_basis_at_grid(&self, b: usize, p: usize) -> Complex64 {
        let k = self.bin_wavenumber(b);
        let idx = self.point_index(p);
        let mut acc = Complex64::new(1.0, 0.0);
        for d in 0..self.ndim() {
            let n = self.shape[d] as i64;
            let r = (k[d] * idx[d] as i64).rem_euclid(n);
            let phase = 2.0 * PI * r as f64 / n as f64;
            if self.is_nyquist(b, d) {
                acc *= phase.cos();
            } else {
                acc *= Complex64::new(phase.cos(), phase.sin());
            }
        }
        acc
    }

    /// Grid enlarged by `extra` points per dim, keeping the spacing.
    pub fn padded(&self, extra: usize) -> Result<Grid> {
        let shape: Vec<usize> = self.shape.iter().map(|&n| n + extra).collect();
        let lengths = self
            .shape
            .iter()
            .zip(&self.lengths)
            .map(|(&n, &l)| l * (n + extra) as f64 / n as f64)
            .collect();
        Grid::new(shape, lengths)
    }

    pub(crate) fn check_point(&self, x: &[f64]) -> Result<()> {
        for d in 0..self.ndim() {
            let l = self.lengths[d];
            if !(x[d] >= 0.0 && x[d] < l) {
                return Err(Error::OutOfDomain { coord: x[d], length: l });
            }
        }
        Ok(())
    }
}

/// A list of coordinates in a `ndim`-dimensional domain, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    ndim: usize,
    coords: Vec<f64>,
}

impl Points {
    pub fn new(ndim: usize, coords: Vec<f64>) -> Result<Self> {
        if ndim == 0 || ndim > 2 || coords.len() % ndim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates do not form {ndim}-d points",
                coords.len()
            )));
        }
        Ok(Self { ndim, coords })
    }

    pub fn from_1d(xs: &[f64]) -> Self {
        Self { ndim: 1, coords: xs.to_vec() }
    }

    pub fn from_2d(xs: &[[f64; 2]]) -> Self {
        Self { ndim: 2, coords: xs.iter().flatten().copied().collect() }
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.ndim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.coords[i * self.ndim..(i + 1) * self.ndim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.ndim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Real samples of a `channels`-valued function on a grid, channel-outer.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::ShapeMismatch("field needs at least one channel".into()));
        }
        if values.len() != channels * grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values ({} channels x {} points), got {}",
                channels * grid.len(),
                channels,
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Self { grid, channels, values })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        let n = grid.len() * channels;
        Self { grid, channels, values: vec![0.0; n] }
    }

    /// Samples `f(x)` for every channel at every grid point.
    pub fn from_fn(grid: Grid, channels: usize, f: impl Fn(usize, &[f64]) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(channels * grid.len());
        for c in 0..channels {
            for p in 0..grid.len() {
                values.push(f(c, &grid.coordinate(p)[..grid.ndim()]));
            }
        }
        Self::new(grid, channels, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn npoints(&self) -> usize {
        self.grid.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.npoints();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.npoints();
        &mut self.values[c * n..(c + 1) * n]
    }

    /// Stacks the channels of several fields on one grid.
    pub fn concat(fields: &[&Field]) -> Result<Field> {
        let first = fields
            .first()
            .ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?;
        let mut values = Vec::new();
        let mut channels = 0;
        for f in fields {
            if f.grid != first.grid {
                return Err(Error::ShapeMismatch("concatenated fields differ in grid".into()));
            }
            values.extend_from_slice(&f.values);
            channels += f.channels;
        }
        Ok(Field { grid: first.grid.clone(), channels, values })
    }

    /// Channels `range` as a new field.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<Field> {
        if range.end > self.channels || range.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "channel range {range:?} outside 0..{}",
                self.channels
            )));
        }
        let n = self.npoints();
        Ok(Field {
            grid: self.grid.clone(),
            channels: range.len(),
            values: self.values[range.start * n..range.end * n].to_vec(),
        })
    }

    /// Appends `extra` zero points per dim.
    pub fn pad_zeros(&self, extra: usize) -> Result<Field> {
        if extra == 0 {
            return Ok(self.clone());
        }
        let grid = self.grid.padded(extra)?;
        let mut out = Field::zeros(grid.clone(), self.channels);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for p in 0..self.npoints() {
                let idx = self.grid.point_index(p);
                dst[flat_index(&grid, idx)] = src[p];
            }
        }
        Ok(out)
    }

    /// Restricts to the leading `target` grid (inverse of `pad_zeros`).
    pub fn crop_to(&self, target: &Grid) -> Result<Field> {
        if target.ndim() != self.grid.ndim()
            || target.shape().iter().zip(self.grid.shape()).any(|(t, s)| t > s)
        {
            return Err(Error::ShapeMismatch("crop target larger than field grid".into()));
        }
        if target == &self.grid {
            return Ok(self.clone());
        }
        let mut out = Field::zeros(target.clone(), self.channels);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for (p, d) in dst.iter_mut().enumerate() {
                *d = src[flat_index(&self.grid, target.point_index(p))];
            }
        }
        Ok(out)
    }
}

pub(crate) fn flat_index(grid: &Grid, idx: [usize; 2]) -> usize {
    match grid.ndim() {
        1 => idx[0],
        _ => idx[0] * grid.shape()[1] + idx[1],
    }
}

/// Real-FFT coefficients of a field, channel-outer over the `spectral_shape` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    channels: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(grid: Grid, channels: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != channels * grid.spectral_len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coefficients, got {}",
                channels * grid.spectral_len(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, channels, coeffs })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let n = self.grid.spectral_len();
        &self.coeffs[c * n..(c + 1) * n]
    }
}

/// Forward real FFT of one channel into `out` (length `grid.spectral_len()`).
pub(crate) fn rfft_channel(grid: &Grid, values: &[f64], out: &mut [Complex64]) {
    match grid.ndim() {
        1 => {
            let n = grid.shape()[0];
            let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft_in_place(&mut buf, false);
            out.copy_from_slice(&buf[..n / 2 + 1]);
        }
        _ => {
            let (n1, n2) = (grid.shape()[0], grid.shape()[1]);
            let h2 = n2 / 2 + 1;
            let mut rows = vec![Complex64::new(0.0, 0.0); n1 * h2];
            let mut buf = vec![Complex64::new(0.0, 0.0); n2];
            for i in 0..n1 {
                for (b, &v) in buf.iter_mut().zip(&values[i * n2..(i + 1) * n2]) {
                    *b = Complex64::new(v, 0.0);
                }
                fft_in_place(&mut buf, false);
                rows[i * h2..(i + 1) * h2].copy_from_slice(&buf[..h2]);
            }
            let mut col = vec![Complex64::new(0.0, 0.0); n1];
            for k2 in 0..h2 {
                for i in 0..n1 {
                    col[i] = rows[i * h2 + k2];
                }
                fft_in_place(&mut col, false);
                for k1 in 0..n1 {
                    out[k1 * h2 + k2] = col[k1];
                }
            }
        }
    }
}

/// Complex-to-real inverse along one axis of length `n` from `n/2+1` bins,
/// unnormalized, dropping the imaginary parts of DC and Nyquist.
fn c2r_axis(half: &[Complex64], n: usize, out: &mut [f64], buf: &mut [Complex64]) {
    let h = n / 2;
    buf[0] = Complex64::new(half[0].re, 0.0);
    for k in 1..h {
        buf[k] = half[k];
        buf[n - k] = half[k].conj();
    }
    buf[h] = Complex64::new(half[h].re, 0.0);
    fft_in_place(buf, true);
    for (o, b) in out.iter_mut().zip(buf.iter()) {
        *o = b.re;
    }
}

/// Inverse real FFT of one channel (normalized by `1/∏N`).
pub(crate) fn irfft_channel(grid: &Grid, coeffs: &[Complex64], out: &mut [f64]) {
    let scale = 1.0 / grid.len() as f64;
    match grid.ndim() {
        1 => {
            let n = grid.shape()[0];
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            c2r_axis(coeffs, n, out, &mut buf);
        }
        _ => {
            let (n1, n2) = (grid.shape()[0], grid.shape()[1]);
            let h2 = n2 / 2 + 1;
            let mut cols = vec![Complex64::new(0.0, 0.0); n1 * h2];
            let mut col = vec![Complex64::new(0.0, 0.0); n1];
            for k2 in 0..h2 {
                for k1 in 0..n1 {
                    col[k1] = coeffs[k1 * h2 + k2];
                }
                fft_in_place(&mut col, true);
                for i in 0..n1 {
                    cols[i * h2 + k2] = col[i];
                }
            }
            let mut buf = vec![Complex64::new(0.0, 0.0); n2];
            for i in 0..n1 {
                c2r_axis(&cols[i * h2..(i + 1) * h2], n2, &mut out[i * n2..(i + 1) * n2], &mut buf);
            }
        }
    }
    for o in out.iter_mut() {
        *o *= scale;
    }
}

/// Unnormalized forward real FFT of every channel.
pub fn rfft(field: &Field) -> SpectralField {
    let grid = field.grid().clone();
    let nb = grid.spectral_len();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); field.channels() * nb];
    for c in 0..field.channels() {
        rfft_channel(&grid, field.channel(c), &mut coeffs[c * nb..(c + 1) * nb]);
    }
    SpectralField { grid, channels: field.channels(), coeffs }
}

/// Inverse of [`rfft`], carrying the `1/∏N` factor.
pub fn irfft(spec: &SpectralField, grid: &Grid) -> Result<Field> {
    if spec.grid().shape() != grid.shape() {
        return Err(Error::ShapeMismatch(format!(
            "spectrum for grid {:?} cannot be inverted onto grid {:?}",
            spec.grid().shape(),
            grid.shape()
        )));
    }
    let nb = grid.spectral_len();
    let n = grid.len();
    let mut values = vec![0.0; spec.channels() * n];
    for c in 0..spec.channels() {
        irfft_channel(grid, &spec.coeffs[c * nb..(c + 1) * nb], &mut values[c * n..(c + 1) * n]);
    }
    Field::new(grid.clone(), spec.channels(), values)
}

/// Band-limited trigonometric interpolant of a field, evaluable anywhere.
#[derive(Debug, Clone)]
pub struct TrigInterpolant {
    spectrum: SpectralField,
    freqs: Vec<[f64; 2]>,
    scaled: Vec<Complex64>,
}

impl TrigInterpolant {
    pub fn new(field: &Field) -> Self {
        let spectrum = rfft(field);
        let grid = field.grid();
        let nb = grid.spectral_len();
        let inv_n = 1.0 / grid.len() as f64;
        let freqs = (0..nb).map(|b| grid.bin_frequency(b)).collect();
        let scaled = spectrum
            .coeffs()
            .iter()
            .enumerate()
            .map(|(i, c)| c * grid.bin_weight(i % nb) * inv_n)
            .collect();
        Self { spectrum, freqs, scaled }
    }

    pub fn grid(&self) -> &Grid {
        self.spectrum.grid()
    }

    pub fn channels(&self) -> usize {
        self.spectrum.channels()
    }

    /// Evaluates every channel at `x`, treating coordinates periodically.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let grid = self.grid();
        let nb = grid.spectral_len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for b in 0..nb {
            let basis = if self.freqs[b] == [0.0, 0.0] {
                Complex64::new(1.0, 0.0)
            } else {
                grid.bin_basis(b, x)
            };
            for (c, o) in out.iter_mut().enumerate() {
                let coef = self.scaled[c * nb + b];
                *o += coef.re * basis.re - coef.im * basis.im;
            }
        }
    }
}

/// Evaluates the band-limited interpolant of `field` at `points`.
///
/// Output is channel-outer: `out[c * points.len() + i]`.
pub fn fourier_interpolate(field: &Field, points: &Points) -> Result<Vec<f64>> {
    let grid = field.grid();
    if points.ndim() != grid.ndim() {
        return Err(Error::ShapeMismatch(format!(
            "{}-d points on a {}-d grid",
            points.ndim(),
            grid.ndim()
        )));
    }
    for x in points.iter() {
        grid.check_point(x)?;
    }
    let interp = TrigInterpolant::new(field);
    let np = points.len();
    let mut out = vec![0.0; field.channels() * np];
    let mut buf = vec![0.0; field.channels()];
    for (i, x) in points.iter().enumerate() {
        interp.eval(x, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            out[c * np + i] = *v;
        }
    }
    Ok(out)
}

/// One-line JSON header of the raw field format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub dims: Vec<usize>,
    pub lengths: Vec<f64>,
    pub channels: usize,
    #[serde(default = "one")]
    pub frames: usize,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

fn one() -> usize {
    1
}

pub const FIELD_DTYPE: &str = "f64-le";

/// Writes `frames` fields sharing grid and channel count: JSON header line, then raw f64 LE.
pub fn write_fields<W: Write>(
    mut w: W,
    frames: &[Field],
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Format("cannot write an empty frame list".into()))?;
    if frames.iter().any(|f| f.grid() != first.grid() || f.channels() != first.channels()) {
        return Err(Error::Format("frames differ in grid or channels".into()));
    }
    let header = FieldHeader {
        dims: first.grid().shape().to_vec(),
        lengths: first.grid().lengths().to_vec(),
        channels: first.channels(),
        frames: frames.len(),
        dtype: FIELD_DTYPE.into(),
        meta,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(frames.len() * first.values().len() * 8);
    for f in frames {
        for v in f.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_field<W: Write>(w: W, field: &Field) -> Result<()> {
    write_fields(w, std::slice::from_ref(field), serde_json::Map::new())
}

/// Reads the format written by [`write_fields`].
pub fn read_fields<R: BufRead>(mut r: R) -> Result<(FieldHeader, Vec<Field>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format("missing newline after field header".into()));
    }
    let header: FieldHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != FIELD_DTYPE {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let grid = Grid::new(header.dims.clone(), header.lengths.clone())?;
    let per_frame = header.channels * grid.len();
    let mut bytes = vec![0u8; per_frame * header.frames * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated field payload: {e}")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", rest.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let frames = values
        .chunks_exact(per_frame)
        .map(|chunk| Field::new(grid.clone(), header.channels, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}

pub fn read_field<R: BufRead>(r: R) -> Result<Field> {
    let (header, mut frames) = read_fields(r)?;
    if header.frames != 1 {
        return Err(Error::Format(format!("expected one frame, found {}", header.frames)));
    }
    Ok(frames.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Grid, channels: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.len() * channels;
        Field::new(grid, channels, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grid_rejects_odd_and_small() {
        assert!(Grid::line(7, 1.0).is_err());
        assert!(Grid::line(2, 1.0).is_err());
        assert!(Grid::line(8, 0.0).is_err());
        assert!(Grid::new(vec![4, 4, 4], vec![1.0; 3]).is_err());
        assert!(Grid::plane(8, 6, 1.0, 2.0).is_ok());
    }

    #[test]
    fn grid_coordinates_are_endpoint_exclusive() {
        let g = Grid::line(8, 2.0).unwrap();
        assert_eq!(g.coordinate(0)[0], 0.0);
        assert!((g.coordinate(7)[0] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn rfft_of_constant_is_dc_only() {
        let g = Grid::line(8, 1.0).unwrap();
        let f = Field::new(g, 1, vec![1.5; 8]).unwrap();
        let s = rfft(&f);
        assert_eq!(s.coeffs().len(), 5);
        assert!((s.coeffs()[0] - Complex64::new(12.0, 0.0)).norm() < 1e-14);
        for c in &s.coeffs()[1..] {
            assert!(c.norm() < 1e-14);
        }
    }

    #[test]
    fn rfft_of_single_cosine() {
        let g = Grid::line(8, 1.0).unwrap();
        let f = Field::from_fn(g, 1, |_, x| (2.0 * PI * x[0]).cos()).unwrap();
        let s = rfft(&f);
        for (k, c) in s.coeffs().iter().enumerate() {
            let expect = if k == 1 { Complex64::new(4.0, 0.0) } else { Complex64::new(0.0, 0.0) };
            assert!((c - expect).norm() < 1e-13, "bin {k}: {c}");
        }
    }

    #[test]
    fn irfft_edge_cases() {
        let g = Grid::line(8, 1.0).unwrap();
        let zero = SpectralField::new(g.clone(), 1, vec![Complex64::new(0.0, 0.0); 5]).unwrap();
        assert!(irfft(&zero, &g).unwrap().values().iter().all(|&v| v == 0.0));
        let mut c = vec![Complex64::new(0.0, 0.0); 5];
        c[0] = Complex64::new(8.0, 0.0);
        let one = irfft(&SpectralField::new(g.clone(), 1, c).unwrap(), &g).unwrap();
        assert!(one.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let other = Grid::line(16, 1.0).unwrap();
        assert!(irfft(&zero, &other).is_err());
    }

    #[test]
    fn round_trip_1d_and_2d() {
        let f = random_field(Grid::line(64, 3.0).unwrap(), 2, 1);
        let back = irfft(&rfft(&f), f.grid()).unwrap();
        let err = f.values().iter().zip(back.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");

        let f = random_field(Grid::plane(12, 10, 1.0, 2.0).unwrap(), 3, 2);
        let back = irfft(&rfft(&f), f.grid()).unwrap();
        let err = f.values().iter().zip(back.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn spectrum_round_trip_from_valid_coefficients() {
        let g = Grid::line(16, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c: Vec<Complex64> =
            (0..9).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        c[0].im = 0.0;
        c[8].im = 0.0;
        let s = SpectralField::new(g.clone(), 1, c.clone()).unwrap();
        let again = rfft(&irfft(&s, &g).unwrap());
        for (a, b) in c.iter().zip(again.coeffs()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn rfft_2d_matches_direct_dft() {
        let f = random_field(Grid::plane(6, 8, 1.0, 1.5).unwrap(), 1, 9);
        let g = f.grid().clone();
        let s = rfft(&f);
        for b in 0..g.spectral_len() {
            let w = g.bin_frequency(b);
            let mut acc = Complex64::new(0.0, 0.0);
            for p in 0..g.len() {
                let x = g.coordinate(p);
                let ph = -(w[0] * x[0] + w[1] * x[1]);
                acc += f.values()[p] * Complex64::new(ph.cos(), ph.sin());
            }
            assert!((acc - s.coeffs()[b]).norm() < 1e-11);
        }
    }

    #[test]
    fn parseval_1d_and_2d() {
        for grid in [Grid::line(32, 1.0).unwrap(), Grid::plane(8, 10, 1.0, 1.0).unwrap()] {
            let f = random_field(grid.clone(), 1, 3);
            let s = rfft(&f);
            let energy: f64 = f.values().iter().map(|v| v * v).sum();
            let spec: f64 = s
                .coeffs()
                .iter()
                .enumerate()
                .map(|(b, c)| grid.bin_weight(b) * c.norm_sqr())
                .sum::<f64>()
                / grid.len() as f64;
            assert!((energy - spec).abs() < 1e-10 * energy);
        }
    }

    #[test]
    fn interpolation_collocates_and_is_periodic() {
        let f = random_field(Grid::line(16, 2.0).unwrap(), 2, 4);
        let pts = Points::from_1d(&[f.grid().coordinate(3)[0]]);
        let v = fourier_interpolate(&f, &pts).unwrap();
        assert!((v[0] - f.channel(0)[3]).abs() < 1e-12);
        assert!((v[1] - f.channel(1)[3]).abs() < 1e-12);

        let interp = TrigInterpolant::new(&f);
        let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
        interp.eval(&[0.377], &mut a);
        interp.eval(&[2.377], &mut b);
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn interpolation_2d_collocates() {
        let f = random_field(Grid::plane(8, 6, 1.0, 3.0).unwrap(), 1, 11);
        let g = f.grid();
        let coords: Vec<[f64; 2]> = (0..g.len()).map(|p| g.coordinate(p)).collect();
        let v = fourier_interpolate(&f, &Points::from_2d(&coords)).unwrap();
        for (a, b) in v.iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_of_constant_and_single_mode() {
        let g = Grid::line(16, 3.0).unwrap();
        let c = Field::new(g.clone(), 1, vec![0.7; 16]).unwrap();
        let v = fourier_interpolate(&c, &Points::from_1d(&[0.123, 2.9])).unwrap();
        assert!(v.iter().all(|x| (x - 0.7).abs() < 1e-14));

        let m = Field::from_fn(g, 1, |_, x| (2.0 * PI * x[0] / 3.0).cos()).unwrap();
        let v = fourier_interpolate(&m, &Points::from_1d(&[3.0 / 8.0])).unwrap();
        assert!((v[0] - (PI / 4.0).cos()).abs() < 1e-10);
    }

    #[test]
    fn interpolation_rejects_out_of_domain() {
        let f = random_field(Grid::line(8, 1.0).unwrap(), 1, 0);
        assert!(matches!(
            fourier_interpolate(&f, &Points::from_1d(&[1.0])),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(fourier_interpolate(&f, &Points::from_1d(&[-0.1])).is_err());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let f = random_field(Grid::plane(6, 8, 1.0, 1.0).unwrap(), 2, 8);
        let p = f.pad_zeros(2).unwrap();
        assert_eq!(p.grid().shape(), &[8, 10]);
        assert!((p.grid().spacing(0) - f.grid().spacing(0)).abs() < 1e-15);
        assert_eq!(p.crop_to(f.grid()).unwrap(), f);
    }

    #[test]
    fn field_rejects_bad_shapes_and_nan() {
        let g = Grid::line(8, 1.0).unwrap();
        assert!(Field::new(g.clone(), 1, vec![0.0; 7]).is_err());
        let mut v = vec![0.0; 8];
        v[2] = f64::NAN;
        assert!(matches!(Field::new(g, 1, v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let f = random_field(Grid::plane(4, 6, 1.0, 2.0).unwrap(), 2, 3);
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        let newline = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..newline]).unwrap();
        assert_eq!(header["dtype"], "f64-le");
        assert_eq!(buf.len() - newline - 1, 2 * 24 * 8);
        assert_eq!(read_field(&buf[..]).unwrap(), f);
        assert!(read_field(&buf[..buf.len() - 3]).is_err());
    }
}
