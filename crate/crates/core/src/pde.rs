//! Synthetic trajectories: 1D pseudo-spectral solvers (ETDRK4 with 2/3
//! dealiasing) and a 2D advection-diffusion-reaction finite-difference solver.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{irfft_channel, read_fields, rfft_channel, write_fields, Field, Grid};
use crate::rng;
use crate::train::Trajectory;

/// Trajectories abort once `max |u|` exceeds this.
pub const BLOW_UP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equation1d {
    /// `u_t = −u·u_x + ν·u_xx`
    Burgers,
    /// `u_t = −κ·u_xxxx`
    HyperDiffusion,
    /// `u_t = −u·u_x − u_xx − u_xxxx`
    KsConservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario1d {
    pub equation: Equation1d,
    pub n_points: usize,
    pub length: f64,
    pub n_frames: usize,
    /// Time between stored frames.
    pub dt: f64,
    /// Solver steps per stored frame.
    pub substeps: usize,
    /// ν for Burgers, κ for hyper-diffusion; unused for KS.
    pub coefficient: f64,
    /// Highest wavenumber of the random initial Fourier series.
    pub ic_max_mode: usize,
    /// `max |u|` of the initial condition.
    pub ic_amplitude: f64,
    pub splits: Splits,
    pub seed: u64,
}

impl Scenario1d {
    pub fn burgers() -> Self {
        let length = 2.0 * PI;
        Self {
            equation: Equation1d::Burgers,
            n_points: 256,
            length,
            n_frames: 59,
            dt: 0.05,
            substeps: 5,
            coefficient: 1.5e-2 * length / (2.0 * PI),
            ic_max_mode: 3,
            ic_amplitude: 0.5,
            splits: Splits { train: 25, valid: 250, test: 250 },
            seed: 0,
        }
    }

    /// κ makes the slowest mode lose 10% of its amplitude over the trajectory.
    pub fn hyper_diffusion() -> Self {
        let length = 2.0 * PI;
        let (dt, n_frames) = (0.05, 59);
        let k1 = 2.0 * PI / length;
        let total = dt * (n_frames - 1) as f64;
        Self {
            equation: Equation1d::HyperDiffusion,
            n_points: 256,
            length,
            n_frames,
            dt,
            substeps: 1,
            coefficient: -(0.9f64).ln() / (k1.powi(4) * total),
            ic_max_mode: 5,
            ic_amplitude: 1.0,
            splits: Splits { train: 25, valid: 250, test: 250 },
            seed: 0,
        }
    }

    pub fn ks_conservative() -> Self {
        Self {
            equation: Equation1d::KsConservative,
            n_points: 256,
            length: 32.0 * PI,
            n_frames: 59,
            dt: 1.0,
            substeps: 4,
            coefficient: 0.0,
            ic_max_mode: 5,
            ic_amplitude: 1.0,
            splits: Splits { train: 25, valid: 250, test: 250 },
            seed: 0,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::line(self.n_points, self.length)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 || self.substeps == 0 || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("need ≥ 2 frames, ≥ 1 substep and dt > 0".into()));
        }
        if self.coefficient < 0.0 {
            return Err(Error::InvalidConfig("negative diffusion coefficient".into()));
        }
        self.grid().map(|_| ())
    }
}

/// Diagonal linear part `L(k)` of the 1D equation.
fn linear_symbol(eq: Equation1d, coef: f64, k: f64) -> f64 {
    match eq {
        Equation1d::Burgers => -coef * k * k,
        Equation1d::HyperDiffusion => -coef * k.powi(4),
        Equation1d::KsConservative => k * k - k.powi(4),
    }
}

/// ETDRK4 integrator for `û_t = L·û + N(û)` on a periodic 1D grid.
struct Etdrk4 {
    grid: Grid,
    nonlinear: bool,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    /// `−½·i·k` with the Nyquist and dealiased bins zeroed.
    dx_half: Vec<Complex64>,
}

impl Etdrk4 {
    fn new(eq: Equation1d, coef: f64, grid: &Grid, h: f64) -> Self {
        let n = grid.shape()[0];
        let nb = n / 2 + 1;
        let contour = 64;
        let mut s = Self {
            grid: grid.clone(),
            nonlinear: eq != Equation1d::HyperDiffusion,
            e: vec![0.0; nb],
            e2: vec![0.0; nb],
            q: vec![0.0; nb],
            f1: vec![0.0; nb],
            f2: vec![0.0; nb],
            f3: vec![0.0; nb],
            dx_half: vec![Complex64::new(0.0, 0.0); nb],
        };
        for m in 0..nb {
            let k = 2.0 * PI * m as f64 / grid.lengths()[0];
            let lh = h * linear_symbol(eq, coef, k);
            s.e[m] = lh.exp();
            s.e2[m] = (lh / 2.0).exp();
            let (mut q, mut f1, mut f2, mut f3) = (0.0, 0.0, 0.0, 0.0);
            for j in 0..contour {
                let r = Complex64::from_polar(1.0, PI * (j as f64 + 0.5) / contour as f64 * 2.0);
                let z = r + lh;
                let ez = z.exp();
                let z3 = z * z * z;
                q += (((z / 2.0).exp() - 1.0) / z).re;
                f1 += ((-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3).re;
                f2 += ((2.0 + z + ez * (z - 2.0)) / z3).re;
                f3 += ((-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3).re;
            }
            let c = h / contour as f64;
            s.q[m] = q * c;
            s.f1[m] = f1 * c;
            s.f2[m] = f2 * c;
            s.f3[m] = f3 * c;
            let keep = m < n / 2 && (m as f64) < n as f64 / 3.0;
            s.dx_half[m] = if keep { Complex64::new(0.0, -0.5 * k) } else { Complex64::new(0.0, 0.0) };
        }
        s
    }

    /// `N(û) = −½·∂_x(u²)`, dealiased.
    fn nonlinear_term(&self, v: &[Complex64], buf: &mut [f64], out: &mut [Complex64]) {
        if !self.nonlinear {
            out.iter_mut().for_each(|o| *o = Complex64::new(0.0, 0.0));
            return;
        }
        irfft_channel(&self.grid, v, buf);
        buf.iter_mut().for_each(|u| *u *= *u);
        rfft_channel(&self.grid, buf, out);
        for (o, d) in out.iter_mut().zip(&self.dx_half) {
            *o *= d;
        }
    }

    fn step(&self, v: &mut [Complex64]) {
        let nb = v.len();
        let mut buf = vec![0.0; self.grid.len()];
        let zero = Complex64::new(0.0, 0.0);
        let (mut nv, mut na, mut nb_, mut nc) = (vec![zero; nb], vec![zero; nb], vec![zero; nb], vec![zero; nb]);
        let mut a = vec![zero; nb];
        let mut b = vec![zero; nb];
        let mut c = vec![zero; nb];
        self.nonlinear_term(v, &mut buf, &mut nv);
        for m in 0..nb {
            a[m] = v[m] * self.e2[m] + nv[m] * self.q[m];
        }
        self.nonlinear_term(&a, &mut buf, &mut na);
        for m in 0..nb {
            b[m] = v[m] * self.e2[m] + na[m] * self.q[m];
        }
        self.nonlinear_term(&b, &mut buf, &mut nb_);
        for m in 0..nb {
            c[m] = a[m] * self.e2[m] + (nb_[m] * 2.0 - nv[m]) * self.q[m];
        }
        self.nonlinear_term(&c, &mut buf, &mut nc);
        for m in 0..nb {
            v[m] = v[m] * self.e[m] + nv[m] * self.f1[m] + (na[m] + nb_[m]) * 2.0 * self.f2[m] + nc[m] * self.f3[m];
        }
    }
}

fn check_blow_up(values: &[f64], step: usize) -> Result<()> {
    let max_abs = values.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    if max_abs > BLOW_UP_LIMIT {
        return Err(Error::BlowUp { step, max_abs });
    }
    Ok(())
}

/// Integrates `n_steps` ETDRK4 steps of size `h`, returning the final state.
pub fn integrate_1d(eq: Equation1d, coef: f64, initial: &Field, h: f64, n_steps: usize) -> Result<Field> {
    let grid = initial.grid();
    let solver = Etdrk4::new(eq, coef, grid, h);
    let mut v = vec![Complex64::new(0.0, 0.0); grid.spectral_len()];
    rfft_channel(grid, initial.channel(0), &mut v);
    let mut u = vec![0.0; grid.len()];
    for s in 0..n_steps {
        solver.step(&mut v);
        irfft_channel(grid, &v, &mut u);
        check_blow_up(&u, s + 1)?;
    }
    Field::new(grid.clone(), 1, u)
}

pub fn solve_1d(scenario: &Scenario1d, initial: &Field) -> Result<Trajectory> {
    scenario.validate()?;
    let grid = scenario.grid()?;
    if initial.grid() != &grid || initial.channels() != 1 {
        return Err(Error::ShapeMismatch("initial condition does not match the scenario grid".into()));
    }
    let h = scenario.dt / scenario.substeps as f64;
    let solver = Etdrk4::new(scenario.equation, scenario.coefficient, &grid, h);
    let mut v = vec![Complex64::new(0.0, 0.0); grid.spectral_len()];
    rfft_channel(&grid, initial.channel(0), &mut v);
    let mut frames = vec![initial.clone()];
    let mut u = vec![0.0; grid.len()];
    for f in 1..scenario.n_frames {
        for _ in 0..scenario.substeps {
            solver.step(&mut v);
        }
        irfft_channel(&grid, &v, &mut u);
        check_blow_up(&u, f * scenario.substeps)?;
        frames.push(Field::new(grid.clone(), 1, u.clone())?);
    }
    Trajectory::new(frames, None, scenario.dt)
}

/// Zero-mean random Fourier series up to `max_mode`, rescaled to `max |u| = amplitude`.
pub fn make_initial_1d(grid: &Grid, max_mode: usize, amplitude: f64, seed: u64) -> Result<Field> {
    let mut r = rng::stream(seed, 0);
    let l = grid.lengths()[0];
    let coeffs: Vec<(f64, f64)> = (1..=max_mode)
        .map(|k| {
            let decay = 1.0 / k as f64;
            (decay * r.sample::<f64, _>(StandardNormal), decay * r.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let mut f = Field::from_fn(grid.clone(), 1, |_, x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, (a, b))| {
                let w = 2.0 * PI * (k + 1) as f64 * x[0] / l;
                a * w.cos() + b * w.sin()
            })
            .sum()
    })?;
    let max = f.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        f.values_mut().iter_mut().for_each(|v| *v *= amplitude / max);
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdrVariant {
    Base,
    Flip,
    Pos,
    PosNeg,
    PosNegFlip,
}

impl AdrVariant {
    pub const ALL: [AdrVariant; 5] = [Self::Base, Self::Flip, Self::Pos, Self::PosNeg, Self::PosNegFlip];

    pub fn flips(self) -> bool {
        matches!(self, Self::Flip | Self::PosNegFlip)
    }

    pub fn has_source(self) -> bool {
        matches!(self, Self::Pos | Self::PosNeg | Self::PosNegFlip)
    }

    pub fn has_sink(self) -> bool {
        matches!(self, Self::PosNeg | Self::PosNegFlip)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Flip => "flip",
            Self::Pos => "pos",
            Self::PosNeg => "pos_neg",
            Self::PosNegFlip => "pos_neg_flip",
        }
    }
}

/// `∂u/∂t + ∇·(v u) = α∇²u + R` on a periodic square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAdr {
    pub variant: AdrVariant,
    pub n_points: usize,
    pub length: f64,
    pub alpha: f64,
    pub dt: f64,
    pub fine_steps: usize,
    pub n_frames: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Blob widths as fractions of the domain length.
    pub blob_width: (f64, f64),
    pub blob_amplitude: (f64, f64),
    /// Each velocity component is uniform in `[−v_max, v_max]`.
    pub velocity_max: f64,
    pub source_amplitude: (f64, f64),
    pub sink_amplitude: (f64, f64),
    pub splits: Splits,
    pub seed: u64,
}

impl ScenarioAdr {
    pub fn new(variant: AdrVariant) -> Self {
        Self {
            variant,
            n_points: 100,
            length: 1e-3,
            alpha: 0.026,
            dt: 5e-10,
            fine_steps: 200,
            n_frames: 59,
            min_blobs: 1,
            max_blobs: 10,
            blob_width: (0.03, 0.08),
            blob_amplitude: (0.5, 1.5),
            velocity_max: 2000.0,
            source_amplitude: (5e6, 1e7),
            sink_amplitude: (5e6, 1e7),
            splits: Splits { train: 1000, valid: 250, test: 250 },
            seed: 0,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::plane(self.n_points, self.n_points, self.length, self.length)
    }

    /// Fine step stored as frame `i`: `⌊i·fine_steps/n_frames⌋`.
    pub fn frame_step(&self, i: usize) -> usize {
        i * self.fine_steps / self.n_frames
    }

    /// Advective CFL and diffusion numbers, with a message if either is large for RK4.
    pub fn cfl_warning(&self) -> Option<String> {
        let h = self.length / self.n_points as f64;
        let cfl = 2.0 * self.velocity_max * self.dt / h;
        let diff = self.alpha * self.dt / (h * h);
        (cfl > 1.0 || diff > 0.5).then(|| format!("time step may be unstable: CFL {cfl:.3}, diffusion number {diff:.3}"))
    }
}

/// Velocity (2 channels) and reaction term (1 channel).
#[derive(Debug, Clone, PartialEq)]
pub struct AdrAux {
    pub velocity: Field,
    pub reaction: Field,
}

impl AdrAux {
    pub fn zeros(grid: &Grid) -> Self {
        Self { velocity: Field::zeros(grid.clone(), 2), reaction: Field::zeros(grid.clone(), 1) }
    }

    /// `(v_x, v_y, R)` stacked as one field.
    pub fn stacked(&self) -> Result<Field> {
        Field::concat(&[&self.velocity, &self.reaction])
    }
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

/// Shortest periodic offset.
fn wrap(d: f64, l: f64) -> f64 {
    d - l * (d / l).round()
}

/// Sum of periodic Gaussian blobs with random count, centers, widths and amplitudes.
pub fn make_initial_blobs(scenario: &ScenarioAdr, n_blobs: usize, seed: u64) -> Result<Field> {
    let grid = scenario.grid()?;
    let l = scenario.length;
    let mut r = rng::stream(seed, 1);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                r.random_range(0.0..l),
                r.random_range(0.0..l),
                uniform(&mut r, scenario.blob_width) * l,
                uniform(&mut r, scenario.blob_amplitude),
            )
        })
        .collect();
    Field::from_fn(grid, 1, |_, x| {
        blobs
            .iter()
            .map(|&(cx, cy, w, a)| {
                let (dx, dy) = (wrap(x[0] - cx, l), wrap(x[1] - cy, l));
                a * (-(dx * dx + dy * dy) / (2.0 * w * w)).exp()
            })
            .sum()
    })
}

/// Number of blobs for a trajectory seed, uniform in `[min_blobs, max_blobs]`.
pub fn draw_blob_count(scenario: &ScenarioAdr, seed: u64) -> usize {
    rng::stream(seed, 2).random_range(scenario.min_blobs..=scenario.max_blobs)
}

fn in_triangle(p: [f64; 2], t: &[[f64; 2]; 3]) -> bool {
    let sign = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| (a[0] - c[0]) * (b[1] - c[1]) - (b[0] - c[0]) * (a[1] - c[1]);
    let d1 = sign(p, t[0], t[1]);
    let d2 = sign(p, t[1], t[2]);
    let d3 = sign(p, t[2], t[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Velocity and reaction term for a variant: constant velocity (negated on
/// `x₁ ≥ L/2` for flip variants), triangular source, union-of-discs sink.
pub fn make_aux(scenario: &ScenarioAdr, seed: u64) -> Result<AdrAux> {
    let grid = scenario.grid()?;
    let l = scenario.length;
    let mut r = rng::stream(seed, 3);
    let vmax = scenario.velocity_max;
    let v = [r.random_range(-vmax..=vmax), r.random_range(-vmax..=vmax)];
    let flip = scenario.variant.flips();
    let velocity = Field::from_fn(grid.clone(), 2, |c, x| if flip && x[0] >= l / 2.0 { -v[c] } else { v[c] })?;
    let mut reaction = Field::zeros(grid.clone(), 1);
    if scenario.variant.has_source() {
        let rad = r.random_range(0.1..0.2) * l;
        let (cx, cy) = (r.random_range(rad..l - rad), r.random_range(rad..l - rad));
        let phase = r.random_range(0.0..2.0 * PI);
        let tri: [[f64; 2]; 3] = std::array::from_fn(|k| {
            let a = phase + 2.0 * PI * k as f64 / 3.0 + r.random_range(-0.3..0.3);
            [cx + rad * a.cos(), cy + rad * a.sin()]
        });
        let amp = uniform(&mut r, scenario.source_amplitude);
        for p in 0..grid.len() {
            let x = grid.coordinate(p);
            if in_triangle(x, &tri) {
                reaction.values_mut()[p] += amp;
            }
        }
    }
    if scenario.variant.has_sink() {
        let (cx, cy) = (r.random_range(0.0..l), r.random_range(0.0..l));
        let n_discs = r.random_range(3..=6);
        let discs: Vec<(f64, f64, f64)> = (0..n_discs)
            .map(|_| {
                let off = 0.08 * l;
                (cx + r.random_range(-off..off), cy + r.random_range(-off..off), r.random_range(0.04..0.08) * l)
            })
            .collect();
        let amp = uniform(&mut r, scenario.sink_amplitude);
        for p in 0..grid.len() {
            let x = grid.coordinate(p);
            let inside = discs.iter().any(|&(dx, dy, rad)| {
                let (a, b) = (wrap(x[0] - dx, l), wrap(x[1] - dy, l));
                a * a + b * b <= rad * rad
            });
            if inside {
                reaction.values_mut()[p] -= amp;
            }
        }
    }
    Ok(AdrAux { velocity, reaction })
}

/// Right-hand side `α∇²u − ∇·(v u) + R` with the 9-point Laplacian and
/// central differences on the flux.
fn adr_rhs(n: usize, h: f64, alpha: f64, u: &[f64], vx: &[f64], vy: &[f64], react: &[f64], out: &mut [f64]) {
    let lap = alpha / (6.0 * h * h);
    let adv = 1.0 / (2.0 * h);
    let idx = |i: usize, j: usize| i * n + j;
    for i in 0..n {
        let (ip, im) = ((i + 1) % n, (i + n - 1) % n);
        for j in 0..n {
            let (jp, jm) = ((j + 1) % n, (j + n - 1) % n);
            let edges = u[idx(ip, j)] + u[idx(im, j)] + u[idx(i, jp)] + u[idx(i, jm)];
            let corners = u[idx(ip, jp)] + u[idx(ip, jm)] + u[idx(im, jp)] + u[idx(im, jm)];
            let diffusion = lap * (4.0 * edges + corners - 20.0 * u[idx(i, j)]);
            let fx = vx[idx(ip, j)] * u[idx(ip, j)] - vx[idx(im, j)] * u[idx(im, j)];
            let fy = vy[idx(i, jp)] * u[idx(i, jp)] - vy[idx(i, jm)] * u[idx(i, jm)];
            out[idx(i, j)] = diffusion - adv * (fx + fy) + react[idx(i, j)];
        }
    }
}

/// One classical RK4 step in place.
pub fn adr_step(scenario: &ScenarioAdr, u: &mut [f64], aux: &AdrAux) {
    let n = scenario.n_points;
    let h = scenario.length / n as f64;
    let dt = scenario.dt;
    let (vx, vy) = (aux.velocity.channel(0), aux.velocity.channel(1));
    let react = aux.reaction.channel(0);
    let len = u.len();
    let mut k = [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    let mut tmp = vec![0.0; len];
    let stage = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        if s == 0 {
            tmp.copy_from_slice(u);
        } else {
            for ((t, &x), &kp) in tmp.iter_mut().zip(u.iter()).zip(&k[s - 1]) {
                *t = x + stage[s] * dt * kp;
            }
        }
        let (_, rest) = k.split_at_mut(s);
        adr_rhs(n, h, scenario.alpha, &tmp, vx, vy, react, &mut rest[0]);
    }
    for (p, x) in u.iter_mut().enumerate() {
        *x += dt / 6.0 * (k[0][p] + 2.0 * k[1][p] + 2.0 * k[2][p] + k[3][p]);
    }
}

/// RK4 over `fine_steps`, storing frame `i` at fine step `⌊i·fine_steps/n_frames⌋`.
/// The returned trajectory carries the stacked aux channels given in `stored_aux`.
pub fn solve_adr(scenario: &ScenarioAdr, initial: &Field, aux: &AdrAux, stored_aux: Option<Field>) -> Result<Trajectory> {
    let grid = scenario.grid()?;
    if initial.grid() != &grid || initial.channels() != 1 {
        return Err(Error::ShapeMismatch("initial condition does not match the scenario grid".into()));
    }
    if aux.velocity.grid() != &grid || aux.reaction.grid() != &grid {
        return Err(Error::ShapeMismatch("aux fields do not match the scenario grid".into()));
    }
    let mut u = initial.values().to_vec();
    let mut frames = vec![initial.clone()];
    let mut step = 0;
    for i in 1..scenario.n_frames {
        let target = scenario.frame_step(i);
        while step < target {
            adr_step(scenario, &mut u, aux);
            step += 1;
            check_blow_up(&u, step)?;
        }
        frames.push(Field::new(grid.clone(), 1, u.clone())?);
    }
    let frame_dt = scenario.dt * scenario.fine_steps as f64 / scenario.n_frames as f64;
    Trajectory::new(frames, stored_aux, frame_dt)
}

/// Seed of trajectory `index` in a split.
pub fn trajectory_seed(seed: u64, split: Split, index: usize) -> u64 {
    rng::derive(rng::derive(seed, split as u64), index as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Valid = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

pub fn generate_1d_trajectory(scenario: &Scenario1d, seed: u64) -> Result<Trajectory> {
    let grid = scenario.grid()?;
    let u0 = make_initial_1d(&grid, scenario.ic_max_mode, scenario.ic_amplitude, seed)?;
    solve_1d(scenario, &u0)
}

/// One ADR trajectory; the Base variant stores zero aux channels as placeholders.
pub fn generate_adr_trajectory(scenario: &ScenarioAdr, seed: u64) -> Result<Trajectory> {
    let n_blobs = draw_blob_count(scenario, seed);
    let u0 = make_initial_blobs(scenario, n_blobs, seed)?;
    let aux = make_aux(scenario, seed)?;
    let stored = if scenario.variant == AdrVariant::Base {
        AdrAux::zeros(&scenario.grid()?).stacked()?
    } else {
        aux.stacked()?
    };
    solve_adr(scenario, &u0, &aux, Some(stored))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    OneD(Scenario1d),
    Adr(ScenarioAdr),
}

impl Scenario {
    pub fn seed(&self) -> u64 {
        match self {
            Scenario::OneD(s) => s.seed,
            Scenario::Adr(s) => s.seed,
        }
    }

    pub fn splits(&self) -> Splits {
        match self {
            Scenario::OneD(s) => s.splits,
            Scenario::Adr(s) => s.splits,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        let s = self.splits();
        match split {
            Split::Train => s.train,
            Split::Valid => s.valid,
            Split::Test => s.test,
        }
    }

    pub fn channel_roles(&self) -> Vec<String> {
        match self {
            Scenario::OneD(_) => vec!["u".into()],
            Scenario::Adr(_) => ["u", "velocity_x", "velocity_y", "reaction"].iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn trajectory(&self, split: Split, index: usize) -> Result<Trajectory> {
        let seed = trajectory_seed(self.seed(), split, index);
        match self {
            Scenario::OneD(s) => generate_1d_trajectory(s, seed),
            Scenario::Adr(s) => generate_adr_trajectory(s, seed),
        }
    }

    pub fn generate(&self, split: Split) -> Result<Vec<Trajectory>> {
        use rayon::prelude::*;
        (0..self.count(split)).into_par_iter().map(|i| self.trajectory(split, i)).collect()
    }
}

pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenario: Scenario,
    pub channel_roles: Vec<String>,
    pub state_channels: usize,
    pub files: Vec<(Split, Vec<String>)>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn trajectory_file(split: Split, i: usize) -> String {
    format!("{}_{i:05}.field", split.name())
}

/// Writes one field file per trajectory (state and aux channels per frame) plus a manifest.
pub fn write_dataset(
    dir: &Path,
    scenario: &Scenario,
    data: &[(Split, Vec<Trajectory>)],
    metadata: serde_json::Value,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (split, trajs) in data {
        let mut names = Vec::new();
        for (i, t) in trajs.iter().enumerate() {
            let name = trajectory_file(*split, i);
            let frames = t
                .frames
                .iter()
                .map(|f| match &t.aux {
                    Some(a) => Field::concat(&[f, a]),
                    None => Ok(f.clone()),
                })
                .collect::<Result<Vec<_>>>()?;
            // caller metadata (provenance stamps) is repeated in every file
            let mut meta = metadata.as_object().cloned().unwrap_or_default();
            meta.insert("dt".into(), t.dt.into());
            meta.insert("state_channels".into(), t.state_channels().into());
            write_fields(BufWriter::new(File::create(dir.join(&name))?), &frames, meta)?;
            names.push(name);
        }
        files.push((*split, names));
    }
    let manifest = DatasetManifest {
        scenario: scenario.clone(),
        channel_roles: scenario.channel_roles(),
        state_channels: 1,
        files,
        metadata,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(DATASET_MANIFEST))?), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_reader(BufReader::new(File::open(dir.join(DATASET_MANIFEST))?))?)
}

pub fn read_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Trajectory>> {
    let names = manifest
        .files
        .iter()
        .find(|(s, _)| *s == split)
        .map(|(_, n)| n.clone())
        .ok_or_else(|| Error::Format(format!("dataset has no {} split", split.name())))?;
    names
        .iter()
        .map(|name| {
            let (header, frames) = read_fields(BufReader::new(File::open(dir.join(name))?))?;
            let dt = header.meta.get("dt").and_then(|v| v.as_f64()).ok_or_else(|| Error::Format("missing dt".into()))?;
            let sc = manifest.state_channels;
            let aux = if header.channels > sc { Some(frames[0].select_channels(sc..header.channels)?) } else { None };
            let states = frames.iter().map(|f| f.select_channels(0..sc)).collect::<Result<Vec<_>>>()?;
            Trajectory::new(states, aux, dt)
        })
        .collect()
}
