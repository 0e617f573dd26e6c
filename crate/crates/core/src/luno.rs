//! Linearized pushforward of a last-block weight belief into a Gaussian
//! process over FNO output functions.
//!
//! The last block's pre-activation is linear in `θ = (Re R, Im R, W)`:
//!
//! ```text
//! z_i(x) = Σ_{m,j} Re R_mij φ_mj(x) + Im R_mij ϕ_mj(x) + Σ_j W_ij ψ_j(x) + b_i
//! φ_mj(x) =  s_m Re(ĥ_mj e_m(x)),   ϕ_mj(x) = −s_m Im(ĥ_mj e_m(x)),   ψ_j = v_j
//! ```
//!
//! with `s_m` the real-FFT synthesis weight of bin `m` and `e_m` its basis
//! function. The output Jacobian row for channel `c` at `x` is `g_c(x) ⊗ F(x)`,
//! where `g = ∂Q̃/∂z` at the MAP pre-activation and `F = (φ, ϕ, ψ)`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::belief::{Covariance, WeightBelief};
use crate::error::{Error, Result};
use crate::field::{fourier_interpolate, rfft_channel, Field, Grid, Points, TrigInterpolant};
use crate::fno::{synthesize, FnoModel, HiddenState, ModeSet};

/// Last-block features of one input: truncated spectrum and values of the
/// block input, plus the projection Jacobian at the output grid points.
#[derive(Debug, Clone)]
pub struct FeatureBank<'m> {
    model: &'m FnoModel,
    grid: Grid,
    target: Grid,
    modes: ModeSet,
    d: usize,
    out: usize,
    h_hat: Vec<Complex64>,
    v: Vec<f64>,
    pre: Vec<f64>,
    interp: TrigInterpolant,
    target_index: Vec<usize>,
    theta_map: Vec<f64>,
    /// `∂Q̃/∂z` per target point, `[t][c][i]`.
    jq: Vec<f64>,
}

impl<'m> FeatureBank<'m> {
    pub fn new(model: &'m FnoModel, hidden: &HiddenState, target: &Grid) -> Result<Self> {
        let cfg = model.config();
        let grid = hidden.grid.clone();
        if model.working_grid(target)? != grid {
            return Err(Error::ShapeMismatch(format!(
                "hidden state grid {:?} does not belong to output grid {:?}",
                grid.shape(),
                target.shape()
            )));
        }
        let modes = ModeSet::new(&grid, cfg.modes)?;
        let d = cfg.hidden_channels;
        let out = cfg.out_channels;
        let v_field = hidden.last_input().clone();
        let target_index: Vec<usize> = (0..target.len())
            .map(|t| {
                let idx = target.point_index(t);
                match grid.ndim() {
                    1 => idx[0],
                    _ => idx[0] * grid.shape()[1] + idx[1],
                }
            })
            .collect();
        let n = grid.len();
        let pre = hidden.last_preactivation.values().to_vec();
        let mut jq = vec![0.0; target.len() * out * d];
        let mut z = vec![0.0; d];
        for (t, &w) in target_index.iter().enumerate() {
            for i in 0..d {
                z[i] = pre[i * n + w];
            }
            let (_, jac) = model.projected_with_jacobian(&z);
            jq[t * out * d..(t + 1) * out * d].copy_from_slice(&jac);
        }
        Ok(Self {
            model,
            interp: TrigInterpolant::new(&v_field),
            v: v_field.into_values(),
            h_hat: hidden.last_hat.clone(),
            pre,
            grid,
            target: target.clone(),
            modes,
            d,
            out,
            target_index,
            theta_map: model.theta_last(),
            jq,
        })
    }

    pub fn theta_dim(&self) -> usize {
        2 * self.modes.len() * self.d * self.d + self.d * self.d
    }

    /// Length of `F(x)`: `2·M·d + d`.
    pub fn n_features(&self) -> usize {
        2 * self.modes.len() * self.d + self.d
    }

    pub fn out_channels(&self) -> usize {
        self.out
    }

    pub fn hidden_width(&self) -> usize {
        self.d
    }

    pub fn target(&self) -> &Grid {
        &self.target
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    /// `F(x)` at an arbitrary point, via analytic trig and Fourier interpolation of `v`.
    pub fn features_at_point(&self, x: &[f64], f: &mut [f64]) {
        let (md, d) = (self.modes.len() * self.d, self.d);
        for (m, &b) in self.modes.bins.iter().enumerate() {
            let e = self.grid.bin_basis(b, x);
            let s = self.modes.scale[m];
            for j in 0..d {
                let c = self.h_hat[m * d + j] * e;
                f[m * d + j] = s * c.re;
                f[md + m * d + j] = -s * c.im;
            }
        }
        self.interp.eval(x, &mut f[2 * md..]);
    }

    /// `F` at target grid point `t`, with index-exact phases and no interpolation.
    pub fn features_at_grid(&self, t: usize, f: &mut [f64]) {
        let (md, d) = (self.modes.len() * self.d, self.d);
        let w = self.target_index[t];
        let n = self.grid.len();
        for (m, &b) in self.modes.bins.iter().enumerate() {
            let e = self.grid.bin_basis_at_grid(b, w);
            let s = self.modes.scale[m];
            for j in 0..d {
                let c = self.h_hat[m * d + j] * e;
                f[m * d + j] = s * c.re;
                f[md + m * d + j] = -s * c.im;
            }
        }
        for j in 0..d {
            f[2 * md + j] = self.v[j * n + w];
        }
    }

    /// `z_i = Σ_f Θ_if F_f` for one point.
    fn contract(&self, theta: &[f64], f: &[f64], z: &mut [f64]) {
        let (mm, d) = (self.modes.len(), self.d);
        let s = mm * d * d;
        let md = mm * d;
        for (i, zi) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in 0..mm {
                let base = (m * d + i) * d;
                for j in 0..d {
                    acc += theta[base + j] * f[m * d + j] + theta[s + base + j] * f[md + m * d + j];
                }
            }
            for j in 0..d {
                acc += theta[2 * s + i * d + j] * f[2 * md + j];
            }
            *zi = acc;
        }
    }

    /// Jacobian row `g ⊗ F` in θ order for one output channel.
    fn jacobian_row(&self, g: &[f64], f: &[f64], row: &mut [f64]) {
        let (mm, d) = (self.modes.len(), self.d);
        let s = mm * d * d;
        let md = mm * d;
        for m in 0..mm {
            for i in 0..d {
                let base = (m * d + i) * d;
                for j in 0..d {
                    row[base + j] = g[i] * f[m * d + j];
                    row[s + base + j] = g[i] * f[md + m * d + j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                row[2 * s + i * d + j] = g[i] * f[2 * md + j];
            }
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_dim() {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                self.theta_dim()
            )));
        }
        Ok(())
    }

    /// θ-linear part of the last pre-activation at the target grid (`d × n`), via the inverse FFT.
    pub fn reconstruct_z_grid(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let (mm, d, n) = (self.modes.len(), self.d, self.grid.len());
        let s = mm * d * d;
        let mut mixed = vec![Complex64::new(0.0, 0.0); mm * d];
        for m in 0..mm {
            for i in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..d {
                    let k = (m * d + i) * d + j;
                    acc += Complex64::new(theta[k], theta[s + k]) * self.h_hat[m * d + j];
                }
                mixed[m * d + i] = acc;
            }
        }
        let mut full = vec![0.0; d * n];
        synthesize(&self.grid, &self.modes, &mixed, d, &mut full);
        let w = &theta[2 * s..];
        let nt = self.target.len();
        let mut z = vec![0.0; d * nt];
        for i in 0..d {
            for (t, &p) in self.target_index.iter().enumerate() {
                let mut acc = full[i * n + p];
                for j in 0..d {
                    acc += w[i * d + j] * self.v[j * n + p];
                }
                z[i * nt + t] = acc;
            }
        }
        Ok(z)
    }

    /// θ-linear part of the last pre-activation at arbitrary points (`d × n`).
    pub fn reconstruct_z_points(&self, theta: &[f64], points: &Points) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_points(points)?;
        let np = points.len();
        let mut f = vec![0.0; self.n_features()];
        let mut zi = vec![0.0; self.d];
        let mut z = vec![0.0; self.d * np];
        for (p, x) in points.iter().enumerate() {
            self.features_at_point(x, &mut f);
            self.contract(theta, &f, &mut zi);
            for i in 0..self.d {
                z[i * np + p] = zi[i];
            }
        }
        Ok(z)
    }

    fn check_points(&self, points: &Points) -> Result<()> {
        if points.ndim() != self.target.ndim() {
            return Err(Error::ShapeMismatch(format!(
                "{}-d points for a {}-d model",
                points.ndim(),
                self.target.ndim()
            )));
        }
        for x in points.iter() {
            self.target.check_point(x)?;
        }
        Ok(())
    }

    /// `J·δθ` at the target grid, channel-outer `out × n`.
    pub fn jvp_grid(&self, theta: &[f64]) -> Vec<f64> {
        let z = self.reconstruct_z_grid(theta).expect("theta dimension checked by caller");
        let (d, out, nt) = (self.d, self.out, self.target.len());
        let mut y = vec![0.0; out * nt];
        for t in 0..nt {
            let g = &self.jq[t * out * d..(t + 1) * out * d];
            for c in 0..out {
                y[c * nt + t] = (0..d).map(|i| g[c * d + i] * z[i * nt + t]).sum();
            }
        }
        y
    }

    /// `Jᵀ·y` for `y` on the target grid (channel-outer), via the forward FFT.
    pub fn vjp_grid(&self, y: &[f64]) -> Vec<f64> {
        let (mm, d, out, n, nt) = (self.modes.len(), self.d, self.out, self.grid.len(), self.target.len());
        let s = mm * d * d;
        let mut dz = vec![0.0; d * n];
        for (t, &p) in self.target_index.iter().enumerate() {
            let g = &self.jq[t * out * d..(t + 1) * out * d];
            for c in 0..out {
                let yc = y[c * nt + t];
                for i in 0..d {
                    dz[i * n + p] += g[c * d + i] * yc;
                }
            }
        }
        let mut theta = vec![0.0; self.theta_dim()];
        let mut spec = vec![Complex64::new(0.0, 0.0); self.grid.spectral_len()];
        for i in 0..d {
            let dzi = &dz[i * n..(i + 1) * n];
            rfft_channel(&self.grid, dzi, &mut spec);
            for (m, &b) in self.modes.bins.iter().enumerate() {
                let gm = spec[b] * self.modes.scale[m];
                for j in 0..d {
                    let k = (m * d + i) * d + j;
                    let c = gm * self.h_hat[m * d + j].conj();
                    theta[k] = c.re;
                    theta[s + k] = c.im;
                }
            }
            for j in 0..d {
                theta[2 * s + i * d + j] = dzi.iter().zip(&self.v[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum();
            }
        }
        theta
    }

    /// Dense Jacobian at the target grid, rows `c·n + t`, row-major `P` columns.
    pub fn grid_jacobian_dense(&self) -> Vec<f64> {
        let (p, d, out, nt) = (self.theta_dim(), self.d, self.out, self.target.len());
        let mut j = vec![0.0; out * nt * p];
        let mut f = vec![0.0; self.n_features()];
        for t in 0..nt {
            self.features_at_grid(t, &mut f);
            for c in 0..out {
                let g = &self.jq[(t * out + c) * d..(t * out + c + 1) * d];
                let r = c * nt + t;
                self.jacobian_row(g, &f, &mut j[r * p..(r + 1) * p]);
            }
        }
        j
    }

    /// Per-point data for point queries: features, projection Jacobian and mean.
    fn evaluate_points(&self, points: &Points) -> Result<Evaluated> {
        self.check_points(points)?;
        let (d, out, k) = (self.d, self.out, self.n_features());
        let np = points.len();
        let bias = &self.model.params().blocks.last().expect("at least one block").bias;
        let mut feats = vec![0.0; np * k];
        let mut g = vec![0.0; np * out * d];
        let mut mean = vec![0.0; out * np];
        let mut z = vec![0.0; d];
        for (p, x) in points.iter().enumerate() {
            let f = &mut feats[p * k..(p + 1) * k];
            self.features_at_point(x, f);
            self.contract(&self.theta_map, f, &mut z);
            for (zi, b) in z.iter_mut().zip(bias) {
                *zi += b;
            }
            let (y, jac) = self.model.projected_with_jacobian(&z);
            g[p * out * d..(p + 1) * out * d].copy_from_slice(&jac);
            for c in 0..out {
                mean[c * np + p] = y[c];
            }
        }
        Ok(Evaluated { n: np, feats, g, mean })
    }

    fn evaluate_grid(&self, mean: &Field) -> Evaluated {
        let k = self.n_features();
        let nt = self.target.len();
        let mut feats = vec![0.0; nt * k];
        for t in 0..nt {
            self.features_at_grid(t, &mut feats[t * k..(t + 1) * k]);
        }
        Evaluated { n: nt, feats, g: self.jq.clone(), mean: mean.values().to_vec() }
    }

    /// MAP pre-activation (bias included) at the target grid, `d × n`.
    pub fn map_preactivation_grid(&self) -> Vec<f64> {
        let (d, n, nt) = (self.d, self.grid.len(), self.target.len());
        let mut z = vec![0.0; d * nt];
        for i in 0..d {
            for (t, &p) in self.target_index.iter().enumerate() {
                z[i * nt + t] = self.pre[i * n + p];
            }
        }
        z
    }
}

struct Evaluated {
    n: usize,
    feats: Vec<f64>,
    g: Vec<f64>,
    mean: Vec<f64>,
}

/// Where to query the GP: the input's own grid, or arbitrary points in the domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Locations {
    Grid,
    Points(Points),
}

/// Function-valued GP for one input. Queries need no further full forward passes.
#[derive(Debug, Clone)]
pub struct PredictiveGp<'a> {
    model: &'a FnoModel,
    belief: &'a WeightBelief,
    bank: FeatureBank<'a>,
    mean: Field,
}

pub fn build_gp<'a>(model: &'a FnoModel, belief: &'a WeightBelief, input: &Field) -> Result<PredictiveGp<'a>> {
    if belief.mean() != model.theta_last().as_slice() {
        return Err(Error::BeliefMismatch("belief mean differs from the model's last-block parameters".into()));
    }
    let (mean, hidden) = model.forward_with_hidden(input)?;
    let bank = FeatureBank::new(model, &hidden, input.grid())?;
    Ok(PredictiveGp { model, belief, bank, mean })
}

impl<'a> PredictiveGp<'a> {
    pub fn model(&self) -> &FnoModel {
        self.model
    }

    pub fn belief(&self) -> &WeightBelief {
        self.belief
    }

    pub fn bank(&self) -> &FeatureBank<'a> {
        &self.bank
    }

    pub fn grid(&self) -> &Grid {
        self.mean.grid()
    }

    pub fn out_channels(&self) -> usize {
        self.bank.out
    }

    /// Forward output on the input grid.
    pub fn mean_field(&self) -> &Field {
        &self.mean
    }

    fn n_locations(&self, loc: &Locations) -> usize {
        match loc {
            Locations::Grid => self.grid().len(),
            Locations::Points(p) => p.len(),
        }
    }

    fn evaluate(&self, loc: &Locations) -> Result<Evaluated> {
        match loc {
            Locations::Grid => Ok(self.bank.evaluate_grid(&self.mean)),
            Locations::Points(p) => self.bank.evaluate_points(p),
        }
    }

    /// Mean `Q̃(m_z(x))`, channel-outer `out × n`.
    pub fn mean(&self, loc: &Locations) -> Result<Vec<f64>> {
        match loc {
            Locations::Grid => Ok(self.mean.values().to_vec()),
            Locations::Points(p) => Ok(self.bank.evaluate_points(p)?.mean),
        }
    }

    pub fn reconstruct_z(&self, theta: &[f64], loc: &Locations) -> Result<Vec<f64>> {
        match loc {
            Locations::Grid => self.bank.reconstruct_z_grid(theta),
            Locations::Points(p) => self.bank.reconstruct_z_points(theta, p),
        }
    }

    /// `J_θ·δθ`, channel-outer `out × n`.
    pub fn jvp_theta(&self, delta: &[f64], loc: &Locations) -> Result<Vec<f64>> {
        self.bank.check_theta(delta)?;
        match loc {
            Locations::Grid => Ok(self.bank.jvp_grid(delta)),
            Locations::Points(p) => {
                let ev = self.bank.evaluate_points(p)?;
                Ok(self.jvp_evaluated(delta, &ev))
            }
        }
    }

    fn jvp_evaluated(&self, delta: &[f64], ev: &Evaluated) -> Vec<f64> {
        let (d, out, k) = (self.bank.d, self.bank.out, self.bank.n_features());
        let mut y = vec![0.0; out * ev.n];
        let mut z = vec![0.0; d];
        for p in 0..ev.n {
            self.bank.contract(delta, &ev.feats[p * k..(p + 1) * k], &mut z);
            let g = &ev.g[p * out * d..(p + 1) * out * d];
            for c in 0..out {
                y[c * ev.n + p] = (0..d).map(|i| g[c * d + i] * z[i]).sum();
            }
        }
        y
    }

    /// `J·M` for the columns of `m` (`P × r`), giving `(out·n) × r`.
    fn jacobian_times(&self, m: &DMatrix<f64>, loc: &Locations, ev: &Evaluated) -> DMatrix<f64> {
        let rows = self.bank.out * ev.n;
        let mut out = DMatrix::zeros(rows, m.ncols());
        for k in 0..m.ncols() {
            let col = m.column(k);
            let y = match loc {
                Locations::Grid => self.bank.jvp_grid(col.as_slice()),
                Locations::Points(_) => self.jvp_evaluated(col.as_slice(), ev),
            };
            out.set_column(k, &nalgebra::DVector::from_vec(y));
        }
        out
    }

    /// `J(x₁)·J(x₂)ᵀ` over the full last-block parameter space.
    fn jjt(&self, a: &Evaluated, b: &Evaluated) -> DMatrix<f64> {
        let (d, out, k) = (self.bank.d, self.bank.out, self.bank.n_features());
        let mut m = DMatrix::zeros(out * a.n, out * b.n);
        for p in 0..a.n {
            let fa = &a.feats[p * k..(p + 1) * k];
            for q in 0..b.n {
                let fb = &b.feats[q * k..(q + 1) * k];
                let ff: f64 = fa.iter().zip(fb).map(|(x, y)| x * y).sum();
                for c1 in 0..out {
                    let g1 = &a.g[(p * out + c1) * d..(p * out + c1 + 1) * d];
                    for c2 in 0..out {
                        let g2 = &b.g[(q * out + c2) * d..(q * out + c2 + 1) * d];
                        let gg: f64 = g1.iter().zip(g2).map(|(x, y)| x * y).sum();
                        m[(c1 * a.n + p, c2 * b.n + q)] = gg * ff;
                    }
                }
            }
        }
        m
    }

    /// Covariance block matrix, rows `c₁·n₁ + p₁`, columns `c₂·n₂ + p₂`.
    pub fn cov(&self, loc1: &Locations, loc2: &Locations) -> Result<DMatrix<f64>> {
        let a = self.evaluate(loc1)?;
        let b = self.evaluate(loc2)?;
        let jjt = self.jjt(&a, &b);
        match self.belief.covariance() {
            Covariance::Isotropic { variance } => Ok(jjt * *variance),
            Covariance::LowRankLaplace(lr) => {
                let s = lr.prior_precision();
                let ja = self.jacobian_times(lr.factor(), loc1, &a);
                let jb = self.jacobian_times(lr.factor(), loc2, &b);
                let inner = lr.inner_solve(&jb.transpose())?;
                Ok(jjt / s - (ja * inner) * (lr.n_data() / s))
            }
        }
    }

    /// Hyperparameter-independent pieces of the marginal variance.
    pub fn prepare_variance(&self, loc: &Locations) -> Result<VarianceProfile> {
        let ev = self.evaluate(loc)?;
        let (d, out, k) = (self.bank.d, self.bank.out, self.bank.n_features());
        let mut jnorm2 = vec![0.0; out * ev.n];
        for p in 0..ev.n {
            let f = &ev.feats[p * k..(p + 1) * k];
            let ff: f64 = f.iter().map(|x| x * x).sum();
            for c in 0..out {
                let g = &ev.g[(p * out + c) * d..(p * out + c + 1) * d];
                jnorm2[c * ev.n + p] = ff * g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        Ok(match self.belief.covariance() {
            Covariance::Isotropic { .. } => VarianceProfile::Isotropic { jnorm2 },
            Covariance::LowRankLaplace(lr) => {
                let ju = self.jacobian_times(lr.eigenvectors(), loc, &ev);
                VarianceProfile::LowRank { jnorm2, ju, lambda: lr.eigenvalues().to_vec(), n_data: lr.n_data() }
            }
        })
    }

    /// Pointwise predictive std, channel-outer.
    pub fn marginal_std(&self, loc: &Locations) -> Result<Vec<f64>> {
        let prep = self.prepare_variance(loc)?;
        Ok(prep.variance(self.belief.hyperparameter()).into_iter().map(f64::sqrt).collect())
    }

    /// Lazily evaluable functions `mean + J·δθ_s`, deterministic per `(seed, s)`.
    pub fn sample_functions(&self, n_samples: usize, seed: u64) -> Vec<SampleFunction<'_, 'a>> {
        (0..n_samples as u64)
            .map(|s| SampleFunction { gp: self, delta: self.belief.sample_deviation(seed, s) })
            .collect()
    }

    pub fn n_points(&self, loc: &Locations) -> usize {
        self.n_locations(loc)
    }
}

/// Marginal variance as a function of the calibrated scalar.
#[derive(Debug, Clone)]
pub enum VarianceProfile {
    /// `var(h) = h·‖J_x‖²`.
    Isotropic { jnorm2: Vec<f64> },
    /// `var(σ) = (‖J_x‖² − ‖J_xU‖²)/σ + Σ_k (J_xU)_k² / (nλ_k + σ)`.
    LowRank { jnorm2: Vec<f64>, ju: DMatrix<f64>, lambda: Vec<f64>, n_data: f64 },
}

impl VarianceProfile {
    pub fn len(&self) -> usize {
        match self {
            Self::Isotropic { jnorm2 } | Self::LowRank { jnorm2, .. } => jnorm2.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variance(&self, h: f64) -> Vec<f64> {
        match self {
            Self::Isotropic { jnorm2 } => jnorm2.iter().map(|v| v * h).collect(),
            Self::LowRank { jnorm2, ju, lambda, n_data } => (0..jnorm2.len())
                .map(|r| {
                    let row = ju.row(r);
                    let inside: f64 = row.iter().map(|x| x * x).sum();
                    let low: f64 = row.iter().zip(lambda).map(|(x, l)| x * x / (n_data * l + h)).sum();
                    ((jnorm2[r] - inside).max(0.0) / h + low).max(0.0)
                })
                .collect(),
        }
    }
}

/// One parametric sample path of the linearized GP.
#[derive(Debug, Clone)]
pub struct SampleFunction<'g, 'a> {
    gp: &'g PredictiveGp<'a>,
    delta: Vec<f64>,
}

impl SampleFunction<'_, '_> {
    pub fn deviation(&self) -> &[f64] {
        &self.delta
    }

    /// Sample values at `loc`, channel-outer.
    pub fn eval(&self, loc: &Locations) -> Result<Vec<f64>> {
        let mut y = self.gp.mean(loc)?;
        for (a, b) in y.iter_mut().zip(self.gp.jvp_theta(&self.delta, loc)?) {
            *a += b;
        }
        Ok(y)
    }
}

/// Scalar GP on the augmented index set (input function, point, channel),
/// coded directly from the full-parameter Jacobian and `cov_matvec`.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedGp<'a> {
    model: &'a FnoModel,
    belief: &'a WeightBelief,
}

/// Jacobian row and mean of one augmented index.
struct AugmentedRow {
    mean: f64,
    row: Vec<f64>,
}

impl<'a> AugmentedGp<'a> {
    pub fn new(model: &'a FnoModel, belief: &'a WeightBelief) -> Result<Self> {
        if belief.mean() != model.theta_last().as_slice() {
            return Err(Error::BeliefMismatch("belief mean differs from the model's last-block parameters".into()));
        }
        Ok(Self { model, belief })
    }

    fn row(&self, input: &Field, x: &[f64], channel: usize) -> Result<AugmentedRow> {
        let cfg = self.model.config();
        if channel >= cfg.out_channels {
            return Err(Error::InvalidInput(format!("channel {channel} out of range")));
        }
        let (_, hidden) = self.model.forward_with_hidden(input)?;
        let grid = &hidden.grid;
        let d = cfg.hidden_channels;
        let modes = ModeSet::new(grid, cfg.modes)?;
        let block = self.model.params().blocks.last().expect("at least one block");
        let pts = Points::new(x.len(), x.to_vec())?;
        input.grid().check_point(x)?;
        let psi = fourier_interpolate(hidden.last_input(), &pts)?;
        let mm = modes.len();
        let s = mm * d * d;
        // Basis contributions e_m(x)·ĥ_mj · s_m per mode and hidden channel.
        let mut terms = vec![Complex64::new(0.0, 0.0); mm * d];
        for (m, &b) in modes.bins.iter().enumerate() {
            let e = grid.bin_basis(b, x);
            for j in 0..d {
                terms[m * d + j] = hidden.last_hat[m * d + j] * e * modes.scale[m];
            }
        }
        let mut z = block.bias.clone();
        for (i, zi) in z.iter_mut().enumerate() {
            for m in 0..mm {
                for j in 0..d {
                    *zi += (block.spectral[(m * d + i) * d + j] * terms[m * d + j]).re;
                }
            }
            for j in 0..d {
                *zi += block.weight[i * d + j] * psi[j];
            }
        }
        let (y, jac) = self.model.projected_with_jacobian(&z);
        let g = &jac[channel * d..(channel + 1) * d];
        let mut row = vec![0.0; 2 * s + d * d];
        for m in 0..mm {
            for i in 0..d {
                for j in 0..d {
                    let k = (m * d + i) * d + j;
                    // ∂/∂Re R = Re(term), ∂/∂Im R = Re(i·term) = −Im(term).
                    row[k] = g[i] * terms[m * d + j].re;
                    row[s + k] = -g[i] * terms[m * d + j].im;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                row[2 * s + i * d + j] = g[i] * psi[j];
            }
        }
        Ok(AugmentedRow { mean: y[channel], row })
    }

    pub fn mean(&self, input: &Field, x: &[f64], channel: usize) -> Result<f64> {
        Ok(self.row(input, x, channel)?.mean)
    }

    /// `k((a, x, c), (a', x', c'))`.
    pub fn cov(&self, a: (&Field, &[f64], usize), b: (&Field, &[f64], usize)) -> Result<f64> {
        let ra = self.row(a.0, a.1, a.2)?;
        let rb = self.row(b.0, b.1, b.2)?;
        let sb = self.belief.cov_matvec(&rb.row)?;
        Ok(ra.row.iter().zip(&sb).map(|(x, y)| x * y).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::{Activation, FnoConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn model(padding: usize, act: Activation) -> FnoModel {
        let mut cfg = FnoConfig::new(2, 2, 3, 2, 3);
        cfg.activation = act;
        cfg.padding = padding;
        let mut m = FnoModel::init(cfg, 1, 5).unwrap();
        let mut flat = m.params().flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        flat.iter_mut().for_each(|v| *v += 0.2 * rng.random_range(-1.0..1.0));
        m.params_mut().assign_flat(&flat).unwrap();
        m
    }

    fn input(n: usize, seed: u64) -> Field {
        let grid = Grid::line(n, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        Field::from_fn(grid, 2, |c, x| {
            let w = std::f64::consts::PI * x[0];
            a[2 * c] * w.sin() + a[2 * c + 1] * (2.0 * w).cos() + 0.3
        })
        .unwrap()
    }

    fn random_theta(p: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..p).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Full-forward Jacobian w.r.t. θ by 4th-order central differences, rows `c·n + t`.
    fn fd_jacobian(m: &FnoModel, a: &Field) -> DMatrix<f64> {
        let theta = m.theta_last();
        let rows = m.config().out_channels * a.grid().len();
        let h = 1e-3;
        let mut j = DMatrix::zeros(rows, theta.len());
        for k in 0..theta.len() {
            let at = |s: f64| {
                let mut mm = m.clone();
                let mut t = theta.clone();
                t[k] += s * h;
                mm.set_theta_last(&t).unwrap();
                mm.forward(a).unwrap().into_values()
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            for r in 0..rows {
                j[(r, k)] = (-p2[r] + 8.0 * p1[r] - 8.0 * m1[r] + m2[r]) / (12.0 * h);
            }
        }
        j
    }

    #[test]
    fn mean_preservation_and_reconstruction() {
        for padding in [0, 2] {
            let m = model(padding, Activation::Gelu);
            let a = input(12, 1);
            let belief = WeightBelief::isotropic(m.theta_last(), 1.0).unwrap();
            let gp = build_gp(&m, &belief, &a).unwrap();
            let fwd = m.forward(&a).unwrap();
            assert_eq!(gp.mean(&Locations::Grid).unwrap(), fwd.values());
            let pts = Locations::Points(a.grid().points());
            for (x, y) in gp.mean(&pts).unwrap().iter().zip(fwd.values()) {
                assert!((x - y).abs() < 1e-12);
            }
            let (_, hidden) = m.forward_with_hidden(&a).unwrap();
            let internal = gp.bank().map_preactivation_grid();
            let bias = &m.params().blocks.last().unwrap().bias;
            for loc in [Locations::Grid, pts.clone()] {
                let z = gp.reconstruct_z(&m.theta_last(), &loc).unwrap();
                for i in 0..3 {
                    for t in 0..12 {
                        assert!((z[i * 12 + t] + bias[i] - internal[i * 12 + t]).abs() < 1e-10);
                    }
                }
            }
            assert_eq!(hidden.last_preactivation.channels(), 3);
        }
    }

    #[test]
    fn reconstruction_is_linear() {
        let m = model(2, Activation::Gelu);
        let a = input(10, 2);
        let belief = WeightBelief::isotropic(m.theta_last(), 1.0).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let p = belief.dim();
        let (t1, t2) = (random_theta(p, 1), random_theta(p, 2));
        let mix: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| 0.7 * a - 1.3 * b).collect();
        let pts = Locations::Points(Points::from_1d(&[0.05, 0.77, 1.9]));
        for loc in [Locations::Grid, pts] {
            let z1 = gp.reconstruct_z(&t1, &loc).unwrap();
            let z2 = gp.reconstruct_z(&t2, &loc).unwrap();
            let zm = gp.reconstruct_z(&mix, &loc).unwrap();
            for k in 0..zm.len() {
                assert!((zm[k] - 0.7 * z1[k] + 1.3 * z2[k]).abs() < 1e-12);
            }
            assert!(gp.reconstruct_z(&vec![0.0; p], &loc).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let m = model(2, Activation::Gelu);
        let a = input(12, 3);
        let belief = WeightBelief::isotropic(m.theta_last(), 1.0).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let theta = m.theta_last();
        for s in 0..10 {
            let dir = random_theta(theta.len(), 100 + s);
            let jvp = gp.jvp_theta(&dir, &Locations::Grid).unwrap();
            let h = 1e-6;
            let at = |sign: f64| {
                let mut mm = m.clone();
                let t: Vec<f64> = theta.iter().zip(&dir).map(|(a, b)| a + sign * h * b).collect();
                mm.set_theta_last(&t).unwrap();
                mm.forward(&a).unwrap().into_values()
            };
            let (up, dn) = (at(1.0), at(-1.0));
            let fd: Vec<f64> = up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * h)).collect();
            let num: f64 = fd.iter().zip(&jvp).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(num / den < 1e-5, "{}", num / den);
        }
    }

    #[test]
    fn single_weight_feature_is_hidden_channel() {
        let d = 3;
        let mut cfg = FnoConfig::new(2, d, d, 2, 3);
        cfg.activation = Activation::Linear;
        cfg.projection_width = d;
        let mut m = FnoModel::init(cfg, 1, 2).unwrap();
        let proj = &mut m.params_mut().projection;
        for layer in [&mut proj.first, &mut proj.second] {
            layer.weight.iter_mut().enumerate().for_each(|(k, w)| *w = if k % (d + 1) == 0 { 1.0 } else { 0.0 });
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let a = input(12, 4);
        let belief = WeightBelief::isotropic(m.theta_last(), 1.0).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let (_, hidden) = m.forward_with_hidden(&a).unwrap();
        let p = belief.dim();
        let (i, j) = (2, 1);
        let mut e = vec![0.0; p];
        e[p - d * d + i * d + j] = 1.0;
        let y = gp.jvp_theta(&e, &Locations::Grid).unwrap();
        for c in 0..d {
            for t in 0..12 {
                let want = if c == i { hidden.last_input().channel(j)[t] } else { 0.0 };
                assert!((y[c * 12 + t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isotropic_cov_matches_dense_jacobian() {
        let m = model(2, Activation::Gelu);
        let a = input(8, 5);
        let belief = WeightBelief::isotropic(m.theta_last(), 1.0).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let j = fd_jacobian(&m, &a);
        let want = &j * j.transpose();
        let got = gp.cov(&Locations::Grid, &Locations::Grid).unwrap();
        assert!((&got - &want).norm() / want.norm() < 1e-8);
        let dense = DMatrix::from_row_slice(16, belief.dim(), &gp.bank().grid_jacobian_dense());
        assert!((&dense - &j).norm() / j.norm() < 1e-8);
    }

    #[test]
    fn low_rank_cov_matches_dense_sigma() {
        let m = model(0, Activation::Gelu);
        let a = input(8, 6);
        let p = m.config().theta_last_len(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = DMatrix::from_fn(p, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let belief = WeightBelief::low_rank(m.theta_last(), v.clone(), 0.5, 3.0).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let sigma = (&v * v.transpose() * 3.0 + DMatrix::identity(p, p) * 0.5).try_inverse().unwrap();
        let j = DMatrix::from_row_slice(16, p, &gp.bank().grid_jacobian_dense());
        let want = &j * sigma * j.transpose();
        let pts = Locations::Points(a.grid().points());
        for loc in [Locations::Grid, pts] {
            let got = gp.cov(&loc, &loc).unwrap();
            assert!((&got - &want).norm() / want.norm() < 1e-9);
            let std = gp.marginal_std(&loc).unwrap();
            for r in 0..16 {
                assert!((std[r] - want[(r, r)].sqrt()).abs() < 1e-12 * want[(r, r)].sqrt().max(1.0));
            }
        }
    }

    #[test]
    fn off_grid_path_agrees_with_grid_path() {
        let m = model(2, Activation::Gelu);
        let a = input(10, 7);
        let belief = WeightBelief::isotropic(m.theta_last(), 0.3).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let grid = gp.cov(&Locations::Grid, &Locations::Grid).unwrap();
        let pts = Locations::Points(a.grid().points());
        let off = gp.cov(&pts, &pts).unwrap();
        assert!((&grid - &off).amax() < 1e-9 * grid.amax().max(1.0));
    }

    #[test]
    fn cov_is_symmetric_psd_and_consistent_with_std() {
        let m = model(2, Activation::Gelu);
        let a = input(12, 8);
        let belief = WeightBelief::isotropic(m.theta_last(), 2.0).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..2.0)).collect();
        let mut xs2 = xs.clone();
        xs2.push(xs[3]);
        let loc = Locations::Points(Points::from_1d(&xs2));
        let k = gp.cov(&loc, &loc).unwrap();
        assert!((&k - k.transpose()).amax() < 1e-12 * k.amax());
        let jitter = 1e-10 * k.diagonal().mean();
        assert!((k.clone() + DMatrix::identity(k.nrows(), k.nrows()) * jitter).cholesky().is_some());
        let std = gp.marginal_std(&loc).unwrap();
        for r in 0..k.nrows() {
            assert!((std[r] - k[(r, r)].sqrt()).abs() < 1e-12 * k.amax().sqrt().max(1.0));
        }
        // duplicated point gives duplicated rows
        assert!((k.row(3) - k.row(32)).amax() < 1e-12 * k.amax());
        // std scales linearly in the prior std
        let b4 = belief.with_hyperparameter(8.0).unwrap();
        let gp4 = build_gp(&m, &b4, &a).unwrap();
        for (s1, s2) in std.iter().zip(gp4.marginal_std(&loc).unwrap()) {
            assert!((s2 - 2.0 * s1).abs() < 1e-12 * s1.max(1.0));
        }
    }

    #[test]
    fn zero_variance_is_deterministic() {
        let m = model(2, Activation::Gelu);
        let a = input(12, 9);
        let belief = WeightBelief::isotropic(m.theta_last(), 0.0).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        assert!(gp.marginal_std(&Locations::Grid).unwrap().iter().all(|&s| s == 0.0));
        for f in gp.sample_functions(3, 1) {
            assert_eq!(f.eval(&Locations::Grid).unwrap(), gp.mean(&Locations::Grid).unwrap());
        }
    }

    #[test]
    fn belief_mismatch_is_rejected() {
        let m = model(0, Activation::Gelu);
        let mut mean = m.theta_last();
        mean[0] += 1.0;
        let belief = WeightBelief::isotropic(mean, 1.0).unwrap();
        assert!(matches!(build_gp(&m, &belief, &input(8, 1)), Err(Error::BeliefMismatch(_))));
    }

    #[test]
    fn currying_matches_augmented_index_gp() {
        let m = model(2, Activation::Gelu);
        let p = m.config().theta_last_len(1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v = DMatrix::from_fn(p, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let belief = WeightBelief::low_rank(m.theta_last(), v, 0.8, 2.0).unwrap();
        let aug = AugmentedGp::new(&m, &belief).unwrap();
        for s in 0..5 {
            let a = input(12, 20 + s);
            let gp = build_gp(&m, &belief, &a).unwrap();
            let x = rng.random_range(0.0..2.0);
            let c = rng.random_range(0..2);
            let loc = Locations::Points(Points::from_1d(&[x]));
            let mean = gp.mean(&loc).unwrap()[c];
            let var = gp.marginal_std(&loc).unwrap()[c].powi(2);
            let am = aug.mean(&a, &[x], c).unwrap();
            let av = aug.cov((&a, &[x], c), (&a, &[x], c)).unwrap();
            assert!((mean - am).abs() < 1e-12, "{mean} {am}");
            assert!((var - av).abs() < 1e-12 * av.max(1.0), "{var} {av}");
        }
    }

    #[test]
    fn samples_are_resolution_agnostic() {
        let m = model(2, Activation::Gelu);
        let a = input(12, 11);
        let belief = WeightBelief::isotropic(m.theta_last(), 0.5).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        assert!(gp.sample_functions(0, 1).is_empty());
        let fine = Grid::line(24, 2.0).unwrap().points();
        for f in gp.sample_functions(3, 4) {
            let coarse = f.eval(&Locations::Grid).unwrap();
            let refined = f.eval(&Locations::Points(fine.clone())).unwrap();
            for c in 0..2 {
                for t in 0..12 {
                    assert!((coarse[c * 12 + t] - refined[c * 24 + 2 * t]).abs() < 1e-10);
                }
            }
        }
        let again = gp.sample_functions(2, 4);
        assert_eq!(again[1].deviation(), gp.sample_functions(3, 4)[1].deviation());
    }

    #[test]
    fn sample_std_matches_marginal_std() {
        let m = model(0, Activation::Gelu);
        let a = input(8, 12);
        let belief = WeightBelief::isotropic(m.theta_last(), 0.1).unwrap();
        let gp = build_gp(&m, &belief, &a).unwrap();
        let loc = Locations::Points(Points::from_1d(&[0.3, 1.1]));
        let std = gp.marginal_std(&loc).unwrap();
        let mean = gp.mean(&loc).unwrap();
        let n = 10_000;
        let mut acc = vec![0.0; 4];
        for f in gp.sample_functions(n, 2) {
            for (k, y) in f.eval(&loc).unwrap().iter().enumerate() {
                acc[k] += (y - mean[k]).powi(2);
            }
        }
        for k in 0..4 {
            let emp = (acc[k] / n as f64).sqrt();
            // std of the sample std ≈ σ/√(2n)
            assert!((emp - std[k]).abs() < 5.0 * std[k] / (2.0 * n as f64).sqrt(), "{emp} {}", std[k]);
        }
    }
}
