//! Gaussian beliefs over the last Fourier block's parameters.
//!
//! The parameter vector is `θ = (Re R row-major, Im R, W)` of the final block,
//! `P = 2·M·d² + d²` entries for `M` retained modes and hidden width `d`.
//! The low-rank Laplace covariance is `Σ = (n·V·Vᵀ + σ·I)⁻¹`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Grid;
use crate::fno::{FnoModel, HiddenState};
use crate::luno::FeatureBank;

/// Eigen-form of the low-rank factor: `V·Vᵀ = U·diag(λ)·Uᵀ` with orthonormal `U`.
#[derive(Debug, Clone)]
struct EigenFactor {
    u: DMatrix<f64>,
    lambda: Vec<f64>,
}

impl EigenFactor {
    fn new(v: &DMatrix<f64>) -> Self {
        if v.ncols() == 0 {
            return Self { u: DMatrix::zeros(v.nrows(), 0), lambda: Vec::new() };
        }
        let eig = SymmetricEigen::new(v.transpose() * v);
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&k| eig.eigenvalues[k] > 1e-13 * max && max > 0.0).collect();
        let mut u = DMatrix::zeros(v.nrows(), keep.len());
        let mut lambda = Vec::with_capacity(keep.len());
        for (c, &k) in keep.iter().enumerate() {
            let mu = eig.eigenvalues[k];
            let col = v * eig.eigenvectors.column(k) / mu.sqrt();
            u.set_column(c, &col);
            lambda.push(mu);
        }
        Self { u, lambda }
    }
}

#[derive(Debug, Clone)]
pub struct LowRankLaplace {
    v: DMatrix<f64>,
    prior_precision: f64,
    n_data: f64,
    factor: Arc<EigenFactor>,
}

impl LowRankLaplace {
    pub fn new(v: DMatrix<f64>, prior_precision: f64, n_data: f64) -> Result<Self> {
        check_positive("prior precision", prior_precision)?;
        check_positive("data count", n_data)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("low-rank factor".into()));
        }
        let factor = Arc::new(EigenFactor::new(&v));
        Ok(Self { v, prior_precision, n_data, factor })
    }

    /// `V`, `P × r`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn n_data(&self) -> f64 {
        self.n_data
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    /// Orthonormal basis of `range(V)`, `P × k`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.factor.u
    }

    /// Nonzero eigenvalues of `V·Vᵀ`, matching [`Self::eigenvectors`].
    pub fn eigenvalues(&self) -> &[f64] {
        &self.factor.lambda
    }

    /// Solves `(σ·I + n·VᵀV)·X = B`.
    pub fn inner_solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r = self.rank();
        let m = DMatrix::identity(r, r) * self.prior_precision + (self.v.transpose() * &self.v) * self.n_data;
        let chol = m.cholesky().ok_or_else(|| Error::LinAlg("Woodbury inner system not positive definite".into()))?;
        Ok(chol.solve(b))
    }
}

#[derive(Debug, Clone)]
pub enum Covariance {
    Isotropic { variance: f64 },
    LowRankLaplace(LowRankLaplace),
}

#[derive(Debug, Clone)]
pub struct WeightBelief {
    mean: Vec<f64>,
    covariance: Covariance,
}

fn check_positive(what: &str, x: f64) -> Result<()> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::InvalidInput(format!("{what} must be positive, got {x}")));
    }
    Ok(())
}

impl WeightBelief {
    /// `N(mean, variance·I)`; a zero variance gives the deterministic limit.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance >= 0.0) {
            return Err(Error::InvalidInput(format!("variance must be nonnegative, got {variance}")));
        }
        Ok(Self { mean, covariance: Covariance::Isotropic { variance } })
    }

    pub fn low_rank(mean: Vec<f64>, v: DMatrix<f64>, prior_precision: f64, n_data: f64) -> Result<Self> {
        if v.nrows() != mean.len() {
            return Err(Error::ShapeMismatch(format!("factor has {} rows, mean has {}", v.nrows(), mean.len())));
        }
        Ok(Self { mean, covariance: Covariance::LowRankLaplace(LowRankLaplace::new(v, prior_precision, n_data)?) })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The calibrated scalar: variance (isotropic) or prior precision (Laplace).
    pub fn hyperparameter(&self) -> f64 {
        match &self.covariance {
            Covariance::Isotropic { variance } => *variance,
            Covariance::LowRankLaplace(lr) => lr.prior_precision,
        }
    }

    /// Same belief with the calibrated scalar replaced; the factorization is shared.
    pub fn with_hyperparameter(&self, h: f64) -> Result<Self> {
        let covariance = match &self.covariance {
            Covariance::Isotropic { .. } => {
                return Self::isotropic(self.mean.clone(), h);
            }
            Covariance::LowRankLaplace(lr) => {
                check_positive("prior precision", h)?;
                Covariance::LowRankLaplace(LowRankLaplace { prior_precision: h, ..lr.clone() })
            }
        };
        Ok(Self { mean: self.mean.clone(), covariance })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("vector has {} entries, belief has {}", x.len(), self.dim())));
        }
        Ok(())
    }

    /// `Σ·x` without forming `Σ`.
    pub fn cov_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match &self.covariance {
            Covariance::Isotropic { variance } => Ok(x.iter().map(|v| v * variance).collect()),
            Covariance::LowRankLaplace(lr) => {
                let s = lr.prior_precision;
                let xv = DVector::from_column_slice(x);
                let vtx = lr.v.transpose() * &xv;
                let inner = lr.inner_solve(&DMatrix::from_column_slice(vtx.len(), 1, vtx.as_slice()))?;
                let corr = &lr.v * inner.column(0);
                Ok(x.iter().zip(corr.iter()).map(|(a, c)| a / s - lr.n_data / s * c).collect())
            }
        }
    }

    /// Deviation `θ − μ` of sample `index` for `seed`.
    pub fn sample_deviation(&self, seed: u64, index: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, index);
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.transform_normal(&eps)
    }

    /// Maps a standard normal vector to `N(0, Σ)` via the symmetric square root.
    pub fn transform_normal(&self, eps: &[f64]) -> Vec<f64> {
        match &self.covariance {
            Covariance::Isotropic { variance } => {
                let s = variance.sqrt();
                eps.iter().map(|e| e * s).collect()
            }
            Covariance::LowRankLaplace(lr) => {
                let base = 1.0 / lr.prior_precision.sqrt();
                let f = &lr.factor;
                let e = DVector::from_column_slice(eps);
                let mut proj = f.u.transpose() * &e;
                for (p, l) in proj.iter_mut().zip(&f.lambda) {
                    *p *= 1.0 / (lr.n_data * l + lr.prior_precision).sqrt() - base;
                }
                let corr = &f.u * proj;
                eps.iter().zip(corr.iter()).map(|(a, c)| a * base + c).collect()
            }
        }
    }

    pub fn sample_theta(&self, n_samples: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..n_samples as u64).map(|s| self.sample_deviation(seed, s)).collect()
    }
}

/// Top eigenpairs of the GGN, `V = U·diag(√λ)`.
#[derive(Debug, Clone)]
pub struct GgnLowRank {
    pub v: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Largest relative Ritz residual (0 for the Gram route).
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    pub tol: f64,
    /// Iteration cap as a multiple of the rank.
    pub max_iter_factor: usize,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter_factor: 10, seed: 0 }
    }
}

/// Rank-`r` GGN of the mean Gaussian likelihood `H = mean_b J_bᵀJ_b / noise_var`
/// over the last-block parameters, one feature bank per datum.
pub fn ggn_lowrank(
    model: &FnoModel,
    hiddens: &[HiddenState],
    target: &Grid,
    noise_var: f64,
    rank: usize,
) -> Result<GgnLowRank> {
    ggn_lowrank_with(model, hiddens, target, noise_var, rank, LanczosOptions::default())
}

pub fn ggn_lowrank_with(
    model: &FnoModel,
    hiddens: &[HiddenState],
    target: &Grid,
    noise_var: f64,
    rank: usize,
    opts: LanczosOptions,
) -> Result<GgnLowRank> {
    check_positive("noise variance", noise_var)?;
    if hiddens.is_empty() {
        return Err(Error::InvalidInput("no data for the GGN".into()));
    }
    let banks = hiddens.iter().map(|h| FeatureBank::new(model, h, target)).collect::<Result<Vec<_>>>()?;
    let p = banks[0].theta_dim();
    let rows_per = banks[0].out_channels() * target.len();
    let total_rows = rows_per * banks.len();
    if rank > p.min(total_rows) {
        return Err(Error::InvalidConfig(format!("rank {rank} exceeds min(P={p}, outputs={total_rows})")));
    }
    let scale = 1.0 / (banks.len() as f64 * noise_var);
    if total_rows <= p {
        gram_route(&banks, scale, rank)
    } else {
        let op = |x: &[f64]| -> Vec<f64> {
            let parts: Vec<Vec<f64>> = banks.par_iter().map(|b| b.vjp_grid(&b.jvp_grid(x))).collect();
            let mut acc = vec![0.0; p];
            for part in &parts {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= scale);
            acc
        };
        let (lambda, u, residual) = lanczos_top(op, p, rank, opts)?;
        Ok(assemble(u, lambda, residual))
    }
}

fn assemble(u: DMatrix<f64>, lambda: Vec<f64>, residual: f64) -> GgnLowRank {
    let mut v = u;
    for (c, l) in lambda.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        v.column_mut(c).iter_mut().for_each(|x| *x *= s);
    }
    GgnLowRank { v, eigenvalues: lambda.iter().map(|l| l.max(0.0)).collect(), residual }
}

/// Eigenpairs from the Gram matrix `J·Jᵀ` when the stacked Jacobian is short.
fn gram_route(banks: &[FeatureBank], scale: f64, rank: usize) -> Result<GgnLowRank> {
    let p = banks[0].theta_dim();
    let rows_per = banks[0].out_channels() * banks[0].target_len();
    let mut j = DMatrix::zeros(rows_per * banks.len(), p);
    for (b, bank) in banks.iter().enumerate() {
        let jb = bank.grid_jacobian_dense();
        for r in 0..rows_per {
            for c in 0..p {
                j[(b * rows_per + r, c)] = jb[r * p + c];
            }
        }
    }
    let gram = (&j * j.transpose()) * scale;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut v = DMatrix::zeros(p, rank);
    let mut lambda = Vec::with_capacity(rank);
    for (c, &k) in order.iter().take(rank).enumerate() {
        // V column = Jᵀq·√scale, which has squared norm λ.
        let col = j.transpose() * eig.eigenvectors.column(k) * scale.sqrt();
        v.set_column(c, &col);
        lambda.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(GgnLowRank { v, eigenvalues: lambda, residual: 0.0 })
}

/// Lanczos with full reorthogonalization for the `rank` largest eigenpairs
/// of a symmetric PSD operator on `ℝ^p`.
pub fn lanczos_top<F>(op: F, p: usize, rank: usize, opts: LanczosOptions) -> Result<(Vec<f64>, DMatrix<f64>, f64)>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if rank == 0 {
        return Ok((Vec::new(), DMatrix::zeros(p, 0), 0.0));
    }
    let max_iter = (opts.max_iter_factor * rank).max(rank + 1).min(p);
    let mut rng = crate::rng::stream(opts.seed, 0);
    let mut fresh = |q: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..4 {
            let mut x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            reorthogonalize(&mut x, q);
            reorthogonalize(&mut x, q);
            let n = norm(&x);
            if n > 1e-8 {
                x.iter_mut().for_each(|v| *v /= n);
                return Some(x);
            }
        }
        None
    };
    let mut q: Vec<Vec<f64>> = vec![fresh(&[]).expect("nonzero start vector")];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut scale = 0.0f64;
    let mut last = (Vec::new(), DMatrix::zeros(0, 0), f64::INFINITY);
    loop {
        let k = q.len() - 1;
        let mut w = op(&q[k]);
        let a = dot(&q[k], &w);
        alpha.push(a);
        reorthogonalize(&mut w, &q);
        reorthogonalize(&mut w, &q);
        let b = norm(&w);
        scale = scale.max(a.abs()).max(b);
        let m = alpha.len();
        let done = m == max_iter || m == p;
        if m >= rank && (m % 5 == 0 || done || b <= 1e-12 * scale) {
            let (theta, s) = tridiagonal_eigen(&alpha, &beta);
            let top = theta.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            let resid = (0..rank).map(|i| (b * s[(m - 1, i)]).abs() / top).fold(0.0, f64::max);
            last = (theta, s, resid);
            if resid <= opts.tol || m == p {
                break;
            }
        }
        if done {
            break;
        }
        if b <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            // Invariant subspace found; continue in its orthogonal complement.
            match fresh(&q) {
                Some(next) => {
                    beta.push(0.0);
                    q.push(next);
                }
                None => break,
            }
        } else {
            beta.push(b);
            q.push(w.iter().map(|v| v / b).collect());
        }
    }
    let (theta, s, resid) = last;
    if resid > opts.tol {
        return Err(Error::NotConverged { residual: resid });
    }
    let m = theta.len();
    let mut u = DMatrix::zeros(p, rank);
    for i in 0..rank {
        let col = u.column_mut(i);
        let mut col = col;
        for j in 0..m {
            let c = s[(j, i)];
            for (x, qv) in col.iter_mut().zip(&q[j]) {
                *x += c * qv;
            }
        }
    }
    Ok((theta[..rank].to_vec(), u, resid))
}

/// Eigenpairs of the symmetric tridiagonal matrix, sorted descending.
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let theta = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut s = DMatrix::zeros(m, m);
    for (c, &k) in order.iter().enumerate() {
        s.set_column(c, &eig.eigenvectors.column(k));
    }
    (theta, s)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn reorthogonalize(w: &mut [f64], q: &[Vec<f64>]) {
    for qi in q {
        let c = dot(qi, w);
        for (x, y) in w.iter_mut().zip(qi) {
            *x -= c * y;
        }
    }
}

pub const BELIEF_MANIFEST: &str = "belief.json";
pub const BELIEF_BUFFERS: &str = "belief.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefKind {
    Isotropic,
    LowRankLaplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefManifest {
    pub kind: BeliefKind,
    pub dim: usize,
    pub rank: usize,
    /// Variance (isotropic) or prior precision (Laplace).
    pub hyperparameter: f64,
    pub n_data: Option<f64>,
    pub dtype: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Writes the manifest plus raw little-endian buffers: mean, then `V` column-major.
pub fn save_belief(dir: &Path, belief: &WeightBelief, metadata: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (kind, rank, n_data) = match &belief.covariance {
        Covariance::Isotropic { .. } => (BeliefKind::Isotropic, 0, None),
        Covariance::LowRankLaplace(lr) => (BeliefKind::LowRankLaplace, lr.rank(), Some(lr.n_data)),
    };
    let manifest = BeliefManifest {
        kind,
        dim: belief.dim(),
        rank,
        hyperparameter: belief.hyperparameter(),
        n_data,
        dtype: crate::field::FIELD_DTYPE.into(),
        metadata,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(BELIEF_MANIFEST))?), &manifest)?;
    let mut w = BufWriter::new(File::create(dir.join(BELIEF_BUFFERS))?);
    for v in &belief.mean {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Covariance::LowRankLaplace(lr) = &belief.covariance {
        for v in lr.v.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_belief(dir: &Path) -> Result<(WeightBelief, BeliefManifest)> {
    let manifest: BeliefManifest = serde_json::from_reader(BufReader::new(File::open(dir.join(BELIEF_MANIFEST))?))?;
    let mut bytes = Vec::new();
    File::open(dir.join(BELIEF_BUFFERS))?.read_to_end(&mut bytes)?;
    let expected = manifest.dim * (1 + manifest.rank) * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!("belief buffer has {} bytes, expected {expected}", bytes.len())));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mean = vals[..manifest.dim].to_vec();
    let belief = match manifest.kind {
        BeliefKind::Isotropic => WeightBelief::isotropic(mean, manifest.hyperparameter)?,
        BeliefKind::LowRankLaplace => {
            let n = manifest.n_data.ok_or_else(|| Error::Format("low-rank belief without n_data".into()))?;
            let v = DMatrix::from_column_slice(manifest.dim, manifest.rank, &vals[manifest.dim..]);
            WeightBelief::low_rank(mean, v, manifest.hyperparameter, n)?
        }
    };
    Ok((belief, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field;
    use crate::fno::{Activation, FnoConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn dense_sigma(v: &DMatrix<f64>, s: f64, n: f64) -> DMatrix<f64> {
        let p = v.nrows();
        (v * v.transpose() * n + DMatrix::identity(p, p) * s).try_inverse().unwrap()
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let v = random_matrix(50, 50, 1);
        let b = WeightBelief::low_rank(vec![0.0; 50], v.clone(), 0.7, 3.0).unwrap();
        let x = random_vec(50, 2);
        let got = b.cov_matvec(&x).unwrap();
        let want = dense_sigma(&v, 0.7, 3.0) * DVector::from_vec(x);
        let err = (DVector::from_vec(got) - &want).norm() / want.norm();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn woodbury_identity_residual() {
        let v = random_matrix(40, 5, 3);
        let b = WeightBelief::low_rank(vec![0.0; 40], v.clone(), 0.3, 7.0).unwrap();
        let x = random_vec(40, 4);
        let y = DVector::from_vec(b.cov_matvec(&x).unwrap());
        let back = (&v * v.transpose() * 7.0 + DMatrix::identity(40, 40) * 0.3) * y;
        let x = DVector::from_vec(x);
        assert!((back - &x).norm() < 1e-9 * x.norm());
    }

    #[test]
    fn zero_factor_is_prior() {
        let b = WeightBelief::low_rank(vec![0.0; 6], DMatrix::zeros(6, 2), 4.0, 10.0).unwrap();
        let x = random_vec(6, 5);
        for (a, c) in b.cov_matvec(&x).unwrap().iter().zip(&x) {
            assert!((a - c / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn covariance_is_symmetric() {
        let b = WeightBelief::low_rank(vec![0.0; 30], random_matrix(30, 4, 6), 0.5, 2.0).unwrap();
        let (x, y) = (random_vec(30, 7), random_vec(30, 8));
        let l = dot(&b.cov_matvec(&x).unwrap(), &y);
        let r = dot(&x, &b.cov_matvec(&y).unwrap());
        assert!((l - r).abs() < 1e-12 * l.abs().max(1.0));
    }

    #[test]
    fn square_root_reproduces_covariance() {
        // transform_normal is a symmetric A with A² = Σ; check A·A·x against Σ·x.
        let v = random_matrix(12, 3, 9);
        let b = WeightBelief::low_rank(vec![0.0; 12], v.clone(), 0.8, 5.0).unwrap();
        let sigma = dense_sigma(&v, 0.8, 5.0);
        let mut a = DMatrix::zeros(12, 12);
        for k in 0..12 {
            let mut e = vec![0.0; 12];
            e[k] = 1.0;
            a.set_column(k, &DVector::from_vec(b.transform_normal(&e)));
        }
        assert!((&a - a.transpose()).norm() < 1e-12);
        assert!((&a * &a - &sigma).norm() < 1e-12 * sigma.norm());
    }

    #[test]
    fn sample_moments_match() {
        let v = random_matrix(20, 3, 10);
        let b = WeightBelief::low_rank(vec![0.0; 20], v.clone(), 1.5, 2.0).unwrap();
        let sigma = dense_sigma(&v, 1.5, 2.0);
        let n = 100_000;
        let samples = b.sample_theta(n, 11);
        let mut cov = DMatrix::<f64>::zeros(20, 20);
        let mut sq = DMatrix::<f64>::zeros(20, 20);
        for s in &samples {
            for i in 0..20 {
                for j in 0..20 {
                    let x = s[i] * s[j];
                    cov[(i, j)] += x;
                    sq[(i, j)] += x * x;
                }
            }
        }
        for i in 0..20 {
            for j in 0..20 {
                let m = cov[(i, j)] / n as f64;
                let var = sq[(i, j)] / n as f64 - m * m;
                let se = (var / n as f64).sqrt();
                assert!((m - sigma[(i, j)]).abs() < 5.0 * se, "({i},{j}) {m} vs {}", sigma[(i, j)]);
            }
        }
    }

    #[test]
    fn isotropic_samples() {
        let b = WeightBelief::isotropic(vec![0.0; 3], 0.25).unwrap();
        let s = b.sample_theta(100_000, 1);
        for k in 0..3 {
            let mean = s.iter().map(|x| x[k]).sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|x| x[k] * x[k]).sum::<f64>() / s.len() as f64;
            assert!(mean.abs() < 5.0 * (0.25f64 / 1e5).sqrt());
            assert!((var / 0.25 - 1.0).abs() < 0.05);
        }
        assert_eq!(b.sample_theta(4, 9), b.sample_theta(4, 9));
        assert_ne!(b.sample_theta(1, 9), b.sample_theta(1, 10));
        assert!(WeightBelief::isotropic(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn lanczos_recovers_top_eigenpairs() {
        let a = random_matrix(60, 8, 12);
        let h = &a * a.transpose();
        let op = |x: &[f64]| (&h * DVector::from_column_slice(x)).as_slice().to_vec();
        let (lambda, u, _) = lanczos_top(op, 60, 4, LanczosOptions::default()).unwrap();
        let eig = SymmetricEigen::new(h.clone());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for k in 0..4 {
            assert!((lambda[k] - ev[k]).abs() < 1e-8 * ev[0]);
            let hu = &h * u.column(k);
            assert!((hu - u.column(k) * lambda[k]).norm() < 1e-6 * ev[0]);
        }
    }

    #[test]
    fn lanczos_handles_low_rank_operator() {
        // rank-3 operator, ask for 5: breakdown must restart cleanly.
        let a = random_matrix(30, 3, 13);
        let h = &a * a.transpose();
        let op = |x: &[f64]| (&h * DVector::from_column_slice(x)).as_slice().to_vec();
        let (lambda, _, _) = lanczos_top(op, 30, 5, LanczosOptions::default()).unwrap();
        assert!(lambda[3].abs() < 1e-8 * lambda[0] && lambda[4].abs() < 1e-8 * lambda[0]);
        assert!(lambda.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }

    fn tiny_setup(out: usize, n: usize) -> (FnoModel, Vec<HiddenState>, Grid) {
        let mut cfg = FnoConfig::new(2, out, 2, 2, 2);
        cfg.activation = Activation::Gelu;
        let model = FnoModel::init(cfg, 1, 3).unwrap();
        let grid = Grid::line(n, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hiddens = (0..3)
            .map(|_| {
                let f = Field::new(grid.clone(), 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                model.forward_with_hidden(&f).unwrap().1
            })
            .collect();
        (model, hiddens, grid)
    }

    fn dense_ggn(model: &FnoModel, hiddens: &[HiddenState], grid: &Grid) -> DMatrix<f64> {
        let p = model.config().theta_last_len(1);
        let mut h = DMatrix::zeros(p, p);
        for hs in hiddens {
            let bank = FeatureBank::new(model, hs, grid).unwrap();
            let j = bank.grid_jacobian_dense();
            let j = DMatrix::from_row_slice(j.len() / p, p, &j);
            h += j.transpose() * j;
        }
        h / hiddens.len() as f64
    }

    #[test]
    fn gram_and_lanczos_routes_agree_with_dense() {
        // P = 2·2·4 + 4 = 20. Gram route: 3 data × 1 out × 4 points = 12 ≤ 20.
        let (model, hiddens, grid) = tiny_setup(1, 4);
        let dense = dense_ggn(&model, &hiddens, &grid);
        let eig = SymmetricEigen::new(dense.clone());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let gram = ggn_lowrank(&model, &hiddens, &grid, 1.0, 12).unwrap();
        assert!((&gram.v * gram.v.transpose() - &dense).norm() < 1e-10 * dense.norm());
        // Lanczos route: 3 × 2 out × 8 points = 48 > 20.
        let (model, hiddens, grid) = tiny_setup(2, 8);
        let dense = dense_ggn(&model, &hiddens, &grid);
        let low = ggn_lowrank(&model, &hiddens, &grid, 1.0, 6).unwrap();
        let eig = SymmetricEigen::new(dense.clone());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for k in 0..6 {
            assert!((low.eigenvalues[k] - ev[k]).abs() < 1e-8 * ev[0]);
        }
        assert!(low.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_projection_gives_zero_factor() {
        let (mut model, _, grid) = tiny_setup(1, 8);
        let proj = &mut model.params_mut().projection.second;
        proj.weight.iter_mut().for_each(|w| *w = 0.0);
        let f = Field::new(grid.clone(), 2, (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let hidden = model.forward_with_hidden(&f).unwrap().1;
        let low = ggn_lowrank(&model, &[hidden], &grid, 1.0, 3).unwrap();
        assert!(low.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank_bound_is_enforced() {
        let (model, hiddens, grid) = tiny_setup(1, 4);
        assert!(ggn_lowrank(&model, &hiddens, &grid, 1.0, 13).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = WeightBelief::low_rank(random_vec(10, 1), random_matrix(10, 3, 2), 0.4, 9.0).unwrap();
        save_belief(dir.path(), &b, serde_json::json!({"k": 1})).unwrap();
        let (back, manifest) = load_belief(dir.path()).unwrap();
        assert_eq!(manifest.rank, 3);
        assert_eq!(back.mean(), b.mean());
        let x = random_vec(10, 3);
        assert_eq!(back.cov_matvec(&x).unwrap(), b.cov_matvec(&x).unwrap());
        std::fs::write(dir.path().join(BELIEF_BUFFERS), [0u8; 7]).unwrap();
        assert!(load_belief(dir.path()).is_err());
    }

    #[test]
    fn hyperparameter_swap() {
        let b = WeightBelief::low_rank(vec![0.0; 5], random_matrix(5, 2, 1), 1.0, 1.0).unwrap();
        let c = b.with_hyperparameter(2.0).unwrap();
        assert_eq!(c.hyperparameter(), 2.0);
        assert!(b.with_hyperparameter(0.0).is_err());
    }
}
