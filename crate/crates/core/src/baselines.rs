//! Sample-based comparison methods: input perturbations, deep ensembles and
//! nonlinear pushforward of a weight belief, plus the null-space diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::belief::WeightBelief;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::fno::FnoModel;
use crate::rng;
use crate::train::check_same_shape;

/// Member predictions of a sample-based method.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    members: Vec<Field>,
}

impl EnsemblePrediction {
    pub fn new(members: Vec<Field>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::InvalidInput("ensemble has no members".into()))?;
        for m in &members[1..] {
            check_same_shape(first, m)?;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Field] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Welford running moments: identical members give exactly zero spread.
    fn moments(&self) -> (Field, Vec<f64>) {
        let mut mean = self.members[0].clone();
        let mut m2 = vec![0.0; mean.values().len()];
        for (k, m) in self.members.iter().enumerate().skip(1) {
            let w = 1.0 / (k + 1) as f64;
            for ((mu, s), &v) in mean.values_mut().iter_mut().zip(m2.iter_mut()).zip(m.values()) {
                let d = v - *mu;
                *mu += d * w;
                *s += d * (v - *mu);
            }
        }
        (mean, m2)
    }

    pub fn mean(&self) -> Field {
        self.moments().0
    }

    /// Pointwise unbiased standard deviation.
    pub fn std(&self) -> Result<Field> {
        if self.len() < 2 {
            return Err(Error::InvalidInput("std needs at least two members".into()));
        }
        let (mean, m2) = self.moments();
        let w = 1.0 / (self.len() - 1) as f64;
        Field::new(mean.grid().clone(), mean.channels(), m2.iter().map(|s| (s.max(0.0) * w).sqrt()).collect())
    }

    /// Centered members as columns, `values × members`.
    pub fn deviations(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let n = mean.values().len();
        DMatrix::from_fn(n, self.len(), |i, s| self.members[s].values()[i] - mean.values()[i])
    }

    /// Unbiased empirical covariance restricted to the given flat value indices.
    pub fn covariance_at(&self, indices: &[usize]) -> Result<DMatrix<f64>> {
        if self.len() < 2 {
            return Err(Error::InvalidInput("covariance needs at least two members".into()));
        }
        let n = self.members[0].values().len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!("index {bad} out of range for {n} values")));
        }
        let mean = self.mean();
        let dev = DMatrix::from_fn(indices.len(), self.len(), |r, s| {
            self.members[s].values()[indices[r]] - mean.values()[indices[r]]
        });
        Ok(&dev * dev.transpose() / (self.len() - 1) as f64)
    }

    /// Numerical rank of the empirical covariance (singular values above `tol·s_max`).
    pub fn covariance_rank(&self, tol: f64) -> usize {
        let s = self.deviations().singular_values();
        let smax = s.max();
        if smax == 0.0 {
            return 0;
        }
        s.iter().filter(|&&v| v > tol * smax).count()
    }
}

/// Forwards of pointwise-perturbed inputs `a + ε`, `ε ~ N(0, σ_in²)` per value.
pub fn input_perturbations(
    model: &FnoModel,
    input: &Field,
    sigma_in: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EnsemblePrediction> {
    input_perturbations_on(model, input, input.channels(), sigma_in, n_samples, seed)
}

/// As [`input_perturbations`], perturbing only the first `channels` input
/// channels (the solution state) and leaving glued auxiliary channels intact.
pub fn input_perturbations_on(
    model: &FnoModel,
    input: &Field,
    channels: usize,
    sigma_in: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EnsemblePrediction> {
    if !(sigma_in >= 0.0) {
        return Err(Error::InvalidInput(format!("input noise must be ≥ 0, got {sigma_in}")));
    }
    if channels > input.channels() {
        return Err(Error::InvalidInput(format!("cannot perturb {channels} of {} channels", input.channels())));
    }
    let n = input.npoints() * channels;
    let members = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut r = rng::stream(seed, s);
            let mut a = input.clone();
            for v in &mut a.values_mut()[..n] {
                *v += sigma_in * r.sample::<f64, _>(StandardNormal);
            }
            model.forward(&a)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsemblePrediction::new(members)
}

pub fn deep_ensemble(models: &[FnoModel], input: &Field) -> Result<EnsemblePrediction> {
    if models.len() < 2 {
        return Err(Error::InvalidInput("an ensemble needs at least two members".into()));
    }
    if models.iter().any(|m| m.config() != models[0].config() || m.ndim() != models[0].ndim()) {
        return Err(Error::InvalidConfig("ensemble members have different configurations".into()));
    }
    let members = models.par_iter().map(|m| m.forward(input)).collect::<Result<Vec<_>>>()?;
    EnsemblePrediction::new(members)
}

/// Nonlinear forwards with the last block set to `μ + δθ_s`, reusing the
/// hidden state before that block.
pub fn sample_pushforward(
    model: &FnoModel,
    belief: &WeightBelief,
    input: &Field,
    n_samples: usize,
    seed: u64,
) -> Result<EnsemblePrediction> {
    if belief.mean() != model.theta_last().as_slice() {
        return Err(Error::BeliefMismatch("belief mean differs from the model's last-block parameters".into()));
    }
    let (_, hidden) = model.forward_with_hidden(input)?;
    let mean = belief.mean();
    let members = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut theta = belief.sample_deviation(seed, s);
            theta.iter_mut().zip(mean).for_each(|(t, m)| *t += m);
            model.forward_last_block(&hidden, &theta, input.grid())
        })
        .collect::<Result<Vec<_>>>()?;
    EnsemblePrediction::new(members)
}

/// Removes from `residual` its component in the span of the columns of
/// `basis` whose singular values exceed `tol·s_max`.
pub fn project_out_span(basis: &DMatrix<f64>, residual: &[f64], tol: f64) -> Result<Vec<f64>> {
    if basis.nrows() != residual.len() {
        return Err(Error::ShapeMismatch(format!(
            "basis has {} rows, residual has {} entries",
            basis.nrows(),
            residual.len()
        )));
    }
    let svd = basis.clone().svd(true, false);
    let u = svd.u.as_ref().expect("requested U");
    let smax = svd.singular_values.max();
    let mut out = DVector::from_column_slice(residual);
    if smax == 0.0 {
        return Ok(out.as_slice().to_vec());
    }
    let r = out.clone();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol * smax {
            let col = u.column(k);
            out -= col * col.dot(&r);
        }
    }
    Ok(out.as_slice().to_vec())
}

/// Default relative singular-value cutoff for null-space projections.
pub const NULLSPACE_TOL: f64 = 1e-8;

/// `target − mean` with its component in the span of the centered members removed.
pub fn nullspace_residual(ensemble: &EnsemblePrediction, target: &Field, tol: f64) -> Result<Field> {
    if ensemble.len() < 2 {
        return Err(Error::InvalidInput("null-space residual needs at least two members".into()));
    }
    let mean = ensemble.mean();
    check_same_shape(&mean, target)?;
    let residual: Vec<f64> = target.values().iter().zip(mean.values()).map(|(t, m)| t - m).collect();
    let values = project_out_span(&ensemble.deviations(), &residual, tol)?;
    Field::new(target.grid().clone(), target.channels(), values)
}

/// Residual with its component in the range of a symmetric PSD covariance removed.
/// Eigenvalues are compared by square root, matching the singular values of a factor.
pub fn covariance_nullspace_residual(cov: &DMatrix<f64>, residual: &[f64], tol: f64) -> Result<Vec<f64>> {
    if cov.nrows() != residual.len() || cov.ncols() != residual.len() {
        return Err(Error::ShapeMismatch("covariance and residual sizes differ".into()));
    }
    let eig = cov.clone().symmetric_eigen();
    let root: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let smax = root.iter().cloned().fold(0.0, f64::max);
    let r = DVector::from_column_slice(residual);
    let mut out = r.clone();
    if smax > 0.0 {
        for (k, &s) in root.iter().enumerate() {
            if s > tol * smax {
                let col = eig.eigenvectors.column(k);
                out -= col * col.dot(&r);
            }
        }
    }
    Ok(out.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;
    use crate::fno::{Activation, FnoConfig};
    use crate::luno::{build_gp, Locations};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn model(seed: u64) -> FnoModel {
        let mut cfg = FnoConfig::new(2, 1, 3, 2, 3);
        cfg.padding = 2;
        cfg.activation = Activation::Gelu;
        FnoModel::init(cfg, 1, seed).unwrap()
    }

    fn input() -> Field {
        let grid = Grid::line(16, 2.0).unwrap();
        Field::from_fn(grid, 2, |c, x| ((c + 1) as f64 * std::f64::consts::PI * x[0]).sin() + 0.3 * c as f64).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_noise_members_equal_forward() {
        let m = model(1);
        let a = input();
        let ens = input_perturbations(&m, &a, 0.0, 5, 3).unwrap();
        let f = m.forward(&a).unwrap();
        assert!(ens.members().iter().all(|x| x == &f));
        assert!(ens.std().unwrap().values().iter().all(|&s| s == 0.0));
        assert_eq!(ens, input_perturbations(&m, &a, 0.0, 5, 3).unwrap());
        let noisy = input_perturbations(&m, &a, 0.1, 5, 3).unwrap();
        assert_eq!(noisy, input_perturbations(&m, &a, 0.1, 5, 3).unwrap());
        assert!(noisy.std().unwrap().values().iter().all(|&s| s > 0.0));
        let partial = input_perturbations_on(&m, &a, 1, 0.1, 3, 3).unwrap();
        let first = input_perturbations_on(&m, &a, 1, 0.1, 3, 3).unwrap();
        assert_eq!(partial, first);
        assert_ne!(partial, noisy);
    }

    #[test]
    fn ensemble_rank_and_identity() {
        let a = input();
        let same = deep_ensemble(&[model(1), model(1)], &a).unwrap();
        assert!(same.std().unwrap().values().iter().all(|&s| s == 0.0));
        let models: Vec<_> = (0..4).map(model).collect();
        let ens = deep_ensemble(&models, &a).unwrap();
        assert!(ens.covariance_rank(NULLSPACE_TOL) <= 3);
        let mut other = FnoConfig::new(2, 1, 4, 2, 3);
        other.padding = 2;
        let bad = FnoModel::init(other, 1, 0).unwrap();
        assert!(matches!(deep_ensemble(&[model(1), bad], &a), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_covariance_pushforward_is_deterministic() {
        let m = model(2);
        let b = WeightBelief::isotropic(m.theta_last(), 0.0).unwrap();
        let ens = sample_pushforward(&m, &b, &input(), 4, 1).unwrap();
        assert!(ens.std().unwrap().values().iter().all(|&s| s == 0.0));
        assert_eq!(ens.mean(), m.forward(&input()).unwrap());
    }

    #[test]
    fn pushforward_mean_approaches_linearized_at_second_order() {
        let m = model(3);
        let a = input();
        let n = 20;
        let mut errs = Vec::new();
        let sigmas = [1e-1, 1e-2, 1e-3];
        for &s in &sigmas {
            let b = WeightBelief::isotropic(m.theta_last(), s * s).unwrap();
            let ens = sample_pushforward(&m, &b, &a, n, 11).unwrap();
            let gp = build_gp(&m, &b, &a).unwrap();
            let mut lin = vec![0.0; a.grid().len()];
            for f in gp.sample_functions(n, 11) {
                for (l, v) in lin.iter_mut().zip(f.eval(&Locations::Grid).unwrap()) {
                    *l += v / n as f64;
                }
            }
            let diff: Vec<f64> = ens.mean().values().iter().zip(&lin).map(|(x, y)| x - y).collect();
            errs.push(norm(&diff));
        }
        for w in 0..2 {
            let slope = (errs[w] / errs[w + 1]).log10();
            assert!((slope - 2.0).abs() < 0.3, "slope {slope}, errors {errs:?}");
        }
    }

    #[test]
    fn small_noise_std_matches_linearized_std() {
        let m = model(4);
        let a = input();
        let s = 1e-3;
        let b = WeightBelief::isotropic(m.theta_last(), s * s).unwrap();
        let ens = sample_pushforward(&m, &b, &a, 4000, 5).unwrap();
        let gp = build_gp(&m, &b, &a).unwrap();
        let lin = gp.marginal_std(&Locations::Grid).unwrap();
        let emp = ens.std().unwrap();
        let diff: Vec<f64> = emp.values().iter().zip(&lin).map(|(x, y)| (x - y) / s).collect();
        let rel = norm(&diff) / (norm(&lin) / s);
        assert!(rel < 0.05, "relative gap {rel}");
    }

    /// `(I − QQᵀ)·r` with `Q` from a QR factorization of a full-column-rank basis.
    fn qr_projection_oracle(basis: &DMatrix<f64>, r: &[f64]) -> Vec<f64> {
        let q = basis.clone().qr().q();
        let r = DVector::from_column_slice(r);
        let out = &r - &q * (q.transpose() * &r);
        out.as_slice().to_vec()
    }

    #[test]
    fn nullspace_residual_cases() {
        let grid = Grid::line(8, 1.0).unwrap();
        let f = |v: Vec<f64>| Field::new(grid.clone(), 1, v).unwrap();
        let members = vec![
            f(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            f(vec![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            f(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            f(vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ];
        let ens = EnsemblePrediction::new(members).unwrap();
        let inside = f(vec![2.0, -3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(nullspace_residual(&ens, &inside, NULLSPACE_TOL).unwrap().values().iter().all(|v| v.abs() < 1e-14));
        let outside = f(vec![0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 3.0]);
        let out = nullspace_residual(&ens, &outside, NULLSPACE_TOL).unwrap();
        assert!(out.values().iter().zip(outside.values()).all(|(a, b)| (a - b).abs() < 1e-14));
        let flat = EnsemblePrediction::new(vec![outside.clone(), outside.clone()]).unwrap();
        let neg = f(outside.values().iter().map(|v| -v).collect());
        assert_eq!(nullspace_residual(&flat, &f(vec![0.0; 8]), NULLSPACE_TOL).unwrap(), neg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_matches_oracle_and_is_idempotent(
            seed in 0u64..1000,
            n in 6usize..14,
            m in 2usize..6,
        ) {
            let mut r = rng::stream(seed, 0);
            let basis = DMatrix::from_fn(n, m, |_, _| r.sample::<f64, _>(StandardNormal));
            let res: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
            let once = project_out_span(&basis, &res, NULLSPACE_TOL).unwrap();
            let oracle = qr_projection_oracle(&basis, &res);
            for (a, b) in once.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let twice = project_out_span(&basis, &once, NULLSPACE_TOL).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let cov = &basis * basis.transpose();
            let via_cov = covariance_nullspace_residual(&cov, &res, 1e-6).unwrap();
            for (a, b) in once.iter().zip(&via_cov) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
