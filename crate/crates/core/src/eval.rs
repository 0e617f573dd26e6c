//! Metrics, log-grid calibration, method wrappers, autoregressive rollouts and report files.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{deep_ensemble, input_perturbations_on, sample_pushforward};
use crate::belief::{Covariance, WeightBelief};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::fno::FnoModel;
use crate::luno::{build_gp, Locations, VarianceProfile};
use crate::pde::BLOW_UP_LIMIT;
use crate::train::{check_same_shape, Trajectory, WindowPair};

/// Lower bound applied to predictive std before NLL and χ².
pub const STD_FLOOR: f64 = 1e-12;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

pub fn rmse(pred_mean: &Field, target: &Field) -> Result<f64> {
    check_same_shape(pred_mean, target)?;
    Ok(rmse_values(pred_mean.values(), target.values()))
}

fn rmse_values(mean: &[f64], target: &[f64]) -> f64 {
    let s: f64 = mean.iter().zip(target).map(|(m, t)| (m - t) * (m - t)).sum();
    (s / mean.len() as f64).sqrt()
}

fn check_std(std: &[f64]) -> Result<()> {
    match std.iter().find(|s| !(**s > 0.0)) {
        Some(s) => Err(Error::InvalidInput(format!("predictive std must be positive, got {s}"))),
        None => Ok(()),
    }
}

/// Per-point mean of `½log(2πσ²) + (y−μ)²/(2σ²)`.
pub fn marginal_nll(pred_mean: &Field, pred_std: &Field, target: &Field) -> Result<f64> {
    check_same_shape(pred_mean, target)?;
    check_same_shape(pred_std, target)?;
    check_std(pred_std.values())?;
    Ok(nll_values(pred_mean.values(), pred_std.values(), target.values()))
}

fn nll_values(mean: &[f64], std: &[f64], target: &[f64]) -> f64 {
    let s: f64 = mean
        .iter()
        .zip(std)
        .zip(target)
        .map(|((m, s), t)| HALF_LOG_2PI + s.ln() + (t - m) * (t - m) / (2.0 * s * s))
        .sum();
    s / mean.len() as f64
}

/// Mean of `(y−μ)²/σ²`.
pub fn chi2(pred_mean: &Field, pred_std: &Field, target: &Field) -> Result<f64> {
    check_same_shape(pred_mean, target)?;
    check_same_shape(pred_std, target)?;
    check_std(pred_std.values())?;
    Ok(chi2_values(pred_mean.values(), pred_std.values(), target.values()))
}

fn chi2_values(mean: &[f64], std: &[f64], target: &[f64]) -> f64 {
    let s: f64 = mean.iter().zip(std).zip(target).map(|((m, s), t)| (t - m) * (t - m) / (s * s)).sum();
    s / mean.len() as f64
}

/// `n` log-spaced values spanning `center·10^[−half_decades, +half_decades]`.
pub fn log_grid(center: f64, half_decades: f64, n: usize) -> Result<Vec<f64>> {
    if !(center > 0.0 && center.is_finite()) || !(half_decades >= 0.0) || n == 0 {
        return Err(Error::InvalidInput(format!(
            "log grid needs center > 0, half-width ≥ 0 and ≥ 1 point (got {center}, {half_decades}, {n})"
        )));
    }
    if n == 1 {
        return Ok(vec![center]);
    }
    let lc = center.log10();
    Ok((0..n)
        .map(|i| 10f64.powf(lc - half_decades + 2.0 * half_decades * i as f64 / (n - 1) as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub best: f64,
    pub grid: Vec<f64>,
    /// Expected per-point NLL at each grid value (NaN where undefined).
    pub nll: Vec<f64>,
}

impl CalibrationResult {
    pub fn best_nll(&self) -> f64 {
        self.grid.iter().zip(&self.nll).find(|(g, _)| **g == self.best).map_or(f64::NAN, |(_, n)| *n)
    }
}

/// Evaluates `nll_at` on every grid value and returns the minimizer. The
/// first minimum wins ties; NaN entries are skipped.
pub fn calibrate_curve<F>(grid: &[f64], nll_at: F) -> Result<CalibrationResult>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty calibration grid".into()));
    }
    let nll = grid.par_iter().map(|&h| nll_at(h)).collect::<Result<Vec<_>>>()?;
    let best = (0..grid.len())
        .filter(|&i| !nll[i].is_nan())
        .min_by(|&a, &b| nll[a].total_cmp(&nll[b]).then(a.cmp(&b)))
        .ok_or_else(|| Error::NotConverged { residual: f64::NAN })?;
    Ok(CalibrationResult { best: grid[best], grid: grid.to_vec(), nll })
}

/// Calibration of a linearized method from precomputed variance profiles and
/// residuals `y − μ` (one per validation pair).
pub fn calibrate_profiles(
    profiles: &[VarianceProfile],
    residuals: &[Vec<f64>],
    grid: &[f64],
) -> Result<CalibrationResult> {
    if profiles.is_empty() || profiles.len() != residuals.len() {
        return Err(Error::InvalidInput("need one residual per variance profile".into()));
    }
    if profiles.iter().zip(residuals).any(|(p, r)| p.len() != r.len()) {
        return Err(Error::ShapeMismatch("residual and variance profile lengths differ".into()));
    }
    calibrate_curve(grid, |h| {
        let total: f64 = profiles
            .iter()
            .zip(residuals)
            .map(|(p, r)| {
                let var = p.variance(h);
                let s: f64 = var
                    .iter()
                    .zip(r)
                    .map(|(v, e)| {
                        let v = v.max(STD_FLOOR * STD_FLOOR);
                        HALF_LOG_2PI + 0.5 * v.ln() + e * e / (2.0 * v)
                    })
                    .sum();
                s / r.len() as f64
            })
            .sum();
        Ok(total / profiles.len() as f64)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// The trained network alone, without uncertainty.
    Point,
    InputPerturbations,
    Ensemble,
    SampleIso,
    LunoIso,
    SampleLa,
    LunoLa,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Point => "point",
            Self::InputPerturbations => "input_perturbations",
            Self::Ensemble => "ensemble",
            Self::SampleIso => "sample_iso",
            Self::LunoIso => "luno_iso",
            Self::SampleLa => "sample_la",
            Self::LunoLa => "luno_la",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Self::Point,
            Self::InputPerturbations,
            Self::Ensemble,
            Self::SampleIso,
            Self::LunoIso,
            Self::SampleLa,
            Self::LunoLa,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }

    pub fn is_linearized(self) -> bool {
        matches!(self, Self::LunoIso | Self::LunoLa)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Field,
    /// Absent for point predictions.
    pub std: Option<Field>,
}

/// A predictive method bound to its model(s) and hyperparameters.
#[derive(Debug, Clone)]
pub struct Method<'a> {
    kind: MethodKind,
    model: &'a FnoModel,
    ensemble: &'a [FnoModel],
    belief: Option<WeightBelief>,
    input_sigma: f64,
    perturbed_channels: Option<usize>,
    n_samples: usize,
    seed: u64,
}

impl<'a> Method<'a> {
    pub fn point(model: &'a FnoModel) -> Self {
        Self { kind: MethodKind::Point, model, ensemble: &[], belief: None, input_sigma: 0.0, perturbed_channels: None, n_samples: 0, seed: 0 }
    }

    pub fn input_perturbations(model: &'a FnoModel, sigma: f64, n_samples: usize, seed: u64) -> Self {
        Self { kind: MethodKind::InputPerturbations, input_sigma: sigma, n_samples, seed, ..Self::point(model) }
    }

    /// Restricts input perturbations to the first `channels` input channels.
    pub fn with_perturbed_channels(mut self, channels: usize) -> Self {
        self.perturbed_channels = Some(channels);
        self
    }

    pub fn ensemble(members: &'a [FnoModel]) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::InvalidInput("empty ensemble".into()))?;
        Ok(Self { kind: MethodKind::Ensemble, ensemble: members, ..Self::point(first) })
    }

    /// Nonlinear pushforward of `belief` (Sample-Iso or Sample-LA).
    pub fn sample(model: &'a FnoModel, belief: WeightBelief, n_samples: usize, seed: u64) -> Self {
        let kind = match belief.covariance() {
            Covariance::Isotropic { .. } => MethodKind::SampleIso,
            Covariance::LowRankLaplace(_) => MethodKind::SampleLa,
        };
        Self { kind, belief: Some(belief), n_samples, seed, ..Self::point(model) }
    }

    /// Linearized pushforward of `belief` (LUNO-Iso or LUNO-LA).
    pub fn luno(model: &'a FnoModel, belief: WeightBelief) -> Self {
        let kind = match belief.covariance() {
            Covariance::Isotropic { .. } => MethodKind::LunoIso,
            Covariance::LowRankLaplace(_) => MethodKind::LunoLa,
        };
        Self { kind, belief: Some(belief), ..Self::point(model) }
    }

    pub fn kind(&self) -> MethodKind {
        self.kind
    }

    pub fn belief(&self) -> Option<&WeightBelief> {
        self.belief.as_ref()
    }

    /// Calibrated scalar: input noise, isotropic variance or prior precision.
    pub fn hyperparameter(&self) -> Option<f64> {
        match self.kind {
            MethodKind::InputPerturbations => Some(self.input_sigma),
            MethodKind::Point | MethodKind::Ensemble => None,
            _ => self.belief.as_ref().map(WeightBelief::hyperparameter),
        }
    }

    pub fn with_hyperparameter(&self, h: f64) -> Result<Self> {
        let mut m = self.clone();
        match self.kind {
            MethodKind::InputPerturbations => m.input_sigma = h,
            MethodKind::Point | MethodKind::Ensemble => {
                return Err(Error::InvalidConfig(format!("{} has no hyperparameter", self.kind.name())))
            }
            _ => m.belief = Some(self.belief.as_ref().expect("belief methods carry a belief").with_hyperparameter(h)?),
        }
        Ok(m)
    }

    pub fn predict(&self, input: &Field) -> Result<Prediction> {
        let ens = match self.kind {
            MethodKind::Point => return Ok(Prediction { mean: self.model.forward(input)?, std: None }),
            MethodKind::LunoIso | MethodKind::LunoLa => {
                let belief = self.belief.as_ref().expect("belief methods carry a belief");
                let gp = build_gp(self.model, belief, input)?;
                let std = gp.marginal_std(&Locations::Grid)?;
                let mean = gp.mean_field().clone();
                let std = Field::new(mean.grid().clone(), mean.channels(), std)?;
                return Ok(Prediction { mean, std: Some(std) });
            }
            MethodKind::InputPerturbations => {
                let channels = self.perturbed_channels.unwrap_or(input.channels());
                input_perturbations_on(self.model, input, channels, self.input_sigma, self.n_samples, self.seed)?
            }
            MethodKind::Ensemble => deep_ensemble(self.ensemble, input)?,
            MethodKind::SampleIso | MethodKind::SampleLa => {
                let belief = self.belief.as_ref().expect("belief methods carry a belief");
                sample_pushforward(self.model, belief, input, self.n_samples, self.seed)?
            }
        };
        Ok(Prediction { mean: ens.mean(), std: Some(ens.std()?) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub rmse: f64,
    /// NaN for point predictions.
    pub nll: f64,
    pub chi2: f64,
}

pub fn pair_metrics(pred: &Prediction, target: &Field) -> Result<PairMetrics> {
    check_same_shape(&pred.mean, target)?;
    let (m, t) = (pred.mean.values(), target.values());
    let rmse = rmse_values(m, t);
    let (nll, chi2) = match &pred.std {
        Some(s) => {
            check_same_shape(s, target)?;
            let s: Vec<f64> = s.values().iter().map(|v| v.max(STD_FLOOR)).collect();
            (nll_values(m, &s, t), chi2_values(m, &s, t))
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok(PairMetrics { rmse, nll, chi2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub dataset: String,
    pub rmse: f64,
    pub nll: f64,
    pub chi2: f64,
    pub n_pairs: usize,
    pub per_pair: Vec<PairMetrics>,
}

impl MetricRecord {
    /// Expected metrics: means over pairs of per-pair per-point means.
    pub fn from_pairs(method: &str, dataset: &str, per_pair: Vec<PairMetrics>) -> Self {
        let n = per_pair.len() as f64;
        let avg = |f: fn(&PairMetrics) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
        Self {
            method: method.into(),
            dataset: dataset.into(),
            rmse: avg(|p| p.rmse),
            nll: avg(|p| p.nll),
            chi2: avg(|p| p.chi2),
            n_pairs: per_pair.len(),
            per_pair,
        }
    }
}

pub fn evaluate(method: &Method<'_>, pairs: &[WindowPair], dataset: &str) -> Result<MetricRecord> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no evaluation pairs".into()));
    }
    let per_pair = pairs
        .par_iter()
        .map(|p| pair_metrics(&method.predict(&p.input)?, &p.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricRecord::from_pairs(method.kind().name(), dataset, per_pair))
}

/// Calibrates the method's hyperparameter on `valid_pairs` over
/// `log_grid(center, half_decades, n_points)`. Linearized methods reuse one
/// variance profile per pair; the others re-predict at every grid value.
pub fn calibrate(
    method: &Method<'_>,
    valid_pairs: &[WindowPair],
    center: f64,
    half_decades: f64,
    n_points: usize,
) -> Result<CalibrationResult> {
    if valid_pairs.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    if method.hyperparameter().is_none() {
        return Err(Error::InvalidConfig(format!("{} has no hyperparameter to calibrate", method.kind().name())));
    }
    let grid = log_grid(center, half_decades, n_points)?;
    if method.kind().is_linearized() {
        let belief = method.belief().expect("linearized methods carry a belief");
        let (profiles, residuals): (Vec<_>, Vec<_>) = valid_pairs
            .par_iter()
            .map(|p| {
                let gp = build_gp(method.model, belief, &p.input)?;
                check_same_shape(gp.mean_field(), &p.target)?;
                let r: Vec<f64> = p.target.values().iter().zip(gp.mean_field().values()).map(|(t, m)| t - m).collect();
                Ok((gp.prepare_variance(&Locations::Grid)?, r))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        return calibrate_profiles(&profiles, &residuals, &grid);
    }
    calibrate_curve(&grid, |h| {
        let m = method.with_hyperparameter(h)?;
        let rec = evaluate(&m, valid_pairs, "valid")?;
        Ok(rec.nll)
    })
}

/// Moment-matched isotropic variance `Σ r² / Σ ‖J‖²` over validation pairs,
/// a data-driven center for calibration grids.
pub fn isotropic_variance_guess(model: &FnoModel, valid_pairs: &[WindowPair]) -> Result<f64> {
    let unit = WeightBelief::isotropic(model.theta_last(), 1.0)?;
    let (num, den) = valid_pairs
        .par_iter()
        .map(|p| {
            let gp = build_gp(model, &unit, &p.input)?;
            let var = gp.prepare_variance(&Locations::Grid)?.variance(1.0);
            let r2: f64 = p.target.values().iter().zip(gp.mean_field().values()).map(|(t, m)| (t - m) * (t - m)).sum();
            Ok((r2, var.iter().sum::<f64>()))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?
        .into_iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if !(num > 0.0 && den > 0.0) {
        return Err(Error::InvalidInput("degenerate residuals or Jacobian for the variance guess".into()));
    }
    Ok(num / den)
}

/// One evaluation pair per trajectory, window start drawn per `(seed, index)`.
pub fn select_pairs(trajs: &[Trajectory], window: usize, seed: u64) -> Result<Vec<WindowPair>> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.len() <= window {
                return Err(Error::InvalidInput(format!("trajectory {i} too short for window {window}")));
            }
            let start = crate::rng::stream(seed, i as u64).random_range(0..t.len() - window);
            Ok(WindowPair {
                input: t.stack_input(&t.frames[start..start + window])?,
                target: t.frames[start + window].clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub rmse: f64,
    pub nll: f64,
    pub chi2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Predicted means, including the `window` seed frames.
    pub trajectory: Trajectory,
    pub steps: Vec<StepMetrics>,
}

/// Anything that maps an input window to a predictive distribution.
pub trait Predictor: Sync {
    fn predict(&self, input: &Field) -> Result<Prediction>;
}

impl Predictor for Method<'_> {
    fn predict(&self, input: &Field) -> Result<Prediction> {
        Method::predict(self, input)
    }
}

impl<F: Fn(&Field) -> Result<Prediction> + Sync> Predictor for F {
    fn predict(&self, input: &Field) -> Result<Prediction> {
        self(input)
    }
}

/// Autoregressive rollout from `truth.frames[start..start+window]`, feeding
/// the mean prediction back as the newest frame; aux channels stay fixed.
pub fn rollout(
    predictor: &dyn Predictor,
    truth: &Trajectory,
    window: usize,
    start: usize,
    n_steps: usize,
) -> Result<Rollout> {
    if n_steps == 0 || window == 0 {
        return Err(Error::InvalidInput("rollout needs ≥ 1 step and a nonempty window".into()));
    }
    if start + window + n_steps > truth.len() {
        return Err(Error::InvalidInput(format!(
            "rollout of {n_steps} steps from frame {start} needs {} frames, trajectory has {}",
            start + window + n_steps,
            truth.len()
        )));
    }
    let mut frames: Vec<Field> = truth.frames[start..start + window].to_vec();
    let mut steps = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let input = truth.stack_input(&frames[frames.len() - window..])?;
        let pred = predictor.predict(&input)?;
        let max_abs = pred.mean.values().iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        if max_abs > BLOW_UP_LIMIT {
            return Err(Error::BlowUp { step: s + 1, max_abs });
        }
        let m = pair_metrics(&pred, &truth.frames[start + window + s])?;
        steps.push(StepMetrics { step: s + 1, rmse: m.rmse, nll: m.nll, chi2: m.chi2 });
        frames.push(pred.mean);
    }
    Ok(Rollout { trajectory: Trajectory::new(frames, truth.aux.clone(), truth.dt)?, steps })
}

/// Wall-clock seconds of a single-trajectory rollout.
pub fn time_rollout(predictor: &dyn Predictor, truth: &Trajectory, window: usize, n_steps: usize) -> Result<f64> {
    let t0 = Instant::now();
    rollout(predictor, truth, window, 0, n_steps)?;
    Ok(t0.elapsed().as_secs_f64())
}

pub fn write_metrics_csv<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    writeln!(w, "method,dataset,rmse,chi2,nll,n_pairs")?;
    for r in records {
        writeln!(w, "{},{},{:.10e},{:.10e},{:.10e},{}", r.method, r.dataset, r.rmse, r.chi2, r.nll, r.n_pairs)?;
    }
    Ok(())
}

pub fn write_rollout_csv<W: Write>(mut w: W, steps: &[StepMetrics]) -> Result<()> {
    writeln!(w, "step,rmse,nll,chi2")?;
    for s in steps {
        writeln!(w, "{},{:.10e},{:.10e},{:.10e}", s.step, s.rmse, s.nll, s.chi2)?;
    }
    Ok(())
}
