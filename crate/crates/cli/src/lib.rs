//! Experiment pipeline behind the `luno` binary. Every stage reads and writes
//! artifacts under the configured output directory and can be rerun alone.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use luno::belief::{ggn_lowrank_with, load_belief, save_belief, LanczosOptions, WeightBelief, BELIEF_MANIFEST};
use luno::eval::{
    self, calibrate, evaluate, isotropic_variance_guess, rollout, select_pairs, time_rollout, CalibrationResult,
    Method, MethodKind, MetricRecord, StepMetrics,
};
use luno::field::{write_fields, Field, Grid, Points};
use luno::fno::{load_checkpoint, save_checkpoint, MODEL_MANIFEST};
use luno::luno::{build_gp, Locations};
use luno::pde::{read_manifest, read_split, write_dataset, Split, DATASET_MANIFEST};
use luno::rng::{derive, stream};
use luno::train::{fit, windows, write_loss_csv, Trajectory, WindowPair};
use luno::{FnoConfig, FnoModel};
use rand::seq::SliceRandom;

use config::{ExperimentConfig, ScenarioName};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] luno::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {path}; run `luno {stage}` first")]
    Missing { path: String, stage: &'static str },
    #[error("{what} was produced by a different configuration (expected {expected}, found {found})")]
    HashMismatch { what: String, expected: String, found: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed file {path}: {message}")]
    Corrupt { path: String, message: String },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(_) => "core",
            Self::Config(_) => "config",
            Self::Missing { .. } => "missing_artifact",
            Self::HashMismatch { .. } => "hash_mismatch",
            Self::Io { .. } => "io",
            Self::Corrupt { .. } => "corrupt_artifact",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": self.kind(), "message": self.to_string() })
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self, name: ScenarioName) -> PathBuf {
        self.root.join("data").join(name.as_str())
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn member(&self, k: usize) -> PathBuf {
        self.root.join("ensemble").join(format!("member_{k:02}"))
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn belief(&self, la: bool) -> PathBuf {
        self.root.join(if la { "belief_la" } else { "belief_iso" })
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn rollout_csv(&self) -> PathBuf {
        self.root.join("rollout.csv")
    }

    pub fn bench_json(&self) -> PathBuf {
        self.root.join("bench.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
}

fn stamp(cfg: &ExperimentConfig) -> serde_json::Value {
    json!({ "config_hash": cfg.hash(), "seed": cfg.seed })
}

fn stamp_map(cfg: &ExperimentConfig) -> serde_json::Map<String, serde_json::Value> {
    match stamp(cfg) {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("stamp is an object"),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// CSV with the config hash and seed as leading comment lines.
fn write_csv(cfg: &ExperimentConfig, path: &Path, body: impl FnOnce(&mut Vec<u8>) -> luno::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={}", cfg.hash()).expect("write to vec");
    writeln!(buf, "# seed={}", cfg.seed).expect("write to vec");
    body(&mut buf)?;
    let mut w = create(path)?;
    w.write_all(&buf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Corrupt {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing { path: path.display().to_string(), stage },
        _ => CliError::Io { path: path.display().to_string(), source: e },
    })?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Corrupt { path: path.display().to_string(), message: e.to_string() })
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing { path: path.display().to_string(), stage })
    }
}

fn check_hash(what: &str, meta: &serde_json::Value, key: &str, expected: &str) -> Result<()> {
    let found = meta.get(key).and_then(|v| v.as_str()).unwrap_or("<none>");
    if found != expected {
        return Err(CliError::HashMismatch { what: what.into(), expected: expected.into(), found: found.into() });
    }
    Ok(())
}

/// Writes the train/valid/test splits of the main scenario and the test split
/// of every evaluation-only scenario.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out);
    let mut written = Vec::new();
    let mut names = vec![cfg.scenario.name];
    names.extend(cfg.scenario.ood.iter().copied().filter(|n| *n != cfg.scenario.name));
    for (i, name) in names.into_iter().enumerate() {
        let scenario = cfg.build_scenario(name);
        if let luno::pde::Scenario::Adr(s) = &scenario {
            if let Some(w) = s.cfl_warning() {
                eprintln!("warning: {w}");
            }
        }
        let splits: Vec<Split> = if i == 0 { Split::ALL.to_vec() } else { vec![Split::Test] };
        let data = splits.iter().map(|&s| Ok((s, scenario.generate(s)?))).collect::<luno::Result<Vec<_>>>()?;
        let dir = layout.data(name);
        write_dataset(&dir, &scenario, &data, stamp(cfg))?;
        written.push(dir);
    }
    Ok(written)
}

fn load_split(cfg: &ExperimentConfig, name: ScenarioName, split: Split) -> Result<Vec<Trajectory>> {
    let dir = Layout::new(&cfg.out).data(name);
    require(&dir.join(DATASET_MANIFEST), "generate")?;
    let manifest = read_manifest(&dir)?;
    if manifest.scenario != cfg.build_scenario(name) {
        return Err(CliError::HashMismatch {
            what: format!("dataset {}", dir.display()),
            expected: "scenario of the current configuration".into(),
            found: "a different scenario".into(),
        });
    }
    Ok(read_split(&dir, &manifest, split)?)
}

fn model_config(cfg: &ExperimentConfig, sample: &Trajectory) -> FnoConfig {
    let m = &cfg.model;
    let in_ch = m.window * sample.state_channels() + sample.aux_channels();
    let mut fc = FnoConfig::new(in_ch, sample.state_channels(), m.hidden, m.blocks, m.modes);
    fc.activation = m.activation;
    fc.padding = m.padding;
    fc
}

fn training_groups(cfg: &ExperimentConfig, train: &[Trajectory]) -> Result<Vec<Vec<WindowPair>>> {
    Ok(train.iter().map(|t| windows(t, cfg.model.window)).collect::<luno::Result<Vec<_>>>()?)
}

fn ensemble_size(cfg: &ExperimentConfig) -> usize {
    if cfg.methods.list.iter().any(|m| m == "ensemble") {
        cfg.methods.ensemble_size
    } else {
        1
    }
}

/// Trains the MAP model (ensemble member 0) and, if the ensemble method is
/// requested, the remaining members with independent seeds.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out);
    let train = load_split(cfg, cfg.scenario.name, Split::Train)?;
    let groups = training_groups(cfg, &train)?;
    let fc = model_config(cfg, &train[0]);
    let ndim = train[0].frames[0].grid().ndim();
    let mut written = Vec::new();
    for k in 0..ensemble_size(cfg) {
        let seed = derive(cfg.seed, 1000 + k as u64);
        let init = FnoModel::init(fc.clone(), ndim, seed)?;
        let (model, history) = fit(&init, &groups, &cfg.train_config(seed))?;
        let dir = if k == 0 { layout.model() } else { layout.member(k) };
        let mut meta = stamp(cfg);
        meta["model_hash"] = cfg.model_hash().into();
        meta["member"] = k.into();
        save_checkpoint(&dir, &model, seed, meta)?;
        if k == 0 {
            write_csv(cfg, &layout.loss_csv(), |w| write_loss_csv(w, &history))?;
        }
        written.push(dir);
    }
    Ok(written)
}

fn load_model(cfg: &ExperimentConfig, dir: &Path) -> Result<FnoModel> {
    require(&dir.join(MODEL_MANIFEST), "train")?;
    let (model, manifest) = load_checkpoint(dir)?;
    check_hash(&format!("checkpoint {}", dir.display()), &manifest.metadata, "model_hash", &cfg.model_hash())?;
    Ok(model)
}

fn eval_pairs(cfg: &ExperimentConfig, name: ScenarioName, split: Split, limit: usize, salt: u64) -> Result<Vec<WindowPair>> {
    let mut trajs = load_split(cfg, name, split)?;
    trajs.truncate(limit);
    Ok(select_pairs(&trajs, cfg.model.window, derive(cfg.seed, salt))?)
}

fn valid_pairs(cfg: &ExperimentConfig) -> Result<Vec<WindowPair>> {
    eval_pairs(cfg, cfg.scenario.name, Split::Valid, cfg.calibration.valid_pairs, 11)
}

/// Fits the isotropic and low-rank Laplace beliefs over the last block. Both
/// start from a moment-matched scale that calibration later refines.
pub fn cmd_fit_belief(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out);
    let model = load_model(cfg, checkpoint.unwrap_or(&layout.model()))?;
    let train = load_split(cfg, cfg.scenario.name, Split::Train)?;
    let mut pairs: Vec<WindowPair> = training_groups(cfg, &train)?.concat();
    let n_data = pairs.len();
    if cfg.scenario.name.is_adr() && pairs.len() > cfg.belief.subsample_adr {
        pairs.shuffle(&mut stream(derive(cfg.seed, 21), 0));
        pairs.truncate(cfg.belief.subsample_adr);
    }
    let valid = valid_pairs(cfg)?;
    let h0 = isotropic_variance_guess(&model, &valid)?;
    let target = pairs[0].target.grid().clone();
    let hiddens = pairs
        .iter()
        .map(|p| {
            let (_, mut h) = model.forward_with_hidden(&p.input)?;
            let last = h.block_inputs.pop().expect("at least one block");
            h.block_inputs = vec![last];
            Ok(h)
        })
        .collect::<luno::Result<Vec<_>>>()?;
    let opts = LanczosOptions { seed: derive(cfg.seed, 22), ..LanczosOptions::default() };
    let ggn = ggn_lowrank_with(&model, &hiddens, &target, cfg.belief.noise_var, cfg.belief.rank, opts)?;
    let mut meta = stamp(cfg);
    meta["belief_hash"] = cfg.belief_hash().into();
    let iso = WeightBelief::isotropic(model.theta_last(), h0)?;
    save_belief(&layout.belief(false), &iso, meta.clone())?;
    let la = WeightBelief::low_rank(model.theta_last(), ggn.v, 1.0 / h0, n_data as f64)?;
    meta["ggn_eigenvalues"] = json!(ggn.eigenvalues);
    meta["ggn_residual"] = json!(ggn.residual);
    meta["ggn_pairs"] = json!(pairs.len());
    save_belief(&layout.belief(true), &la, meta)?;
    Ok(vec![layout.belief(false), layout.belief(true)])
}

fn load_beliefs(cfg: &ExperimentConfig, dir: Option<&Path>, la: bool) -> Result<WeightBelief> {
    let path = match dir {
        Some(d) => d.to_path_buf(),
        None => Layout::new(&cfg.out).belief(la),
    };
    require(&path.join(BELIEF_MANIFEST), "fit-belief")?;
    let (belief, manifest) = load_belief(&path)?;
    check_hash(&format!("belief {}", path.display()), &manifest.metadata, "belief_hash", &cfg.belief_hash())?;
    Ok(belief)
}

/// Models and beliefs needed by the configured methods.
pub struct Artifacts {
    pub model: FnoModel,
    pub ensemble: Vec<FnoModel>,
    pub iso: Option<WeightBelief>,
    pub la: Option<WeightBelief>,
    state_channels: usize,
}

impl Artifacts {
    pub fn load(cfg: &ExperimentConfig, kinds: &[MethodKind], checkpoint: Option<&Path>, belief: Option<&Path>) -> Result<Self> {
        let layout = Layout::new(&cfg.out);
        let model = load_model(cfg, checkpoint.unwrap_or(&layout.model()))?;
        let mut ensemble = Vec::new();
        if kinds.contains(&MethodKind::Ensemble) {
            ensemble.push(model.clone());
            for k in 1..cfg.methods.ensemble_size {
                ensemble.push(load_model(cfg, &layout.member(k))?);
            }
        }
        let wants = |a: MethodKind, b: MethodKind| kinds.contains(&a) || kinds.contains(&b);
        let iso = match wants(MethodKind::LunoIso, MethodKind::SampleIso) {
            true => Some(load_beliefs(cfg, belief.filter(|_| !wants(MethodKind::LunoLa, MethodKind::SampleLa)), false)?),
            false => None,
        };
        let la = match wants(MethodKind::LunoLa, MethodKind::SampleLa) {
            true => Some(load_beliefs(cfg, belief, true)?),
            false => None,
        };
        let state_channels = model.config().out_channels;
        Ok(Self { model, ensemble, iso, la, state_channels })
    }

    pub fn method(&self, cfg: &ExperimentConfig, kind: MethodKind, hyper: Option<f64>, n_samples: usize) -> Result<Method<'_>> {
        let seed = derive(cfg.seed, 5000 + kind as u64);
        let belief = |b: &Option<WeightBelief>| {
            b.clone().ok_or_else(|| CliError::Config(format!("{} needs a fitted belief", kind.name())))
        };
        let m = match kind {
            MethodKind::Point => Method::point(&self.model),
            MethodKind::InputPerturbations => {
                Method::input_perturbations(&self.model, hyper.unwrap_or(0.0), n_samples, seed)
                    .with_perturbed_channels(cfg.model.window * self.state_channels)
            }
            MethodKind::Ensemble => Method::ensemble(&self.ensemble)?,
            MethodKind::SampleIso => Method::sample(&self.model, belief(&self.iso)?, n_samples, seed),
            MethodKind::SampleLa => Method::sample(&self.model, belief(&self.la)?, n_samples, seed),
            MethodKind::LunoIso => Method::luno(&self.model, belief(&self.iso)?),
            MethodKind::LunoLa => Method::luno(&self.model, belief(&self.la)?),
        };
        match (hyper, m.hyperparameter()) {
            (Some(h), Some(_)) if kind != MethodKind::InputPerturbations => Ok(m.with_hyperparameter(h)?),
            _ => Ok(m),
        }
    }
}

fn method_kinds(cfg: &ExperimentConfig) -> Result<Vec<MethodKind>> {
    Ok(cfg.methods.list.iter().map(|m| MethodKind::parse(m)).collect::<luno::Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub config_hash: String,
    pub belief_hash: String,
    pub seed: u64,
    pub methods: BTreeMap<String, CalibrationResult>,
}

/// Calibrates every method with a hyperparameter on the validation pairs.
/// Linearized methods use the full log grid; sample-based ones a coarser grid
/// centered at their linearized counterpart's optimum.
pub fn cmd_calibrate(cfg: &ExperimentConfig, checkpoint: Option<&Path>, belief: Option<&Path>) -> Result<CalibrationFile> {
    let kinds = method_kinds(cfg)?;
    let art = Artifacts::load(cfg, &kinds, checkpoint, belief)?;
    let valid = valid_pairs(cfg)?;
    let c = &cfg.calibration;
    let sample_valid = &valid[..valid.len().min(c.sample_valid_pairs)];
    let mut out = BTreeMap::new();
    let mut order = kinds.clone();
    order.sort_by_key(|k| !k.is_linearized());
    for kind in order {
        let res = match kind {
            MethodKind::Point | MethodKind::Ensemble => continue,
            MethodKind::LunoIso | MethodKind::LunoLa => {
                let m = art.method(cfg, kind, None, 0)?;
                let center = m.hyperparameter().expect("belief methods have a hyperparameter");
                calibrate(&m, &valid, center, c.half_decades, c.n_points)?
            }
            MethodKind::SampleIso | MethodKind::SampleLa => {
                let twin = if kind == MethodKind::SampleIso { MethodKind::LunoIso } else { MethodKind::LunoLa };
                let m = art.method(cfg, kind, None, c.sample_n_samples)?;
                let center = out
                    .get(twin.name())
                    .map(|r: &CalibrationResult| r.best)
                    .unwrap_or_else(|| m.hyperparameter().expect("belief methods have a hyperparameter"));
                calibrate(&m, sample_valid, center, c.sample_half_decades, c.sample_points)?
            }
            MethodKind::InputPerturbations => {
                let n = art.state_channels * cfg.model.window;
                let (s, count) = valid.iter().fold((0.0, 0usize), |(s, k), p| {
                    let v = &p.input.values()[..p.input.npoints() * n];
                    (s + v.iter().map(|x| x * x).sum::<f64>(), k + v.len())
                });
                let rms = (s / count as f64).sqrt();
                let m = art.method(cfg, kind, Some(c.input_sigma_center * rms), c.sample_n_samples)?;
                calibrate(&m, sample_valid, c.input_sigma_center * rms, c.sample_half_decades, c.sample_points)?
            }
        };
        out.insert(kind.name().to_string(), res);
    }
    let file = CalibrationFile { config_hash: cfg.hash(), belief_hash: cfg.belief_hash(), seed: cfg.seed, methods: out };
    write_json(&Layout::new(&cfg.out).calibration(), &serde_json::to_value(&file).expect("serializable"))?;
    Ok(file)
}

fn load_calibration(cfg: &ExperimentConfig) -> Result<CalibrationFile> {
    let path = Layout::new(&cfg.out).calibration();
    let file: CalibrationFile = read_json(&path, "calibrate")?;
    if file.belief_hash != cfg.belief_hash() {
        return Err(CliError::HashMismatch {
            what: path.display().to_string(),
            expected: cfg.belief_hash(),
            found: file.belief_hash,
        });
    }
    Ok(file)
}

fn calibrated(cal: &CalibrationFile, kind: MethodKind) -> Result<Option<f64>> {
    match kind {
        MethodKind::Point | MethodKind::Ensemble => Ok(None),
        _ => cal
            .methods
            .get(kind.name())
            .map(|r| Some(r.best))
            .ok_or_else(|| CliError::Missing { path: format!("calibration for {}", kind.name()), stage: "calibrate" }),
    }
}

/// Expected metrics of every configured method on the main test split and
/// each evaluation-only scenario.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>, belief: Option<&Path>) -> Result<Vec<MetricRecord>> {
    let kinds = method_kinds(cfg)?;
    let art = Artifacts::load(cfg, &kinds, checkpoint, belief)?;
    let cal = load_calibration(cfg)?;
    let mut datasets = vec![cfg.scenario.name];
    datasets.extend(cfg.scenario.ood.iter().copied().filter(|n| *n != cfg.scenario.name));
    let mut records = Vec::new();
    for name in datasets {
        let pairs = eval_pairs(cfg, name, Split::Test, usize::MAX, 12)?;
        for &kind in &kinds {
            let m = art.method(cfg, kind, calibrated(&cal, kind)?, cfg.methods.n_samples)?;
            records.push(evaluate(&m, &pairs, name.as_str())?);
        }
    }
    let layout = Layout::new(&cfg.out);
    write_csv(cfg, &layout.metrics_csv(), |w| eval::write_metrics_csv(w, &records))?;
    let mut doc = stamp(cfg);
    doc["nll_convention"] = "per-point mean".into();
    doc["records"] = serde_json::to_value(&records).expect("serializable");
    write_json(&layout.metrics_json(), &doc)?;
    Ok(records)
}

/// Per-step metrics averaged over test trajectories for every method.
pub fn cmd_rollout(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    belief: Option<&Path>,
    n_steps: Option<usize>,
) -> Result<BTreeMap<String, Vec<StepMetrics>>> {
    let kinds = method_kinds(cfg)?;
    let art = Artifacts::load(cfg, &kinds, checkpoint, belief)?;
    let cal = load_calibration(cfg)?;
    let mut trajs = load_split(cfg, cfg.scenario.name, Split::Test)?;
    trajs.truncate(cfg.rollout.n_trajectories);
    let w = cfg.model.window;
    let steps = n_steps.unwrap_or(cfg.rollout.n_steps).min(trajs[0].len().saturating_sub(w));
    if steps == 0 {
        return Err(CliError::Config("trajectories too short for a rollout".into()));
    }
    let mut curves = BTreeMap::new();
    for &kind in &kinds {
        let m = art.method(cfg, kind, calibrated(&cal, kind)?, cfg.methods.n_samples)?;
        let runs = trajs.iter().map(|t| rollout(&m, t, w, 0, steps)).collect::<luno::Result<Vec<_>>>()?;
        let n = runs.len() as f64;
        let mean: Vec<StepMetrics> = (0..steps)
            .map(|s| StepMetrics {
                step: s + 1,
                rmse: runs.iter().map(|r| r.steps[s].rmse).sum::<f64>() / n,
                nll: runs.iter().map(|r| r.steps[s].nll).sum::<f64>() / n,
                chi2: runs.iter().map(|r| r.steps[s].chi2).sum::<f64>() / n,
            })
            .collect();
        curves.insert(kind.name().to_string(), mean);
    }
    write_csv(cfg, &Layout::new(&cfg.out).rollout_csv(), |buf| {
        writeln!(buf, "method,step,rmse,nll,chi2")?;
        for (name, steps) in &curves {
            for s in steps {
                writeln!(buf, "{name},{},{:.10e},{:.10e},{:.10e}", s.step, s.rmse, s.nll, s.chi2)?;
            }
        }
        Ok(())
    })?;
    Ok(curves)
}

/// Where to evaluate drawn functions.
#[derive(Debug, Clone)]
pub enum SampleTarget {
    /// The data grid refined by an integer factor (1 = the data grid).
    Grid { refine: usize },
    /// Points read from a text file, one point per line.
    Points(PathBuf),
}

fn read_points(path: &Path, ndim: usize) -> Result<Points> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Corrupt { path: path.display().to_string(), message: format!("line {}: {e}", i + 1) })?;
        if vals.len() != ndim {
            return Err(CliError::Corrupt {
                path: path.display().to_string(),
                message: format!("line {} has {} coordinates, expected {ndim}", i + 1, vals.len()),
            });
        }
        coords.extend(vals);
    }
    Ok(Points::new(ndim, coords)?)
}

/// Draws functions from a linearized predictive GP for one test input and
/// writes mean, std and samples.
pub fn cmd_sample(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    belief: Option<&Path>,
    kind: MethodKind,
    input_index: usize,
    n_samples: usize,
    target: &SampleTarget,
) -> Result<Vec<PathBuf>> {
    if !kind.is_linearized() {
        return Err(CliError::Config(format!("sampling needs luno_iso or luno_la, got {}", kind.name())));
    }
    let art = Artifacts::load(cfg, &[kind], checkpoint, belief)?;
    let hyper = load_calibration(cfg).ok().and_then(|c| c.methods.get(kind.name()).map(|r| r.best));
    let method = art.method(cfg, kind, hyper, 0)?;
    let belief = method.belief().expect("linearized methods carry a belief");
    let pairs = eval_pairs(cfg, cfg.scenario.name, Split::Test, usize::MAX, 12)?;
    let pair = pairs
        .get(input_index)
        .ok_or_else(|| CliError::Config(format!("input index {input_index} out of range ({} test pairs)", pairs.len())))?;
    let gp = build_gp(&art.model, belief, &pair.input)?;
    let grid = pair.input.grid();
    let (loc, out_grid) = match target {
        SampleTarget::Grid { refine } if *refine <= 1 => (Locations::Grid, Some(grid.clone())),
        SampleTarget::Grid { refine } => {
            let shape: Vec<usize> = grid.shape().iter().map(|n| n * refine).collect();
            let fine = Grid::new(shape, grid.lengths().to_vec())?;
            (Locations::Points(fine.points()), Some(fine))
        }
        SampleTarget::Points(path) => (Locations::Points(read_points(path, grid.ndim())?), None),
    };
    let mean = gp.mean(&loc)?;
    let std = gp.marginal_std(&loc)?;
    let seed = derive(cfg.seed, 7000 + input_index as u64);
    let samples = gp
        .sample_functions(n_samples, seed)
        .iter()
        .map(|f| f.eval(&loc))
        .collect::<luno::Result<Vec<_>>>()?;
    let dir = Layout::new(&cfg.out).samples();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let c = gp.out_channels();
    let mut meta = stamp_map(cfg);
    meta.insert("method".into(), kind.name().into());
    meta.insert("input_index".into(), input_index.into());
    meta.insert("hyperparameter".into(), belief.hyperparameter().into());
    match out_grid {
        Some(g) => {
            let mut written = Vec::new();
            for (name, frames) in [
                ("mean.field", vec![mean]),
                ("std.field", vec![std]),
                ("samples.field", samples),
            ] {
                if frames.is_empty() {
                    continue;
                }
                let fields = frames.into_iter().map(|v| Field::new(g.clone(), c, v)).collect::<luno::Result<Vec<_>>>()?;
                let path = dir.join(name);
                write_fields(create(&path)?, &fields, meta.clone())?;
                written.push(path);
            }
            Ok(written)
        }
        None => {
            let path = dir.join("samples.json");
            let mut doc = serde_json::Value::Object(meta);
            doc["points"] = json!(match &loc {
                Locations::Points(p) => p.coords().to_vec(),
                Locations::Grid => Vec::new(),
            });
            doc["channels"] = c.into();
            doc["mean"] = json!(mean);
            doc["std"] = json!(std);
            doc["samples"] = json!(samples);
            write_json(&path, &doc)?;
            Ok(vec![path])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_steps: usize,
    pub n_samples: usize,
    pub seconds: BTreeMap<String, f64>,
    /// Sample-based time over linearized time.
    pub speedup_iso: f64,
    pub speedup_la: f64,
    /// GP construction and query seconds of the linearized methods over the
    /// same inputs, measured separately.
    pub phases: BTreeMap<String, Phases>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub construct: f64,
    pub query: f64,
}

/// Wall-clock single-trajectory rollouts of the four weight-space methods.
pub fn cmd_bench(cfg: &ExperimentConfig, checkpoint: Option<&Path>, belief: Option<&Path>) -> Result<BenchReport> {
    let kinds = [MethodKind::LunoIso, MethodKind::SampleIso, MethodKind::LunoLa, MethodKind::SampleLa];
    let art = Artifacts::load(cfg, &kinds, checkpoint, belief)?;
    let cal = load_calibration(cfg).ok();
    let trajs = load_split(cfg, cfg.scenario.name, Split::Test)?;
    let traj = trajs
        .get(cfg.bench.trajectory)
        .ok_or_else(|| CliError::Config(format!("bench trajectory {} out of range", cfg.bench.trajectory)))?;
    let steps = cfg.bench.n_steps.min(traj.len().saturating_sub(cfg.model.window));
    let mut seconds = BTreeMap::new();
    for kind in kinds {
        let hyper = cal.as_ref().and_then(|c| c.methods.get(kind.name()).map(|r| r.best));
        let m = art.method(cfg, kind, hyper, cfg.methods.n_samples)?;
        seconds.insert(kind.name().to_string(), time_rollout(&m, traj, cfg.model.window, steps)?);
    }
    let inputs = windows(traj, cfg.model.window)?.into_iter().take(steps).map(|p| p.input).collect::<Vec<_>>();
    let mut phases = BTreeMap::new();
    for (kind, belief) in [(MethodKind::LunoIso, &art.iso), (MethodKind::LunoLa, &art.la)] {
        let hyper = cal.as_ref().and_then(|c| c.methods.get(kind.name()).map(|r| r.best));
        let belief = belief.as_ref().expect("loaded above");
        let belief = match hyper {
            Some(h) => belief.with_hyperparameter(h)?,
            None => belief.clone(),
        };
        let (mut construct, mut query) = (0.0, 0.0);
        for input in &inputs {
            let t0 = Instant::now();
            let gp = build_gp(&art.model, &belief, input)?;
            construct += t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            gp.mean(&Locations::Grid)?;
            gp.marginal_std(&Locations::Grid)?;
            query += t1.elapsed().as_secs_f64();
        }
        phases.insert(kind.name().to_string(), Phases { construct, query });
    }
    let report = BenchReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        n_steps: steps,
        n_samples: cfg.methods.n_samples,
        speedup_iso: seconds["sample_iso"] / seconds["luno_iso"],
        speedup_la: seconds["sample_la"] / seconds["luno_la"],
        seconds,
        phases,
    };
    write_json(&Layout::new(&cfg.out).bench_json(), &serde_json::to_value(&report).expect("serializable"))?;
    Ok(report)
}
