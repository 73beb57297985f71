use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use paai_core::classic_cf::{
    self, Calibration, ClassicModel, GridSpec, IdmParams, ModelKind, OvrvParams, ParamAxis,
};
use paai_core::ingest::{self, fmt_sig, DatasetSplit};
use paai_core::paai::{self, AccLoss, Ensemble, NetworkConfig, PaaiKind, PaaiModel, TrainConfig};
use paai_core::sim::{self, ComparisonTable, RingConfig};
use paai_core::stats::{self, AcfResult, KdeConfig, SummaryStats};
use paai_core::synth::{self, LeadProfile};
use paai_core::{CarFollowing, CfState, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::manifest::{digest_inputs, sha256_file, Outputs, RunManifest};
use crate::{
    AccLossArg, CalibrateArgs, ClassicArg, Command, EvaluateArgs, IngestArgs, LearnedArg, ModelArg, ModelSel,
    PredictArgs, ReportArgs, RingArgs, SimulateArgs, StatsArgs, SynthArgs, TrainArgs,
};

pub const ENSEMBLE_FILE: &str = "ensemble.json";

/// Files read and seeds used by one run, recorded in its manifest.
#[derive(Default)]
struct RunInputs {
    inputs: Vec<PathBuf>,
    seeds: Vec<u64>,
}

impl RunInputs {
    fn read(&mut self, p: &Path) {
        if !self.inputs.iter().any(|q| q == p) {
            self.inputs.push(p.to_path_buf());
        }
    }
}

/// Runs `cmd` with `cfg`, writes its outputs and manifest, and returns the manifest path.
pub fn execute(cmd: &Command, cfg: &Config) -> Result<PathBuf> {
    cfg.validate()?;
    let output = match cmd {
        Command::Ingest(a) => &a.output,
        Command::Synth(a) => &a.output,
        Command::Stats(a) => &a.output,
        Command::Calibrate(a) => &a.output,
        Command::Train(a) => &a.output,
        Command::Predict(a) => &a.output,
        Command::Simulate(a) => &a.output,
        Command::Evaluate(a) => &a.output,
        Command::Ring(a) => &a.output,
        Command::Report(a) => &a.output,
        Command::Replay(_) => bail!("replay cannot be nested"),
    };
    let mut out = Outputs::create(output)?;
    let mut prov = RunInputs::default();
    match cmd {
        Command::Ingest(a) => ingest_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Synth(a) => synth_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Stats(a) => stats_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Calibrate(a) => calibrate_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Train(a) => train_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Predict(a) => predict_cmd(a, &mut out, &mut prov)?,
        Command::Simulate(a) => simulate_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Evaluate(a) => evaluate_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Ring(a) => ring_cmd(a, cfg, &mut out, &mut prov)?,
        Command::Report(a) => report_cmd(a, &mut out, &mut prov)?,
        Command::Replay(_) => unreachable!(),
    }
    let manifest = RunManifest {
        tool: "paai".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: cmd.name().into(),
        command: cmd.clone(),
        config: cfg.clone(),
        seeds: prov.seeds,
        inputs: digest_inputs(&prov.inputs)?,
        outputs: Vec::new(),
    };
    out.finish(manifest)
}

fn load_trajectory(path: &Path, prov: &mut RunInputs) -> Result<Trajectory> {
    prov.read(path);
    Trajectory::load(path).with_context(|| format!("loading trajectory {}", path.display()))
}

fn write_splits(traj: &Trajectory, out: &mut Outputs) -> Result<DatasetSplit> {
    let sp = ingest::split(traj)?;
    out.write_trajectory("trajectory.csv", traj)?;
    out.write_trajectory("train.csv", &sp.train)?;
    out.write_trajectory("validation.csv", &sp.validation)?;
    out.write_trajectory("test.csv", &sp.test)?;
    Ok(sp)
}

#[derive(Serialize)]
struct SplitSummary {
    samples: usize,
    dt: f64,
    train: usize,
    validation: usize,
    test: usize,
}

impl SplitSummary {
    fn new(traj: &Trajectory, sp: &DatasetSplit) -> Self {
        Self {
            samples: traj.len(),
            dt: traj.dt,
            train: sp.train.len(),
            validation: sp.validation.len(),
            test: sp.test.len(),
        }
    }
}

fn ingest_cmd(a: &IngestArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let mut sec = cfg.ingest.clone();
    macro_rules! set {
        ($field:ident, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                sec.$field = v;
            }
        };
    }
    set!(time_col, a.time_col);
    set!(lead_speed_col, a.lead_speed_col);
    set!(foll_speed_col, a.foll_speed_col);
    set!(delimiter, a.delimiter);
    set!(smooth_window, a.smooth_window);
    if a.spacing_col.is_some() {
        sec.spacing_col = a.spacing_col.clone();
    }
    if let Some(g) = &a.gps_cols {
        if g.len() != 4 {
            bail!("--gps-cols takes four names lead_lat,lead_lon,foll_lat,foll_lon, got {}", g.len());
        }
        sec.spacing_col = None;
        sec.lead_lat_col = Some(g[0].clone());
        sec.lead_lon_col = Some(g[1].clone());
        sec.foll_lat_col = Some(g[2].clone());
        sec.foll_lon_col = Some(g[3].clone());
    }
    prov.read(&a.input);
    let raw = ingest::load_csv(&a.input, &sec.column_map()?)?;
    let resampled = ingest::resample(&raw, cfg.dt)?;
    let traj = ingest::smooth_trajectory(&resampled, sec.smooth_window)?;
    let sp = write_splits(&traj, out)?;
    #[derive(Serialize)]
    struct IngestSummary {
        raw_rows: usize,
        smooth_window: usize,
        #[serde(flatten)]
        split: SplitSummary,
    }
    out.write_json(
        "ingest.json",
        &IngestSummary {
            raw_rows: raw.len(),
            smooth_window: sec.smooth_window,
            split: SplitSummary::new(&traj, &sp),
        },
    )
}

fn classic_default(kind: ClassicArg) -> ClassicModel {
    match kind {
        ClassicArg::Ovrv => ClassicModel::Ovrv(OvrvParams::EV_ACC),
        ClassicArg::Idm => ClassicModel::Idm(IdmParams::EV_ACC),
    }
}

fn synth_cmd(a: &SynthArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let base = classic_default(a.model);
    prov.seeds.push(cfg.seed);
    let traj = if a.asymmetric {
        synth::asymmetric_dataset(base, a.steps, cfg.dt, a.noise, cfg.seed)?
    } else {
        let lead = LeadProfile::default().generate(a.steps, cfg.dt, cfg.seed);
        synth::follow(&base, &lead, cfg.dt)?
    };
    let sp = write_splits(&traj, out)?;
    out.write_json("synth.json", &SplitSummary::new(&traj, &sp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub name: String,
    pub summary: SummaryStats,
    pub fences: (f64, f64),
    pub outlier_fraction: f64,
    /// Absent for constant series.
    pub kde: Option<KdeCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JerkStats {
    pub jsi: f64,
    pub window: usize,
    pub raw_summary: SummaryStats,
    pub filtered_summary: SummaryStats,
    pub raw: Vec<f64>,
    pub filtered: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub file: String,
    pub n: usize,
    pub dt: f64,
    pub series: Vec<SeriesStats>,
    pub jerk: Option<JerkStats>,
    /// Absent for constant spacing.
    pub spacing_acf: Option<AcfResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsPair {
    pub series: String,
    pub a: String,
    pub b: String,
    pub statistic: f64,
    pub support: Vec<f64>,
    pub cdf_a: Vec<f64>,
    pub cdf_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub inputs: Vec<TrajectoryStats>,
    pub ks: Vec<KsPair>,
}

fn named_series(t: &Trajectory) -> [(&'static str, &[f64]); 5] {
    [("v", &t.v), ("v_l", &t.v_l), ("s", &t.s), ("dv", &t.dv), ("a", &t.a)]
}

fn series_stats(name: &str, x: &[f64], kde_points: usize) -> Result<SeriesStats> {
    let summary = stats::summarize(x)?;
    let kde = match KdeConfig::silverman(x, kde_points) {
        Ok(k) => Some(KdeCurve {
            bandwidth: k.bandwidth,
            density: stats::kde(x, &k)?,
            grid: k.grid,
        }),
        Err(_) => None,
    };
    Ok(SeriesStats {
        name: name.into(),
        fences: stats::outlier_fences(&summary),
        outlier_fraction: stats::outlier_fraction(x)?,
        summary,
        kde,
    })
}

fn trajectory_stats(file: &Path, t: &Trajectory, cfg: &Config) -> Result<TrajectoryStats> {
    let series = named_series(t)
        .into_iter()
        .map(|(n, x)| series_stats(n, x, cfg.stats.kde_points))
        .collect::<Result<Vec<_>>>()?;
    let jerk = if t.len() >= cfg.stats.jerk_window.max(2) {
        let j = stats::jerk(&t.a, t.dt, cfg.stats.jerk_window)?;
        Some(JerkStats {
            jsi: j.jsi,
            window: cfg.stats.jerk_window,
            raw_summary: stats::summarize(&j.raw)?,
            filtered_summary: stats::summarize(&j.filtered)?,
            raw: j.raw,
            filtered: j.filtered,
        })
    } else {
        None
    };
    let spacing_acf = stats::acf(&t.s, cfg.stats.max_lag.min(t.len() - 1)).ok();
    Ok(TrajectoryStats {
        file: file.display().to_string(),
        n: t.len(),
        dt: t.dt,
        series,
        jerk,
        spacing_acf,
    })
}

fn stats_cmd(a: &StatsArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let first = load_trajectory(&a.input, prov)?;
    let mut inputs = vec![trajectory_stats(&a.input, &first, cfg)?];
    let mut ks = Vec::new();
    for path in &a.compare {
        let other = load_trajectory(path, prov)?;
        inputs.push(trajectory_stats(path, &other, cfg)?);
        for ((name, x), (_, y)) in named_series(&first).into_iter().zip(named_series(&other)) {
            let r = stats::ecdf_and_ks(x, y)?;
            ks.push(KsPair {
                series: name.into(),
                a: a.input.display().to_string(),
                b: path.display().to_string(),
                statistic: r.statistic,
                support: r.support,
                cdf_a: r.cdf_a,
                cdf_b: r.cdf_b,
            });
        }
    }
    out.write_json("stats.json", &StatsReport { inputs, ks })
}

fn classic_kind(k: ClassicArg) -> ModelKind {
    match k {
        ClassicArg::Ovrv => ModelKind::Ovrv,
        ClassicArg::Idm => ModelKind::Idm,
    }
}

fn parse_axis(text: &str) -> Result<ParamAxis> {
    let parse = || -> Option<ParamAxis> {
        let (name, range) = text.split_once('=')?;
        let mut parts = range.split(':');
        let lo = parts.next()?.trim().parse().ok()?;
        let hi = parts.next()?.trim().parse().ok()?;
        let steps = parts.next()?.trim().parse().ok()?;
        parts.next().is_none().then(|| ParamAxis::new(name.trim(), lo, hi, steps))
    };
    parse().with_context(|| format!("grid axis `{text}` is not of the form name=lo:hi:steps"))
}

fn calibrate_cmd(a: &CalibrateArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let traj = load_trajectory(&a.input, prov)?;
    let kind = classic_kind(a.model);
    let mut grid = GridSpec::default_for(kind);
    for text in &a.grid {
        let axis = parse_axis(text)?;
        let slot = grid
            .axes
            .iter_mut()
            .find(|x| x.name == axis.name)
            .with_context(|| format!("{kind} has no parameter `{}` (expected one of {:?})", axis.name, kind.param_names()))?;
        *slot = axis;
    }
    let cal = classic_cf::calibrate(kind, &traj, &grid, &cfg.sim.sim_config(traj.dt))?;
    out.write_json("calibration.json", &cal)
}

/// Classical model from a calibration result or a bare model JSON.
fn load_classic(path: &Path, prov: &mut RunInputs) -> Result<ClassicModel> {
    prov.read(path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let model = if value.get("spacing_rmse").is_some() {
        serde_json::from_value::<Calibration>(value)?.model
    } else {
        serde_json::from_value::<ClassicModel>(value)?
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub file: String,
    pub seed: u64,
    pub sha256: String,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

/// Points at per-member checkpoints written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub kind: PaaiKind,
    pub base: Option<ClassicModel>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub members: Vec<MemberEntry>,
}

fn load_ensemble(path: &Path, prov: &mut RunInputs) -> Result<Ensemble> {
    prov.read(path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: EnsembleManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut members = Vec::with_capacity(m.members.len());
    for e in &m.members {
        let p = dir.join(&e.file);
        let digest = sha256_file(&p)?;
        ensure!(digest == e.sha256, "member checkpoint {} does not match its manifest digest", p.display());
        prov.read(&p);
        members.push(PaaiModel::load(&p)?);
    }
    let ens = Ensemble::new(members)?;
    ensure!(ens.kind() == m.kind, "ensemble members are {}, manifest says {}", ens.kind(), m.kind);
    Ok(ens)
}

fn learned_kind(k: LearnedArg) -> PaaiKind {
    match k {
        LearnedArg::BaselineAi => PaaiKind::BaselineAi,
        LearnedArg::OvrvPaai => PaaiKind::OvrvPaai,
        LearnedArg::IdmPaai => PaaiKind::IdmPaai,
    }
}

fn train_cmd(a: &TrainArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let kind = learned_kind(a.model);
    let load = |name: &str, prov: &mut RunInputs| load_trajectory(&a.input.join(name), prov);
    let (train, validation, test) = (load("train.csv", prov)?, load("validation.csv", prov)?, load("test.csv", prov)?);
    let total = (train.len() + validation.len() + test.len()) as f64;
    let fractions = (
        train.len() as f64 / total,
        validation.len() as f64 / total,
        test.len() as f64 / total,
    );
    let split = DatasetSplit {
        train,
        validation,
        test,
        fractions,
    };

    let base = match (kind.base_kind(), &a.base) {
        (None, None) => None,
        (None, Some(_)) => bail!("{kind} has no base model; drop --base"),
        (Some(bk), Some(p)) => {
            let m = load_classic(p, prov)?;
            ensure!(m.kind() == bk, "{kind} needs a {bk} base model, {} holds {}", p.display(), m.kind());
            Some(m)
        }
        (Some(ModelKind::Ovrv), None) => Some(ClassicModel::Ovrv(OvrvParams::EV_ACC)),
        (Some(ModelKind::Idm), None) => Some(ClassicModel::Idm(IdmParams::EV_ACC)),
    };

    let sec = &cfg.train;
    let mut template = PaaiModel::new(kind, base, sec.network, cfg.seed)?;
    template.phase = cfg.phase;
    template.loss.variance_of = sec.variance_of;
    if let Some(l) = a.acc_loss.map(acc_loss).or(sec.acc_loss) {
        template.loss.acc_loss = l;
    }
    let mut tc = TrainConfig {
        max_epochs: a.epochs.unwrap_or(sec.max_epochs),
        patience: sec.patience,
        batch_size: sec.batch_size,
        stride: sec.stride,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    tc.optimizer.lr = sec.learning_rate;
    tc.optimizer.weight_decay = sec.weight_decay;
    let members = a.members.unwrap_or(sec.members);
    ensure!(members > 0, "--members must be at least 1");

    let ens = paai::train_ensemble(&template, &split, &tc, members, cfg.seed)?;
    let mut entries = Vec::with_capacity(ens.len());
    for (i, m) in ens.members().iter().enumerate() {
        let file = format!("member_{i}.json");
        let json = m.to_json()?;
        out.write_bytes(&file, json.as_bytes())?;
        let h = m.history.as_ref();
        entries.push(MemberEntry {
            sha256: sha256_file(&out.dir().join(&file))?,
            file,
            seed: m.seed,
            epochs_run: h.map_or(0, |h| h.epochs.len()),
            best_epoch: h.and_then(|h| h.best_epoch),
            best_val_loss: h.and_then(|h| h.epochs.last()).map(|e| e.best_val_loss),
        });
        prov.seeds.push(m.seed);
    }
    out.write_json(
        ENSEMBLE_FILE,
        &EnsembleManifest {
            kind,
            base,
            network: sec.network,
            train: tc,
            members: entries,
        },
    )
}

fn acc_loss(a: AccLossArg) -> AccLoss {
    match a {
        AccLossArg::SmoothL1 => AccLoss::SmoothL1,
        AccLossArg::Mse => AccLoss::Mse,
    }
}

/// Loads a model file by sniffing its content.
fn load_model_file(path: &Path, prov: &mut RunInputs) -> Result<Box<dyn CarFollowing>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("members").is_some() {
        Ok(Box::new(load_ensemble(path, prov)?))
    } else {
        Ok(Box::new(load_classic(path, prov)?))
    }
}

fn select_model(sel: &ModelSel, prov: &mut RunInputs) -> Result<Box<dyn CarFollowing>> {
    match (&sel.model_file, sel.model) {
        (Some(p), named) => {
            let m = load_model_file(p, prov)?;
            if let Some(n) = named {
                let expected = serde_json::to_value(n)?;
                ensure!(
                    expected == serde_json::Value::String(m.name()),
                    "--model {} does not match {} in {}",
                    expected,
                    m.name(),
                    p.display()
                );
            }
            Ok(m)
        }
        (None, Some(ModelArg::Ovrv)) => Ok(Box::new(classic_default(ClassicArg::Ovrv))),
        (None, Some(ModelArg::Idm)) => Ok(Box::new(classic_default(ClassicArg::Idm))),
        (None, Some(other)) => bail!("{} needs --model-file pointing at a trained ensemble", serde_json::to_value(other)?),
        (None, None) => bail!("pass --model or --model-file"),
    }
}

fn predict_cmd(a: &PredictArgs, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let model = select_model(&a.model, prov)?;
    let traj = load_trajectory(&a.input, prov)?;
    let states: Vec<CfState> = traj.states().collect();
    let mut csv = String::from("t,a,a_pred\n");
    for i in 0..states.len() {
        let p = model.accel(&states[..=i])?;
        writeln!(csv, "{},{},{}", fmt_sig(traj.time(i), 9), fmt_sig(traj.a[i], 9), fmt_sig(p, 9))?;
    }
    out.write_bytes("predictions.csv", csv.as_bytes())
}

#[derive(Serialize)]
struct SimMetrics {
    model: String,
    rmse_accel: f64,
    rmse_speed: f64,
    rmse_spacing: f64,
    collisions: Vec<usize>,
}

fn simulate_cmd(a: &SimulateArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let model = select_model(&a.model, prov)?;
    let traj = load_trajectory(&a.input, prov)?;
    let r = sim::replay(&model, &traj, &cfg.sim.sim_config(traj.dt))?;
    out.write_trajectory("rollout.csv", &r.rollout.to_trajectory(traj.dt, traj.t0)?)?;
    out.write_json(
        "metrics.json",
        &SimMetrics {
            model: model.name(),
            rmse_accel: r.rmse_accel,
            rmse_speed: r.rmse_speed,
            rmse_spacing: r.rmse_spacing,
            collisions: r.rollout.collisions,
        },
    )
}

fn evaluate_cmd(a: &EvaluateArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let mut models: Vec<Box<dyn CarFollowing>> = Vec::new();
    for &k in &a.model {
        models.push(Box::new(classic_default(k)));
    }
    for p in &a.model_file {
        models.push(load_model_file(p, prov)?);
    }
    ensure!(!models.is_empty(), "evaluate needs at least one --model or --model-file");
    let test = load_trajectory(&a.input, prov)?;
    let refs: Vec<&dyn CarFollowing> = models.iter().map(|m| m.as_ref()).collect();
    let table = sim::evaluate(&refs, &test, &cfg.sim.sim_config(test.dt))?;
    out.write_json("comparison.json", &table)
}

/// Speed at which `model` is in equilibrium with spacing `s`.
fn equilibrium_speed(model: &dyn CarFollowing, s: f64) -> Result<f64> {
    let f = |v: f64| model.accel(&[CfState::new(s, v, v)]);
    let (mut lo, mut hi) = (0.0, 100.0);
    if f(lo)? <= 0.0 {
        return Ok(0.0);
    }
    ensure!(f(hi)? < 0.0, "no equilibrium speed below {hi} m/s at spacing {s} m");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Serialize)]
struct RingSummary {
    model: String,
    vehicles: usize,
    length: f64,
    dt: f64,
    steps: usize,
    initial_speed: f64,
    collision: Option<(usize, usize)>,
    min_spacing: f64,
    max_conservation_error: f64,
    final_speed_std: f64,
}

fn ring_cmd(a: &RingArgs, cfg: &Config, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    let model = select_model(&a.model, prov)?;
    let n = a.vehicles.unwrap_or(cfg.ring.vehicles);
    let length = a.length.unwrap_or(cfg.ring.length);
    let duration = a.duration.unwrap_or(cfg.ring.duration);
    ensure!(n >= 2 && length > 0.0 && duration > 0.0, "ring needs >= 2 vehicles, positive length and duration");
    let gap = length / n as f64;
    let speed = match cfg.ring.speed {
        Some(v) => v,
        None => equilibrium_speed(&model, gap)?,
    };
    let mut rc = RingConfig::uniform(n, length, speed);
    rc.sim = cfg.sim.sim_config(cfg.dt);
    let dp = cfg.ring.perturbation;
    ensure!(dp.abs() < gap, "ring perturbation must be smaller than the mean spacing");
    rc.init_spacing[0] += dp;
    rc.init_spacing[1] -= dp;
    let r = sim::ring_simulate(&rc, &[&model], duration)?;

    let mut csv = String::from("t,vehicle,s,v,a\n");
    for k in 0..r.steps {
        for i in 0..n {
            writeln!(
                csv,
                "{},{},{},{},{}",
                fmt_sig(k as f64 * cfg.dt, 9),
                i,
                fmt_sig(r.spacing[i][k], 9),
                fmt_sig(r.speed[i][k], 9),
                fmt_sig(r.accel[i][k], 9)
            )?;
        }
    }
    out.write_bytes("ring.csv", csv.as_bytes())?;
    let last: Vec<f64> = r.speed.iter().map(|v| v[r.steps - 1]).collect();
    out.write_json(
        "ring.json",
        &RingSummary {
            model: model.name(),
            vehicles: n,
            length,
            dt: cfg.dt,
            steps: r.steps,
            initial_speed: speed,
            collision: r.collision,
            min_spacing: r.spacing.iter().flatten().copied().fold(f64::INFINITY, f64::min),
            max_conservation_error: (0..r.steps)
                .map(|k| (r.total_spacing(k) - length).abs() / length)
                .fold(0.0, f64::max),
            final_speed_std: stats::summarize(&last)?.std,
        },
    )
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    file: &'a str,
    series: &'a str,
    #[serde(flatten)]
    summary: &'a SummaryStats,
    outlier_fraction: f64,
}

#[derive(Serialize)]
struct JsiRow<'a> {
    file: &'a str,
    jsi: f64,
}

#[derive(Serialize)]
struct KsRow<'a> {
    series: &'a str,
    a: &'a str,
    b: &'a str,
    statistic: f64,
}

#[derive(Serialize)]
struct CalibrationRow {
    file: String,
    model: ClassicModel,
    spacing_rmse: f64,
    cells_evaluated: usize,
}

#[derive(Serialize)]
struct Report<'a> {
    schema: &'static str,
    summaries: Vec<SummaryRow<'a>>,
    jsi: Vec<JsiRow<'a>>,
    ks: Vec<KsRow<'a>>,
    calibration: Vec<CalibrationRow>,
    comparison: Option<ComparisonTable>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, prov: &mut RunInputs) -> Result<T> {
    prov.read(path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn report_cmd(a: &ReportArgs, out: &mut Outputs, prov: &mut RunInputs) -> Result<()> {
    ensure!(
        a.stats.is_some() || a.comparison.is_some() || !a.calibration.is_empty(),
        "report needs at least one of --stats, --comparison, --calibration"
    );
    let st: Option<StatsReport> = a.stats.as_deref().map(|p| read_json(p, prov)).transpose()?;
    let comparison: Option<ComparisonTable> = a.comparison.as_deref().map(|p| read_json(p, prov)).transpose()?;
    let mut calibration = Vec::new();
    for p in &a.calibration {
        let c: Calibration = read_json(p, prov)?;
        calibration.push(CalibrationRow {
            file: p.display().to_string(),
            model: c.model,
            spacing_rmse: c.spacing_rmse,
            cells_evaluated: c.cells_evaluated,
        });
    }
    let (mut summaries, mut jsi, mut ks) = (Vec::new(), Vec::new(), Vec::new());
    if let Some(st) = &st {
        for t in &st.inputs {
            for s in &t.series {
                summaries.push(SummaryRow {
                    file: &t.file,
                    series: &s.name,
                    summary: &s.summary,
                    outlier_fraction: s.outlier_fraction,
                });
            }
            if let Some(j) = &t.jerk {
                jsi.push(JsiRow { file: &t.file, jsi: j.jsi });
            }
        }
        for k in &st.ks {
            ks.push(KsRow {
                series: &k.series,
                a: &k.a,
                b: &k.b,
                statistic: k.statistic,
            });
        }
    }
    out.write_json(
        "report.json",
        &Report {
            schema: "paai-report/1",
            summaries,
            jsi,
            ks,
            calibration,
            comparison,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use paai_core::classic_cf::idm_accel;

    #[test]
    fn axis_specs() {
        let a = parse_axis("k1=0.01:0.2:20").unwrap();
        assert_eq!((a.name.as_str(), a.lo, a.hi, a.steps), ("k1", 0.01, 0.2, 20));
        for bad in ["k1", "k1=0:1", "k1=0:1:x", "k1=0:1:2:3"] {
            assert!(parse_axis(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn ovrv_equilibrium_speed_inverts_spacing() {
        let p = OvrvParams::EV_ACC;
        let m = ClassicModel::Ovrv(p);
        let v = equilibrium_speed(&m, p.equilibrium_spacing(15.0)).unwrap();
        assert!((v - 15.0).abs() < 1e-9);
        assert_eq!(equilibrium_speed(&m, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn idm_equilibrium_speed_is_a_fixed_point() {
        let p = IdmParams::EV_ACC;
        let v = equilibrium_speed(&ClassicModel::Idm(p), 30.0).unwrap();
        assert!(idm_accel(&p, &CfState::new(30.0, v, v)).unwrap().abs() < 1e-9);
    }
}
