//! Configured end-to-end experiments. Every stage reads its inputs from the
//! output directory and writes its products there, so any stage can be
//! rerun on its own from upstream artifacts.
//!
//! Time layout of a run (model hours): the training period is
//! `[0, train_hours]`; DA bootstrap cycles start at `init_lead_hours`;
//! test cycles start at `train_hours + init_lead_hours`; the nature run
//! extends past the last cycle by the longest evaluation lead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::daflow::{
    bootstrap_train, initial_background, run_cycles, AssimDeps, CascadeSpec, CycleOutput, CyclePlan, CycleRecord, DaModel, DaModelMeta,
    DaModels, DaTrainConfig, OrderPolicy,
};
use crate::dynamics::{generate_nature_run, perturbed_rest_state, DynParams, NatureRun};
use crate::error::{Error, Result};
use crate::forecast::{
    pretrain, rollout_finetune, ForecastModel, ForecastTrainConfig, Forecaster, RolloutConfig, SurrogatePair, SurrogateShape, Variant,
};
use crate::fourdvar::{SolverConfig, Stream};
use crate::grid::{build_climatology, lat_weights, Climatology, GridSpec, LevelStats, StateField, VariableWeights};
use crate::io::{read_state, write_state};
use crate::netcore::{read_checkpoint, write_checkpoint, TrainConfig};
use crate::obsops::{
    radiance_truth, read_conv_csv, read_rad_csv, sample_conventional, train_emulator, write_conv_csv, write_rad_csv, EmulatorMeta,
    EmulatorSample, Instrument, ObsStore, RadianceBatch, RadianceEmulator, RadianceTruthSpec, SLOT_HOURS,
};
use crate::verify::{metrics_by_lead, scorecard, skillful_lead, EvalPair, MetricRow, SKILL_THRESHOLD};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub levels: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub forcing: f64,
    pub c_merid: f64,
    pub c_vert: f64,
    pub dt_int: f64,
    pub time_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NatureConfig {
    pub seed: u64,
    pub init_amplitude: f64,
    pub spinup_hours: u32,
    pub train_hours: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    pub seed: u64,
    pub conv_density: f64,
    /// Conventional error as a fraction of each level's climatological std.
    pub conv_sigma_frac: f64,
    pub instr_a: bool,
    pub instr_b: bool,
    pub rad_density: f64,
    pub rad_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastStageConfig {
    pub seed: u64,
    pub hidden: usize,
    pub depth: usize,
    pub leads: Vec<u32>,
    pub pretrain: ForecastTrainConfig,
    pub finetune: Option<ForecastTrainConfig>,
    pub short_rollout: RolloutConfig,
    /// Fine-tuning of the Medium model, started from the Short weights.
    pub medium: Option<ForecastTrainConfig>,
    pub medium_rollout: RolloutConfig,
    pub handoff_hours: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsopConfig {
    pub seed: u64,
    pub hidden: usize,
    pub train: TrainConfig,
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaStageConfig {
    pub seed: u64,
    pub hidden: usize,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    pub cycles_per_round: usize,
    pub refine_rounds: usize,
    pub window_mix: bool,
    pub oracle: SolverConfig,
    pub oracle_bg_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderConfig {
    AFirst,
    BFirst,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    Surrogate,
    Perfect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleStageConfig {
    pub seed: u64,
    pub interval_hours: u32,
    pub long_offsets: Vec<u32>,
    pub short_offsets: Vec<u32>,
    pub cycles: usize,
    pub spinup: usize,
    pub init_lead_hours: u32,
    pub order: OrderConfig,
    pub conv: bool,
    pub instr_a: bool,
    pub instr_b: bool,
    pub forecaster: ForecasterKind,
    pub lat_mask_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub leads: Vec<u32>,
    /// Forecasts start from every n-th post-spin-up cycle.
    pub every_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub output_dir: PathBuf,
    pub grid: GridConfig,
    pub dynamics: DynamicsConfig,
    pub nature: NatureConfig,
    pub obs: ObsConfig,
    pub forecast: ForecastStageConfig,
    pub obsop: ObsopConfig,
    pub da: DaStageConfig,
    pub cycle: CycleStageConfig,
    pub eval: EvalConfig,
    /// Stages `run` executes; empty means all of them.
    #[serde(default)]
    pub stages: Vec<String>,
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), msg: msg.into() }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| cfg_err(&format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.levels, self.grid.rows, self.grid.cols).map_err(|e| cfg_err("grid", e.to_string()))
    }

    pub fn dyn_params(&self) -> DynParams {
        let d = &self.dynamics;
        DynParams {
            forcing: vec![d.forcing; self.grid.levels],
            c_merid: d.c_merid,
            c_vert: d.c_vert,
            dt_int: d.dt_int,
            time_scale: d.time_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err("version", format!("expected {CONFIG_VERSION}, found {}", self.version)));
        }
        let spec = self.grid_spec()?;
        self.dyn_params().validate(&spec).map_err(|e| cfg_err("dynamics", e.to_string()))?;
        let o = &self.obs;
        if !(o.conv_density > 0.0 && o.conv_density <= 1.0) {
            return Err(cfg_err("obs.conv_density", "must be in (0, 1]"));
        }
        if !(o.rad_density > 0.0 && o.rad_density <= 1.0) {
            return Err(cfg_err("obs.rad_density", "must be in (0, 1]"));
        }
        if !(o.conv_sigma_frac > 0.0) || !(o.rad_noise >= 0.0) {
            return Err(cfg_err("obs", "noise levels must be positive"));
        }
        let f = &self.forecast;
        if !f.leads.contains(&1) {
            return Err(cfg_err("forecast.leads", "must contain 1"));
        }
        if f.depth == 0 || f.hidden == 0 {
            return Err(cfg_err("forecast", "hidden width and depth must be positive"));
        }
        let c = &self.cycle;
        let plan = CyclePlan {
            start: 0,
            interval_hours: c.interval_hours,
            long_offsets: c.long_offsets.clone(),
            short_offsets: c.short_offsets.clone(),
            cycles: c.cycles,
            spinup: c.spinup,
        };
        plan.validate().map_err(|e| cfg_err("cycle", e.to_string()))?;
        if c.interval_hours as i64 % SLOT_HOURS != 0 || c.long_offsets.iter().any(|o| *o as i64 % SLOT_HOURS != 0) {
            return Err(cfg_err("cycle", format!("interval and offsets must be multiples of {SLOT_HOURS} h")));
        }
        if c.spinup >= c.cycles {
            return Err(cfg_err("cycle.spinup", "must be smaller than the number of cycles"));
        }
        if (c.instr_a && !o.instr_a) || (c.instr_b && !o.instr_b) {
            return Err(cfg_err("cycle", "an instrument is assimilated but not observed"));
        }
        let da_span = c.init_lead_hours as u64 + (self.da.cycles_per_round as u64 + 1) * c.interval_hours as u64;
        if da_span > self.nature.train_hours as u64 {
            return Err(cfg_err("da.cycles_per_round", "bootstrap cycles do not fit in the training period"));
        }
        if self.eval.leads.is_empty() || self.eval.leads.contains(&0) || self.eval.every_cycles == 0 {
            return Err(cfg_err("eval", "leads must be positive and every_cycles at least 1"));
        }
        if let Some(s) = self.stages.iter().find(|s| !STAGES.contains(&s.as_str())) {
            return Err(cfg_err("stages", format!("unknown stage `{s}`")));
        }
        Ok(())
    }

    /// Hash of everything except the stage selection and output location,
    /// so runs of different stage subsets share one manifest and a moved
    /// run keeps its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.stages.clear();
        c.output_dir = PathBuf::new();
        sha_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }

    pub fn test_start(&self) -> i64 {
        self.nature.train_hours as i64 + self.cycle.init_lead_hours as i64
    }

    pub fn nature_end(&self) -> i64 {
        let last = self.test_start() + self.cycle.cycles as i64 * self.cycle.interval_hours as i64;
        let lead = *self.eval.leads.iter().max().unwrap() as i64;
        last + lead.max(self.cycle.interval_hours as i64)
    }

    pub fn cycle_plan(&self) -> CyclePlan {
        let c = &self.cycle;
        CyclePlan {
            start: self.test_start(),
            interval_hours: c.interval_hours,
            long_offsets: c.long_offsets.clone(),
            short_offsets: c.short_offsets.clone(),
            cycles: c.cycles,
            spinup: c.spinup,
        }
    }

    pub fn order_policy(&self) -> OrderPolicy {
        let c = &self.cycle;
        let spec = |a_first| {
            CascadeSpec::full(a_first)
                .with_enabled(Stream::Conv, c.conv)
                .with_enabled(Stream::InstrA, c.instr_a)
                .with_enabled(Stream::InstrB, c.instr_b)
        };
        match c.order {
            OrderConfig::AFirst => OrderPolicy::Fixed(spec(true)),
            OrderConfig::BFirst => OrderPolicy::Fixed(spec(false)),
            OrderConfig::Random => OrderPolicy::Random { seed: c.seed, conv: c.conv, instr_a: c.instr_a, instr_b: c.instr_b },
        }
    }

    pub fn radiance_spec(&self, inst: Instrument) -> Result<RadianceTruthSpec> {
        let spec = self.grid_spec()?;
        let mut s = RadianceTruthSpec::standard(inst, &spec);
        s.density = self.obs.rad_density;
        s.noise = vec![self.obs.rad_noise; s.channels()];
        s.lat_mask_deg = self.cycle.lat_mask_deg;
        Ok(s)
    }
}

pub fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stage names in dependency order.
pub const STAGES: [&str; 8] = ["nature-run", "make-obs", "train-forecast", "train-obsop", "train-da", "cycle", "forecast", "verify"];

/// File locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn nature_dir(&self) -> PathBuf {
        self.root.join("nature")
    }

    pub fn nature_state(&self, t: i64) -> PathBuf {
        self.nature_dir().join(format!("t{t:06}.xcst"))
    }

    pub fn obs_dir(&self) -> PathBuf {
        self.root.join("obs")
    }

    pub fn conv_csv(&self) -> PathBuf {
        self.obs_dir().join("conv.csv")
    }

    pub fn rad_csv(&self, inst: Instrument) -> PathBuf {
        self.obs_dir().join(format!("{}.csv", inst.name()))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn model(&self, name: &str) -> (PathBuf, PathBuf) {
        let d = self.models_dir();
        (d.join(format!("{name}.xcnn")), d.join(format!("{name}.json")))
    }

    pub fn cycle_dir(&self) -> PathBuf {
        self.root.join("cycle")
    }

    pub fn analysis(&self, t: i64) -> PathBuf {
        self.cycle_dir().join("analysis").join(format!("t{t:06}.xcst"))
    }

    pub fn init(&self, t: i64) -> PathBuf {
        self.cycle_dir().join("init").join(format!("t{t:06}.xcst"))
    }

    pub fn cycles_json(&self) -> PathBuf {
        self.cycle_dir().join("cycles.json")
    }

    pub fn forecast_dir(&self) -> PathBuf {
        self.root.join("forecast")
    }

    pub fn forecast(&self, t: i64, lead: u32) -> PathBuf {
        self.forecast_dir().join(format!("t{t:06}_l{lead:03}.xcst"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn scorecard_csv(&self) -> PathBuf {
        self.root.join("scorecard.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

/// Digest of one output: a file, or a directory tree hashed over its
/// sorted relative paths and contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub path: String,
    pub files: usize,
    pub sha256: String,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn digest(root: &Path, rel: &str) -> Result<OutputDigest> {
    let p = root.join(rel);
    let mut files = Vec::new();
    if p.is_dir() {
        collect_files(&p, &mut files)?;
    } else {
        files.push(p.clone());
    }
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        let name = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
        h.update(name.as_bytes());
        h.update([0]);
        h.update(Sha256::digest(fs::read(f)?));
    }
    Ok(OutputDigest { path: rel.to_string(), files: files.len(), sha256: hex::encode(h.finalize()) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    /// Hash of the configuration sections the stage reads.
    pub config_hash: String,
    pub outputs: Vec<OutputDigest>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load_or_new(layout: &Layout, cfg: &ExperimentConfig) -> Result<Self> {
        let p = layout.manifest();
        if p.exists() {
            let m: Manifest = serde_json::from_str(&fs::read_to_string(&p)?)?;
            if m.config_hash == cfg.hash() {
                return Ok(m);
            }
        }
        Ok(Manifest { name: cfg.name.clone(), config_hash: cfg.hash(), stages: Vec::new() })
    }

    fn put(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|s| STAGES.iter().position(|n| *n == s.stage).unwrap_or(usize::MAX));
    }

    pub fn save(&self, layout: &Layout) -> Result<()> {
        fs::write(layout.manifest(), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn section_hash(parts: &[serde_json::Value]) -> String {
    sha_hex(&serde_json::to_vec(parts).expect("config serialises"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NatureMeta {
    params: DynParams,
    seed: u64,
    cadence_hours: u32,
    start: i64,
    end: i64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn fresh_dir(p: &Path) -> Result<()> {
    if p.exists() {
        fs::remove_dir_all(p)?;
    }
    fs::create_dir_all(p)?;
    Ok(())
}

pub fn read_nature(layout: &Layout) -> Result<NatureRun> {
    let meta: NatureMeta = read_json(&layout.nature_dir().join("nature.json"))?;
    let states = (meta.start..=meta.end)
        .step_by(meta.cadence_hours as usize)
        .map(|t| read_state(layout.nature_state(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(NatureRun { states, params: meta.params, seed: meta.seed, cadence_hours: meta.cadence_hours })
}

/// Nature states of the training period.
pub fn training_states(cfg: &ExperimentConfig, nature: &NatureRun) -> Vec<StateField> {
    nature.range(0, cfg.nature.train_hours as i64 + 1)
}

fn training_run(cfg: &ExperimentConfig, nature: &NatureRun) -> NatureRun {
    NatureRun {
        states: training_states(cfg, nature),
        params: nature.params.clone(),
        seed: nature.seed,
        cadence_hours: nature.cadence_hours,
    }
}

fn stage_nature(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let spec = cfg.grid_spec()?;
    let p = cfg.dyn_params();
    let x0 = perturbed_rest_state(spec, &p, cfg.nature.seed, cfg.nature.init_amplitude);
    let end = cfg.nature_end();
    let run = generate_nature_run(&x0, &p, cfg.nature.spinup_hours, end as u32, 1, cfg.nature.seed)?;
    fresh_dir(&layout.nature_dir())?;
    for s in &run.states {
        write_state(layout.nature_state(s.time), s)?;
    }
    write_json(
        &layout.nature_dir().join("nature.json"),
        &NatureMeta { params: p, seed: cfg.nature.seed, cadence_hours: 1, start: 0, end },
    )?;
    Ok(StageRecord {
        stage: "nature-run".into(),
        seed: cfg.nature.seed,
        config_hash: section_hash(&[serde_json::json!(cfg.grid), serde_json::json!(cfg.dynamics), serde_json::json!(cfg.nature)]),
        outputs: vec![digest(&layout.root, "nature")?],
        summary: serde_json::json!({ "states": run.states.len(), "end_hour": end }),
    })
}

/// Per-level statistics of the training period.
pub fn training_stats(cfg: &ExperimentConfig, nature: &NatureRun) -> Result<LevelStats> {
    LevelStats::from_states(&training_states(cfg, nature))
}

fn stage_obs(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let nature = read_nature(layout)?;
    let stats = training_stats(cfg, &nature)?;
    let sigma: Vec<f64> = stats.std.iter().map(|s| cfg.obs.conv_sigma_frac * s).collect();
    let mut store = ObsStore::default();
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    let (spec_a, spec_b) = (cfg.radiance_spec(Instrument::A)?, cfg.radiance_spec(Instrument::B)?);
    for s in nature.states.iter().filter(|s| s.time % SLOT_HOURS == 0) {
        store.conv.insert(s.time, sample_conventional(s, cfg.obs.conv_density, &sigma, cfg.obs.seed)?);
        if cfg.obs.instr_a {
            a.insert(s.time, radiance_truth(s, &spec_a, cfg.obs.seed, 1)?);
        }
        if cfg.obs.instr_b {
            b.insert(s.time, radiance_truth(s, &spec_b, cfg.obs.seed, 2)?);
        }
    }
    fresh_dir(&layout.obs_dir())?;
    write_conv_csv(&layout.conv_csv(), &store.conv)?;
    let mut counts = serde_json::Map::new();
    counts.insert("conv".into(), store.conv.values().map(|b| b.len()).sum::<usize>().into());
    for (inst, m) in [(Instrument::A, &a), (Instrument::B, &b)] {
        if !m.is_empty() {
            write_rad_csv(&layout.rad_csv(inst), m)?;
            counts.insert(inst.name().into(), m.values().map(|b| b.len()).sum::<usize>().into());
        }
    }
    Ok(StageRecord {
        stage: "make-obs".into(),
        seed: cfg.obs.seed,
        config_hash: section_hash(&[serde_json::json!(cfg.obs), serde_json::json!(cfg.cycle.lat_mask_deg)]),
        outputs: vec![digest(&layout.root, "obs")?],
        summary: serde_json::Value::Object(counts),
    })
}

pub fn read_store(cfg: &ExperimentConfig, layout: &Layout) -> Result<ObsStore> {
    let mut store = ObsStore { conv: read_conv_csv(&layout.conv_csv())?, rad: BTreeMap::new() };
    for (inst, on) in [(Instrument::A, cfg.obs.instr_a), (Instrument::B, cfg.obs.instr_b)] {
        if on {
            for (t, b) in read_rad_csv(&layout.rad_csv(inst))? {
                store.rad.insert((inst, t), b);
            }
        }
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ForecastMeta {
    variant: Variant,
    leads: Vec<u32>,
    stats: LevelStats,
}

fn save_forecast(layout: &Layout, name: &str, m: &ForecastModel) -> Result<()> {
    let (net, meta) = layout.model(name);
    write_checkpoint(net, &m.net)?;
    write_json(&meta, &ForecastMeta { variant: m.variant, leads: m.leads.clone(), stats: m.stats.clone() })
}

fn load_forecast(layout: &Layout, name: &str) -> Result<ForecastModel> {
    let (net, meta) = layout.model(name);
    let meta: ForecastMeta = read_json(&meta)?;
    Ok(ForecastModel { net: read_checkpoint(net)?, variant: meta.variant, leads: meta.leads, stats: meta.stats })
}

fn stage_train_forecast(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let nature = read_nature(layout)?;
    let train = training_run(cfg, &nature);
    let spec = cfg.grid_spec()?;
    let stats = LevelStats::from_states(&train.states)?;
    let f = &cfg.forecast;
    let vw = VariableWeights::uniform(spec.levels);
    let lw = lat_weights(&spec);
    let mut short = ForecastModel::new(spec.levels, stats, &f.leads, SurrogateShape { hidden: f.hidden, depth: f.depth }, f.seed)?;
    let pre = pretrain(&mut short, &train, &vw, &lw, &f.pretrain)?;
    let fine = match &f.finetune {
        Some(c) => rollout_finetune(&mut short, &train, &f.short_rollout, &vw, &lw, c)?,
        None => Vec::new(),
    };
    fs::create_dir_all(layout.models_dir())?;
    save_forecast(layout, "forecast_short", &short)?;
    let mut outputs = vec![digest(&layout.root, "models/forecast_short.xcnn")?, digest(&layout.root, "models/forecast_short.json")?];
    let mut med_hist = Vec::new();
    if let Some(c) = &f.medium {
        let mut medium = short.clone();
        medium.variant = Variant::Medium;
        med_hist = rollout_finetune(&mut medium, &train, &f.medium_rollout, &vw, &lw, c)?;
        save_forecast(layout, "forecast_medium", &medium)?;
        outputs.push(digest(&layout.root, "models/forecast_medium.xcnn")?);
        outputs.push(digest(&layout.root, "models/forecast_medium.json")?);
    } else {
        for p in [layout.model("forecast_medium").0, layout.model("forecast_medium").1] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    Ok(StageRecord {
        stage: "train-forecast".into(),
        seed: f.seed,
        config_hash: section_hash(&[serde_json::json!(cfg.forecast), serde_json::json!(cfg.nature.train_hours)]),
        outputs,
        summary: serde_json::json!({ "pretrain_loss": pre, "finetune_loss": fine, "medium_loss": med_hist }),
    })
}

/// The forecaster the cycling stages use.
pub fn load_forecaster(cfg: &ExperimentConfig, layout: &Layout) -> Result<Forecaster> {
    match cfg.cycle.forecaster {
        ForecasterKind::Perfect => Ok(Forecaster::Perfect { params: cfg.dyn_params(), leads: cfg.forecast.leads.clone() }),
        ForecasterKind::Surrogate => Ok(Forecaster::Surrogate(load_surrogate_pair(cfg, layout)?)),
    }
}

pub fn load_surrogate_pair(cfg: &ExperimentConfig, layout: &Layout) -> Result<SurrogatePair> {
    let short = load_forecast(layout, "forecast_short")?;
    let medium = if layout.model("forecast_medium").0.exists() { Some(load_forecast(layout, "forecast_medium")?) } else { None };
    Ok(SurrogatePair { short, medium, handoff_hours: cfg.forecast.handoff_hours })
}

/// Complete-channel radiance samples of the training period.
fn emulator_samples(
    cfg: &ExperimentConfig,
    nature: &NatureRun,
    batches: &BTreeMap<i64, RadianceBatch>,
    channels: usize,
) -> Vec<EmulatorSample> {
    let mut out = Vec::new();
    for (t, b) in batches.range(..=cfg.nature.train_hours as i64) {
        let Some(x) = nature.at(*t) else { continue };
        let mut groups: BTreeMap<(usize, usize, u32, u64), Vec<Option<f64>>> = BTreeMap::new();
        for r in &b.records {
            groups.entry((r.i, r.j, r.aux.scan, r.aux.zen.to_bits())).or_insert_with(|| vec![None; channels])[r.c] = Some(r.value);
        }
        for ((i, j, scan, zen), vals) in groups {
            if let Some(ch) = vals.into_iter().collect::<Option<Vec<f64>>>() {
                out.push(EmulatorSample {
                    column: x.column(i, j),
                    aux: crate::obsops::AuxInfo { scan, zen: f64::from_bits(zen) },
                    channels: ch,
                });
            }
        }
    }
    out
}

fn save_emulator(layout: &Layout, inst: Instrument, em: &RadianceEmulator) -> Result<()> {
    let (net, meta) = layout.model(&format!("emulator_{}", inst.name()));
    write_checkpoint(net, &em.net)?;
    write_json(&meta, &em.meta())
}

pub fn load_emulator(layout: &Layout, inst: Instrument) -> Result<RadianceEmulator> {
    let (net, meta) = layout.model(&format!("emulator_{}", inst.name()));
    let meta: EmulatorMeta = read_json(&meta)?;
    RadianceEmulator::from_parts(read_checkpoint(net)?, meta)
}

fn stage_train_obsop(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let nature = read_nature(layout)?;
    let store = read_store(cfg, layout)?;
    let stats = training_stats(cfg, &nature)?;
    let spec = cfg.grid_spec()?;
    fs::create_dir_all(layout.models_dir())?;
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for (inst, on) in [(Instrument::A, cfg.obs.instr_a), (Instrument::B, cfg.obs.instr_b)] {
        if !on {
            continue;
        }
        let channels = cfg.radiance_spec(inst)?.channels();
        let batches: BTreeMap<i64, RadianceBatch> =
            store.rad.iter().filter(|((i, _), _)| *i == inst).map(|((_, t), b)| (*t, b.clone())).collect();
        let samples = emulator_samples(cfg, &nature, &batches, channels);
        let mut em = RadianceEmulator::new(stats.clone(), channels, spec.cols, cfg.obsop.hidden, cfg.obsop.seed)?;
        let hist = train_emulator(&mut em, &samples, cfg.obsop.holdout, &cfg.obsop.train)?;
        save_emulator(layout, inst, &em)?;
        let name = format!("emulator_{}", inst.name());
        outputs.push(digest(&layout.root, &format!("models/{name}.xcnn"))?);
        outputs.push(digest(&layout.root, &format!("models/{name}.json"))?);
        summary.insert(name, serde_json::json!({ "samples": samples.len(), "loss": hist, "spread": em.spread }));
    }
    Ok(StageRecord {
        stage: "train-obsop".into(),
        seed: cfg.obsop.seed,
        config_hash: section_hash(&[serde_json::json!(cfg.obsop), serde_json::json!(cfg.obs), serde_json::json!(cfg.nature.train_hours)]),
        outputs,
        summary: serde_json::Value::Object(summary),
    })
}

/// Standard deviation of every channel's values over the training period.
pub fn channel_std(cfg: &ExperimentConfig, store: &ObsStore, inst: Instrument, channels: usize) -> Vec<f64> {
    let (mut s, mut s2, mut n) = (vec![0.0; channels], vec![0.0; channels], vec![0usize; channels]);
    for ((i, t), b) in &store.rad {
        if *i != inst || *t > cfg.nature.train_hours as i64 {
            continue;
        }
        for r in &b.records {
            s[r.c] += r.value;
            s2[r.c] += r.value * r.value;
            n[r.c] += 1;
        }
    }
    (0..channels)
        .map(|c| {
            let k = n[c].max(1) as f64;
            let m = s[c] / k;
            (s2[c] / k - m * m).max(0.0).sqrt().max(crate::grid::MIN_LEVEL_STD)
        })
        .collect()
}

/// Everything the assimilation stages read from disk.
pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub nature: NatureRun,
    pub store: ObsStore,
    pub stats: LevelStats,
    pub forecaster: Forecaster,
    pub emulator_a: Option<RadianceEmulator>,
    pub emulator_b: Option<RadianceEmulator>,
    pub qc_std_a: Vec<f64>,
    pub qc_std_b: Vec<f64>,
}

impl Loaded {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let layout = Layout::new(&cfg.output_dir);
        let nature = read_nature(&layout)?;
        let store = read_store(cfg, &layout)?;
        let stats = training_stats(cfg, &nature)?;
        let forecaster = load_forecaster(cfg, &layout)?;
        let emulator_a = if cfg.obs.instr_a { Some(load_emulator(&layout, Instrument::A)?) } else { None };
        let emulator_b = if cfg.obs.instr_b { Some(load_emulator(&layout, Instrument::B)?) } else { None };
        let qc_std_a = emulator_a.as_ref().map(|e| channel_std(cfg, &store, Instrument::A, e.channels())).unwrap_or_default();
        let qc_std_b = emulator_b.as_ref().map(|e| channel_std(cfg, &store, Instrument::B, e.channels())).unwrap_or_default();
        Ok(Self { cfg: cfg.clone(), layout, nature, store, stats, forecaster, emulator_a, emulator_b, qc_std_a, qc_std_b })
    }

    pub fn deps(&self) -> AssimDeps<'_> {
        AssimDeps {
            forecaster: &self.forecaster,
            emulator_a: self.emulator_a.as_ref(),
            emulator_b: self.emulator_b.as_ref(),
            qc_std_conv: self.stats.std.clone(),
            qc_std_a: self.qc_std_a.clone(),
            qc_std_b: self.qc_std_b.clone(),
            lat_mask_deg: self.cfg.cycle.lat_mask_deg,
        }
    }

    pub fn da_train_config(&self) -> DaTrainConfig {
        let d = &self.cfg.da;
        let c = &self.cfg.cycle;
        DaTrainConfig {
            hidden: d.hidden,
            train: d.train.clone(),
            finetune_epochs: d.finetune_epochs,
            cycles_per_round: d.cycles_per_round,
            refine_rounds: d.refine_rounds,
            start: c.init_lead_hours as i64,
            interval_hours: c.interval_hours,
            long_offsets: c.long_offsets.clone(),
            window_mix: d.window_mix,
            oracle: d.oracle,
            oracle_bg_frac: d.oracle_bg_frac,
            init_lead_hours: c.init_lead_hours,
            seed: d.seed,
        }
    }

    pub fn load_models(&self) -> Result<DaModels> {
        let mut models = DaModels::default();
        for s in [Stream::Conv, Stream::InstrA, Stream::InstrB] {
            let (net, meta) = self.layout.model(&format!("da_{}", s.name()));
            if net.exists() {
                let meta: DaModelMeta = read_json(&meta)?;
                *models.slot(s) = Some(DaModel::from_parts(read_checkpoint(net)?, meta)?);
            }
        }
        Ok(models)
    }

    /// Test-period cycling with the configured cycle plan but the long
    /// window cut to `long_offsets` and the given order.
    pub fn run_variant(&self, long_offsets: &[u32], order: &OrderPolicy, models: &DaModels) -> Result<CycleReport> {
        let plan = CyclePlan { long_offsets: long_offsets.to_vec(), ..self.cfg.cycle_plan() };
        Ok(CycleReport::new(self.run(&plan, order, models)?.records, plan.spinup))
    }

    /// Test-period cycling with the given plan and order.
    pub fn run(&self, plan: &CyclePlan, order: &OrderPolicy, models: &DaModels) -> Result<CycleOutput> {
        let lw = lat_weights(&self.cfg.grid_spec()?);
        let xb0 = initial_background(&self.nature, &self.forecaster, plan.start, self.cfg.cycle.init_lead_hours)?;
        run_cycles(&xb0, &self.nature, &self.store, plan, order, models, &self.deps(), &lw)
    }
}

fn stage_train_da(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let l = Loaded::load(cfg)?;
    let spec = cfg.grid_spec()?;
    let (models, log) = bootstrap_train(
        &l.nature,
        &l.store,
        &l.deps(),
        &l.stats,
        &l.stats.std,
        &VariableWeights::uniform(spec.levels),
        &lat_weights(&spec),
        &l.da_train_config(),
    )?;
    fs::create_dir_all(layout.models_dir())?;
    let mut outputs = Vec::new();
    for s in [Stream::Conv, Stream::InstrA, Stream::InstrB] {
        let name = format!("da_{}", s.name());
        let (net, meta) = layout.model(&name);
        match models.get(s) {
            Some(m) => {
                write_checkpoint(&net, &m.net)?;
                write_json(&meta, &m.meta())?;
                outputs.push(digest(&layout.root, &format!("models/{name}.xcnn"))?);
                outputs.push(digest(&layout.root, &format!("models/{name}.json"))?);
            }
            None => {
                for p in [net, meta] {
                    if p.exists() {
                        fs::remove_file(p)?;
                    }
                }
            }
        }
    }
    let summary: Vec<serde_json::Value> = log.into_iter().map(|(k, v)| serde_json::json!({ "fit": k, "loss": v })).collect();
    Ok(StageRecord {
        stage: "train-da".into(),
        seed: cfg.da.seed,
        config_hash: section_hash(&[serde_json::json!(cfg.da), serde_json::json!(cfg.cycle)]),
        outputs,
        summary: serde_json::json!(summary),
    })
}

/// Per-cycle record written to `cycles.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub records: Vec<CycleRecord>,
    pub spinup: usize,
    pub mean_bg_rmse: f64,
    pub mean_an_rmse: f64,
    pub mean_init_rmse: f64,
    /// Post-spin-up mean analysis RMSE of every level.
    pub level_an_rmse: Vec<f64>,
    pub improved_fraction: f64,
}

impl CycleReport {
    pub fn new(records: Vec<CycleRecord>, spinup: usize) -> Self {
        let post: Vec<&CycleRecord> = records.iter().skip(spinup).collect();
        let n = post.len().max(1) as f64;
        let mean_bg_rmse = post.iter().map(|r| r.bg_mean()).sum::<f64>() / n;
        let mean_an_rmse = post.iter().map(|r| r.an_mean()).sum::<f64>() / n;
        let mean_init_rmse = post.iter().map(|r| crate::daflow::mean(&r.init_rmse)).sum::<f64>() / n;
        let improved_fraction = post.iter().filter(|r| r.an_mean() < r.bg_mean()).count() as f64 / n;
        let levels = records.first().map(|r| r.an_rmse.len()).unwrap_or(0);
        let level_an_rmse = (0..levels).map(|v| post.iter().map(|r| r.an_rmse[v]).sum::<f64>() / n).collect();
        Self { records, spinup, mean_bg_rmse, mean_an_rmse, mean_init_rmse, level_an_rmse, improved_fraction }
    }
}

fn stage_cycle(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let l = Loaded::load(cfg)?;
    let models = l.load_models()?;
    let out = l.run(&cfg.cycle_plan(), &cfg.order_policy(), &models)?;
    fresh_dir(&layout.cycle_dir())?;
    fs::create_dir_all(layout.cycle_dir().join("analysis"))?;
    fs::create_dir_all(layout.cycle_dir().join("init"))?;
    for (a, i) in out.analyses.iter().zip(&out.inits) {
        write_state(layout.analysis(a.time), a)?;
        write_state(layout.init(i.time), i)?;
    }
    let report = CycleReport::new(out.records, cfg.cycle.spinup);
    write_json(&layout.cycles_json(), &report)?;
    Ok(StageRecord {
        stage: "cycle".into(),
        seed: cfg.cycle.seed,
        config_hash: section_hash(&[serde_json::json!(cfg.cycle), serde_json::json!(cfg.da)]),
        outputs: vec![digest(&layout.root, "cycle")?],
        summary: serde_json::json!({
            "mean_bg_rmse": report.mean_bg_rmse,
            "mean_an_rmse": report.mean_an_rmse,
            "mean_init_rmse": report.mean_init_rmse,
            "improved_fraction": report.improved_fraction,
        }),
    })
}

/// Number of worker threads for independent forecasts, from
/// `GRADDA_WORKERS` (default 1). Results do not depend on it.
pub fn workers() -> usize {
    std::env::var("GRADDA_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Analysis times whose short-window analyses initialise forecasts.
pub fn forecast_inits(cfg: &ExperimentConfig) -> Vec<i64> {
    let plan = cfg.cycle_plan();
    (cfg.cycle.spinup..cfg.cycle.cycles).step_by(cfg.eval.every_cycles).map(|c| plan.time_of(c)).collect()
}

fn stage_forecast(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let pair = load_surrogate_pair(cfg, layout)?;
    let fc = Forecaster::Surrogate(pair);
    let inits = forecast_inits(cfg);
    let states = inits.iter().map(|&t| read_state(layout.init(t))).collect::<Result<Vec<_>>>()?;
    let leads = cfg.eval.leads.clone();
    let run_one = |x: &StateField| -> Result<Vec<StateField>> { leads.iter().map(|&l| fc.forecast(x, l)).collect() };
    let n = workers().min(states.len().max(1));
    let chunk = states.len().div_ceil(n).max(1);
    let results: Vec<Result<Vec<StateField>>> = std::thread::scope(|s| {
        let handles: Vec<_> = states.chunks(chunk).map(|c| s.spawn(move || c.iter().map(run_one).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("forecast worker panicked")).collect()
    });
    fresh_dir(&layout.forecast_dir())?;
    for (t, r) in inits.iter().zip(results) {
        for (lead, f) in leads.iter().zip(r?) {
            write_state(layout.forecast(*t, *lead), &f)?;
        }
    }
    Ok(StageRecord {
        stage: "forecast".into(),
        seed: 0,
        config_hash: section_hash(&[serde_json::json!(cfg.eval), serde_json::json!(cfg.forecast.handoff_hours)]),
        outputs: vec![digest(&layout.root, "forecast")?],
        summary: serde_json::json!({ "inits": inits.len(), "leads": leads }),
    })
}

/// Climatology of the training period at the cycle interval.
pub fn training_climatology(cfg: &ExperimentConfig, nature: &NatureRun) -> Result<Climatology> {
    build_climatology(&training_states(cfg, nature), cfg.cycle.interval_hours)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn truth(nature: &NatureRun, t: i64) -> Result<StateField> {
    nature.at(t).cloned().ok_or_else(|| Error::InvalidParameter(format!("nature run has no state at t={t}")))
}

fn stage_verify(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageRecord> {
    let nature = read_nature(layout)?;
    let clim = training_climatology(cfg, &nature)?;
    let lw = lat_weights(&cfg.grid_spec()?);
    let plan = cfg.cycle_plan();
    let mut rows: Vec<MetricRow> = Vec::new();
    for (run, path_of) in [("analysis", Layout::analysis as fn(&Layout, i64) -> PathBuf), ("init", Layout::init)] {
        let eval = (cfg.cycle.spinup..cfg.cycle.cycles)
            .map(|c| {
                let t = plan.time_of(c);
                Ok(EvalPair { pred: read_state(path_of(layout, t))?, truth: truth(&nature, t)?, lead_hours: 0 })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(metrics_by_lead(run, &eval, &clim, &lw)?);
    }
    let mut fc_eval = Vec::new();
    let mut persist = Vec::new();
    for t in forecast_inits(cfg) {
        let init = read_state(layout.init(t))?;
        for &lead in &cfg.eval.leads {
            let tr = truth(&nature, t + lead as i64)?;
            fc_eval.push(EvalPair { pred: read_state(layout.forecast(t, lead))?, truth: tr.clone(), lead_hours: lead });
            persist.push(EvalPair { pred: init.clone().with_time(t + lead as i64), truth: tr, lead_hours: lead });
        }
    }
    let fc_rows = metrics_by_lead("forecast", &fc_eval, &clim, &lw)?;
    let base_rows = metrics_by_lead("persistence", &persist, &clim, &lw)?;
    let card = scorecard(&base_rows, &fc_rows);
    let mut skill = serde_json::Map::new();
    for v in 0..cfg.grid.levels {
        let series: Vec<&MetricRow> = fc_rows.iter().filter(|r| r.variable == v).collect();
        let leads: Vec<u32> = series.iter().map(|r| r.lead_hours).collect();
        let accs: Vec<f64> = series.iter().map(|r| r.acc).collect();
        let value = match skillful_lead(&leads, &accs, SKILL_THRESHOLD) {
            Ok(l) => serde_json::json!(l),
            Err(Error::NeverSkillful) => serde_json::Value::Null,
            Err(e) => return Err(e),
        };
        skill.insert(format!("level{v}"), value);
    }
    rows.extend(fc_rows);
    rows.extend(base_rows);
    write_csv(&layout.metrics_csv(), &rows)?;
    write_csv(&layout.scorecard_csv(), &card)?;
    Ok(StageRecord {
        stage: "verify".into(),
        seed: 0,
        config_hash: section_hash(&[serde_json::json!(cfg.eval), serde_json::json!(cfg.cycle)]),
        outputs: vec![digest(&layout.root, "metrics.csv")?, digest(&layout.root, "scorecard.csv")?],
        summary: serde_json::json!({ "skillful_lead_hours": skill }),
    })
}

/// Runs one stage and records it in the manifest.
pub fn run_stage(cfg: &ExperimentConfig, stage: &str) -> Result<StageRecord> {
    let layout = Layout::new(&cfg.output_dir);
    fs::create_dir_all(&layout.root)?;
    let wrap = |r: Result<StageRecord>| r.map_err(|e| Error::Stage { stage: stage.to_string(), source: Box::new(e) });
    let rec = wrap(match stage {
        "nature-run" => stage_nature(cfg, &layout),
        "make-obs" => stage_obs(cfg, &layout),
        "train-forecast" => stage_train_forecast(cfg, &layout),
        "train-obsop" => stage_train_obsop(cfg, &layout),
        "train-da" => stage_train_da(cfg, &layout),
        "cycle" => stage_cycle(cfg, &layout),
        "forecast" => stage_forecast(cfg, &layout),
        "verify" => stage_verify(cfg, &layout),
        other => return Err(Error::InvalidParameter(format!("unknown stage `{other}`"))),
    })?;
    let mut m = Manifest::load_or_new(&layout, cfg)?;
    m.put(rec.clone());
    m.save(&layout)?;
    Ok(rec)
}

/// Runs `stages` (all stages when empty) in dependency order.
pub fn run_experiment(cfg: &ExperimentConfig, stages: &[String], mut progress: impl FnMut(&StageRecord)) -> Result<Manifest> {
    for s in stages {
        if !STAGES.contains(&s.as_str()) {
            return Err(Error::InvalidParameter(format!("unknown stage `{s}`")));
        }
    }
    for s in STAGES {
        if stages.is_empty() || stages.iter().any(|x| x == s) {
            progress(&run_stage(cfg, s)?);
        }
    }
    Manifest::load_or_new(&Layout::new(&cfg.output_dir), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut c: ExperimentConfig = serde_json::from_str(include_str!("../../../configs/reference.json")).unwrap();
        c.output_dir = dir.to_path_buf();
        c.grid = GridConfig { levels: 2, rows: 8, cols: 16 };
        c.nature.train_hours = 240;
        c.nature.spinup_hours = 240;
        c.forecast.hidden = 8;
        c.forecast.pretrain.steps_per_epoch = 2;
        c.forecast.pretrain.train.epochs = 2;
        c.forecast.finetune = None;
        c.forecast.medium = None;
        c.obsop.hidden = 6;
        c.obsop.train.epochs = 2;
        c.da.hidden = 6;
        c.da.cycles_per_round = 4;
        c.da.refine_rounds = 0;
        c.da.train.epochs = 2;
        c.da.oracle.iters = 2;
        c.cycle.cycles = 4;
        c.cycle.spinup = 1;
        c.cycle.init_lead_hours = 24;
        c.eval.leads = vec![24, 48];
        c.eval.every_cycles = 2;
        c.validate().unwrap();
        c
    }

    #[test]
    fn reference_config_parses_and_validates() {
        let c: ExperimentConfig = serde_json::from_str(include_str!("../../../configs/reference.json")).unwrap();
        c.validate().unwrap();
        assert_eq!((c.grid.levels, c.grid.rows, c.grid.cols), (3, 16, 32));
        assert_eq!(c.cycle.cycles, 200);
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config(dir.path());
        c.obs.conv_density = 0.0;
        match c.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "obs.conv_density"),
            other => panic!("{other:?}"),
        }
        let text = serde_json::to_string(&tiny_config(dir.path())).unwrap().replace("\"levels\":2", "\"levels\":2,\"bogus\":1");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn nature_only_then_isolated_rerun_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(dir.path());
        let m1 = run_experiment(&c, &["nature-run".to_string()], |_| {}).unwrap();
        assert_eq!(m1.stages.len(), 1);
        assert!(Layout::new(dir.path()).nature_state(0).exists());
        let m2 = run_experiment(&c, &["nature-run".to_string()], |_| {}).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn tiny_pipeline_runs_and_downstream_stages_reproduce() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(dir.path());
        let m = run_experiment(&c, &[], |_| {}).unwrap();
        assert_eq!(m.stages.len(), STAGES.len());
        let layout = Layout::new(dir.path());
        let metrics = fs::read_to_string(layout.metrics_csv()).unwrap();
        assert!(metrics.starts_with("run,variable,lead_hours,rmse,bias,acc\n"));
        assert!(fs::read_to_string(layout.scorecard_csv()).unwrap().starts_with("variable,lead_hours,baseline,candidate,pct_diff\n"));
        // Delete downstream products and rerun only those stages.
        fs::remove_dir_all(layout.cycle_dir()).unwrap();
        fs::remove_dir_all(layout.forecast_dir()).unwrap();
        fs::remove_file(layout.metrics_csv()).unwrap();
        let again = run_experiment(&c, &["cycle".into(), "forecast".into(), "verify".into()], |_| {}).unwrap();
        assert_eq!(m, again);
    }
}
