//! Gradient-conditioned assimilation models, cascaded per-stream
//! assimilation and dual-window cycling, plus the bootstrap that trains the
//! models on backgrounds produced by the partially built system.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::NatureRun;
use crate::error::{Error, Result};
use crate::forecast::Forecaster;
use crate::fourdvar::{grad_at_background, solve_iterative, BackgroundTerm, DawPlan, RadOp, SolverConfig, Stream, StreamObs, StreamQc};
use crate::grid::{gather_stencil, stencil_len, LatWeights, LevelStats, StateField, VariableWeights};
use crate::losses::weighted_l1;
use crate::netcore::{fit, Activation, CondNet, Conditioning, LayerSpec, TrainConfig};
use crate::obsops::{ObsStore, RadianceEmulator};

/// Learned analysis step for one stream: the gradient stencil around a
/// column is mapped to that column's increment, conditioned on the
/// background column. Every layer is bias-free and film-conditioned, so a
/// zero gradient yields a zero increment.
#[derive(Debug, Clone, PartialEq)]
pub struct DaModel {
    pub net: CondNet,
    pub stream: Stream,
    /// Per-level gradient normalisation.
    pub grad_scale: Vec<f64>,
    pub bg_stats: LevelStats,
    /// Per-level increment scale.
    pub inc_scale: Vec<f64>,
}

/// JSON sidecar of a DA model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaModelMeta {
    pub stream: Stream,
    pub grad_scale: Vec<f64>,
    pub bg_stats: LevelStats,
    pub inc_scale: Vec<f64>,
}

/// One training example: background, gradient at the background and truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DaTuple {
    pub xb: StateField,
    pub grad: StateField,
    pub truth: StateField,
}

struct ColumnSample {
    input: Vec<f64>,
    cond: Vec<f64>,
    delta: Vec<f64>,
    weight: Vec<f64>,
}

impl DaModel {
    pub fn new(stream: Stream, bg_stats: LevelStats, hidden: usize, seed: u64) -> Result<Self> {
        let v = bg_stats.mean.len();
        let net = CondNet::new(
            vec![
                LayerSpec::new(stencil_len(v), hidden, Conditioning::Film, false, Activation::Tanh),
                LayerSpec::new(hidden, hidden, Conditioning::Film, false, Activation::Tanh),
                LayerSpec::new(hidden, v, Conditioning::Film, false, Activation::Identity),
            ],
            v,
            seed,
        )?;
        debug_assert!(net.preserves_zero());
        Ok(Self { net, stream, grad_scale: vec![1.0; v], bg_stats, inc_scale: vec![1.0; v] })
    }

    pub fn levels(&self) -> usize {
        self.bg_stats.mean.len()
    }

    pub fn meta(&self) -> DaModelMeta {
        DaModelMeta {
            stream: self.stream,
            grad_scale: self.grad_scale.clone(),
            bg_stats: self.bg_stats.clone(),
            inc_scale: self.inc_scale.clone(),
        }
    }

    pub fn from_parts(net: CondNet, meta: DaModelMeta) -> Result<Self> {
        let v = meta.bg_stats.mean.len();
        if net.input_dim() != stencil_len(v) || net.output_dim() != v || net.cond_dim() != v || !net.preserves_zero() {
            return Err(Error::ShapeMismatch("DA sidecar does not match a zero-preserving network".into()));
        }
        Ok(Self { net, stream: meta.stream, grad_scale: meta.grad_scale, bg_stats: meta.bg_stats, inc_scale: meta.inc_scale })
    }

    /// Same network, renamed for another stream and recalibrated later.
    pub fn derived(&self, stream: Stream) -> Self {
        Self { stream, ..self.clone() }
    }

    /// Sets the gradient scale to the inverse RMS of the non-zero gradient
    /// values and the increment scale to the RMS background error, per level.
    pub fn calibrate(&mut self, tuples: &[DaTuple]) {
        let v = self.levels();
        let (mut g2, mut gn, mut e2, mut en) = (vec![0.0; v], vec![0usize; v], vec![0.0; v], vec![0usize; v]);
        for t in tuples {
            let s = t.xb.spec();
            let per = s.rows * s.cols;
            for (n, (g, (b, x))) in t.grad.data().iter().zip(t.xb.data().iter().zip(t.truth.data())).enumerate() {
                let lv = n / per;
                if *g != 0.0 {
                    g2[lv] += g * g;
                    gn[lv] += 1;
                }
                e2[lv] += (x - b) * (x - b);
                en[lv] += 1;
            }
        }
        for lv in 0..v {
            if gn[lv] > 0 && g2[lv] > 0.0 {
                self.grad_scale[lv] = 1.0 / (g2[lv] / gn[lv] as f64).sqrt();
            }
            if en[lv] > 0 && e2[lv] > 0.0 {
                self.inc_scale[lv] = (e2[lv] / en[lv] as f64).sqrt();
            }
        }
    }

    fn cond(&self, xb: &StateField, i: usize, j: usize) -> Vec<f64> {
        (0..self.levels()).map(|v| (xb.get(v, i, j) - self.bg_stats.mean[v]) / self.bg_stats.std[v]).collect()
    }

    /// `x_a = x_b + increment(grad | x_b)`, column by column. Columns whose
    /// gradient stencil is identically zero are left untouched.
    pub fn apply(&self, xb: &StateField, grad: &StateField) -> Result<StateField> {
        xb.spec().check_same(grad.spec())?;
        if xb.spec().levels != self.levels() {
            return Err(Error::ShapeMismatch(format!("model has {} levels, state has {}", self.levels(), xb.spec().levels)));
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let spec = *xb.spec();
        let zero = vec![0.0; spec.levels];
        let mut xa = xb.clone();
        let mut input = Vec::with_capacity(stencil_len(spec.levels));
        for i in 0..spec.rows {
            for j in 0..spec.cols {
                gather_stencil(&spec, grad.data(), i, j, &zero, &self.grad_scale, &mut input);
                if input.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let out = self.net.forward(&input, &self.cond(xb, i, j))?;
                for (v, o) in out.iter().enumerate() {
                    xa.data_mut()[spec.idx(v, i, j)] += self.inc_scale[v] * o;
                }
            }
        }
        Ok(xa)
    }

    fn column_samples(&self, tuples: &[DaTuple], vw: &VariableWeights, lw: &LatWeights) -> Vec<ColumnSample> {
        let mut out = Vec::new();
        let zero = vec![0.0; self.levels()];
        for t in tuples {
            let spec = *t.xb.spec();
            for i in 0..spec.rows {
                for j in 0..spec.cols {
                    let mut input = Vec::new();
                    gather_stencil(&spec, t.grad.data(), i, j, &zero, &self.grad_scale, &mut input);
                    if input.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    out.push(ColumnSample {
                        input,
                        cond: self.cond(&t.xb, i, j),
                        delta: (0..spec.levels).map(|v| t.truth.get(v, i, j) - t.xb.get(v, i, j)).collect(),
                        weight: (0..spec.levels).map(|v| vw.at(v) * lw.at(i) / spec.levels as f64).collect(),
                    });
                }
            }
        }
        out
    }
}

/// Mean over tuples of the weighted L1 analysis error.
pub fn da_loss(model: &DaModel, tuples: &[DaTuple], vw: &VariableWeights, lw: &LatWeights) -> Result<f64> {
    if tuples.is_empty() {
        return Err(Error::InvalidParameter("no DA tuples".into()));
    }
    let mut total = 0.0;
    for t in tuples {
        total += weighted_l1(&model.apply(&t.xb, &t.grad)?, &t.truth, vw, lw);
    }
    Ok(total / tuples.len() as f64)
}

/// Fits the model to the weighted L1 analysis error, one column per
/// sample; columns without gradient information carry no trainable signal
/// and are skipped. Returns the per-epoch loss.
pub fn train_da(model: &mut DaModel, tuples: &[DaTuple], vw: &VariableWeights, lw: &LatWeights, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let samples = model.column_samples(tuples, vw, lw);
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no column carries gradient information".into()));
    }
    let scale = model.inc_scale.clone();
    fit(&mut model.net, &samples, cfg, |net, s, g| {
        let out = net.forward(&s.input, &s.cond)?;
        let mut up = vec![0.0; out.len()];
        let mut loss = 0.0;
        for v in 0..out.len() {
            let d = scale[v] * out[v] - s.delta[v];
            loss += s.weight[v] * d.abs();
            up[v] = if d > 0.0 {
                s.weight[v] * scale[v]
            } else if d < 0.0 {
                -s.weight[v] * scale[v]
            } else {
                0.0
            };
        }
        let (pg, _) = net.backward(&s.input, &s.cond, &up)?;
        g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
        Ok(loss)
    })
}

/// Ordered streams with enable flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub order: Vec<(Stream, bool)>,
}

impl CascadeSpec {
    pub fn new(order: Vec<(Stream, bool)>) -> Result<Self> {
        let conv_pos = order.iter().position(|(s, _)| *s == Stream::Conv);
        if let Some(p) = conv_pos {
            if order[p].1 && order[..p].iter().any(|(_, e)| *e) {
                return Err(Error::InvalidParameter("the conventional stream must come first".into()));
            }
        }
        let mut seen = order.iter().map(|(s, _)| *s).collect::<Vec<_>>();
        seen.sort();
        seen.dedup();
        if seen.len() != order.len() {
            return Err(Error::InvalidParameter("a stream appears twice in the cascade".into()));
        }
        Ok(Self { order })
    }

    /// Conventional, then both instruments in the given order.
    pub fn full(a_first: bool) -> Self {
        let (x, y) = if a_first { (Stream::InstrA, Stream::InstrB) } else { (Stream::InstrB, Stream::InstrA) };
        Self { order: vec![(Stream::Conv, true), (x, true), (y, true)] }
    }

    pub fn with_enabled(mut self, stream: Stream, enabled: bool) -> Self {
        for (s, e) in &mut self.order {
            if *s == stream {
                *e = enabled;
            }
        }
        self
    }

    pub fn enabled(&self) -> impl Iterator<Item = Stream> + '_ {
        self.order.iter().filter(|(_, e)| *e).map(|(s, _)| *s)
    }
}

/// One DA model per stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DaModels {
    pub conv: Option<DaModel>,
    pub instr_a: Option<DaModel>,
    pub instr_b: Option<DaModel>,
}

impl DaModels {
    pub fn get(&self, s: Stream) -> Option<&DaModel> {
        match s {
            Stream::Conv => self.conv.as_ref(),
            Stream::InstrA => self.instr_a.as_ref(),
            Stream::InstrB => self.instr_b.as_ref(),
        }
    }

    pub fn slot(&mut self, s: Stream) -> &mut Option<DaModel> {
        match s {
            Stream::Conv => &mut self.conv,
            Stream::InstrA => &mut self.instr_a,
            Stream::InstrB => &mut self.instr_b,
        }
    }
}

/// Operators and statistics the cascade needs besides the models.
#[derive(Debug, Clone)]
pub struct AssimDeps<'a> {
    pub forecaster: &'a Forecaster,
    pub emulator_a: Option<&'a RadianceEmulator>,
    pub emulator_b: Option<&'a RadianceEmulator>,
    /// Quality-control standard deviation per level.
    pub qc_std_conv: Vec<f64>,
    /// Quality-control standard deviation per channel.
    pub qc_std_a: Vec<f64>,
    pub qc_std_b: Vec<f64>,
    pub lat_mask_deg: f64,
}

impl<'a> AssimDeps<'a> {
    /// Observations of `stream` inside `plan`; `None` when the stream has
    /// no operator or no observations.
    pub fn stream_obs(&self, stream: Stream, plan: &DawPlan, store: &ObsStore) -> Result<Option<StreamObs<'a>>> {
        let s = match stream {
            Stream::Conv => StreamObs::conventional(plan, store, self.qc_std_conv.clone())?,
            Stream::InstrA | Stream::InstrB => {
                let (em, qc) = if stream == Stream::InstrA { (self.emulator_a, &self.qc_std_a) } else { (self.emulator_b, &self.qc_std_b) };
                match em {
                    Some(e) => StreamObs::radiance(plan, store, stream, RadOp::Emulator(e), qc.clone())?,
                    None => return Ok(None),
                }
            }
        };
        Ok((!s.is_empty()).then_some(s))
    }
}

/// Result of one cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisProduct {
    pub xa: StateField,
    /// Streams applied, in order.
    pub provenance: Vec<Stream>,
    pub qc: Vec<(Stream, StreamQc)>,
    pub grad_norms: Vec<(Stream, f64)>,
}

/// Applies the enabled streams in order, each to the previous stream's
/// analysis. Streams without observations in the window are skipped.
/// `observe` sees every stage's background and gradient.
pub fn cascade_observed(
    xb: &StateField,
    plan: &DawPlan,
    store: &ObsStore,
    spec: &CascadeSpec,
    models: &DaModels,
    deps: &AssimDeps,
    mut observe: impl FnMut(Stream, &StateField, &StateField),
) -> Result<AnalysisProduct> {
    let mut x = xb.clone();
    let mut product = AnalysisProduct { xa: xb.clone(), provenance: Vec::new(), qc: Vec::new(), grad_norms: Vec::new() };
    for stream in spec.enabled() {
        let model = models.get(stream).ok_or_else(|| Error::MissingModel(stream.name().to_string()))?;
        let Some(obs) = deps.stream_obs(stream, plan, store)? else { continue };
        let bg = grad_at_background(&x, plan, std::slice::from_ref(&obs), deps.forecaster, deps.lat_mask_deg)?;
        observe(stream, &x, &bg.grad);
        x = model.apply(&x, &bg.grad)?;
        product.provenance.push(stream);
        product.qc.extend(bg.qc.streams);
        product.grad_norms.push((stream, bg.grad.norm()));
    }
    product.xa = x;
    Ok(product)
}

pub fn cascade(
    xb: &StateField,
    plan: &DawPlan,
    store: &ObsStore,
    spec: &CascadeSpec,
    models: &DaModels,
    deps: &AssimDeps,
) -> Result<AnalysisProduct> {
    cascade_observed(xb, plan, store, spec, models, deps, |_, _, _| {})
}

/// Cycle timing and windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePlan {
    pub start: i64,
    pub interval_hours: u32,
    pub long_offsets: Vec<u32>,
    pub short_offsets: Vec<u32>,
    pub cycles: usize,
    pub spinup: usize,
}

impl CyclePlan {
    pub fn validate(&self) -> Result<()> {
        if self.interval_hours == 0 {
            return Err(Error::InvalidParameter("cycle interval must be positive".into()));
        }
        DawPlan::new(0, self.long_offsets.clone(), self.interval_hours)?;
        DawPlan::new(0, self.short_offsets.clone(), self.interval_hours)?;
        if self.short_offsets.iter().any(|o| !self.long_offsets.contains(o)) {
            return Err(Error::InvalidParameter("short offsets must be a subset of the long offsets".into()));
        }
        Ok(())
    }

    pub fn time_of(&self, cycle: usize) -> i64 {
        self.start + cycle as i64 * self.interval_hours as i64
    }
}

/// Scores and diagnostics of one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub t0: i64,
    /// Latitude-weighted RMSE per level.
    pub bg_rmse: Vec<f64>,
    pub an_rmse: Vec<f64>,
    pub init_rmse: Vec<f64>,
    pub provenance: Vec<Stream>,
    pub init_provenance: Vec<Stream>,
    pub qc: Vec<(Stream, StreamQc)>,
    pub grad_norms: Vec<(Stream, f64)>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl CycleRecord {
    pub fn bg_mean(&self) -> f64 {
        mean(&self.bg_rmse)
    }

    pub fn an_mean(&self) -> f64 {
        mean(&self.an_rmse)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutput {
    pub records: Vec<CycleRecord>,
    /// Long-window analyses.
    pub analyses: Vec<StateField>,
    /// Short-window analyses used to initialise forecasts.
    pub inits: Vec<StateField>,
}

/// Latitude-weighted RMSE of every level.
pub fn level_rmse(x: &StateField, truth: &StateField, lw: &LatWeights) -> Vec<f64> {
    let s = x.spec();
    (0..s.levels)
        .map(|v| {
            let mut acc = 0.0;
            for i in 0..s.rows {
                let w = lw.at(i);
                for j in 0..s.cols {
                    let d = x.get(v, i, j) - truth.get(v, i, j);
                    acc += w * d * d;
                }
            }
            (acc / s.columns() as f64).sqrt()
        })
        .collect()
}

fn truth_at(nature: &NatureRun, t: i64) -> Result<&StateField> {
    nature.at(t).ok_or_else(|| Error::InvalidParameter(format!("nature run has no state at t={t}")))
}

/// Background for the first cycle: a free forecast of `lead` hours from the
/// truth `lead` hours before `start`.
pub fn initial_background(nature: &NatureRun, fc: &Forecaster, start: i64, lead: u32) -> Result<StateField> {
    fc.forecast(truth_at(nature, start - lead as i64)?, lead)
}

/// Cascade order used in one cycle.
pub enum OrderPolicy {
    Fixed(CascadeSpec),
    /// Conventional first, then the instruments in a seeded fair-coin order;
    /// the flags say which streams are enabled.
    Random {
        seed: u64,
        conv: bool,
        instr_a: bool,
        instr_b: bool,
    },
}

impl OrderPolicy {
    fn spec_for(&self, cycle: usize) -> CascadeSpec {
        match self {
            OrderPolicy::Fixed(s) => s.clone(),
            OrderPolicy::Random { seed, conv, instr_a, instr_b } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(cycle as u64);
                CascadeSpec::full(rng.gen_bool(0.5))
                    .with_enabled(Stream::Conv, *conv)
                    .with_enabled(Stream::InstrA, *instr_a)
                    .with_enabled(Stream::InstrB, *instr_b)
            }
        }
    }
}

/// Dual-window cycling. Each cycle runs the long-window cascade, whose
/// analysis seeds the next background through an `interval_hours`
/// forecast, and the short-window cascade from the same background, whose
/// analysis is emitted for forecast initialisation only.
pub fn run_cycles(
    xb0: &StateField,
    nature: &NatureRun,
    store: &ObsStore,
    plan: &CyclePlan,
    order: &OrderPolicy,
    models: &DaModels,
    deps: &AssimDeps,
    lw: &LatWeights,
) -> Result<CycleOutput> {
    run_cycles_observed(xb0, nature, store, plan, order, models, deps, lw, |_, _, _, _| {})
}

/// [`run_cycles`] reporting every long-window stage as
/// `(cycle, stream, background, gradient)`.
#[allow(clippy::too_many_arguments)]
pub fn run_cycles_observed(
    xb0: &StateField,
    nature: &NatureRun,
    store: &ObsStore,
    plan: &CyclePlan,
    order: &OrderPolicy,
    models: &DaModels,
    deps: &AssimDeps,
    lw: &LatWeights,
    mut observe: impl FnMut(usize, Stream, &StateField, &StateField),
) -> Result<CycleOutput> {
    plan.validate()?;
    let mut out = CycleOutput { records: Vec::with_capacity(plan.cycles), analyses: Vec::new(), inits: Vec::new() };
    let mut xb = xb0.clone().with_time(plan.start);
    for cycle in 0..plan.cycles {
        let t0 = plan.time_of(cycle);
        let spec = order.spec_for(cycle);
        let long = DawPlan::new(t0, plan.long_offsets.clone(), plan.interval_hours)?;
        let short = DawPlan::new(t0, plan.short_offsets.clone(), plan.interval_hours)?;
        let an = cascade_observed(&xb, &long, store, &spec, models, deps, |s, x, g| observe(cycle, s, x, g))?;
        let init = cascade(&xb, &short, store, &spec, models, deps)?;
        if !an.xa.is_finite() || !init.xa.is_finite() {
            return Err(Error::NonFiniteState(cycle));
        }
        let truth = truth_at(nature, t0)?;
        out.records.push(CycleRecord {
            cycle,
            t0,
            bg_rmse: level_rmse(&xb, truth, lw),
            an_rmse: level_rmse(&an.xa, truth, lw),
            init_rmse: level_rmse(&init.xa, truth, lw),
            provenance: an.provenance.clone(),
            init_provenance: init.provenance,
            qc: an.qc.clone(),
            grad_norms: an.grad_norms.clone(),
        });
        xb = match deps.forecaster.forecast(&an.xa, plan.interval_hours) {
            Ok(x) => x,
            Err(Error::NonFiniteBlowup(_)) => return Err(Error::NonFiniteState(cycle)),
            Err(e) => return Err(e),
        };
        out.analyses.push(an.xa);
        out.inits.push(init.xa);
    }
    Ok(out)
}

/// Budget and schedule of the bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaTrainConfig {
    pub hidden: usize,
    pub train: TrainConfig,
    /// Epochs of the fine-tuning passes after a model's first fit.
    pub finetune_epochs: usize,
    pub cycles_per_round: usize,
    pub refine_rounds: usize,
    /// First analysis time of the training cycles.
    pub start: i64,
    pub interval_hours: u32,
    pub long_offsets: Vec<u32>,
    /// Draw each tuple's window from the prefixes of `long_offsets`, so a
    /// model sees gradients of every window length it will be applied to.
    pub window_mix: bool,
    pub oracle: SolverConfig,
    /// Background error variance of the oracle as a fraction of the
    /// climatological variance.
    pub oracle_bg_frac: f64,
    pub init_lead_hours: u32,
    pub seed: u64,
}

fn window_for(cfg: &DaTrainConfig, t0: i64, rng: &mut ChaCha8Rng) -> Result<DawPlan> {
    let n = cfg.long_offsets.len();
    let k = if cfg.window_mix && rng.gen_bool(0.5) { rng.gen_range(1..=n) } else { n };
    DawPlan::new(t0, cfg.long_offsets[..k].to_vec(), cfg.interval_hours)
}

/// Per-stream tuples collected while training.
#[derive(Debug, Clone, Default)]
pub struct TupleSets {
    pub conv: Vec<DaTuple>,
    pub instr_a: Vec<DaTuple>,
    pub instr_b: Vec<DaTuple>,
}

impl TupleSets {
    fn get_mut(&mut self, s: Stream) -> &mut Vec<DaTuple> {
        match s {
            Stream::Conv => &mut self.conv,
            Stream::InstrA => &mut self.instr_a,
            Stream::InstrB => &mut self.instr_b,
        }
    }

    pub fn get(&self, s: Stream) -> &[DaTuple] {
        match s {
            Stream::Conv => &self.conv,
            Stream::InstrA => &self.instr_a,
            Stream::InstrB => &self.instr_b,
        }
    }
}

/// Cascade in which streams without a model pass the state through.
/// `visit` sees the background and gradient of every stream in `visit_streams`.
fn learned_pass(
    xb: &StateField,
    plan: &DawPlan,
    store: &ObsStore,
    spec: &CascadeSpec,
    models: &DaModels,
    deps: &AssimDeps,
    visit_streams: &[Stream],
    mut visit: impl FnMut(Stream, &StateField, &StateField),
) -> Result<StateField> {
    let mut x = xb.clone();
    for stream in spec.enabled() {
        let model = models.get(stream);
        if model.is_none() && !visit_streams.contains(&stream) {
            continue;
        }
        let Some(obs) = deps.stream_obs(stream, plan, store)? else { continue };
        let bg = grad_at_background(&x, plan, std::slice::from_ref(&obs), deps.forecaster, deps.lat_mask_deg)?;
        if visit_streams.contains(&stream) {
            visit(stream, &x, &bg.grad);
        }
        if let Some(m) = model {
            x = m.apply(&x, &bg.grad)?;
        }
    }
    Ok(x)
}

/// Cycles the learned cascade in a seeded random instrument order and
/// collects a tuple for every stream in `collect`.
#[allow(clippy::too_many_arguments)]
fn collect_learned(
    nature: &NatureRun,
    store: &ObsStore,
    models: &DaModels,
    deps: &AssimDeps,
    cfg: &DaTrainConfig,
    round: u64,
    collect: &[Stream],
    sets: &mut TupleSets,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(round);
    let mut xb = initial_background(nature, deps.forecaster, cfg.start, cfg.init_lead_hours)?;
    for c in 0..cfg.cycles_per_round {
        let t0 = cfg.start + c as i64 * cfg.interval_hours as i64;
        let truth = truth_at(nature, t0)?;
        let plan = window_for(cfg, t0, &mut rng)?;
        let spec = CascadeSpec::full(rng.gen_bool(0.5));
        let mut x = learned_pass(&xb, &plan, store, &spec, models, deps, collect, |s, x, g| {
            sets.get_mut(s).push(DaTuple { xb: x.clone(), grad: g.clone(), truth: truth.clone() });
        })?;
        // The next background always comes from the full window.
        if plan.offsets.len() != cfg.long_offsets.len() {
            let full = DawPlan::new(t0, cfg.long_offsets.clone(), cfg.interval_hours)?;
            x = learned_pass(&xb, &full, store, &spec, models, deps, &[], |_, _, _| {})?;
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteState(c));
        }
        xb = deps.forecaster.forecast(&x, cfg.interval_hours)?;
    }
    Ok(())
}

/// Cycles the iterative oracle on conventional observations and collects
/// conventional tuples at every background.
fn collect_oracle(
    nature: &NatureRun,
    store: &ObsStore,
    deps: &AssimDeps,
    cfg: &DaTrainConfig,
    clim_std: &[f64],
    sets: &mut TupleSets,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bgt = BackgroundTerm::from_clim_std(cfg.oracle_bg_frac, clim_std);
    let mut xb = initial_background(nature, deps.forecaster, cfg.start, cfg.init_lead_hours)?;
    for c in 0..cfg.cycles_per_round {
        let t0 = cfg.start + c as i64 * cfg.interval_hours as i64;
        let truth = truth_at(nature, t0)?;
        let plan = window_for(cfg, t0, &mut rng)?;
        if let Some(obs) = deps.stream_obs(Stream::Conv, &plan, store)? {
            let bg = grad_at_background(&xb, &plan, std::slice::from_ref(&obs), deps.forecaster, deps.lat_mask_deg)?;
            sets.conv.push(DaTuple { xb: xb.clone(), grad: bg.grad, truth: truth.clone() });
        }
        let full = DawPlan::new(t0, cfg.long_offsets.clone(), cfg.interval_hours)?;
        let xa = match deps.stream_obs(Stream::Conv, &full, store)? {
            Some(obs) => {
                let bg = grad_at_background(&xb, &full, std::slice::from_ref(&obs), deps.forecaster, deps.lat_mask_deg)?;
                solve_iterative(&xb, &full, &bg.accepted, deps.forecaster, &bgt, &cfg.oracle)?.x
            }
            None => xb.clone(),
        };
        xb = deps.forecaster.forecast(&xa, cfg.interval_hours)?;
    }
    Ok(())
}

/// Training-loss history of every fit, labelled by round and stream.
pub type TrainLog = Vec<(String, Vec<f64>)>;

/// Trains the three stream models in stages:
/// 1. conventional tuples from oracle cycling fit the conventional model;
/// 2. cycling with it yields instrument-A tuples on conventionally
///    corrected backgrounds, fitted starting from the conventional weights;
/// 3. cycling with random instrument order yields tuples for both
///    instruments; B starts from A's weights;
/// 4. `refine_rounds` passes of the full cascade refresh all three.
pub fn bootstrap_train(
    nature: &NatureRun,
    store: &ObsStore,
    deps: &AssimDeps,
    bg_stats: &LevelStats,
    clim_std: &[f64],
    vw: &VariableWeights,
    lw: &LatWeights,
    cfg: &DaTrainConfig,
) -> Result<(DaModels, TrainLog)> {
    let mut log = TrainLog::new();
    let mut models = DaModels::default();
    let fine = TrainConfig { epochs: cfg.finetune_epochs.max(1), ..cfg.train.clone() };

    let mut sets = TupleSets::default();
    collect_oracle(nature, store, deps, cfg, clim_std, &mut sets)?;
    let mut conv = DaModel::new(Stream::Conv, bg_stats.clone(), cfg.hidden, cfg.seed)?;
    conv.calibrate(&sets.conv);
    log.push(("oracle/conv".into(), train_da(&mut conv, &sets.conv, vw, lw, &cfg.train)?));
    models.conv = Some(conv);

    let has = |s: Stream| match s {
        Stream::Conv => true,
        Stream::InstrA => deps.emulator_a.is_some(),
        Stream::InstrB => deps.emulator_b.is_some(),
    };

    let mut round = 1;
    if has(Stream::InstrA) {
        let mut sets = TupleSets::default();
        let only_conv = DaModels { conv: models.conv.clone(), ..Default::default() };
        collect_learned(nature, store, &only_conv, deps, cfg, round, &[Stream::InstrA], &mut sets)?;
        round += 1;
        let mut a = models.conv.as_ref().unwrap().derived(Stream::InstrA);
        a.calibrate(&sets.instr_a);
        log.push(("conv/instr_a".into(), train_da(&mut a, &sets.instr_a, vw, lw, &cfg.train)?));
        models.instr_a = Some(a);
    }
    if has(Stream::InstrB) {
        let mut sets = TupleSets::default();
        collect_learned(nature, store, &models, deps, cfg, round, &[Stream::InstrA, Stream::InstrB], &mut sets)?;
        round += 1;
        let base = models.instr_a.as_ref().or(models.conv.as_ref()).unwrap();
        let mut b = base.derived(Stream::InstrB);
        b.calibrate(&sets.instr_b);
        log.push(("mixed/instr_b".into(), train_da(&mut b, &sets.instr_b, vw, lw, &cfg.train)?));
        if let Some(a) = models.instr_a.as_mut() {
            if !sets.instr_a.is_empty() {
                log.push(("mixed/instr_a".into(), train_da(a, &sets.instr_a, vw, lw, &fine)?));
            }
        }
        models.instr_b = Some(b);
    }
    for r in 0..cfg.refine_rounds {
        let mut sets = TupleSets::default();
        let streams: Vec<Stream> =
            [Stream::Conv, Stream::InstrA, Stream::InstrB].into_iter().filter(|s| models.get(*s).is_some()).collect();
        collect_learned(nature, store, &models, deps, cfg, round, &streams, &mut sets)?;
        round += 1;
        for s in streams {
            if sets.get(s).is_empty() {
                continue;
            }
            let m = models.slot(s).as_mut().unwrap();
            log.push((format!("refine{r}/{}", s.name()), train_da(m, sets.get(s), vw, lw, &fine)?));
        }
    }
    Ok((models, log))
}
