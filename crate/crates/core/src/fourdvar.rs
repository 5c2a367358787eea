//! Variational cost over an assimilation window, its gradient at the
//! background, innovation quality control and an iterative minimiser used
//! as a reference analysis.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{ForecastTape, Forecaster};
use crate::grid::StateField;
use crate::obsops::{AuxInfo, Instrument, ObsStore, RadianceEmulator, RadianceTruthSpec, RADIANCE_BOUNDS};

/// Innovations larger than this many standard deviations are rejected.
pub const QC_SIGMAS: f64 = 5.0;

/// Observation times of one window, as offsets from `t0`. The window is
/// `[t0, t0 + window_hours)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DawPlan {
    pub t0: i64,
    pub offsets: Vec<u32>,
    pub window_hours: u32,
}

impl DawPlan {
    pub fn new(t0: i64, offsets: Vec<u32>, window_hours: u32) -> Result<Self> {
        let ok = offsets.first() == Some(&0) && offsets.windows(2).all(|w| w[0] < w[1]) && offsets.iter().all(|&o| o < window_hours);
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "offsets {offsets:?} must start at 0, increase strictly and stay below {window_hours}"
            )));
        }
        Ok(Self { t0, offsets, window_hours })
    }

    pub fn times(&self) -> impl Iterator<Item = i64> + '_ {
        self.offsets.iter().map(move |&o| self.t0 + o as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Conv,
    InstrA,
    InstrB,
}

impl Stream {
    pub fn instrument(self) -> Option<Instrument> {
        match self {
            Stream::Conv => None,
            Stream::InstrA => Some(Instrument::A),
            Stream::InstrB => Some(Instrument::B),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Conv => "conv",
            Stream::InstrA => "instr_a",
            Stream::InstrB => "instr_b",
        }
    }
}

/// Radiance operator used inside the cost.
#[derive(Debug, Clone, Copy)]
pub enum RadOp<'a> {
    Emulator(&'a RadianceEmulator),
    Truth(&'a RadianceTruthSpec),
}

impl RadOp<'_> {
    fn apply(&self, column: &[f64], aux: &AuxInfo) -> Result<Vec<f64>> {
        match self {
            RadOp::Emulator(e) => e.apply(column, aux),
            RadOp::Truth(s) => Ok(s.apply(column, aux)),
        }
    }

    fn adjoint(&self, column: &[f64], aux: &AuxInfo, up: &[f64]) -> Result<Vec<f64>> {
        match self {
            RadOp::Emulator(e) => Ok(e.apply_and_adjoint(column, aux, up)?.1),
            RadOp::Truth(s) => Ok(s.adjoint(column, aux, up)),
        }
    }

    fn tangent(&self, column: &[f64], aux: &AuxInfo, d: &[f64]) -> Result<Vec<f64>> {
        match self {
            RadOp::Emulator(e) => e.tangent(column, aux, d),
            RadOp::Truth(s) => {
                // The truth operator's Jacobian is rank one per channel.
                let mut out = Vec::with_capacity(s.channels());
                for c in 0..s.channels() {
                    let mut up = vec![0.0; s.channels()];
                    up[c] = 1.0;
                    out.push(s.adjoint(column, aux, &up).iter().zip(d).map(|(a, b)| a * b).sum());
                }
                Ok(out)
            }
        }
    }

    fn channels(&self) -> usize {
        match self {
            RadOp::Emulator(e) => e.channels(),
            RadOp::Truth(s) => s.channels(),
        }
    }

    /// Error standard deviation per channel.
    pub fn sigma(&self) -> Vec<f64> {
        match self {
            RadOp::Emulator(e) => e.spread.clone(),
            RadOp::Truth(s) => s.noise.iter().map(|n| n.max(crate::obsops::MIN_EMULATOR_SPREAD)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StreamKind<'a> {
    Conv,
    Radiance(RadOp<'a>),
}

/// One observation, located by window offset index `k` and component
/// `comp` (level for point observations, channel for radiances).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsRecord {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub comp: usize,
    pub value: f64,
    pub sigma: f64,
    pub aux: AuxInfo,
}

/// The observations of one stream inside one window.
#[derive(Debug, Clone)]
pub struct StreamObs<'a> {
    pub stream: Stream,
    pub kind: StreamKind<'a>,
    pub records: Vec<ObsRecord>,
    /// Standard deviation used by the innovation check, per component.
    pub qc_std: Vec<f64>,
    /// Radiance records sharing one column and geometry; empty for point
    /// observations.
    groups: Vec<Range<usize>>,
}

const NO_AUX: AuxInfo = AuxInfo { scan: 0, zen: 1.0 };

impl<'a> StreamObs<'a> {
    pub fn conventional(plan: &DawPlan, store: &ObsStore, qc_std: Vec<f64>) -> Result<Self> {
        let mut records = Vec::new();
        for (k, t) in plan.times().enumerate() {
            if let Some(b) = store.conv_at(t) {
                if b.records.iter().any(|r| !(r.sigma > 0.0)) {
                    return Err(Error::InvalidParameter(format!("observation error at t={t} must be positive")));
                }
                records.extend(b.records.iter().map(|r| ObsRecord {
                    k,
                    i: r.i,
                    j: r.j,
                    comp: r.v,
                    value: r.value,
                    sigma: r.sigma,
                    aux: NO_AUX,
                }));
            }
        }
        Ok(Self { stream: Stream::Conv, kind: StreamKind::Conv, records, qc_std, groups: Vec::new() })
    }

    pub fn radiance(plan: &DawPlan, store: &ObsStore, stream: Stream, op: RadOp<'a>, qc_std: Vec<f64>) -> Result<Self> {
        let inst = stream.instrument().ok_or_else(|| Error::InvalidParameter("conventional stream has no radiance operator".into()))?;
        let sigma = op.sigma();
        let mut records = Vec::new();
        for (k, t) in plan.times().enumerate() {
            if let Some(b) = store.rad_at(inst, t) {
                for r in &b.records {
                    if r.c >= sigma.len() {
                        return Err(Error::ShapeMismatch(format!("channel {} beyond operator's {}", r.c, sigma.len())));
                    }
                    records.push(ObsRecord { k, i: r.i, j: r.j, comp: r.c, value: r.value, sigma: sigma[r.c], aux: r.aux });
                }
            }
        }
        Ok(Self::with_records(stream, StreamKind::Radiance(op), records, qc_std))
    }

    /// Builds a stream from explicit records.
    pub fn with_records(stream: Stream, kind: StreamKind<'a>, mut records: Vec<ObsRecord>, qc_std: Vec<f64>) -> Self {
        let mut groups = Vec::new();
        if let StreamKind::Radiance(_) = kind {
            records.sort_by(|a, b| {
                (a.k, a.i, a.j, a.aux.scan, a.aux.zen.to_bits(), a.comp).cmp(&(b.k, b.i, b.j, b.aux.scan, b.aux.zen.to_bits(), b.comp))
            });
            let mut start = 0;
            for n in 1..=records.len() {
                let r = records[start];
                let same = n < records.len() && {
                    let q = records[n];
                    (q.k, q.i, q.j, q.aux.scan, q.aux.zen.to_bits()) == (r.k, r.i, r.j, r.aux.scan, r.aux.zen.to_bits())
                };
                if !same {
                    groups.push(start..n);
                    start = n;
                }
            }
        }
        Self { stream, kind, records, qc_std, groups }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn keep(&self, mask: &[bool]) -> Self {
        let records = self.records.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| *r).collect();
        Self::with_records(self.stream, self.kind, records, self.qc_std.clone())
    }

    /// Model equivalents of every record given the window states.
    pub fn equivalents(&self, states: &[StateField]) -> Result<Vec<f64>> {
        match self.kind {
            StreamKind::Conv => Ok(self.records.iter().map(|r| states[r.k].get(r.comp, r.i, r.j)).collect()),
            StreamKind::Radiance(op) => {
                let mut out = vec![0.0; self.records.len()];
                for g in &self.groups {
                    let r = self.records[g.start];
                    let y = op.apply(&states[r.k].column(r.i, r.j), &r.aux)?;
                    for n in g.clone() {
                        out[n] = y[self.records[n].comp];
                    }
                }
                Ok(out)
            }
        }
    }

    /// Adds `sum_n w_n dH_n/dx` into the per-offset adjoint states.
    pub fn adjoint_acc(&self, states: &[StateField], w: &[f64], out: &mut [StateField]) -> Result<()> {
        match self.kind {
            StreamKind::Conv => {
                for (r, wn) in self.records.iter().zip(w) {
                    let spec = *out[r.k].spec();
                    out[r.k].data_mut()[spec.idx(r.comp, r.i, r.j)] += wn;
                }
            }
            StreamKind::Radiance(op) => {
                let mut up = vec![0.0; op.channels()];
                for g in &self.groups {
                    let r = self.records[g.start];
                    up.iter_mut().for_each(|u| *u = 0.0);
                    for n in g.clone() {
                        up[self.records[n].comp] += w[n];
                    }
                    let col = op.adjoint(&states[r.k].column(r.i, r.j), &r.aux, &up)?;
                    let spec = *out[r.k].spec();
                    for (v, c) in col.iter().enumerate() {
                        out[r.k].data_mut()[spec.idx(v, r.i, r.j)] += c;
                    }
                }
            }
        }
        Ok(())
    }

    /// Tangent-linear images of `dstates` at every record.
    pub fn tangent(&self, states: &[StateField], dstates: &[StateField]) -> Result<Vec<f64>> {
        match self.kind {
            StreamKind::Conv => Ok(self.records.iter().map(|r| dstates[r.k].get(r.comp, r.i, r.j)).collect()),
            StreamKind::Radiance(op) => {
                let mut out = vec![0.0; self.records.len()];
                for g in &self.groups {
                    let r = self.records[g.start];
                    let d = op.tangent(&states[r.k].column(r.i, r.j), &r.aux, &dstates[r.k].column(r.i, r.j))?;
                    for n in g.clone() {
                        out[n] = d[self.records[n].comp];
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Counts for one stream. `accepted + rejected() == total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamQc {
    pub total: usize,
    pub accepted: usize,
    pub rejected_innovation: usize,
    pub rejected_bounds: usize,
    pub rejected_mask: usize,
}

impl StreamQc {
    pub fn rejected(&self) -> usize {
        self.rejected_innovation + self.rejected_bounds + self.rejected_mask
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QcReport {
    pub streams: Vec<(Stream, StreamQc)>,
}

/// Rejects records whose innovation exceeds [`QC_SIGMAS`] standard
/// deviations, radiances outside the valid range and radiances poleward
/// of `lat_mask_deg`.
pub fn qc_filter<'a>(stream: &StreamObs<'a>, equivalents: &[f64], states: &[StateField], lat_mask_deg: f64) -> (StreamObs<'a>, StreamQc) {
    let mut qc = StreamQc { total: stream.records.len(), ..Default::default() };
    let is_rad = matches!(stream.kind, StreamKind::Radiance(_));
    let mask: Vec<bool> = stream
        .records
        .iter()
        .zip(equivalents)
        .map(|(r, h)| {
            if is_rad && !(r.value >= RADIANCE_BOUNDS.0 && r.value <= RADIANCE_BOUNDS.1) {
                qc.rejected_bounds += 1;
                false
            } else if is_rad && states[r.k].spec().lat_deg(r.i).abs() > lat_mask_deg {
                qc.rejected_mask += 1;
                false
            } else if (r.value - h).abs() > QC_SIGMAS * stream.qc_std[r.comp] {
                qc.rejected_innovation += 1;
                false
            } else {
                qc.accepted += 1;
                true
            }
        })
        .collect();
    (stream.keep(&mask), qc)
}

/// Window states: the forecast from `x` to every offset, each offset with
/// its own aggregation plan.
pub fn trajectory(fc: &Forecaster, x: &StateField, plan: &DawPlan) -> Result<Vec<StateField>> {
    plan.offsets.iter().map(|&o| fc.forecast(x, o)).collect()
}

fn trajectory_taped(fc: &Forecaster, x: &StateField, plan: &DawPlan) -> Result<(Vec<StateField>, Vec<ForecastTape>)> {
    let mut states = Vec::with_capacity(plan.offsets.len());
    let mut tapes = Vec::with_capacity(plan.offsets.len());
    for &o in &plan.offsets {
        let (s, t) = fc.forecast_taped(x, o)?;
        states.push(s);
        tapes.push(t);
    }
    Ok((states, tapes))
}

/// Background penalty. The learned path evaluates only at the background,
/// where any such term vanishes, so it is omitted there.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundTerm {
    #[default]
    Omitted,
    /// `sum_v weight[v] * sum_ij (x - x_b)^2`.
    Tikhonov { weight: Vec<f64> },
}

impl BackgroundTerm {
    /// Weight `1 / (2 * frac * var_v)`, i.e. a diagonal background error
    /// variance of `frac` times the climatological variance.
    pub fn from_clim_std(frac: f64, std: &[f64]) -> Self {
        BackgroundTerm::Tikhonov { weight: std.iter().map(|s| 1.0 / (2.0 * frac * s * s)).collect() }
    }

    fn cost_grad(&self, x: &StateField, xb: &StateField, grad: Option<&mut StateField>) -> f64 {
        match self {
            BackgroundTerm::Omitted => 0.0,
            BackgroundTerm::Tikhonov { weight } => {
                let spec = *x.spec();
                let per = spec.rows * spec.cols;
                let mut j = 0.0;
                let mut g = grad;
                for (n, (a, b)) in x.data().iter().zip(xb.data()).enumerate() {
                    let w = weight[n / per];
                    j += w * (a - b) * (a - b);
                    if let Some(g) = g.as_deref_mut() {
                        g.data_mut()[n] += 2.0 * w * (a - b);
                    }
                }
                j
            }
        }
    }
}

fn obs_cost(streams: &[StreamObs], eqs: &[Vec<f64>]) -> f64 {
    let mut j = 0.0;
    for (s, h) in streams.iter().zip(eqs) {
        for (r, hn) in s.records.iter().zip(h) {
            let d = (r.value - hn) / r.sigma;
            j += 0.5 * d * d;
        }
    }
    j
}

/// `J(x) = J_b(x) + 1/2 sum (y - H(M(x)))^2 / sigma^2` over all streams.
pub fn cost(x: &StateField, xb: &StateField, plan: &DawPlan, streams: &[StreamObs], fc: &Forecaster, bg: &BackgroundTerm) -> Result<f64> {
    let states = trajectory(fc, x, plan)?;
    let eqs = streams.iter().map(|s| s.equivalents(&states)).collect::<Result<Vec<_>>>()?;
    let j = obs_cost(streams, &eqs) + bg.cost_grad(x, xb, None);
    if !j.is_finite() {
        return Err(Error::NonFiniteCost);
    }
    Ok(j)
}

/// Cost and gradient at `x` from one taped trajectory.
pub fn cost_and_grad(
    x: &StateField,
    xb: &StateField,
    plan: &DawPlan,
    streams: &[StreamObs],
    fc: &Forecaster,
    bg: &BackgroundTerm,
) -> Result<(f64, StateField)> {
    let (states, tapes) = trajectory_taped(fc, x, plan)?;
    let eqs = streams.iter().map(|s| s.equivalents(&states)).collect::<Result<Vec<_>>>()?;
    let mut g = adjoint_of_obs(fc, &states, &tapes, streams, &eqs)?;
    let j = obs_cost(streams, &eqs) + bg.cost_grad(x, xb, Some(&mut g));
    if !j.is_finite() {
        return Err(Error::NonFiniteCost);
    }
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok((j, g))
}

fn adjoint_of_obs(
    fc: &Forecaster,
    states: &[StateField],
    tapes: &[ForecastTape],
    streams: &[StreamObs],
    eqs: &[Vec<f64>],
) -> Result<StateField> {
    let spec = *states[0].spec();
    let mut bars: Vec<StateField> = states.iter().map(|s| StateField::zeros(spec, s.time)).collect();
    for (s, h) in streams.iter().zip(eqs) {
        let w: Vec<f64> = s.records.iter().zip(h).map(|(r, hn)| (hn - r.value) / (r.sigma * r.sigma)).collect();
        s.adjoint_acc(states, &w, &mut bars)?;
    }
    let mut g = StateField::zeros(spec, states[0].time);
    for (bar, tape) in bars.iter().zip(tapes) {
        if bar.data().iter().all(|&x| x == 0.0) {
            continue;
        }
        g.add_assign_scaled(1.0, &fc.adjoint(tape, bar)?);
    }
    Ok(g)
}

/// Gradient of the observation terms at the background, after quality
/// control against the background trajectory.
#[derive(Debug, Clone)]
pub struct BackgroundGradient<'a> {
    pub grad: StateField,
    pub cost: f64,
    pub qc: QcReport,
    /// The streams with rejected records removed.
    pub accepted: Vec<StreamObs<'a>>,
}

pub fn grad_at_background<'a>(
    xb: &StateField,
    plan: &DawPlan,
    streams: &[StreamObs<'a>],
    fc: &Forecaster,
    lat_mask_deg: f64,
) -> Result<BackgroundGradient<'a>> {
    let (states, tapes) = trajectory_taped(fc, xb, plan)?;
    let mut accepted = Vec::with_capacity(streams.len());
    let mut qc = QcReport::default();
    let mut eqs = Vec::with_capacity(streams.len());
    for s in streams {
        let h = s.equivalents(&states)?;
        let (kept, report) = qc_filter(s, &h, &states, lat_mask_deg);
        qc.streams.push((s.stream, report));
        eqs.push(kept.equivalents(&states)?);
        accepted.push(kept);
    }
    let grad = adjoint_of_obs(fc, &states, &tapes, &accepted, &eqs)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let cost = obs_cost(&accepted, &eqs);
    if !cost.is_finite() {
        return Err(Error::NonFiniteCost);
    }
    Ok(BackgroundGradient { grad, cost, qc, accepted })
}

/// Tangent of the composed map `x -> H(M(x))` at `x` along `dx`, one
/// vector per stream.
pub fn composed_tangent(x: &StateField, dx: &StateField, plan: &DawPlan, streams: &[StreamObs], fc: &Forecaster) -> Result<Vec<Vec<f64>>> {
    let (states, tapes) = trajectory_taped(fc, x, plan)?;
    let dstates = tapes.iter().map(|t| fc.tangent(t, dx)).collect::<Result<Vec<_>>>()?;
    streams.iter().map(|s| s.tangent(&states, &dstates)).collect()
}

/// Adjoint of [`composed_tangent`] applied to per-record vectors `u`.
pub fn composed_adjoint(x: &StateField, u: &[Vec<f64>], plan: &DawPlan, streams: &[StreamObs], fc: &Forecaster) -> Result<StateField> {
    let (states, tapes) = trajectory_taped(fc, x, plan)?;
    let spec = *x.spec();
    let mut bars: Vec<StateField> = states.iter().map(|s| StateField::zeros(spec, s.time)).collect();
    for (s, w) in streams.iter().zip(u) {
        s.adjoint_acc(&states, w, &mut bars)?;
    }
    let mut g = StateField::zeros(spec, x.time);
    for (bar, tape) in bars.iter().zip(&tapes) {
        g.add_assign_scaled(1.0, &fc.adjoint(tape, bar)?);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub iters: usize,
    pub init_step: f64,
    pub max_backtracks: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step growth after an accepted iteration.
    pub grow: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { iters: 20, init_step: 1e-3, max_backtracks: 30, armijo: 1e-4, grow: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: StateField,
    /// Cost at the start and after every accepted iteration.
    pub costs: Vec<f64>,
}

/// Gradient descent with Armijo backtracking. Stops early when the
/// gradient vanishes. Fails with `LineSearchFailed` when no step within
/// `max_backtracks` halvings gives sufficient decrease.
pub fn solve_iterative(
    xb: &StateField,
    plan: &DawPlan,
    streams: &[StreamObs],
    fc: &Forecaster,
    bg: &BackgroundTerm,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    let mut x = xb.clone();
    let (mut j, mut g) = cost_and_grad(&x, xb, plan, streams, fc, bg)?;
    let mut costs = vec![j];
    let mut step = cfg.init_step;
    for it in 0..cfg.iters {
        let gg = g.dot(&g);
        if gg == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            let trial = x.axpy(-step, &g)?;
            match cost_and_grad(&trial, xb, plan, streams, fc, bg) {
                Ok((jt, gt)) if jt <= j - cfg.armijo * step * gg => {
                    x = trial;
                    j = jt;
                    g = gt;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(Error::NonFiniteBlowup(_)) | Err(Error::NonFiniteCost) | Err(Error::NonFiniteGradient) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            // Sufficient decrease below roundoff means the minimum is reached.
            if j <= f64::EPSILON * costs[0].max(1.0) * 1e3 {
                break;
            }
            return Err(Error::LineSearchFailed(it));
        }
        costs.push(j);
        step *= cfg.grow;
    }
    Ok(SolveResult { x, costs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{perturbed_rest_state, DynParams};
    use crate::forecast::{aggregate_plan, ForecastModel, SurrogatePair, SurrogateShape, DEFAULT_LEADS};
    use crate::grid::{GridSpec, LevelStats};
    use crate::obsops::{radiance_truth, sample_conventional, ConvObsBatch, ConvRecord, RadianceTruthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (GridSpec, DynParams, StateField) {
        let g = GridSpec::new(2, 6, 12).unwrap();
        let p = DynParams::new(2, 8.0);
        let x = crate::dynamics::step_rk4(&perturbed_rest_state(g, &p, seed, 1.0), &p, 200).unwrap().with_time(0);
        (g, p, x)
    }

    fn store_from(
        truth_at: impl Fn(i64) -> StateField,
        plan: &DawPlan,
        density: f64,
        sigma: f64,
        seed: u64,
        rad: Option<&RadianceTruthSpec>,
    ) -> ObsStore {
        let mut store = ObsStore::default();
        for t in plan.times() {
            let x = truth_at(t);
            let mut b = sample_conventional(&x, density, &vec![sigma; x.spec().levels], seed).unwrap();
            b.records.iter_mut().for_each(|r| r.sigma = r.sigma.max(0.1));
            store.conv.insert(t, b);
            if let Some(s) = rad {
                store.rad.insert((Instrument::A, t), radiance_truth(&x, s, seed, 1).unwrap());
            }
        }
        store
    }

    #[test]
    fn plan_validation() {
        assert!(DawPlan::new(0, vec![0, 3, 6, 9], 12).is_ok());
        assert!(DawPlan::new(0, vec![3, 6], 12).is_err());
        assert!(DawPlan::new(0, vec![0, 6, 3], 12).is_err());
        assert!(DawPlan::new(0, vec![0, 12], 12).is_err());
    }

    #[test]
    fn single_obs_cost_and_gradient() {
        let (g, p, x) = setup(1);
        let plan = DawPlan::new(0, vec![0], 12).unwrap();
        let mut store = ObsStore::default();
        let (d, sigma) = (0.7, 0.2);
        let y = x.get(1, 2, 5) + d;
        store.conv.insert(0, ConvObsBatch { time: 0, records: vec![ConvRecord { v: 1, i: 2, j: 5, value: y, sigma }] });
        let s = StreamObs::conventional(&plan, &store, vec![10.0; 2]).unwrap();
        let fc = Forecaster::perfect(p);
        let j = cost(&x, &x, &plan, std::slice::from_ref(&s), &fc, &BackgroundTerm::Omitted).unwrap();
        assert!((j - d * d / (2.0 * sigma * sigma)).abs() < 1e-12);
        let bg = grad_at_background(&x, &plan, &[s], &fc, 60.0).unwrap();
        for v in 0..2 {
            for i in 0..g.rows {
                for jj in 0..g.cols {
                    let expect = if (v, i, jj) == (1, 2, 5) { -d / (sigma * sigma) } else { 0.0 };
                    assert!((bg.grad.get(v, i, jj) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn self_consistent_obs_give_zero_cost_and_gradient() {
        let (_, p, x) = setup(2);
        let fc = Forecaster::perfect(p);
        let plan = DawPlan::new(0, vec![0, 3, 6, 9], 12).unwrap();
        let spec = RadianceTruthSpec { noise: vec![0.0; 4], ..RadianceTruthSpec::standard(Instrument::A, x.spec()) };
        let store = store_from(|t| fc.forecast(&x, t as u32).unwrap(), &plan, 0.5, 0.0, 3, Some(&spec));
        let streams = vec![
            StreamObs::conventional(&plan, &store, vec![1.0; 2]).unwrap(),
            StreamObs::radiance(&plan, &store, Stream::InstrA, RadOp::Truth(&spec), vec![10.0; 4]).unwrap(),
        ];
        assert!(!streams[1].is_empty());
        let bg = grad_at_background(&x, &plan, &streams, &fc, 60.0).unwrap();
        assert_eq!(bg.cost, 0.0);
        assert!(bg.grad.data().iter().all(|&v| v == 0.0));
    }

    /// Re-evaluates every record with its own forecast.
    fn loop_oracle_cost(x: &StateField, plan: &DawPlan, streams: &[StreamObs], p: &DynParams, rad: &RadianceTruthSpec) -> f64 {
        let mut j = 0.0;
        for s in streams {
            for r in &s.records {
                let mut st = x.clone();
                for step in aggregate_plan(plan.offsets[r.k], &DEFAULT_LEADS).unwrap() {
                    st = crate::dynamics::step_rk4(&st, p, step.hours()).unwrap();
                }
                let h = match s.kind {
                    StreamKind::Conv => st.get(r.comp, r.i, r.j),
                    StreamKind::Radiance(_) => rad.apply(&st.column(r.i, r.j), &r.aux)[r.comp],
                };
                j += 0.5 * ((r.value - h) / r.sigma).powi(2);
            }
        }
        j
    }

    #[test]
    fn cost_matches_loop_oracle() {
        let (_, p, x) = setup(3);
        let fc = Forecaster::perfect(p.clone());
        let plan = DawPlan::new(0, vec![0, 3, 6, 9], 12).unwrap();
        let spec = RadianceTruthSpec::standard(Instrument::A, x.spec());
        let truth = perturbed_rest_state(*x.spec(), &p, 9, 0.5);
        let store = store_from(|t| fc.forecast(&truth.axpy(1.0, &x).unwrap(), t as u32).unwrap(), &plan, 0.3, 0.2, 4, Some(&spec));
        let streams = vec![
            StreamObs::conventional(&plan, &store, vec![1.0; 2]).unwrap(),
            StreamObs::radiance(&plan, &store, Stream::InstrA, RadOp::Truth(&spec), vec![10.0; 4]).unwrap(),
        ];
        let j = cost(&x, &x, &plan, &streams, &fc, &BackgroundTerm::Omitted).unwrap();
        let o = loop_oracle_cost(&x, &plan, &streams, &p, &spec);
        assert!((j - o).abs() < 1e-10 * o.max(1.0), "{j} vs {o}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (g, p, x) = setup(4);
        let fc = Forecaster::perfect(p.clone());
        let plan = DawPlan::new(0, vec![0, 3, 6, 9], 12).unwrap();
        let spec = RadianceTruthSpec::standard(Instrument::A, &g);
        let truth = x.axpy(1.0, &perturbed_rest_state(g, &p, 5, 0.3)).unwrap();
        let store = store_from(|t| fc.forecast(&truth, t as u32).unwrap(), &plan, 0.4, 0.1, 5, Some(&spec));
        let streams = vec![
            StreamObs::conventional(&plan, &store, vec![100.0; 2]).unwrap(),
            StreamObs::radiance(&plan, &store, Stream::InstrA, RadOp::Truth(&spec), vec![1000.0; 4]).unwrap(),
        ];
        let bg = grad_at_background(&x, &plan, &streams, &fc, 60.0).unwrap();
        let h = 1e-5;
        for n in (0..g.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[n] += h;
            let mut xm = x.clone();
            xm.data_mut()[n] -= h;
            let fd = (cost(&xp, &x, &plan, &bg.accepted, &fc, &BackgroundTerm::Omitted).unwrap()
                - cost(&xm, &x, &plan, &bg.accepted, &fc, &BackgroundTerm::Omitted).unwrap())
                / (2.0 * h);
            let a = bg.grad.data()[n];
            assert!((fd - a).abs() <= 1e-5 * fd.abs().max(1e-3), "component {n}: {fd} vs {a}");
        }
    }

    #[test]
    fn composed_map_adjoint_identity_surrogate_and_perfect() {
        let (g, p, x) = setup(5);
        let mut m = ForecastModel::new(
            2,
            LevelStats { mean: vec![2.0; 2], std: vec![3.0; 2] },
            &DEFAULT_LEADS,
            SurrogateShape { hidden: 8, depth: 2 },
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        m.net.params_mut().iter_mut().for_each(|q| *q += 0.1 * rng.gen_range(-1.0..1.0));
        let plan = DawPlan::new(0, vec![0, 3, 6, 9], 12).unwrap();
        let spec = RadianceTruthSpec::standard(Instrument::A, &g);
        let store = store_from(|t| x.clone().with_time(t), &plan, 0.3, 0.1, 6, Some(&spec));
        let streams = vec![
            StreamObs::conventional(&plan, &store, vec![1.0; 2]).unwrap(),
            StreamObs::radiance(&plan, &store, Stream::InstrA, RadOp::Truth(&spec), vec![1.0; 4]).unwrap(),
        ];
        for fc in [Forecaster::perfect(p.clone()), Forecaster::Surrogate(SurrogatePair::short_only(m))] {
            for _ in 0..5 {
                let dx = perturbed_rest_state(g, &DynParams::new(2, 0.0), rng.gen(), 1.0);
                let u: Vec<Vec<f64>> = streams.iter().map(|s| (0..s.records.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let t = composed_tangent(&x, &dx, &plan, &streams, &fc).unwrap();
                let lhs: f64 = t.iter().zip(&u).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>()).sum();
                let rhs = dx.dot(&composed_adjoint(&x, &u, &plan, &streams, &fc).unwrap());
                assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn qc_rejects_strictly_above_five_sigma() {
        let (_, p, x) = setup(6);
        let plan = DawPlan::new(0, vec![0], 12).unwrap();
        let std = 0.5;
        let mk = |d: f64, j: usize| ConvRecord { v: 0, i: 1, j, value: x.get(0, 1, j) + d, sigma: 0.1 };
        let mut store = ObsStore::default();
        store.conv.insert(0, ConvObsBatch { time: 0, records: vec![mk(0.0, 0), mk(5.0 * std, 1), mk(6.0 * std, 2), mk(-6.0 * std, 3)] });
        let s = StreamObs::conventional(&plan, &store, vec![std; 2]).unwrap();
        let fc = Forecaster::perfect(p);
        let bg = grad_at_background(&x, &plan, std::slice::from_ref(&s), &fc, 60.0).unwrap();
        let qc = bg.qc.streams[0].1;
        assert_eq!((qc.total, qc.accepted, qc.rejected_innovation), (4, 2, 2));
        // Moving a rejected record changes nothing.
        let mut store2 = store.clone();
        store2.conv.get_mut(&0).unwrap().records[2].value += 10.0 * std;
        let s2 = StreamObs::conventional(&plan, &store2, vec![std; 2]).unwrap();
        let bg2 = grad_at_background(&x, &plan, &[s2], &fc, 60.0).unwrap();
        assert_eq!(bg.cost, bg2.cost);
        assert_eq!(bg.grad, bg2.grad);
    }

    #[test]
    fn offset_zero_full_coverage_solves_to_truth() {
        let (g, p, x) = setup(7);
        let fc = Forecaster::perfect(p.clone());
        let plan = DawPlan::new(0, vec![0], 12).unwrap();
        let truth = x.axpy(1.0, &perturbed_rest_state(g, &DynParams::new(2, 0.0), 1, 0.5)).unwrap();
        let store = store_from(|_| truth.clone(), &plan, 1.0, 0.0, 1, None);
        let s = StreamObs::conventional(&plan, &store, vec![10.0; 2]).unwrap();
        let res = solve_iterative(&x, &plan, &[s], &fc, &BackgroundTerm::Omitted, &SolverConfig::default()).unwrap();
        assert!(res.x.max_abs_diff(&truth) < 1e-4);
        assert!(res.costs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_innovations_leave_background() {
        let (_, p, x) = setup(8);
        let fc = Forecaster::perfect(p);
        let plan = DawPlan::new(0, vec![0, 3], 12).unwrap();
        let store = store_from(|t| fc.forecast(&x, t as u32).unwrap(), &plan, 0.5, 0.0, 1, None);
        let s = StreamObs::conventional(&plan, &store, vec![10.0; 2]).unwrap();
        let bgt = BackgroundTerm::from_clim_std(0.1, &[3.0, 3.0]);
        let res = solve_iterative(&x, &plan, &[s], &fc, &bgt, &SolverConfig::default()).unwrap();
        assert_eq!(res.x, x);
    }

    #[test]
    fn offset_gradient_support_is_backward_cone() {
        let g = GridSpec::new(2, 8, 16).unwrap();
        let x = perturbed_rest_state(g, &DynParams::new(2, 8.0), 3, 2.0);
        let mut m = ForecastModel::new(
            2,
            LevelStats { mean: vec![2.0; 2], std: vec![3.0; 2] },
            &DEFAULT_LEADS,
            SurrogateShape { hidden: 8, depth: 2 },
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        m.net.params_mut().iter_mut().for_each(|q| *q += 0.1 * rng.gen_range(-1.0..1.0));
        let fc = Forecaster::Surrogate(SurrogatePair::short_only(m));
        let plan = DawPlan::new(0, vec![0, 3], 12).unwrap();
        let mut store = ObsStore::default();
        store.conv.insert(3, ConvObsBatch { time: 3, records: vec![ConvRecord { v: 0, i: 4, j: 9, value: 100.0, sigma: 1.0 }] });
        let s = StreamObs::conventional(&plan, &store, vec![1e6; 2]).unwrap();
        let bg = grad_at_background(&x, &plan, &[s], &fc, 60.0).unwrap();
        for v in 0..2 {
            for i in 0..g.rows {
                for j in 0..g.cols {
                    let inside = (i as isize - 4).abs() <= 1 && (j as isize - 9).abs() <= 2;
                    if !inside {
                        assert_eq!(bg.grad.get(v, i, j), 0.0, "({v},{i},{j})");
                    }
                }
            }
        }
        assert!(bg.grad.get(1, 3, 7) != 0.0);
    }
}
