//! Lead-time-conditioned forecast surrogate: pretraining, rollout
//! fine-tuning, the Short/Medium split and hierarchical aggregation of
//! lead times.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_adjoint, rk4_tangent, step_rk4, step_rk4_taped, DynParams, NatureRun, Rk4Tape};
use crate::error::{Error, Result};
use crate::grid::{gather_stencil, scatter_stencil, stencil_len, GridSpec, LatWeights, LevelStats, StateField, VariableWeights};
use crate::losses::weighted_l1_grad;
use crate::netcore::{train_step, Activation, CondNet, Conditioning, LayerSpec, Optimizer, Trace, TrainConfig};

pub const DEFAULT_LEADS: [u32; 5] = [1, 3, 6, 12, 24];
pub const DEFAULT_HANDOFF_HOURS: u32 = 72;

/// A forecast step length in model hours, drawn from an allowed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LeadTime(u32);

impl LeadTime {
    pub fn new(hours: u32, allowed: &[u32]) -> Result<Self> {
        if !allowed.contains(&hours) {
            return Err(Error::InvalidParameter(format!("lead {hours} h not in {allowed:?}")));
        }
        Ok(Self(hours))
    }

    pub fn hours(self) -> u32 {
        self.0
    }
}

/// Greedy largest-first decomposition of `lead` into allowed steps.
pub fn aggregate_plan(lead: u32, allowed: &[u32]) -> Result<Vec<LeadTime>> {
    if !allowed.contains(&1) {
        return Err(Error::InvalidParameter("allowed leads must contain 1".into()));
    }
    let mut steps: Vec<u32> = allowed.to_vec();
    steps.sort_unstable_by(|a, b| b.cmp(a));
    let mut rest = lead;
    let mut plan = Vec::new();
    for s in steps {
        while rest >= s {
            plan.push(LeadTime(s));
            rest -= s;
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Short,
    Medium,
}

/// Column-shared residual network: the 3x5 stencil of all levels around a
/// column, normalised per level, is mapped to that column's increment.
/// The lead time enters as a one-hot condition, concatenated at the first
/// layer and as a film scale at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub net: CondNet,
    pub variant: Variant,
    pub leads: Vec<u32>,
    pub stats: LevelStats,
}

/// Hyper-parameters of the surrogate network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateShape {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for SurrogateShape {
    fn default() -> Self {
        Self { hidden: 48, depth: 2 }
    }
}

/// Stored activations of one field step, one trace per column.
#[derive(Debug, Clone)]
pub struct StepTape {
    spec: GridSpec,
    lead: u32,
    traces: Vec<Trace>,
}

impl ForecastModel {
    pub fn new(levels: usize, stats: LevelStats, leads: &[u32], shape: SurrogateShape, seed: u64) -> Result<Self> {
        let inputs = stencil_len(levels);
        let k = leads.len();
        let mut layers = vec![LayerSpec::new(inputs, shape.hidden, Conditioning::Concat, true, Activation::Tanh)];
        for _ in 1..shape.depth {
            layers.push(LayerSpec::new(shape.hidden, shape.hidden, Conditioning::None, true, Activation::Tanh));
        }
        layers.push(LayerSpec::new(shape.hidden, levels, Conditioning::Film, true, Activation::Identity));
        let net = CondNet::new(layers, k, seed)?;
        Ok(Self { net, variant: Variant::Short, leads: leads.to_vec(), stats })
    }

    pub fn levels(&self) -> usize {
        self.stats.mean.len()
    }

    fn lead_index(&self, lead: u32) -> Result<usize> {
        self.leads.iter().position(|&l| l == lead).ok_or_else(|| Error::InvalidParameter(format!("lead {lead} h not in {:?}", self.leads)))
    }

    fn one_hot(&self, lead: u32) -> Result<Vec<f64>> {
        let k = self.lead_index(lead)?;
        let mut c = vec![0.0; self.leads.len()];
        c[k] = 1.0;
        Ok(c)
    }

    /// Per-level increment scale: level std times `lead / 24`.
    fn out_scale(&self, lead: u32) -> Vec<f64> {
        self.stats.std.iter().map(|s| s * lead as f64 / 24.0).collect()
    }

    fn inv_std(&self) -> Vec<f64> {
        self.stats.std.iter().map(|s| 1.0 / s).collect()
    }

    fn check_grid(&self, x: &StateField) -> Result<()> {
        if x.spec().levels != self.levels() {
            return Err(Error::ShapeMismatch(format!("model has {} levels, state has {}", self.levels(), x.spec().levels)));
        }
        Ok(())
    }

    pub fn step(&self, x: &StateField, lead: u32) -> Result<StateField> {
        Ok(self.step_taped(x, lead)?.0)
    }

    pub fn step_taped(&self, x: &StateField, lead: u32) -> Result<(StateField, StepTape)> {
        self.check_grid(x)?;
        let spec = *x.spec();
        let cond = self.one_hot(lead)?;
        let scale = self.out_scale(lead);
        let inv_std = self.inv_std();
        let mut y = x.clone();
        y.time = x.time + lead as i64;
        let mut traces = Vec::with_capacity(spec.columns());
        let mut input = Vec::with_capacity(stencil_len(spec.levels));
        for i in 0..spec.rows {
            for j in 0..spec.cols {
                gather_stencil(&spec, x.data(), i, j, &self.stats.mean, &inv_std, &mut input);
                let mut tr = Trace::default();
                self.net.forward_traced(&input, &cond, &mut tr)?;
                for (v, d) in tr.output().iter().enumerate() {
                    y.data_mut()[spec.idx(v, i, j)] += scale[v] * d;
                }
                traces.push(tr);
            }
        }
        if !y.is_finite() {
            return Err(Error::NonFiniteBlowup(y.time));
        }
        Ok((y, StepTape { spec, lead, traces }))
    }

    /// Adjoint of one step. Parameter gradients are accumulated into
    /// `param_grad` when given.
    pub fn step_backward(&self, tape: &StepTape, ybar: &StateField, mut param_grad: Option<&mut [f64]>) -> Result<StateField> {
        let spec = tape.spec;
        let cond = self.one_hot(tape.lead)?;
        let scale = self.out_scale(tape.lead);
        let inv_std = self.inv_std();
        let mut xbar = ybar.clone();
        let mut up = vec![0.0; spec.levels];
        let mut ig = vec![0.0; stencil_len(spec.levels)];
        for i in 0..spec.rows {
            for j in 0..spec.cols {
                for (v, u) in up.iter_mut().enumerate() {
                    *u = ybar.data()[spec.idx(v, i, j)] * scale[v];
                }
                if up.iter().all(|&u| u == 0.0) {
                    continue;
                }
                let tr = &tape.traces[i * spec.cols + j];
                self.net.backward_traced(tr, &cond, &up, param_grad.as_deref_mut(), Some(&mut ig))?;
                scatter_stencil(&spec, &ig, i, j, &inv_std, xbar.data_mut());
            }
        }
        Ok(xbar)
    }

    /// Tangent-linear of one step along `dx`.
    pub fn step_tangent(&self, tape: &StepTape, dx: &StateField) -> Result<StateField> {
        let spec = tape.spec;
        let scale = self.out_scale(tape.lead);
        let inv_std = self.inv_std();
        let zero = vec![0.0; spec.levels];
        let mut dy = dx.clone();
        let mut input = Vec::new();
        for i in 0..spec.rows {
            for j in 0..spec.cols {
                gather_stencil(&spec, dx.data(), i, j, &zero, &inv_std, &mut input);
                let d = self.net.jvp_traced(&tape.traces[i * spec.cols + j], &input)?;
                for (v, dv) in d.iter().enumerate() {
                    dy.data_mut()[spec.idx(v, i, j)] += scale[v] * dv;
                }
            }
        }
        Ok(dy)
    }
}

/// Short model, optional Medium model and the hour after which the
/// Medium model takes over.
#[derive(Debug, Clone)]
pub struct SurrogatePair {
    pub short: ForecastModel,
    pub medium: Option<ForecastModel>,
    pub handoff_hours: u32,
}

impl SurrogatePair {
    pub fn short_only(short: ForecastModel) -> Self {
        Self { short, medium: None, handoff_hours: DEFAULT_HANDOFF_HOURS }
    }

    /// The model used for a step ending `end_hour` hours after initialisation.
    fn model_for(&self, end_hour: u32) -> &ForecastModel {
        match &self.medium {
            Some(m) if end_hour > self.handoff_hours => m,
            _ => &self.short,
        }
    }
}

/// Forecast operator used inside assimilation windows and for cycling:
/// either the learned surrogate or the true dynamics.
#[derive(Debug, Clone)]
pub enum Forecaster {
    Perfect { params: DynParams, leads: Vec<u32> },
    Surrogate(SurrogatePair),
}

#[derive(Debug, Clone)]
pub enum ForecastTape {
    Perfect(Vec<Rk4Tape>),
    Surrogate(Vec<(bool, StepTape)>),
}

impl Forecaster {
    pub fn perfect(params: DynParams) -> Self {
        Forecaster::Perfect { params, leads: DEFAULT_LEADS.to_vec() }
    }

    pub fn leads(&self) -> &[u32] {
        match self {
            Forecaster::Perfect { leads, .. } => leads,
            Forecaster::Surrogate(p) => &p.short.leads,
        }
    }

    pub fn forecast(&self, x0: &StateField, lead: u32) -> Result<StateField> {
        let plan = aggregate_plan(lead, self.leads())?;
        let mut x = x0.clone();
        let mut elapsed = 0;
        for step in plan {
            elapsed += step.hours();
            x = match self {
                Forecaster::Perfect { params, .. } => step_rk4(&x, params, step.hours())?,
                Forecaster::Surrogate(p) => p.model_for(elapsed).step(&x, step.hours())?,
            };
        }
        Ok(x)
    }

    pub fn forecast_taped(&self, x0: &StateField, lead: u32) -> Result<(StateField, ForecastTape)> {
        let plan = aggregate_plan(lead, self.leads())?;
        let mut x = x0.clone();
        match self {
            Forecaster::Perfect { params, .. } => {
                let mut tapes = Vec::with_capacity(plan.len());
                for step in plan {
                    let (y, t) = step_rk4_taped(&x, params, step.hours())?;
                    tapes.push(t);
                    x = y;
                }
                Ok((x, ForecastTape::Perfect(tapes)))
            }
            Forecaster::Surrogate(p) => {
                let mut tapes = Vec::with_capacity(plan.len());
                let mut elapsed = 0;
                for step in plan {
                    elapsed += step.hours();
                    let medium = p.medium.is_some() && elapsed > p.handoff_hours;
                    let (y, t) = p.model_for(elapsed).step_taped(&x, step.hours())?;
                    tapes.push((medium, t));
                    x = y;
                }
                Ok((x, ForecastTape::Surrogate(tapes)))
            }
        }
    }

    pub fn adjoint(&self, tape: &ForecastTape, ybar: &StateField) -> Result<StateField> {
        let mut g = ybar.clone();
        match (self, tape) {
            (Forecaster::Perfect { params, .. }, ForecastTape::Perfect(tapes)) => {
                for t in tapes.iter().rev() {
                    g = rk4_adjoint(t, params, &g);
                }
            }
            (Forecaster::Surrogate(p), ForecastTape::Surrogate(tapes)) => {
                for (medium, t) in tapes.iter().rev() {
                    let m = if *medium { p.medium.as_ref().unwrap() } else { &p.short };
                    g = m.step_backward(t, &g, None)?;
                }
            }
            _ => return Err(Error::InvalidParameter("tape does not belong to this forecaster".into())),
        }
        Ok(g)
    }

    pub fn tangent(&self, tape: &ForecastTape, dx: &StateField) -> Result<StateField> {
        let mut d = dx.clone();
        match (self, tape) {
            (Forecaster::Perfect { params, .. }, ForecastTape::Perfect(tapes)) => {
                for t in tapes {
                    d = rk4_tangent(t, params, &d);
                }
            }
            (Forecaster::Surrogate(p), ForecastTape::Surrogate(tapes)) => {
                for (medium, t) in tapes {
                    let m = if *medium { p.medium.as_ref().unwrap() } else { &p.short };
                    d = m.step_tangent(t, &d)?;
                }
            }
            _ => return Err(Error::InvalidParameter("tape does not belong to this forecaster".into())),
        }
        Ok(d)
    }
}

/// Short steps up to the handoff, Medium steps after it.
pub fn forecast_to(
    short: &ForecastModel,
    medium: Option<&ForecastModel>,
    x0: &StateField,
    lead: u32,
    handoff_hours: u32,
) -> Result<StateField> {
    let pair = SurrogatePair { short: short.clone(), medium: medium.cloned(), handoff_hours };
    Forecaster::Surrogate(pair).forecast(x0, lead)
}

/// Steps per rollout sample and the curriculum range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub handoff_hours: u32,
}

impl RolloutConfig {
    pub fn short() -> Self {
        Self { t_min: 2, t_max: 4, handoff_hours: DEFAULT_HANDOFF_HOURS }
    }

    pub fn medium() -> Self {
        Self { t_min: 5, t_max: 10, handoff_hours: DEFAULT_HANDOFF_HOURS }
    }

    /// Rollout length for `epoch` of `epochs`, growing linearly from
    /// `t_min` to `t_max`.
    pub fn steps_for_epoch(&self, epoch: usize, epochs: usize) -> usize {
        if epochs <= 1 || self.t_max <= self.t_min {
            return self.t_max.max(self.t_min);
        }
        let span = self.t_max - self.t_min + 1;
        (self.t_min + epoch * span / epochs).min(self.t_max)
    }
}

/// Training schedule for the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrainConfig {
    pub train: TrainConfig,
    pub steps_per_epoch: usize,
}

/// Weighted L1 loss of a `steps`-fold composed forecast against the nature
/// run, averaged over steps. Parameter gradients are added to `grad`.
pub fn rollout_loss_grad(
    model: &ForecastModel,
    nature: &NatureRun,
    start: i64,
    lead: u32,
    steps: usize,
    vw: &VariableWeights,
    lw: &LatWeights,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let x0 = nature.at(start).ok_or_else(|| Error::InvalidParameter(format!("no nature state at {start}")))?;
    let mut tapes = Vec::with_capacity(steps);
    let mut upstream = Vec::with_capacity(steps);
    let mut loss = 0.0;
    let mut x = x0.clone();
    for tau in 1..=steps {
        let (y, tape) = model.step_taped(&x, lead)?;
        let truth = nature
            .at(start + (tau as i64) * lead as i64)
            .ok_or_else(|| Error::InvalidParameter("rollout runs past the nature run".into()))?;
        let (l, g) = weighted_l1_grad(&y, truth, vw, lw, 1.0 / steps as f64);
        loss += l / steps as f64;
        tapes.push(tape);
        upstream.push(g);
        x = y;
    }
    if let Some(pg) = grad {
        let mut ybar = StateField::zeros(*x0.spec(), 0);
        for (tape, up) in tapes.iter().zip(&upstream).rev() {
            ybar.add_assign_scaled(1.0, up);
            ybar = model.step_backward(tape, &ybar, Some(pg))?;
        }
    }
    Ok(loss)
}

fn check_cadence(model: &ForecastModel, nature: &NatureRun) -> Result<()> {
    if model.leads.iter().any(|l| l % nature.cadence_hours != 0) {
        return Err(Error::InvalidParameter(format!("nature cadence {} h does not divide every lead", nature.cadence_hours)));
    }
    Ok(())
}

fn train_rollouts(
    model: &mut ForecastModel,
    nature: &NatureRun,
    vw: &VariableWeights,
    lw: &LatWeights,
    cfg: &ForecastTrainConfig,
    steps_for_epoch: impl Fn(usize) -> usize,
) -> Result<Vec<f64>> {
    check_cadence(model, nature)?;
    cfg.train.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = Optimizer::new(cfg.train.optimizer, model.net.param_count());
    let total = cfg.train.epochs * cfg.steps_per_epoch;
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let steps = steps_for_epoch(epoch);
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let lead = model.leads[rng.gen_range(0..model.leads.len())];
            let span = (steps as i64) * lead as i64;
            let latest = nature.end_time() - span;
            if latest < nature.start_time() {
                return Err(Error::InvalidParameter("nature run shorter than one rollout".into()));
            }
            let starts: Vec<i64> = (0..cfg.train.batch_size)
                .map(|_| {
                    let k = rng.gen_range(0..=(latest - nature.start_time()) / nature.cadence_hours as i64);
                    nature.start_time() + k * nature.cadence_hours as i64
                })
                .collect();
            let lr = cfg.train.lr_at(step, total);
            let snapshot = model.clone();
            sum += train_step(&mut model.net, &mut opt, &starts, &cfg.train, lr, |_, &t0, g| {
                rollout_loss_grad(&snapshot, nature, t0, lead, steps, vw, lw, Some(g))
            })?;
            step += 1;
        }
        history.push(sum / cfg.steps_per_epoch as f64);
    }
    Ok(history)
}

/// Single-step training with the weighted L1 loss; the lead is drawn
/// uniformly once per batch. Returns the mean loss of each epoch.
pub fn pretrain(
    model: &mut ForecastModel,
    nature: &NatureRun,
    vw: &VariableWeights,
    lw: &LatWeights,
    cfg: &ForecastTrainConfig,
) -> Result<Vec<f64>> {
    train_rollouts(model, nature, vw, lw, cfg, |_| 1)
}

/// Multi-step fine-tuning with the same lead for every step of a sample.
pub fn rollout_finetune(
    model: &mut ForecastModel,
    nature: &NatureRun,
    rc: &RolloutConfig,
    vw: &VariableWeights,
    lw: &LatWeights,
    cfg: &ForecastTrainConfig,
) -> Result<Vec<f64>> {
    let epochs = cfg.train.epochs;
    train_rollouts(model, nature, vw, lw, cfg, |e| rc.steps_for_epoch(e, epochs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_nature_run, perturbed_rest_state};
    use crate::grid::lat_weights;

    #[test]
    fn greedy_plans() {
        let l = &DEFAULT_LEADS;
        let hours = |p: Vec<LeadTime>| p.into_iter().map(LeadTime::hours).collect::<Vec<_>>();
        assert_eq!(hours(aggregate_plan(24, l).unwrap()), vec![24]);
        assert_eq!(hours(aggregate_plan(30, l).unwrap()), vec![24, 6]);
        assert_eq!(hours(aggregate_plan(7, l).unwrap()), vec![6, 1]);
        assert_eq!(hours(aggregate_plan(100, l).unwrap()), vec![24, 24, 24, 24, 3, 1]);
        assert!(aggregate_plan(0, l).unwrap().is_empty());
        assert!(aggregate_plan(5, &[3, 6]).is_err());
    }

    #[test]
    fn plans_sum_to_lead() {
        for lead in 1..=240 {
            let plan = aggregate_plan(lead, &DEFAULT_LEADS).unwrap();
            assert_eq!(plan.iter().map(|s| s.hours()).sum::<u32>(), lead);
            assert!(plan.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn lead_time_validates_membership() {
        assert!(LeadTime::new(6, &DEFAULT_LEADS).is_ok());
        assert!(LeadTime::new(5, &DEFAULT_LEADS).is_err());
    }

    fn small_model(levels: usize, seed: u64) -> ForecastModel {
        let mut m = ForecastModel::new(
            levels,
            LevelStats { mean: vec![2.0; levels], std: vec![3.0; levels] },
            &DEFAULT_LEADS,
            SurrogateShape { hidden: 8, depth: 2 },
            seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.net.params_mut() {
            *p += 0.2 * rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn perfect_model_composition_is_exact() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let p = DynParams::new(2, 8.0);
        let x0 = perturbed_rest_state(g, &p, 1, 1.0);
        let f = Forecaster::perfect(p.clone());
        let a = f.forecast(&f.forecast(&x0, 6).unwrap(), 6).unwrap();
        let b = f.forecast(&x0, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(f.forecast(&x0, 0).unwrap(), x0);
    }

    #[test]
    fn surrogate_tangent_and_adjoint_are_dual() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let m = small_model(2, 4);
        let f = Forecaster::Surrogate(SurrogatePair::short_only(m));
        let x0 = perturbed_rest_state(g, &DynParams::new(2, 8.0), 2, 2.0);
        let dx = perturbed_rest_state(g, &DynParams::new(2, 0.0), 3, 1.0);
        let u = perturbed_rest_state(g, &DynParams::new(2, 0.0), 5, 1.0);
        let (_, tape) = f.forecast_taped(&x0, 9).unwrap();
        let lhs = f.tangent(&tape, &dx).unwrap().dot(&u);
        let rhs = dx.dot(&f.adjoint(&tape, &u).unwrap());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn single_step_adjoint_support_is_stencil() {
        let g = GridSpec::new(2, 6, 12).unwrap();
        let m = small_model(2, 8);
        let x0 = perturbed_rest_state(g, &DynParams::new(2, 8.0), 2, 2.0);
        let (_, tape) = m.step_taped(&x0, 3).unwrap();
        let mut u = StateField::zeros(g, 0);
        u.set(1, 3, 6, 1.0);
        let xb = m.step_backward(&tape, &u, None).unwrap();
        for v in 0..2 {
            for i in 0..6 {
                for j in 0..12 {
                    let inside = (i as isize - 3).abs() <= 1 && (j as isize - 6).abs() <= 2;
                    if !inside {
                        assert_eq!(xb.get(v, i, j), 0.0);
                    }
                }
            }
        }
        assert!(xb.get(0, 2, 4) != 0.0);
    }

    #[test]
    fn rollout_with_one_step_equals_single_step_loss() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let p = DynParams::new(2, 8.0);
        let run = generate_nature_run(&perturbed_rest_state(g, &p, 1, 1.0), &p, 240, 48, 1, 1).unwrap();
        let m = small_model(2, 2);
        let vw = VariableWeights::uniform(2);
        let lw = lat_weights(&g);
        let one = rollout_loss_grad(&m, &run, 5, 6, 1, &vw, &lw, None).unwrap();
        let pred = m.step(run.at(5).unwrap(), 6).unwrap();
        let direct = crate::losses::weighted_l1(&pred, run.at(11).unwrap(), &vw, &lw);
        assert!((one - direct).abs() < 1e-12);
    }

    #[test]
    fn rollout_parameter_gradient_matches_finite_difference() {
        let g = GridSpec::new(1, 3, 6).unwrap();
        let p = DynParams::new(1, 8.0);
        let run = generate_nature_run(&perturbed_rest_state(g, &p, 1, 1.0), &p, 240, 24, 1, 1).unwrap();
        let mut m = small_model(1, 5);
        let vw = VariableWeights::uniform(1);
        let lw = lat_weights(&g);
        let mut grad = vec![0.0; m.net.param_count()];
        rollout_loss_grad(&m, &run, 0, 3, 3, &vw, &lw, Some(&mut grad)).unwrap();
        let h = 1e-7;
        for k in [0, 7, 20, m.net.param_count() - 1] {
            let orig = m.net.params()[k];
            m.net.params_mut()[k] = orig + h;
            let lp = rollout_loss_grad(&m, &run, 0, 3, 3, &vw, &lw, None).unwrap();
            m.net.params_mut()[k] = orig - h;
            let lm = rollout_loss_grad(&m, &run, 0, 3, 3, &vw, &lw, None).unwrap();
            m.net.params_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn handoff_switches_models() {
        let g = GridSpec::new(1, 2, 4).unwrap();
        let short = small_model(1, 1);
        let medium = small_model(1, 2);
        let x0 = perturbed_rest_state(g, &DynParams::new(1, 8.0), 2, 1.0);
        let both = forecast_to(&short, Some(&medium), &x0, 72, 72).unwrap();
        let only = forecast_to(&short, None, &x0, 72, 72).unwrap();
        assert_eq!(both, only);
        let both = forecast_to(&short, Some(&medium), &x0, 96, 72).unwrap();
        let only = forecast_to(&short, None, &x0, 96, 72).unwrap();
        assert_ne!(both, only);
        assert_eq!(forecast_to(&short, Some(&medium), &x0, 0, 72).unwrap(), x0);
    }

    #[test]
    fn curriculum_spans_range() {
        let rc = RolloutConfig::short();
        let steps: Vec<usize> = (0..6).map(|e| rc.steps_for_epoch(e, 6)).collect();
        assert_eq!(steps, vec![2, 2, 3, 3, 4, 4]);
        let rc = RolloutConfig::medium();
        assert_eq!(rc.steps_for_epoch(0, 12), 5);
        assert_eq!(rc.steps_for_epoch(11, 12), 10);
    }
}
