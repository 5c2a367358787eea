//! Randomised gradient, adjoint and QC checks on small cases with fixed
//! seeds. Each check reports its worst error against a tolerance.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{perturbed_rest_state, rk4_adjoint, rk4_tangent, step_rk4, step_rk4_taped, DynParams};
use crate::error::Result;
use crate::forecast::{ForecastModel, Forecaster, SurrogatePair, SurrogateShape, DEFAULT_LEADS};
use crate::fourdvar::{
    composed_adjoint, composed_tangent, cost, grad_at_background, BackgroundTerm, DawPlan, RadOp, Stream, StreamObs, QC_SIGMAS,
};
use crate::grid::{GridSpec, LevelStats, StateField};
use crate::netcore::{Activation, CondNet, Conditioning, LayerSpec};
use crate::obsops::{radiance_truth, sample_conventional, Instrument, ObsStore, RadianceEmulator, RadianceTruthSpec, RADIANCE_BOUNDS};

pub const GRAD_TOL: f64 = 1e-5;
pub const ADJOINT_TOL: f64 = 1e-10;
/// Step of the fourth-order central difference
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`; its truncation error
/// is O(h^4), so a step this large keeps rounding noise small.
pub const FD_STEP: f64 = 1e-3;

/// Fourth-order central difference of `f` at offset zero.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = FD_STEP;
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}
pub const WINDOW: [u32; 4] = [0, 3, 6, 9];

/// One line of the pass/fail table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    pub fn new(name: &str, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self { name: name.to_string(), cases, worst, tolerance, passed: worst <= tolerance }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>6} {:>12} {:>10}  result\n", "check", "cases", "worst", "tolerance");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>6} {:>12.3e} {:>10.1e}  {}",
                r.name,
                r.cases,
                r.worst,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

/// Relative dot-product mismatch `|<T dx, u> - <dx, A u>|` over the larger
/// magnitude, worst over `pairs` random Gaussian pairs.
pub fn adjoint_identity_error(
    n_in: usize,
    n_out: usize,
    pairs: usize,
    seed: u64,
    mut tangent: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    mut adjoint: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let dx: Vec<f64> = (0..n_in).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let u: Vec<f64> = (0..n_out).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let t = tangent(&dx)?;
        let a = adjoint(&u)?;
        let lhs: f64 = t.iter().zip(&u).map(|(p, q)| p * q).sum();
        let rhs: f64 = dx.iter().zip(&a).map(|(p, q)| p * q).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    Ok(worst)
}

/// Surrogate with weights moved off their initialisation so every layer
/// is exercised.
pub fn random_surrogate(levels: usize, hidden: usize, seed: u64) -> Result<ForecastModel> {
    let stats = LevelStats { mean: vec![2.0; levels], std: vec![3.0; levels] };
    let mut m = ForecastModel::new(levels, stats, &DEFAULT_LEADS, SurrogateShape { hidden, depth: 2 }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    m.net.params_mut().iter_mut().for_each(|q| *q += 0.1 * rng.gen_range(-1.0..1.0));
    Ok(m)
}

pub fn random_emulator(levels: usize, channels: usize, cols: usize, seed: u64) -> Result<RadianceEmulator> {
    let stats = LevelStats { mean: vec![2.0; levels], std: vec![3.0; levels] };
    let mut em = RadianceEmulator::new(stats, channels, cols, 8, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4);
    em.net.params_mut().iter_mut().for_each(|q| *q += 0.1 * rng.gen_range(-1.0..1.0));
    em.spread = vec![0.5; channels];
    Ok(em)
}

/// A randomised small 4DVar problem: background, forecaster and an
/// observation store drawn around a perturbed truth trajectory.
pub struct GradCase {
    pub spec: GridSpec,
    pub params: DynParams,
    pub xb: StateField,
    pub fc: Forecaster,
    pub plan: DawPlan,
    pub store: ObsStore,
    pub rad_spec: RadianceTruthSpec,
    pub emulator: Option<RadianceEmulator>,
}

impl GradCase {
    /// Case `seed`: grid up to 3×8×16, perfect model for even seeds and a
    /// random surrogate for odd ones; the radiance operator is the truth
    /// operator or a random emulator, alternating every two seeds.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::new(rng.gen_range(1..=3), rng.gen_range(4..=8), rng.gen_range(8..=16))?;
        let params = DynParams::new(spec.levels, 8.0);
        let x0 = perturbed_rest_state(spec, &params, rng.gen(), 1.0);
        let xb = step_rk4(&x0, &params, 48)?.with_time(0);
        let fc = if seed.is_multiple_of(2) {
            Forecaster::perfect(params.clone())
        } else {
            Forecaster::Surrogate(SurrogatePair::short_only(random_surrogate(spec.levels, 8, rng.gen())?))
        };
        let plan = DawPlan::new(0, WINDOW.to_vec(), 12)?;
        let truth = xb.axpy(1.0, &perturbed_rest_state(spec, &DynParams::new(spec.levels, 0.0), rng.gen(), 0.3))?;
        let mut rad_spec = RadianceTruthSpec::standard(Instrument::A, &spec);
        rad_spec.density = 0.5;
        let emulator =
            if (seed / 2) % 2 == 1 { Some(random_emulator(spec.levels, rad_spec.channels(), spec.cols, rng.gen())?) } else { None };
        let noise = Normal::new(0.0, 0.5).expect("positive std");
        let mut store = ObsStore::default();
        let obs_seed: u64 = rng.gen();
        for t in plan.times() {
            let x = fc.forecast(&truth, t as u32)?.with_time(t);
            let mut b = sample_conventional(&x, 0.4, &vec![0.2; spec.levels], obs_seed)?;
            b.time = t;
            store.conv.insert(t, b);
            let mut r = radiance_truth(&x, &rad_spec, obs_seed, 1)?;
            r.time = t;
            if let Some(em) = &emulator {
                for rec in &mut r.records {
                    rec.value = em.apply(&x.column(rec.i, rec.j), &rec.aux)?[rec.c] + noise.sample(&mut rng);
                }
            }
            store.rad.insert((Instrument::A, t), r);
        }
        Ok(Self { spec, params, xb, fc, plan, store, rad_spec, emulator })
    }

    pub fn rad_op(&self) -> RadOp<'_> {
        match &self.emulator {
            Some(e) => RadOp::Emulator(e),
            None => RadOp::Truth(&self.rad_spec),
        }
    }

    /// Conventional and radiance streams with QC thresholds `qc_std`
    /// (per level) and `qc_rad` (per channel).
    pub fn streams(&self, qc_std: f64, qc_rad: f64) -> Result<Vec<StreamObs<'_>>> {
        Ok(vec![
            StreamObs::conventional(&self.plan, &self.store, vec![qc_std; self.spec.levels])?,
            StreamObs::radiance(&self.plan, &self.store, Stream::InstrA, self.rad_op(), vec![qc_rad; self.rad_spec.channels()])?,
        ])
    }
}

/// Worst relative error between `grad_at_background` and central finite
/// differences of the cost over every state component. Components are
/// compared relative to the larger of the two values, floored at 1e-6 of
/// the largest gradient component so that exact zeros outside the
/// observation cone compare on the gradient's own scale.
pub fn grad_fd_error(case: &GradCase) -> Result<f64> {
    let streams = case.streams(1e6, 1e6)?;
    let bg = grad_at_background(&case.xb, &case.plan, &streams, &case.fc, case.rad_spec.lat_mask_deg)?;
    let gmax = bg.grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst: f64 = 0.0;
    for n in 0..case.spec.len() {
        let fd = central_difference(|h| {
            let mut x = case.xb.clone();
            x.data_mut()[n] += h;
            cost(&x, &case.xb, &case.plan, &bg.accepted, &case.fc, &BackgroundTerm::Omitted)
        })?;
        let a = bg.grad.data()[n];
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6 * gmax).max(1e-300));
    }
    Ok(worst)
}

/// Dot-product test of the composed map `x -> H(M(x))` for a case.
pub fn composed_adjoint_error(case: &GradCase, pairs: usize, seed: u64) -> Result<f64> {
    let streams = case.streams(1e6, 1e6)?;
    let sizes: Vec<usize> = streams.iter().map(|s| s.records.len()).collect();
    let n_out: usize = sizes.iter().sum();
    let split = |u: &[f64]| {
        let mut out = Vec::with_capacity(sizes.len());
        let mut k = 0;
        for s in &sizes {
            out.push(u[k..k + s].to_vec());
            k += s;
        }
        out
    };
    let spec = case.spec;
    adjoint_identity_error(
        spec.len(),
        n_out,
        pairs,
        seed,
        |dx| Ok(composed_tangent(&case.xb, &StateField::from_vec(spec, 0, dx.to_vec())?, &case.plan, &streams, &case.fc)?.concat()),
        |u| Ok(composed_adjoint(&case.xb, &split(u), &case.plan, &streams, &case.fc)?.into_vec()),
    )
}

/// Dot-product test of one surrogate step at a random state and lead.
pub fn surrogate_step_adjoint_error(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::new(3, 8, 16)?;
    let m = random_surrogate(3, 12, rng.gen())?;
    let x = perturbed_rest_state(spec, &DynParams::new(3, 8.0), rng.gen(), 2.0);
    let lead = DEFAULT_LEADS[rng.gen_range(0..DEFAULT_LEADS.len())];
    let (_, tape) = m.step_taped(&x, lead)?;
    adjoint_identity_error(
        spec.len(),
        spec.len(),
        pairs,
        rng.gen(),
        |dx| Ok(m.step_tangent(&tape, &StateField::from_vec(spec, 0, dx.to_vec())?)?.into_vec()),
        |u| Ok(m.step_backward(&tape, &StateField::from_vec(spec, 0, u.to_vec())?, None)?.into_vec()),
    )
}

/// Dot-product test of a composed multi-step forecast, surrogate or RK4.
pub fn forecast_adjoint_error(fc: &Forecaster, spec: GridSpec, lead: u32, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = perturbed_rest_state(spec, &DynParams::new(spec.levels, 8.0), rng.gen(), 2.0);
    let (_, tape) = fc.forecast_taped(&x, lead)?;
    adjoint_identity_error(
        spec.len(),
        spec.len(),
        pairs,
        rng.gen(),
        |dx| Ok(fc.tangent(&tape, &StateField::from_vec(spec, 0, dx.to_vec())?)?.into_vec()),
        |u| Ok(fc.adjoint(&tape, &StateField::from_vec(spec, 0, u.to_vec())?)?.into_vec()),
    )
}

/// Dot-product test of the emulator column adjoint; a fresh column and
/// view geometry for every pair.
pub fn emulator_adjoint_error(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let em = random_emulator(3, 4, 32, rng.gen())?;
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let col: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..8.0)).collect();
        let aux = crate::obsops::AuxInfo { scan: rng.gen_range(0..32), zen: rng.gen_range(0.5..1.0) };
        let e = adjoint_identity_error(3, 4, 1, rng.gen(), |d| em.tangent(&col, &aux, d), |u| Ok(em.apply_and_adjoint(&col, &aux, u)?.1))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Dot-product test of the RK4 tangent and adjoint over `hours`.
pub fn rk4_adjoint_error(pairs: usize, hours: u32, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::new(3, 8, 16)?;
    let p = DynParams::new(3, 8.0);
    let x = perturbed_rest_state(spec, &p, rng.gen(), 2.0);
    let (_, tape) = step_rk4_taped(&x, &p, hours)?;
    adjoint_identity_error(
        spec.len(),
        spec.len(),
        pairs,
        rng.gen(),
        |dx| Ok(rk4_tangent(&tape, &p, &StateField::from_vec(spec, 0, dx.to_vec())?).into_vec()),
        |u| Ok(rk4_adjoint(&tape, &p, &StateField::from_vec(spec, 0, u.to_vec())?).into_vec()),
    )
}

/// Worst relative error of CondNet parameter and input gradients against
/// central differences, for each conditioning kind.
pub fn netcore_fd_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = CondNet::new(
        vec![
            LayerSpec::new(4, 6, Conditioning::Concat, true, Activation::Tanh),
            LayerSpec::new(6, 5, Conditioning::Film, true, Activation::Tanh),
            LayerSpec::new(5, 3, Conditioning::None, false, Activation::Identity),
        ],
        2,
        rng.gen(),
    )?;
    let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cond: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |n: &CondNet, x: &[f64]| -> Result<f64> { Ok(n.forward(x, &cond)?.iter().zip(&up).map(|(a, b)| a * b).sum()) };
    let (pg, ig) = net.backward(&input, &cond, &up)?;
    let scale = pg.iter().chain(&ig).fold(0.0f64, |m, g| m.max(g.abs()));
    let rel = |fd: f64, a: f64| (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6 * scale).max(1e-300);
    let mut worst: f64 = 0.0;
    for k in 0..net.param_count() {
        let fd = central_difference(|h| {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            f(&p, &input)
        })?;
        worst = worst.max(rel(fd, pg[k]));
    }
    for k in 0..input.len() {
        let fd = central_difference(|h| {
            let mut p = input.clone();
            p[k] += h;
            f(&net, &p)
        })?;
        worst = worst.max(rel(fd, ig[k]));
    }
    Ok(worst)
}

/// Outcome of the QC semantics check on one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcOutcome {
    /// Records rejected by the filter.
    pub rejected: usize,
    /// Whether the accepted/rejected counts equal the independent oracle.
    pub counts_match: bool,
    /// Largest change of J or any gradient component when a rejected record
    /// is moved by ±10 observation sigmas.
    pub max_change: f64,
}

/// Injects gross errors into a case, then checks that every rejected record
/// is inert and that the filter agrees with a record-by-record oracle.
pub fn qc_semantics(seed: u64) -> Result<QcOutcome> {
    let mut case = GradCase::random(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let qc_std = 1.0;
    let qc_rad = 5.0;
    // Gross errors far enough out that ±10 sigma keeps them rejected.
    for b in case.store.conv.values_mut() {
        for r in b.records.iter_mut() {
            if rng.gen_bool(0.2) {
                r.value += (if rng.gen_bool(0.5) { 1.0 } else { -1.0 }) * rng.gen_range(8.0..20.0) * qc_std;
            }
        }
    }
    for b in case.store.rad.values_mut() {
        for r in b.records.iter_mut() {
            if rng.gen_bool(0.2) {
                r.value += (if rng.gen_bool(0.5) { 1.0 } else { -1.0 }) * rng.gen_range(8.0..20.0) * qc_rad;
            }
        }
    }
    let lat_mask = case.rad_spec.lat_mask_deg;
    let streams = case.streams(qc_std, qc_rad)?;
    let base = grad_at_background(&case.xb, &case.plan, &streams, &case.fc, lat_mask)?;

    // Oracle: each record against its own free forecast.
    let mut oracle_rejected = 0;
    for (t, b) in &case.store.conv {
        let x = case.fc.forecast(&case.xb, *t as u32)?;
        oracle_rejected += b.records.iter().filter(|r| (r.value - x.get(r.v, r.i, r.j)).abs() > QC_SIGMAS * qc_std).count();
    }
    for ((_, t), b) in &case.store.rad {
        let x = case.fc.forecast(&case.xb, *t as u32)?;
        for r in &b.records {
            let h = match &case.emulator {
                Some(e) => e.apply(&x.column(r.i, r.j), &r.aux)?[r.c],
                None => case.rad_spec.apply(&x.column(r.i, r.j), &r.aux)[r.c],
            };
            let lat = case.spec.lat_deg(r.i).abs();
            let out =
                (r.value - h).abs() > QC_SIGMAS * qc_rad || r.value < RADIANCE_BOUNDS.0 || r.value > RADIANCE_BOUNDS.1 || lat > lat_mask;
            oracle_rejected += out as usize;
        }
    }
    let total: usize = base.qc.streams.iter().map(|(_, q)| q.total).sum();
    let accepted: usize = base.qc.streams.iter().map(|(_, q)| q.accepted).sum();
    let rejected = total - accepted;
    let counts_match = rejected == oracle_rejected && total == streams.iter().map(|s| s.records.len()).sum::<usize>();

    // Every rejected record, moved by ±10 sigma, must leave J and its gradient untouched.
    let mut max_change: f64 = 0.0;
    for (si, s) in streams.iter().enumerate() {
        for (ri, r) in s.records.iter().enumerate() {
            if base.accepted[si].records.contains(r) {
                continue;
            }
            for sign in [-1.0, 1.0] {
                let mut moved: Vec<StreamObs> = streams.clone();
                moved[si].records[ri].value += sign * 10.0 * r.sigma;
                let g = grad_at_background(&case.xb, &case.plan, &moved, &case.fc, lat_mask)?;
                max_change = max_change.max((g.cost - base.cost).abs());
                max_change = g.grad.data().iter().zip(base.grad.data()).fold(max_change, |m, (a, b)| m.max((a - b).abs()));
            }
        }
    }
    Ok(QcOutcome { rejected, counts_match, max_change })
}

/// The full suite: `cases` randomised cases per check, seeds derived from
/// `seed`.
pub fn gradcheck_suite(seed: u64, cases: usize) -> Result<GradcheckReport> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for c in 0..cases as u64 {
        worst = worst.max(grad_fd_error(&GradCase::random(seed.wrapping_add(c))?)?);
    }
    rows.push(CheckRow::new("4dvar gradient vs fd", cases, worst, GRAD_TOL));

    let mut worst: f64 = 0.0;
    for c in 0..cases as u64 {
        worst = worst.max(netcore_fd_error(seed.wrapping_add(c))?);
    }
    rows.push(CheckRow::new("condnet gradient vs fd", cases, worst, GRAD_TOL));

    rows.push(CheckRow::new("surrogate step adjoint", 100, surrogate_step_adjoint_error(100, seed)?, ADJOINT_TOL));
    let spec = GridSpec::new(3, 8, 16)?;
    let sur = Forecaster::Surrogate(SurrogatePair::short_only(random_surrogate(3, 12, seed)?));
    rows.push(CheckRow::new("surrogate 9 h adjoint", 100, forecast_adjoint_error(&sur, spec, 9, 100, seed)?, ADJOINT_TOL));
    rows.push(CheckRow::new(
        "rk4 9 h adjoint",
        100,
        forecast_adjoint_error(&Forecaster::perfect(DynParams::new(3, 8.0)), spec, 9, 100, seed)?,
        ADJOINT_TOL,
    ));
    rows.push(CheckRow::new("emulator adjoint", 100, emulator_adjoint_error(100, seed)?, ADJOINT_TOL));

    let mut worst: f64 = 0.0;
    for c in 0..4u64 {
        worst = worst.max(composed_adjoint_error(&GradCase::random(seed.wrapping_add(c))?, 25, seed.wrapping_add(c))?);
    }
    rows.push(CheckRow::new("H∘M adjoint", 100, worst, ADJOINT_TOL));

    let (mut change, mut mismatches, mut rejected) = (0.0f64, 0usize, 0usize);
    for c in 0..cases.min(8) as u64 {
        let q = qc_semantics(seed.wrapping_add(c))?;
        change = change.max(q.max_change);
        mismatches += !q.counts_match as usize;
        rejected += q.rejected;
    }
    rows.push(CheckRow::new("qc rejected records inert", rejected, change, 0.0));
    rows.push(CheckRow::new("qc counts vs oracle", cases.min(8), mismatches as f64, 0.0));
    Ok(GradcheckReport { rows })
}
