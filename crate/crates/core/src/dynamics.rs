//! Multi-level Lorenz-96 rows coupled by meridional and vertical diffusion.
//! This is the synthetic "truth" that nature runs are drawn from.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, StateField};

pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynParams {
    /// Forcing per level.
    pub forcing: Vec<f64>,
    pub c_merid: f64,
    pub c_vert: f64,
    /// Integrator step in model hours.
    pub dt_int: f64,
    /// Lorenz time units per model hour.
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
}

/// 0.05 Lorenz time units per 6 model hours.
pub fn default_time_scale() -> f64 {
    0.05 / 6.0
}

impl DynParams {
    pub fn new(levels: usize, forcing: f64) -> Self {
        Self { forcing: vec![forcing; levels], c_merid: 0.2, c_vert: 0.1, dt_int: 0.05, time_scale: default_time_scale() }
    }

    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        if self.forcing.len() != spec.levels {
            return Err(Error::ShapeMismatch(format!("{} forcing values for {} levels", self.forcing.len(), spec.levels)));
        }
        let finite = self.forcing.iter().all(|f| f.is_finite()) && self.c_merid.is_finite() && self.c_vert.is_finite();
        if !finite || self.c_merid < 0.0 || self.c_vert < 0.0 {
            return Err(Error::InvalidParameter("dynamics coefficients must be finite, couplings >= 0".into()));
        }
        if !(self.dt_int > 0.0 && self.time_scale > 0.0) {
            return Err(Error::InvalidParameter("dt_int and time_scale must be positive".into()));
        }
        Ok(())
    }

    /// Number of RK4 substeps covering `hours`.
    pub fn substeps(&self, hours: u32) -> Result<usize> {
        let n = (hours as f64 / self.dt_int).round();
        if (n * self.dt_int - hours as f64).abs() > 1e-9 * (hours as f64).max(1.0) {
            return Err(Error::InvalidParameter(format!("{hours} h is not a multiple of dt_int = {}", self.dt_int)));
        }
        Ok(n as usize)
    }
}

/// Row-neighbour offsets for one grid, with clamping applied.
struct Neighbours {
    spec: GridSpec,
}

impl Neighbours {
    #[inline]
    fn up_level(&self, v: usize) -> usize {
        v.saturating_sub(1)
    }
    #[inline]
    fn down_level(&self, v: usize) -> usize {
        (v + 1).min(self.spec.levels - 1)
    }
    #[inline]
    fn south(&self, i: usize) -> usize {
        i.saturating_sub(1)
    }
    #[inline]
    fn north(&self, i: usize) -> usize {
        (i + 1).min(self.spec.rows - 1)
    }
}

fn tendency_into(spec: &GridSpec, x: &[f64], p: &DynParams, out: &mut [f64]) {
    let nb = Neighbours { spec: *spec };
    let w = spec.cols;
    for v in 0..spec.levels {
        let (vu, vd) = (nb.up_level(v), nb.down_level(v));
        for i in 0..spec.rows {
            let (is, in_) = (nb.south(i), nb.north(i));
            let row = spec.idx(v, i, 0);
            let rs = spec.idx(v, is, 0);
            let rn = spec.idx(v, in_, 0);
            let ru = spec.idx(vu, i, 0);
            let rd = spec.idx(vd, i, 0);
            for j in 0..w {
                let jp1 = if j + 1 == w { 0 } else { j + 1 };
                let jm1 = if j == 0 { w - 1 } else { j - 1 };
                let jm2 = (j + w - 2) % w;
                let xc = x[row + j];
                let adv = (x[row + jp1] - x[row + jm2]) * x[row + jm1] - xc + p.forcing[v];
                let merid = p.c_merid * (x[rn + j] - 2.0 * xc + x[rs + j]);
                let vert = p.c_vert * (x[rd + j] - 2.0 * xc + x[ru + j]);
                out[row + j] = adv + merid + vert;
            }
        }
    }
}

/// Jacobian of the tendency at `x` applied to `dx`.
fn tendency_tangent_into(spec: &GridSpec, x: &[f64], dx: &[f64], p: &DynParams, out: &mut [f64]) {
    let nb = Neighbours { spec: *spec };
    let w = spec.cols;
    for v in 0..spec.levels {
        let (vu, vd) = (nb.up_level(v), nb.down_level(v));
        for i in 0..spec.rows {
            let row = spec.idx(v, i, 0);
            let rs = spec.idx(v, nb.south(i), 0);
            let rn = spec.idx(v, nb.north(i), 0);
            let ru = spec.idx(vu, i, 0);
            let rd = spec.idx(vd, i, 0);
            for j in 0..w {
                let jp1 = (j + 1) % w;
                let jm1 = (j + w - 1) % w;
                let jm2 = (j + w - 2) % w;
                let dc = dx[row + j];
                let adv = (dx[row + jp1] - dx[row + jm2]) * x[row + jm1] + (x[row + jp1] - x[row + jm2]) * dx[row + jm1] - dc;
                let merid = p.c_merid * (dx[rn + j] - 2.0 * dc + dx[rs + j]);
                let vert = p.c_vert * (dx[rd + j] - 2.0 * dc + dx[ru + j]);
                out[row + j] = adv + merid + vert;
            }
        }
    }
}

/// Accumulates the transposed tendency Jacobian at `x` applied to `u` into `out`.
fn tendency_adjoint_acc(spec: &GridSpec, x: &[f64], u: &[f64], p: &DynParams, scale: f64, out: &mut [f64]) {
    let nb = Neighbours { spec: *spec };
    let w = spec.cols;
    for v in 0..spec.levels {
        let (vu, vd) = (nb.up_level(v), nb.down_level(v));
        for i in 0..spec.rows {
            let row = spec.idx(v, i, 0);
            let rs = spec.idx(v, nb.south(i), 0);
            let rn = spec.idx(v, nb.north(i), 0);
            let ru = spec.idx(vu, i, 0);
            let rd = spec.idx(vd, i, 0);
            for j in 0..w {
                let jp1 = (j + 1) % w;
                let jm1 = (j + w - 1) % w;
                let jm2 = (j + w - 2) % w;
                let g = scale * u[row + j];
                if g == 0.0 {
                    continue;
                }
                out[row + jp1] += g * x[row + jm1];
                out[row + jm2] -= g * x[row + jm1];
                out[row + jm1] += g * (x[row + jp1] - x[row + jm2]);
                out[row + j] -= g;
                let gm = p.c_merid * g;
                out[rn + j] += gm;
                out[rs + j] += gm;
                out[row + j] -= 2.0 * gm;
                let gv = p.c_vert * g;
                out[rd + j] += gv;
                out[ru + j] += gv;
                out[row + j] -= 2.0 * gv;
            }
        }
    }
}

pub fn tendency(x: &StateField, p: &DynParams) -> StateField {
    let mut out = StateField::zeros(*x.spec(), x.time);
    tendency_into(x.spec(), x.data(), p, out.data_mut());
    out
}

/// Scratch buffers for one RK4 substep.
struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        Self { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }
}

/// Advances `x` in place by one substep of `h` Lorenz units. When `stages`
/// is given, the three intermediate stage states are appended to it.
fn rk4_substep(spec: &GridSpec, x: &mut [f64], p: &DynParams, h: f64, wk: &mut Rk4Work, mut stages: Option<&mut Vec<Vec<f64>>>) {
    tendency_into(spec, x, p, &mut wk.k1);
    for ((t, a), k) in wk.tmp.iter_mut().zip(x.iter()).zip(&wk.k1) {
        *t = a + 0.5 * h * k;
    }
    if let Some(s) = stages.as_mut() {
        s.push(wk.tmp.clone());
    }
    tendency_into(spec, &wk.tmp, p, &mut wk.k2);
    for ((t, a), k) in wk.tmp.iter_mut().zip(x.iter()).zip(&wk.k2) {
        *t = a + 0.5 * h * k;
    }
    if let Some(s) = stages.as_mut() {
        s.push(wk.tmp.clone());
    }
    tendency_into(spec, &wk.tmp, p, &mut wk.k3);
    for ((t, a), k) in wk.tmp.iter_mut().zip(x.iter()).zip(&wk.k3) {
        *t = a + h * k;
    }
    if let Some(s) = stages.as_mut() {
        s.push(wk.tmp.clone());
    }
    tendency_into(spec, &wk.tmp, p, &mut wk.k4);
    for (k, a) in x.iter_mut().enumerate() {
        *a += h / 6.0 * (wk.k1[k] + 2.0 * wk.k2[k] + 2.0 * wk.k3[k] + wk.k4[k]);
    }
}

fn check_blowup(x: &[f64], time: i64) -> Result<()> {
    if x.iter().any(|v| !(v.abs() <= BLOWUP_LIMIT)) {
        return Err(Error::NonFiniteBlowup(time));
    }
    Ok(())
}

/// Classical RK4 over `hours` model hours in substeps of `dt_int`.
pub fn step_rk4(x: &StateField, p: &DynParams, hours: u32) -> Result<StateField> {
    let n = p.substeps(hours)?;
    let h = p.dt_int * p.time_scale;
    let spec = *x.spec();
    let mut data = x.data().to_vec();
    let mut wk = Rk4Work::new(spec.len());
    for _ in 0..n {
        rk4_substep(&spec, &mut data, p, h, &mut wk, None);
        check_blowup(&data, x.time)?;
    }
    StateField::from_vec(spec, x.time + hours as i64, data)
}

/// Stage states of an RK4 integration, kept for the tangent and adjoint.
#[derive(Debug, Clone)]
pub struct Rk4Tape {
    spec: GridSpec,
    /// For every substep: start state followed by the three stage states.
    stages: Vec<Vec<f64>>,
    h: f64,
}

impl Rk4Tape {
    pub fn substeps(&self) -> usize {
        self.stages.len() / 4
    }
}

pub fn step_rk4_taped(x: &StateField, p: &DynParams, hours: u32) -> Result<(StateField, Rk4Tape)> {
    let n = p.substeps(hours)?;
    let h = p.dt_int * p.time_scale;
    let spec = *x.spec();
    let mut data = x.data().to_vec();
    let mut wk = Rk4Work::new(spec.len());
    let mut stages = Vec::with_capacity(4 * n);
    for _ in 0..n {
        stages.push(data.clone());
        rk4_substep(&spec, &mut data, p, h, &mut wk, Some(&mut stages));
        check_blowup(&data, x.time)?;
    }
    Ok((StateField::from_vec(spec, x.time + hours as i64, data)?, Rk4Tape { spec, stages, h }))
}

/// Tangent-linear propagation of `dx` along the taped trajectory.
pub fn rk4_tangent(tape: &Rk4Tape, p: &DynParams, dx: &StateField) -> StateField {
    let spec = tape.spec;
    let n = spec.len();
    let h = tape.h;
    let mut d = dx.data().to_vec();
    let (mut dk1, mut dk2, mut dk3, mut dk4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for sub in tape.stages.chunks_exact(4) {
        tendency_tangent_into(&spec, &sub[0], &d, p, &mut dk1);
        for k in 0..n {
            tmp[k] = d[k] + 0.5 * h * dk1[k];
        }
        tendency_tangent_into(&spec, &sub[1], &tmp, p, &mut dk2);
        for k in 0..n {
            tmp[k] = d[k] + 0.5 * h * dk2[k];
        }
        tendency_tangent_into(&spec, &sub[2], &tmp, p, &mut dk3);
        for k in 0..n {
            tmp[k] = d[k] + h * dk3[k];
        }
        tendency_tangent_into(&spec, &sub[3], &tmp, p, &mut dk4);
        for k in 0..n {
            d[k] += h / 6.0 * (dk1[k] + 2.0 * dk2[k] + 2.0 * dk3[k] + dk4[k]);
        }
    }
    StateField::from_vec(spec, dx.time, d).expect("finite tangent")
}

/// Adjoint of the taped integration: maps a sensitivity at the final time
/// back to the initial time.
pub fn rk4_adjoint(tape: &Rk4Tape, p: &DynParams, ybar: &StateField) -> StateField {
    let spec = tape.spec;
    let n = spec.len();
    let h = tape.h;
    let mut xbar = ybar.data().to_vec();
    let mut sbar = vec![0.0; n];
    for sub in tape.stages.chunks_exact(4).rev() {
        // k1..k4 adjoints from y = x + h/6 (k1 + 2 k2 + 2 k3 + k4)
        let mut k3bar: Vec<f64> = xbar.iter().map(|g| h / 3.0 * g).collect();
        let mut k2bar: Vec<f64> = k3bar.clone();
        let mut k1bar: Vec<f64> = xbar.iter().map(|g| h / 6.0 * g).collect();
        let k4bar: Vec<f64> = k1bar.clone();

        sbar.iter_mut().for_each(|s| *s = 0.0);
        tendency_adjoint_acc(&spec, &sub[3], &k4bar, p, 1.0, &mut sbar);
        for k in 0..n {
            xbar[k] += sbar[k];
            k3bar[k] += h * sbar[k];
        }
        sbar.iter_mut().for_each(|s| *s = 0.0);
        tendency_adjoint_acc(&spec, &sub[2], &k3bar, p, 1.0, &mut sbar);
        for k in 0..n {
            xbar[k] += sbar[k];
            k2bar[k] += 0.5 * h * sbar[k];
        }
        sbar.iter_mut().for_each(|s| *s = 0.0);
        tendency_adjoint_acc(&spec, &sub[1], &k2bar, p, 1.0, &mut sbar);
        for k in 0..n {
            xbar[k] += sbar[k];
            k1bar[k] += 0.5 * h * sbar[k];
        }
        tendency_adjoint_acc(&spec, &sub[0], &k1bar, p, 1.0, &mut xbar);
    }
    StateField::from_vec(spec, ybar.time, xbar).expect("finite adjoint")
}

/// Truth trajectory at a fixed cadence.
#[derive(Debug, Clone)]
pub struct NatureRun {
    pub states: Vec<StateField>,
    pub params: DynParams,
    pub seed: u64,
    pub cadence_hours: u32,
}

impl NatureRun {
    pub fn start_time(&self) -> i64 {
        self.states[0].time
    }

    pub fn end_time(&self) -> i64 {
        self.states.last().map(|s| s.time).unwrap_or_default()
    }

    /// Snapshot valid at `time`, if it lies on the cadence.
    pub fn at(&self, time: i64) -> Option<&StateField> {
        let rel = time - self.start_time();
        if rel < 0 || rel % self.cadence_hours as i64 != 0 {
            return None;
        }
        self.states.get((rel / self.cadence_hours as i64) as usize)
    }

    /// Snapshots with `from <= time < to`.
    pub fn range(&self, from: i64, to: i64) -> Vec<StateField> {
        self.states.iter().filter(|s| s.time >= from && s.time < to).cloned().collect()
    }
}

/// Resting state `F(v)` plus a small seeded uniform perturbation.
pub fn perturbed_rest_state(spec: GridSpec, p: &DynParams, seed: u64, amplitude: f64) -> StateField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = StateField::zeros(spec, 0);
    for v in 0..spec.levels {
        for i in 0..spec.rows {
            for j in 0..spec.cols {
                x.set(v, i, j, p.forcing[v] + amplitude * rng.gen_range(-1.0..1.0));
            }
        }
    }
    x
}

/// Integrates `x0` through `spinup_hours`, then records a snapshot every
/// `cadence_hours` for `length_hours`. The first snapshot carries
/// `x0.time`; spin-up does not advance the clock.
pub fn generate_nature_run(
    x0: &StateField,
    p: &DynParams,
    spinup_hours: u32,
    length_hours: u32,
    cadence_hours: u32,
    seed: u64,
) -> Result<NatureRun> {
    p.validate(x0.spec())?;
    if cadence_hours == 0 || !length_hours.is_multiple_of(cadence_hours) {
        return Err(Error::InvalidParameter(format!("length {length_hours} h is not a multiple of cadence {cadence_hours} h")));
    }
    let mut x = x0.clone();
    if spinup_hours > 0 {
        x = step_rk4(&x, p, spinup_hours)?.with_time(x0.time);
    }
    let n = (length_hours / cadence_hours) as usize;
    let mut states = Vec::with_capacity(n + 1);
    states.push(x.clone());
    for _ in 0..n {
        x = step_rk4(&x, p, cadence_hours)?;
        states.push(x.clone());
    }
    Ok(NatureRun { states, params: p.clone(), seed, cadence_hours })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(3, 5, 12).unwrap()
    }

    /// Pointwise evaluation of the tendency formula.
    fn tendency_oracle(x: &StateField, p: &DynParams, v: usize, i: usize, j: usize) -> f64 {
        let s = x.spec();
        let (w, h, nv) = (s.cols as isize, s.rows as isize, s.levels as isize);
        let at =
            |vv: isize, ii: isize, jj: isize| x.get(vv.clamp(0, nv - 1) as usize, ii.clamp(0, h - 1) as usize, jj.rem_euclid(w) as usize);
        let (v, i, j) = (v as isize, i as isize, j as isize);
        (at(v, i, j + 1) - at(v, i, j - 2)) * at(v, i, j - 1) - at(v, i, j)
            + p.forcing[v as usize]
            + p.c_merid * (at(v, i + 1, j) - 2.0 * at(v, i, j) + at(v, i - 1, j))
            + p.c_vert * (at(v + 1, i, j) - 2.0 * at(v, i, j) + at(v - 1, i, j))
    }

    #[test]
    fn zero_state_zero_forcing_is_still() {
        let g = grid();
        let mut p = DynParams::new(3, 0.0);
        p.c_merid = 0.0;
        p.c_vert = 0.0;
        let t = tendency(&StateField::zeros(g, 0), &p);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forcing_level_is_fixed_point() {
        let g = grid();
        let mut p = DynParams::new(3, 8.0);
        p.c_merid = 0.0;
        p.c_vert = 0.0;
        let x = StateField::filled(g, 0, 8.0);
        assert!(tendency(&x, &p).data().iter().all(|&v| v == 0.0));
        // Uniform fields are also fixed under diffusion.
        let p = DynParams::new(3, 8.0);
        let y = step_rk4(&x, &p, 24).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.time, 24);
    }

    #[test]
    fn tendency_matches_pointwise_oracle_and_locality() {
        let g = grid();
        let p = DynParams::new(3, 8.0);
        let base = StateField::filled(g, 0, 8.0);
        let mut x = base.clone();
        x.set(1, 2, 5, 9.0);
        let t = tendency(&x, &p);
        for v in 0..3 {
            for i in 0..5 {
                for j in 0..12 {
                    let want = tendency_oracle(&x, &p, v, i, j);
                    assert!((t.get(v, i, j) - want).abs() < 1e-12);
                    let dj = (j as isize - 5).rem_euclid(12);
                    let in_cone = (dj <= 2 || dj >= 11) && (i as isize - 2).abs() <= 1 && (v as isize - 1).abs() <= 1;
                    if !in_cone {
                        assert_eq!(t.get(v, i, j), 0.0, "({v},{i},{j})");
                    }
                }
            }
        }
        assert!(t.get(1, 2, 5) != 0.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let g = GridSpec::new(2, 3, 8).unwrap();
        let mut p = DynParams::new(2, 8.0);
        p.time_scale = 1.0 / 24.0;
        let x0 = perturbed_rest_state(g, &p, 7, 1.0);
        let run = |dt: f64| {
            let mut q = p.clone();
            q.dt_int = dt;
            step_rk4(&x0, &q, 4).unwrap()
        };
        let reference = run(0.0625);
        let e1 = run(1.0).max_abs_diff(&reference);
        let e2 = run(0.5).max_abs_diff(&reference);
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn chaos_amplifies_small_perturbations() {
        let g = GridSpec::new(3, 8, 16).unwrap();
        let p = DynParams::new(3, 8.0);
        let x0 = step_rk4(&perturbed_rest_state(g, &p, 3, 1.0), &p, 1200).unwrap();
        let dx = perturbed_rest_state(g, &DynParams::new(3, 0.0), 4, 1e-8);
        let x1 = x0.axpy(1.0, &dx).unwrap();
        let a = step_rk4(&x0, &p, 240).unwrap();
        let b = step_rk4(&x1, &p, 240).unwrap();
        let growth = a.axpy(-1.0, &b).unwrap().norm() / dx.norm();
        assert!(growth > 2.0, "growth {growth}");
    }

    #[test]
    fn blowup_is_reported() {
        let g = GridSpec::new(1, 2, 4).unwrap();
        let mut p = DynParams::new(1, 8.0);
        p.dt_int = 1.0;
        p.time_scale = 10.0;
        let x = perturbed_rest_state(g, &p, 1, 5.0);
        assert!(matches!(step_rk4(&x, &p, 50), Err(Error::NonFiniteBlowup(_))));
    }

    #[test]
    fn rejects_fractional_substeps() {
        let mut p = DynParams::new(1, 8.0);
        p.dt_int = 0.7;
        assert!(p.substeps(1).is_err());
    }

    #[test]
    fn nature_run_counts_and_determinism() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let p = DynParams::new(2, 8.0);
        let x0 = perturbed_rest_state(g, &p, 11, 0.5);
        let run = generate_nature_run(&x0, &p, 24, 12, 3, 11).unwrap();
        let times: Vec<i64> = run.states.iter().map(|s| s.time).collect();
        assert_eq!(times, vec![0, 3, 6, 9, 12]);
        let again = generate_nature_run(&x0, &p, 24, 12, 3, 11).unwrap();
        for (a, b) in run.states.iter().zip(&again.states) {
            assert_eq!(a, b);
        }
        let empty = generate_nature_run(&x0, &p, 0, 0, 3, 11).unwrap();
        assert_eq!(empty.states.len(), 1);
        assert_eq!(empty.states[0], x0);
    }

    #[test]
    fn adjoint_dot_product_identity() {
        let g = GridSpec::new(2, 3, 8).unwrap();
        let p = DynParams::new(2, 8.0);
        let x0 = step_rk4(&perturbed_rest_state(g, &p, 5, 1.0), &p, 120).unwrap();
        let (_, tape) = step_rk4_taped(&x0, &p, 3).unwrap();
        let dx = perturbed_rest_state(g, &DynParams::new(2, 0.0), 8, 1.0);
        let u = perturbed_rest_state(g, &DynParams::new(2, 0.0), 9, 1.0);
        let lhs = rk4_tangent(&tape, &p, &dx).dot(&u);
        let rhs = dx.dot(&rk4_adjoint(&tape, &p, &u));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let g = GridSpec::new(2, 3, 8).unwrap();
        let p = DynParams::new(2, 8.0);
        let x0 = step_rk4(&perturbed_rest_state(g, &p, 5, 1.0), &p, 120).unwrap();
        let dx = perturbed_rest_state(g, &DynParams::new(2, 0.0), 8, 1.0);
        let (_, tape) = step_rk4_taped(&x0, &p, 6).unwrap();
        let tl = rk4_tangent(&tape, &p, &dx);
        let eps = 1e-6;
        let plus = step_rk4(&x0.axpy(eps, &dx).unwrap(), &p, 6).unwrap();
        let minus = step_rk4(&x0.axpy(-eps, &dx).unwrap(), &p, 6).unwrap();
        let fd = plus.axpy(-1.0, &minus).unwrap();
        for (a, b) in tl.data().iter().zip(fd.data()) {
            assert!((a - b / (2.0 * eps)).abs() < 1e-6 * a.abs().max(1.0));
        }
    }
}
