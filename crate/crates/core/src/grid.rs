//! Grid geometry, state containers and the weights and climatology used by
//! the losses and the verification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equiangular lat-lon grid with `levels` stacked variable levels.
///
/// Latitudes are cell centres: `lat(i) = -90 + (i + 0.5) * 180 / rows`.
/// Level 0 is the top of the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub levels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(levels: usize, rows: usize, cols: usize) -> Result<Self> {
        if levels < 1 || rows < 2 || cols < 4 {
            return Err(Error::InvalidGrid(format!("need V >= 1, H >= 2, W >= 4; got {levels}x{rows}x{cols}")));
        }
        Ok(Self { levels, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.levels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> usize {
        self.rows * self.cols
    }

    pub fn lat_deg(&self, i: usize) -> f64 {
        -90.0 + (i as f64 + 0.5) * 180.0 / self.rows as f64
    }

    #[inline]
    pub fn idx(&self, v: usize, i: usize, j: usize) -> usize {
        (v * self.rows + i) * self.cols + j
    }

    /// Periodic longitude index `j + dj`.
    #[inline]
    pub fn wrap_col(&self, j: usize, dj: isize) -> usize {
        (j as isize + dj).rem_euclid(self.cols as isize) as usize
    }

    /// Row index `i + di` clamped to the grid.
    #[inline]
    pub fn clamp_row(&self, i: usize, di: isize) -> usize {
        (i as isize + di).clamp(0, self.rows as isize - 1) as usize
    }

    pub fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.levels, self.rows, self.cols, other.levels, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// A full V x H x W state at one model hour. Layout is v-major, then i, then j.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    spec: GridSpec,
    pub time: i64,
    data: Vec<f64>,
}

impl StateField {
    pub fn zeros(spec: GridSpec, time: i64) -> Self {
        Self { spec, time, data: vec![0.0; spec.len()] }
    }

    pub fn filled(spec: GridSpec, time: i64, value: f64) -> Self {
        Self { spec, time, data: vec![value; spec.len()] }
    }

    /// Wraps `data`, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(spec: GridSpec, time: i64, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!("expected {} values, got {}", spec.len(), data.len())));
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue(k));
        }
        Ok(Self { spec, time, data })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, v: usize, i: usize, j: usize) -> f64 {
        self.data[self.spec.idx(v, i, j)]
    }

    #[inline]
    pub fn set(&mut self, v: usize, i: usize, j: usize, value: f64) {
        let k = self.spec.idx(v, i, j);
        self.data[k] = value;
    }

    pub fn column(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.spec.levels).map(|v| self.get(v, i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn with_time(mut self, time: i64) -> Self {
        self.time = time;
        self
    }

    /// `self + scale * other`, keeping `self.time`.
    pub fn axpy(&self, scale: f64, other: &StateField) -> Result<StateField> {
        self.spec.check_same(&other.spec)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect();
        Ok(Self { spec: self.spec, time: self.time, data })
    }

    pub fn add_assign_scaled(&mut self, scale: f64, other: &StateField) {
        debug_assert_eq!(self.spec, other.spec);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn dot(&self, other: &StateField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &StateField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Rolls every row east by `shift` columns.
    pub fn rotate_lon(&self, shift: usize) -> StateField {
        let mut out = Self::zeros(self.spec, self.time);
        let s = self.spec;
        for v in 0..s.levels {
            for i in 0..s.rows {
                for j in 0..s.cols {
                    out.set(v, i, (j + shift) % s.cols, self.get(v, i, j));
                }
            }
        }
        out
    }
}

/// Per-row latitude weights, normalised to unit mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights(Vec<f64>);

impl LatWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn uniform(rows: usize) -> Self {
        Self(vec![1.0; rows])
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        self.0[i]
    }
}

pub fn lat_weights(spec: &GridSpec) -> LatWeights {
    let cosines: Vec<f64> = (0..spec.rows).map(|i| spec.lat_deg(i).to_radians().cos()).collect();
    let mean = cosines.iter().sum::<f64>() / spec.rows as f64;
    LatWeights(cosines.into_iter().map(|c| c / mean).collect())
}

/// Per-level loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableWeights(Vec<f64>);

impl VariableWeights {
    pub fn uniform(levels: usize) -> Self {
        Self(vec![1.0; levels])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("variable weights must be positive".into()));
        }
        Ok(Self(weights))
    }

    #[inline]
    pub fn at(&self, v: usize) -> f64 {
        self.0[v]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Mean state per time-of-day slot. Slots are `interval_hours` wide, so a
/// 12 h cycle gives two slots per model day.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    spec: GridSpec,
    interval_hours: u32,
    slots: Vec<Vec<f64>>,
}

pub const HOURS_PER_DAY: i64 = 24;

impl Climatology {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn interval_hours(&self) -> u32 {
        self.interval_hours
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn slot_of(interval_hours: u32, time: i64) -> Option<usize> {
        let hod = time.rem_euclid(HOURS_PER_DAY);
        (hod % interval_hours as i64 == 0).then(|| (hod / interval_hours as i64) as usize)
    }

    pub fn mean_at(&self, time: i64) -> Result<&[f64]> {
        Self::slot_of(self.interval_hours, time).and_then(|s| self.slots.get(s)).map(Vec::as_slice).ok_or(Error::MissingSlot(time))
    }

    pub fn slot(&self, s: usize) -> &[f64] {
        &self.slots[s]
    }
}

/// Per-slot arithmetic mean. States whose time does not fall on a slot
/// boundary are ignored.
pub fn build_climatology(states: &[StateField], interval_hours: u32) -> Result<Climatology> {
    if interval_hours == 0 || HOURS_PER_DAY % interval_hours as i64 != 0 {
        return Err(Error::InvalidParameter(format!("climatology interval {interval_hours} must divide 24")));
    }
    let spec = *states.first().ok_or(Error::EmptySlot(0))?.spec();
    let n_slots = (HOURS_PER_DAY / interval_hours as i64) as usize;
    let mut sums = vec![vec![0.0; spec.len()]; n_slots];
    let mut counts = vec![0usize; n_slots];
    for st in states {
        spec.check_same(st.spec())?;
        if let Some(s) = Climatology::slot_of(interval_hours, st.time) {
            for (acc, x) in sums[s].iter_mut().zip(st.data()) {
                *acc += x;
            }
            counts[s] += 1;
        }
    }
    for (s, (sum, &n)) in sums.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::EmptySlot(s));
        }
        sum.iter_mut().for_each(|x| *x /= n as f64);
    }
    Ok(Climatology { spec, interval_hours, slots: sums })
}

/// Floor applied to pooled standard deviations so constant fields still
/// normalise to finite values.
pub const MIN_LEVEL_STD: f64 = 1e-3;

/// Per-level mean and standard deviation pooled over all points and times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LevelStats {
    pub fn from_states(states: &[StateField]) -> Result<Self> {
        let spec = *states.first().ok_or(Error::EmptyEval)?.spec();
        let per_level = spec.columns() as f64 * states.len() as f64;
        let mut mean = vec![0.0; spec.levels];
        for st in states {
            spec.check_same(st.spec())?;
            for (v, m) in mean.iter_mut().enumerate() {
                let lvl = &st.data()[v * spec.columns()..(v + 1) * spec.columns()];
                *m += lvl.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= per_level);
        let mut var = vec![0.0; spec.levels];
        for st in states {
            for (v, s) in var.iter_mut().enumerate() {
                let lvl = &st.data()[v * spec.columns()..(v + 1) * spec.columns()];
                *s += lvl.iter().map(|x| (x - mean[v]).powi(2)).sum::<f64>();
            }
        }
        let std = var.into_iter().map(|s| (s / per_level).sqrt().max(MIN_LEVEL_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(levels: usize) -> Self {
        Self { mean: vec![0.0; levels], std: vec![1.0; levels] }
    }
}

/// Rows and columns on each side of the centre covered by a local stencil.
pub const STENCIL_ROWS: isize = 1;
pub const STENCIL_COLS: isize = 2;

/// Entries in a flattened stencil: 3 rows x 5 columns x all levels.
pub fn stencil_len(levels: usize) -> usize {
    ((2 * STENCIL_ROWS + 1) * (2 * STENCIL_COLS + 1)) as usize * levels
}

/// Flattened neighbourhood of column `(i, j)`, ordered row offset, column
/// offset, level; every value is mapped to `(x - offset[v]) * scale[v]`.
/// Rows are clamped at the poles and columns wrap.
pub fn gather_stencil(spec: &GridSpec, field: &[f64], i: usize, j: usize, offset: &[f64], scale: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for di in -STENCIL_ROWS..=STENCIL_ROWS {
        let ii = spec.clamp_row(i, di);
        for dj in -STENCIL_COLS..=STENCIL_COLS {
            let jj = spec.wrap_col(j, dj);
            for v in 0..spec.levels {
                out.push((field[spec.idx(v, ii, jj)] - offset[v]) * scale[v]);
            }
        }
    }
}

/// Transpose of `gather_stencil` (without the offset): adds
/// `grad * scale[v]` into `out` at each stencil position.
pub fn scatter_stencil(spec: &GridSpec, grad: &[f64], i: usize, j: usize, scale: &[f64], out: &mut [f64]) {
    let mut k = 0;
    for di in -STENCIL_ROWS..=STENCIL_ROWS {
        let ii = spec.clamp_row(i, di);
        for dj in -STENCIL_COLS..=STENCIL_COLS {
            let jj = spec.wrap_col(j, dj);
            for v in 0..spec.levels {
                out[spec.idx(v, ii, jj)] += grad[k] * scale[v];
                k += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(GridSpec::new(0, 4, 8).is_err());
        assert!(GridSpec::new(1, 1, 8).is_err());
        assert!(GridSpec::new(1, 2, 3).is_err());
        assert!(GridSpec::new(1, 2, 4).is_ok());
    }

    #[test]
    fn latitudes_are_cell_centres() {
        let g = GridSpec::new(1, 4, 4).unwrap();
        let lats: Vec<f64> = (0..4).map(|i| g.lat_deg(i)).collect();
        assert_eq!(lats, vec![-67.5, -22.5, 22.5, 67.5]);
    }

    #[test]
    fn two_row_weights_are_unity() {
        let l = lat_weights(&GridSpec::new(1, 2, 4).unwrap());
        for w in l.as_slice() {
            assert!((w - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn four_row_weights_match_cosine_oracle() {
        // cos(67.5) = 0.382683..., cos(22.5) = 0.923879...; mean = 0.653281...
        let c1 = 0.382_683_432_365_089_8_f64;
        let c2 = 0.923_879_532_511_286_7_f64;
        let mean = (2.0 * c1 + 2.0 * c2) / 4.0;
        let expected = [c1 / mean, c2 / mean, c2 / mean, c1 / mean];
        let l = lat_weights(&GridSpec::new(1, 4, 4).unwrap());
        for (a, b) in l.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((l.at(0) - (2.0 - SQRT_2)).abs() < 1e-12);
        assert!((l.at(1) - SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn weights_have_unit_mean_and_symmetry() {
        for rows in 2..64 {
            let g = GridSpec::new(1, rows, 4).unwrap();
            let l = lat_weights(&g);
            let mean = l.as_slice().iter().sum::<f64>() / rows as f64;
            assert!((mean - 1.0).abs() < 1e-12, "rows={rows}");
            for i in 0..rows {
                assert!(l.at(i) > 0.0);
                assert!((l.at(i) - l.at(rows - 1 - i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn climatology_of_constant_is_constant() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let states: Vec<_> = (0..8).map(|k| StateField::filled(g, k * 12, 3.25)).collect();
        let c = build_climatology(&states, 12).unwrap();
        assert_eq!(c.slot_count(), 2);
        for s in 0..2 {
            assert!(c.slot(s).iter().all(|&x| x == 3.25));
        }
    }

    #[test]
    fn climatology_averages_pairs() {
        let g = GridSpec::new(1, 2, 4).unwrap();
        let states = vec![
            StateField::filled(g, 0, 1.0),
            StateField::filled(g, 12, 5.0),
            StateField::filled(g, 24, 2.0),
            StateField::filled(g, 36, 7.0),
        ];
        let c = build_climatology(&states, 12).unwrap();
        assert_eq!(c.mean_at(48).unwrap()[0], 1.5);
        assert_eq!(c.mean_at(60).unwrap()[0], 6.0);
        assert!(matches!(c.mean_at(3), Err(Error::MissingSlot(3))));
    }

    #[test]
    fn climatology_reports_empty_slot() {
        let g = GridSpec::new(1, 2, 4).unwrap();
        let states = vec![StateField::filled(g, 0, 1.0), StateField::filled(g, 24, 1.0)];
        assert!(matches!(build_climatology(&states, 12), Err(Error::EmptySlot(1))));
    }

    #[test]
    fn rotate_lon_wraps() {
        let g = GridSpec::new(1, 2, 4).unwrap();
        let mut f = StateField::zeros(g, 0);
        f.set(0, 1, 3, 1.0);
        let r = f.rotate_lon(2);
        assert_eq!(r.get(0, 1, 1), 1.0);
    }
}
