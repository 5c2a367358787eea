//! Three interactive operations for the static page in `www/`: a nature
//! run heatmap, the backward cone of one observation's gradient, and a
//! cycling curve of the 4DVar oracle. All run the perfect model on a
//! small grid so each call returns within a frame or two.

use gradda::dynamics::{generate_nature_run, perturbed_rest_state, DynParams, NatureRun};
use gradda::forecast::Forecaster;
use gradda::fourdvar::{grad_at_background, solve_iterative, BackgroundTerm, DawPlan, SolverConfig, StreamObs};
use gradda::grid::{lat_weights, GridSpec, LevelStats, StateField};
use gradda::obsops::{sample_conventional, ConvObsBatch, ConvRecord, ObsStore};
use wasm_bindgen::prelude::*;

const LEVELS: usize = 3;
const ROWS: usize = 16;
const COLS: usize = 32;
/// Hours of truth kept in memory; cycling uses 12 h windows inside it.
const HOURS: u32 = 480;

#[wasm_bindgen]
pub struct Demo {
    spec: GridSpec,
    params: DynParams,
    nature: NatureRun,
    stats: LevelStats,
}

fn js_err(e: gradda::Error) -> JsError {
    JsError::new(&e.to_string())
}

impl Demo {
    pub fn build(seed: u32) -> gradda::Result<Demo> {
        let spec = GridSpec::new(LEVELS, ROWS, COLS)?;
        let params = DynParams::new(LEVELS, 8.0);
        let x0 = perturbed_rest_state(spec, &params, seed as u64, 1.0);
        let nature = generate_nature_run(&x0, &params, 600, HOURS, 1, seed as u64)?;
        let stats = LevelStats::from_states(&nature.states)?;
        Ok(Demo { spec, params, nature, stats })
    }

    fn state(&self, hour: u32) -> &StateField {
        self.nature.at(hour.min(HOURS) as i64).expect("hour is on the cadence")
    }

    /// Level `level` of the truth at `hour`, row-major.
    pub fn field(&self, hour: u32, level: usize) -> Vec<f64> {
        let x = self.state(hour);
        let n = ROWS * COLS;
        let v = level.min(LEVELS - 1);
        x.data()[v * n..(v + 1) * n].to_vec()
    }

    /// Absolute gradient of the cost of one observation at `(level, i, j)`
    /// valid `offset` hours into the window, with respect to the
    /// background at window start; every level, row-major.
    pub fn cone(&self, offset: u32, level: usize, i: usize, j: usize) -> gradda::Result<Vec<f64>> {
        let xb = self.state(24).clone().with_time(0);
        let offsets: Vec<u32> = if offset == 0 { vec![0] } else { vec![0, offset] };
        let plan = DawPlan::new(0, offsets, offset.max(1) + 1)?;
        let fc = Forecaster::perfect(self.params.clone());
        let mut store = ObsStore::default();
        let y = fc.forecast(&xb, offset)?.get(level, i, j) + 1.0;
        let t = offset as i64;
        store.conv.insert(t, ConvObsBatch { time: t, records: vec![ConvRecord { v: level, i, j, value: y, sigma: 1.0 }] });
        let s = StreamObs::conventional(&plan, &store, vec![1e6; LEVELS])?;
        let g = grad_at_background(&xb, &plan, &[s], &fc, 90.0)?;
        Ok(g.grad.data().iter().map(|v| v.abs()).collect())
    }

    /// Background and analysis RMSE of `cycles` 12 h cycles of the oracle,
    /// interleaved `[bg0, an0, bg1, an1, ...]`.
    pub fn cycling(&self, cycles: usize, density: f64, iters: usize) -> gradda::Result<Vec<f64>> {
        let fc = Forecaster::perfect(self.params.clone());
        let lw = lat_weights(&self.spec);
        let sigma: Vec<f64> = self.stats.std.iter().map(|s| 0.05 * s).collect();
        let bg = BackgroundTerm::from_clim_std(0.1, &self.stats.std);
        let cfg = SolverConfig { iters, ..SolverConfig::default() };
        let cycles = cycles.min(((HOURS - 24) / 12) as usize);
        // The model is perfect, so the first background is a stale truth
        // from a day earlier rather than a forecast of one.
        let mut xb = self.state(0).clone().with_time(24);
        let mut out = Vec::with_capacity(2 * cycles);
        let rmse = |x: &StateField, t: &StateField| {
            let d = x.axpy(-1.0, t).expect("same grid");
            let n = (ROWS * COLS * LEVELS) as f64;
            let s: f64 = (0..LEVELS)
                .flat_map(|v| (0..ROWS).map(move |i| (v, i)))
                .map(|(v, i)| (0..COLS).map(|j| lw.at(i) * d.get(v, i, j).powi(2)).sum::<f64>())
                .sum();
            (s / n).sqrt()
        };
        for c in 0..cycles {
            let t0 = 24 + 12 * c as i64;
            let plan = DawPlan::new(t0, vec![0, 3, 6, 9], 12)?;
            let mut store = ObsStore::default();
            for t in plan.times() {
                let mut b = sample_conventional(self.state(t as u32), density, &sigma, 7)?;
                b.time = t;
                store.conv.insert(t, b);
            }
            let s = StreamObs::conventional(&plan, &store, self.stats.std.clone())?;
            let truth = self.state(t0 as u32);
            let res = solve_iterative(&xb, &plan, &[s], &fc, &bg, &cfg)?;
            out.push(rmse(&xb, truth));
            out.push(rmse(&res.x, truth));
            xb = fc.forecast(&res.x, 12)?;
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Demo::build(seed).map_err(js_err)
    }

    pub fn levels(&self) -> usize {
        LEVELS
    }

    pub fn rows(&self) -> usize {
        ROWS
    }

    pub fn cols(&self) -> usize {
        COLS
    }

    pub fn hours(&self) -> u32 {
        HOURS
    }

    #[wasm_bindgen(js_name = natureField)]
    pub fn nature_field(&self, hour: u32, level: usize) -> Vec<f64> {
        self.field(hour, level)
    }

    #[wasm_bindgen(js_name = backwardCone)]
    pub fn backward_cone(&self, offset: u32, level: usize, i: usize, j: usize) -> Result<Vec<f64>, JsError> {
        self.cone(offset, level.min(LEVELS - 1), i.min(ROWS - 1), j.min(COLS - 1)).map_err(js_err)
    }

    #[wasm_bindgen(js_name = oracleCycling)]
    pub fn oracle_cycling(&self, cycles: usize, density: f64, iters: usize) -> Result<Vec<f64>, JsError> {
        self.cycling(cycles, density, iters).map_err(js_err)
    }
}
