//! Synthetic observations: conventional point observations, two radiance
//! instruments with a squashed weighting-function truth operator, the
//! learned radiance emulator and the CSV exchange formats.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LevelStats, StateField};
use crate::netcore::{fit, Activation, CondNet, Conditioning, LayerSpec, TrainConfig};

/// Observation slots are this many hours apart.
pub const SLOT_HOURS: i64 = 3;
/// Radiance values outside this range are discarded.
pub const RADIANCE_BOUNDS: (f64, f64) = (150.0, 350.0);
pub const MIN_EMULATOR_SPREAD: f64 = 1e-8;
/// Conditioning width of the radiance emulator: scan fraction and zenith proxy.
pub const AUX_DIM: usize = 2;

/// Nearest 3-hour slot of a generation time, if it lies within 1.5 h.
pub fn bin_to_slot(hours: f64) -> Option<i64> {
    let slot = (hours / SLOT_HOURS as f64).round() as i64 * SLOT_HOURS;
    ((hours - slot as f64).abs() <= 0.5 * SLOT_HOURS as f64).then_some(slot)
}

/// Per-time random stream derived from a base seed.
pub(crate) fn time_rng(seed: u64, time: i64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(time as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvRecord {
    pub v: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvObsBatch {
    pub time: i64,
    pub records: Vec<ConvRecord>,
}

impl ConvObsBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Observed points as a V*H*W mask.
    pub fn coverage(&self, spec: &GridSpec) -> Vec<bool> {
        let mut m = vec![false; spec.len()];
        for r in &self.records {
            m[spec.idx(r.v, r.i, r.j)] = true;
        }
        m
    }
}

/// Bernoulli(`density`) site selection over every (v, i, j) and Gaussian
/// noise of standard deviation `sigma[v]`. The batch is stamped with the
/// nearest slot of the state's time.
pub fn sample_conventional(truth: &StateField, density: f64, sigma: &[f64], seed: u64) -> Result<ConvObsBatch> {
    let spec = *truth.spec();
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidParameter(format!("density {density} not in (0, 1]")));
    }
    if sigma.len() != spec.levels || sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidParameter("need one non-negative sigma per level".into()));
    }
    let time = bin_to_slot(truth.time as f64).expect("nearest slot is always within half a slot");
    let mut rng = time_rng(seed, truth.time, 0);
    let mut records = Vec::new();
    for v in 0..spec.levels {
        for i in 0..spec.rows {
            for j in 0..spec.cols {
                let keep = rng.gen::<f64>() < density;
                let noise: f64 = rng.sample(StandardNormal);
                if keep {
                    records.push(ConvRecord { v, i, j, value: truth.get(v, i, j) + sigma[v] * noise, sigma: sigma[v] });
                }
            }
        }
    }
    Ok(ConvObsBatch { time, records })
}

/// Auxiliary viewing geometry of one radiance record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxInfo {
    /// Column offset from the sub-satellite track, in [0, W).
    pub scan: u32,
    /// Cosine of the view angle, in (0, 1].
    pub zen: f64,
}

impl AuxInfo {
    pub fn features(&self, cols: usize) -> [f64; AUX_DIM] {
        [self.scan as f64 / cols as f64, self.zen]
    }
}

/// `y_c = 250 + 100 tanh(a (1 + kappa (1/zen - 1)) sum_v w(c,v) x_v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadianceTruthSpec {
    /// Channel-by-level weights; every row is non-negative and sums to 1.
    pub weights: Vec<Vec<f64>>,
    pub slope: f64,
    /// Slant-path sensitivity to the zenith proxy.
    pub kappa: f64,
    pub noise: Vec<f64>,
    /// Rows poleward of this latitude are never observed.
    pub lat_mask_deg: f64,
    /// Fraction of swath columns observed.
    pub density: f64,
    /// Swath half-width in columns.
    pub swath_half_width: usize,
    /// Sub-satellite track advance in columns per model hour.
    pub track_speed: f64,
    pub track_phase: f64,
    pub max_view_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrument {
    A,
    B,
}

impl Instrument {
    pub fn name(self) -> &'static str {
        match self {
            Instrument::A => "instr_a",
            Instrument::B => "instr_b",
        }
    }
}

/// Normalised Gaussian weighting functions centred at `centers` (in level
/// index units; level 0 is the top).
fn gaussian_weights(levels: usize, centers: &[f64], width: f64) -> Vec<Vec<f64>> {
    centers
        .iter()
        .map(|&c| {
            let w: Vec<f64> = (0..levels).map(|v| (-0.5 * ((v as f64 - c) / width).powi(2)).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

impl RadianceTruthSpec {
    /// Instrument A: four channels peaking over the upper half of the
    /// column. Instrument B: three channels peaking over the lower levels.
    pub fn standard(instrument: Instrument, spec: &GridSpec) -> Self {
        let top = (spec.levels - 1) as f64;
        let (centers, width, phase, speed): (Vec<f64>, f64, f64, f64) = match instrument {
            Instrument::A => ((0..4).map(|k| top * 0.5 * k as f64 / 3.0).collect(), 0.45 * top.max(1.0), 0.0, 2.5),
            Instrument::B => ((0..3).map(|k| top * (1.0 - 0.25 * k as f64 / 2.0)).collect(), 0.35 * top.max(1.0), 0.5, -1.75),
        };
        let channels = centers.len();
        Self {
            weights: gaussian_weights(spec.levels, &centers, width),
            slope: 0.12,
            kappa: 0.3,
            noise: vec![0.5; channels],
            lat_mask_deg: 60.0,
            density: 0.5,
            swath_half_width: (spec.cols / 4).max(1),
            track_speed: speed * spec.cols as f64 / 32.0,
            track_phase: phase * spec.cols as f64,
            max_view_deg: 60.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("radiance spec: {m}")));
        if self.channels() < 2 {
            return bad("need at least two channels");
        }
        for row in &self.weights {
            if row.len() != levels || row.iter().any(|w| !(*w >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("weights must be non-negative, one per level, summing to 1");
            }
        }
        if self.noise.len() != self.channels() || self.noise.iter().any(|s| !(*s >= 0.0)) {
            return bad("need one non-negative noise level per channel");
        }
        if !(self.density > 0.0 && self.density <= 1.0) || !(self.slope > 0.0) || !(self.kappa >= 0.0) {
            return bad("density, slope or kappa out of range");
        }
        if !(self.max_view_deg > 0.0 && self.max_view_deg < 90.0) {
            return bad("max view angle must be in (0, 90)");
        }
        Ok(())
    }

    fn gain(&self, aux: &AuxInfo) -> f64 {
        self.slope * (1.0 + self.kappa * (1.0 / aux.zen - 1.0))
    }

    /// Noiseless channel values for one column.
    pub fn apply(&self, column: &[f64], aux: &AuxInfo) -> Vec<f64> {
        let g = self.gain(aux);
        self.weights.iter().map(|w| 250.0 + 100.0 * (g * w.iter().zip(column).map(|(a, b)| a * b).sum::<f64>()).tanh()).collect()
    }

    /// Column gradient of `<upstream, apply(column)>`.
    pub fn adjoint(&self, column: &[f64], aux: &AuxInfo, upstream: &[f64]) -> Vec<f64> {
        let g = self.gain(aux);
        let mut out = vec![0.0; column.len()];
        for (w, u) in self.weights.iter().zip(upstream) {
            let t = (g * w.iter().zip(column).map(|(a, b)| a * b).sum::<f64>()).tanh();
            let d = u * 100.0 * g * (1.0 - t * t);
            for (o, wv) in out.iter_mut().zip(w) {
                *o += d * wv;
            }
        }
        out
    }

    /// Swath geometry at `time`: every column with its aux info.
    pub fn swath(&self, cols: usize, time: i64) -> Vec<(usize, AuxInfo)> {
        let w = cols as f64;
        let center = (self.track_phase + self.track_speed * time as f64).rem_euclid(w);
        let mut out = Vec::new();
        for j in 0..cols {
            let mut d = j as f64 - center;
            d -= w * (d / w).round();
            if d.abs() > self.swath_half_width as f64 {
                continue;
            }
            let angle = (d.abs() / self.swath_half_width as f64) * self.max_view_deg;
            let scan = ((d.round() as i64).rem_euclid(cols as i64)) as u32;
            out.push((j, AuxInfo { scan, zen: angle.to_radians().cos() }));
        }
        out
    }

    pub fn masked_row(&self, spec: &GridSpec, i: usize) -> bool {
        spec.lat_deg(i).abs() > self.lat_mask_deg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadianceRecord {
    pub c: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub aux: AuxInfo,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadianceBatch {
    pub time: i64,
    pub records: Vec<RadianceRecord>,
}

impl RadianceBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Radiance observations of `x` along the swath at `x.time`, with
/// generation-time quality control: out-of-range values and rows poleward
/// of the mask are dropped.
pub fn radiance_truth(x: &StateField, spec: &RadianceTruthSpec, seed: u64, stream: u64) -> Result<RadianceBatch> {
    let g = *x.spec();
    spec.validate(g.levels)?;
    let time = bin_to_slot(x.time as f64).expect("nearest slot is always within half a slot");
    let mut rng = time_rng(seed, x.time, stream);
    let mut records = Vec::new();
    for i in 0..g.rows {
        let masked = spec.masked_row(&g, i);
        for (j, aux) in spec.swath(g.cols, x.time) {
            if rng.gen::<f64>() >= spec.density || masked {
                continue;
            }
            for (c, y) in spec.apply(&x.column(i, j), &aux).into_iter().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                let value = y + spec.noise[c] * noise;
                if value >= RADIANCE_BOUNDS.0 && value <= RADIANCE_BOUNDS.1 {
                    records.push(RadianceRecord { c, i, j, value, aux });
                }
            }
        }
    }
    Ok(RadianceBatch { time, records })
}

/// Learned radiance operator: normalised column in, channels out,
/// conditioned on the viewing geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceEmulator {
    pub net: CondNet,
    pub column_stats: LevelStats,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    /// Held-out residual spread per channel.
    pub spread: Vec<f64>,
    pub cols: usize,
}

/// One emulator training example.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorSample {
    pub column: Vec<f64>,
    pub aux: AuxInfo,
    pub channels: Vec<f64>,
}

impl RadianceEmulator {
    pub fn new(column_stats: LevelStats, channels: usize, cols: usize, hidden: usize, seed: u64) -> Result<Self> {
        let v = column_stats.mean.len();
        let net = CondNet::new(
            vec![
                LayerSpec::new(v, hidden, Conditioning::Concat, true, Activation::Tanh),
                LayerSpec::new(hidden, hidden, Conditioning::Film, true, Activation::Tanh),
                LayerSpec::new(hidden, channels, Conditioning::None, true, Activation::Identity),
            ],
            AUX_DIM,
            seed,
        )?;
        Ok(Self {
            net,
            column_stats,
            channel_mean: vec![250.0; channels],
            channel_std: vec![50.0; channels],
            spread: vec![1.0; channels],
            cols,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel_mean.len()
    }

    fn normalise(&self, column: &[f64]) -> Result<Vec<f64>> {
        if column.len() != self.column_stats.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "column has {} levels, emulator expects {}",
                column.len(),
                self.column_stats.mean.len()
            )));
        }
        Ok(column.iter().zip(self.column_stats.mean.iter().zip(&self.column_stats.std)).map(|(x, (m, s))| (x - m) / s).collect())
    }

    pub fn apply(&self, column: &[f64], aux: &AuxInfo) -> Result<Vec<f64>> {
        let out = self.net.forward(&self.normalise(column)?, &aux.features(self.cols))?;
        Ok(out.iter().enumerate().map(|(c, o)| self.channel_mean[c] + self.channel_std[c] * o).collect())
    }

    /// Channel values and the column gradient of `<upstream, channels>`.
    pub fn apply_and_adjoint(&self, column: &[f64], aux: &AuxInfo, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if upstream.len() != self.channels() {
            return Err(Error::ShapeMismatch(format!("{} upstream values for {} channels", upstream.len(), self.channels())));
        }
        let input = self.normalise(column)?;
        let cond = aux.features(self.cols);
        let mut trace = crate::netcore::Trace::default();
        self.net.forward_traced(&input, &cond, &mut trace)?;
        let y = trace.output().iter().enumerate().map(|(c, o)| self.channel_mean[c] + self.channel_std[c] * o).collect();
        let up: Vec<f64> = upstream.iter().zip(&self.channel_std).map(|(u, s)| u * s).collect();
        let mut ig = vec![0.0; input.len()];
        self.net.backward_traced(&trace, &cond, &up, None, Some(&mut ig))?;
        let grad = ig.iter().zip(&self.column_stats.std).map(|(g, s)| g / s).collect();
        Ok((y, grad))
    }

    /// Tangent-linear image of `dcolumn` at `column`.
    pub fn tangent(&self, column: &[f64], aux: &AuxInfo, dcolumn: &[f64]) -> Result<Vec<f64>> {
        let input = self.normalise(column)?;
        let mut trace = crate::netcore::Trace::default();
        self.net.forward_traced(&input, &aux.features(self.cols), &mut trace)?;
        let din: Vec<f64> = dcolumn.iter().zip(&self.column_stats.std).map(|(d, s)| d / s).collect();
        let d = self.net.jvp_traced(&trace, &din)?;
        Ok(d.iter().zip(&self.channel_std).map(|(d, s)| d * s).collect())
    }
}

/// Mean over channels of the absolute error, averaged over samples.
pub fn emulator_loss(em: &RadianceEmulator, samples: &[EmulatorSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no emulator samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let y = em.apply(&s.column, &s.aux)?;
        total += y.iter().zip(&s.channels).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Per-channel standard deviation of residuals, floored at
/// [`MIN_EMULATOR_SPREAD`].
pub fn residual_spread(em: &RadianceEmulator, samples: &[EmulatorSample]) -> Result<Vec<f64>> {
    let c = em.channels();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for s in samples {
        for (k, (a, b)) in em.apply(&s.column, &s.aux)?.iter().zip(&s.channels).enumerate() {
            sum[k] += a - b;
            sq[k] += (a - b) * (a - b);
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((0..c)
        .map(|k| {
            let m = sum[k] / n;
            (sq[k] / n - m * m).max(0.0).sqrt().max(MIN_EMULATOR_SPREAD)
        })
        .collect())
}

/// Fits the emulator with the channel-mean L1 loss on the first
/// `1 - holdout` of `samples` and sets the spread from the remainder.
/// Returns the per-epoch training loss.
pub fn train_emulator(em: &mut RadianceEmulator, samples: &[EmulatorSample], holdout: f64, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no emulator samples".into()));
    }
    let c = em.channels();
    if samples.iter().any(|s| s.channels.len() != c) {
        return Err(Error::ShapeMismatch("sample channel count differs from emulator".into()));
    }
    let n_hold = ((samples.len() as f64 * holdout).round() as usize).min(samples.len() - 1);
    let (train, held) = samples.split_at(samples.len() - n_hold);
    for k in 0..c {
        let vals: Vec<f64> = train.iter().map(|s| s.channels[k]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        em.channel_mean[k] = m;
        em.channel_std[k] = v.sqrt().max(1.0);
    }
    let prepared: Vec<(Vec<f64>, [f64; AUX_DIM], Vec<f64>)> = train
        .iter()
        .map(|s| {
            let x = em.normalise(&s.column)?;
            let y = s.channels.iter().enumerate().map(|(k, y)| (y - em.channel_mean[k]) / em.channel_std[k]).collect();
            Ok((x, s.aux.features(em.cols), y))
        })
        .collect::<Result<_>>()?;
    let std = em.channel_std.clone();
    let history = fit(&mut em.net, &prepared, cfg, |net, (x, cond, y), g| {
        let out = net.forward(x, cond)?;
        let mut up = vec![0.0; c];
        let mut loss = 0.0;
        for k in 0..c {
            let d = out[k] - y[k];
            loss += std[k] * d.abs() / c as f64;
            up[k] = std[k] * d.signum() * (d != 0.0) as u8 as f64 / c as f64;
        }
        let (pg, _) = net.backward(x, cond, &up)?;
        g.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
        Ok(loss)
    })?;
    em.spread = residual_spread(em, if held.is_empty() { train } else { held })?;
    Ok(history)
}

/// Emulator checkpoint: network via the netcore format plus a JSON sidecar
/// holding the normalisation and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorMeta {
    pub column_stats: LevelStats,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub spread: Vec<f64>,
    pub cols: usize,
}

impl RadianceEmulator {
    pub fn meta(&self) -> EmulatorMeta {
        EmulatorMeta {
            column_stats: self.column_stats.clone(),
            channel_mean: self.channel_mean.clone(),
            channel_std: self.channel_std.clone(),
            spread: self.spread.clone(),
            cols: self.cols,
        }
    }

    pub fn from_parts(net: CondNet, meta: EmulatorMeta) -> Result<Self> {
        if net.output_dim() != meta.channel_mean.len() || net.input_dim() != meta.column_stats.mean.len() {
            return Err(Error::ShapeMismatch("emulator sidecar does not match network".into()));
        }
        Ok(Self {
            net,
            column_stats: meta.column_stats,
            channel_mean: meta.channel_mean,
            channel_std: meta.channel_std,
            spread: meta.spread,
            cols: meta.cols,
        })
    }
}

/// Every observation available to the system, keyed by slot time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObsStore {
    pub conv: BTreeMap<i64, ConvObsBatch>,
    pub rad: BTreeMap<(Instrument, i64), RadianceBatch>,
}

impl ObsStore {
    pub fn conv_at(&self, t: i64) -> Option<&ConvObsBatch> {
        self.conv.get(&t)
    }

    pub fn rad_at(&self, inst: Instrument, t: i64) -> Option<&RadianceBatch> {
        self.rad.get(&(inst, t))
    }

    /// Store without any observation later than `t`.
    pub fn truncated_after(&self, t: i64) -> ObsStore {
        ObsStore {
            conv: self.conv.range(..=t).map(|(k, v)| (*k, v.clone())).collect(),
            rad: self.rad.iter().filter(|((_, k), _)| *k <= t).map(|(k, v)| (*k, v.clone())).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvRow {
    t: i64,
    v: usize,
    i: usize,
    j: usize,
    value: f64,
    sigma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RadRow {
    t: i64,
    c: usize,
    i: usize,
    j: usize,
    value: f64,
    scan: u32,
    zen: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

pub fn write_conv_csv(path: &Path, batches: &BTreeMap<i64, ConvObsBatch>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for b in batches.values() {
        for r in &b.records {
            w.serialize(ConvRow { t: b.time, v: r.v, i: r.i, j: r.j, value: r.value, sigma: r.sigma }).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_conv_csv(path: &Path) -> Result<BTreeMap<i64, ConvObsBatch>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: BTreeMap<i64, ConvObsBatch> = BTreeMap::new();
    for row in r.deserialize() {
        let row: ConvRow = row.map_err(|e| csv_err(path, e))?;
        let b = out.entry(row.t).or_insert_with(|| ConvObsBatch { time: row.t, records: Vec::new() });
        b.records.push(ConvRecord { v: row.v, i: row.i, j: row.j, value: row.value, sigma: row.sigma });
    }
    Ok(out)
}

pub fn write_rad_csv(path: &Path, batches: &BTreeMap<i64, RadianceBatch>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for b in batches.values() {
        for r in &b.records {
            w.serialize(RadRow { t: b.time, c: r.c, i: r.i, j: r.j, value: r.value, scan: r.aux.scan, zen: r.aux.zen })
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_rad_csv(path: &Path) -> Result<BTreeMap<i64, RadianceBatch>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: BTreeMap<i64, RadianceBatch> = BTreeMap::new();
    for row in r.deserialize() {
        let row: RadRow = row.map_err(|e| csv_err(path, e))?;
        let b = out.entry(row.t).or_insert_with(|| RadianceBatch { time: row.t, records: Vec::new() });
        b.records.push(RadianceRecord { c: row.c, i: row.i, j: row.j, value: row.value, aux: AuxInfo { scan: row.scan, zen: row.zen } });
    }
    Ok(out)
}
