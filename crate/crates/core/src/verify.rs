//! Latitude-weighted verification scores, skillful lead detection and
//! scorecards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Climatology, LatWeights, StateField};

pub const SKILL_THRESHOLD: f64 = 0.6;

/// One verification pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub pred: StateField,
    pub truth: StateField,
    pub lead_hours: u32,
}

fn check(eval: &[EvalPair]) -> Result<usize> {
    let first = eval.first().ok_or(Error::EmptyEval)?;
    for p in eval {
        p.pred.spec().check_same(p.truth.spec())?;
        p.pred.spec().check_same(first.pred.spec())?;
    }
    Ok(first.pred.spec().levels)
}

/// Weighted mean over the horizontal plane of level `v` of `f(pred, truth)`.
fn plane_mean(pred: &StateField, truth: &StateField, v: usize, lw: &LatWeights, f: impl Fn(f64, f64) -> f64) -> f64 {
    let s = pred.spec();
    let mut acc = 0.0;
    for i in 0..s.rows {
        let base = s.idx(v, i, 0);
        let row: f64 = (0..s.cols).map(|j| f(pred.data()[base + j], truth.data()[base + j])).sum();
        acc += lw.at(i) * row;
    }
    acc / s.columns() as f64
}

/// Per level: mean over samples of the weighted per-sample RMSE.
pub fn rmse(eval: &[EvalPair], lw: &LatWeights) -> Result<Vec<f64>> {
    let levels = check(eval)?;
    Ok((0..levels)
        .map(|v| {
            eval.iter().map(|p| plane_mean(&p.pred, &p.truth, v, lw, |a, b| (a - b) * (a - b)).sqrt()).sum::<f64>() / eval.len() as f64
        })
        .collect())
}

/// Per level: mean over samples of the weighted mean of prediction minus truth.
pub fn bias(eval: &[EvalPair], lw: &LatWeights) -> Result<Vec<f64>> {
    let levels = check(eval)?;
    Ok((0..levels)
        .map(|v| eval.iter().map(|p| plane_mean(&p.pred, &p.truth, v, lw, |a, b| a - b)).sum::<f64>() / eval.len() as f64)
        .collect())
}

/// Per level: mean over samples of the weighted anomaly correlation,
/// anomalies taken against the climatology slot of the truth's time.
pub fn acc(eval: &[EvalPair], clim: &Climatology, lw: &LatWeights) -> Result<Vec<f64>> {
    let levels = check(eval)?;
    let mut out = vec![0.0; levels];
    for p in eval {
        let c = clim.mean_at(p.truth.time)?;
        let s = p.pred.spec();
        for (v, o) in out.iter_mut().enumerate() {
            let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
            for i in 0..s.rows {
                let w = lw.at(i);
                for j in 0..s.cols {
                    let k = s.idx(v, i, j);
                    let a = p.pred.data()[k] - c[k];
                    let b = p.truth.data()[k] - c[k];
                    num += w * a * b;
                    da += w * a * a;
                    db += w * b * b;
                }
            }
            if da == 0.0 || db == 0.0 {
                return Err(Error::DegenerateAnomaly);
            }
            *o += (num / (da * db).sqrt()).clamp(-1.0, 1.0);
        }
    }
    out.iter_mut().for_each(|x| *x /= eval.len() as f64);
    Ok(out)
}

/// Largest lead such that the score exceeds `threshold` at that lead and
/// every earlier one.
pub fn skillful_lead(leads: &[u32], scores: &[f64], threshold: f64) -> Result<u32> {
    if leads.is_empty() || leads.len() != scores.len() || leads.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("need matching, increasing leads and scores".into()));
    }
    let n = scores.iter().take_while(|&&s| s > threshold).count();
    if n == 0 {
        return Err(Error::NeverSkillful);
    }
    Ok(leads[n - 1])
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub variable: usize,
    pub lead_hours: u32,
    pub rmse: f64,
    pub bias: f64,
    pub acc: f64,
}

/// One row of `scorecard.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub variable: usize,
    pub lead_hours: u32,
    pub baseline: f64,
    pub candidate: f64,
    pub pct_diff: f64,
}

/// Scores for every lead present in `eval`, in increasing lead order.
pub fn metrics_by_lead(run: &str, eval: &[EvalPair], clim: &Climatology, lw: &LatWeights) -> Result<Vec<MetricRow>> {
    check(eval)?;
    let mut leads: Vec<u32> = eval.iter().map(|p| p.lead_hours).collect();
    leads.sort_unstable();
    leads.dedup();
    let mut rows = Vec::new();
    for lead in leads {
        let sub: Vec<EvalPair> = eval.iter().filter(|p| p.lead_hours == lead).cloned().collect();
        let (r, b, a) = (rmse(&sub, lw)?, bias(&sub, lw)?, acc(&sub, clim, lw)?);
        for v in 0..r.len() {
            rows.push(MetricRow { run: run.to_string(), variable: v, lead_hours: lead, rmse: r[v], bias: b[v], acc: a[v] });
        }
    }
    Ok(rows)
}

/// RMSE percent difference of `candidate` against `baseline` for every
/// (variable, lead) present in both; negative means the candidate is better.
pub fn scorecard(baseline: &[MetricRow], candidate: &[MetricRow]) -> Vec<ScoreRow> {
    baseline
        .iter()
        .filter_map(|b| {
            let c = candidate.iter().find(|c| c.variable == b.variable && c.lead_hours == b.lead_hours)?;
            let pct = if b.rmse == 0.0 { 0.0 } else { 100.0 * (c.rmse - b.rmse) / b.rmse };
            Some(ScoreRow { variable: b.variable, lead_hours: b.lead_hours, baseline: b.rmse, candidate: c.rmse, pct_diff: pct })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_climatology, lat_weights, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(g: GridSpec, t: i64, rng: &mut ChaCha8Rng) -> StateField {
        StateField::from_vec(g, t, (0..g.len()).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn trivial_identities() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_field(g, 0, &mut rng);
        let clim = build_climatology(&[random_field(g, 0, &mut rng), random_field(g, 12, &mut rng)], 12).unwrap();
        let lw = lat_weights(&g);
        let e = vec![EvalPair { pred: x.clone(), truth: x.clone(), lead_hours: 24 }];
        assert_eq!(rmse(&e, &lw).unwrap(), vec![0.0; 2]);
        assert_eq!(bias(&e, &lw).unwrap(), vec![0.0; 2]);
        assert_eq!(acc(&e, &clim, &lw).unwrap(), vec![1.0; 2]);
    }

    #[test]
    fn constant_error_and_offset() {
        let g = GridSpec::new(1, 6, 8).unwrap();
        let lw = lat_weights(&g);
        let t = StateField::zeros(g, 0);
        let e = vec![EvalPair { pred: StateField::filled(g, 0, 2.0), truth: t, lead_hours: 6 }];
        assert!((rmse(&e, &lw).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((bias(&e, &lw).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn antisymmetric_error_has_zero_bias() {
        let g = GridSpec::new(1, 4, 4).unwrap();
        let lw = lat_weights(&g);
        let mut p = StateField::zeros(g, 0);
        for j in 0..4 {
            p.set(0, 0, j, 1.5);
            p.set(0, 3, j, -1.5);
        }
        let e = vec![EvalPair { pred: p, truth: StateField::zeros(g, 0), lead_hours: 1 }];
        assert!(bias(&e, &lw).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn anticorrelated_anomalies_give_minus_one() {
        let g = GridSpec::new(1, 4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_field(g, 0, &mut rng);
        let clim = build_climatology(std::slice::from_ref(&c), 24).unwrap();
        let d = random_field(g, 0, &mut rng);
        let truth = c.axpy(1.0, &d).unwrap();
        let pred = c.axpy(-1.0, &d).unwrap();
        let a = acc(&[EvalPair { pred, truth, lead_hours: 24 }], &clim, &lat_weights(&g)).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-12);
        let flat = EvalPair { pred: c.clone(), truth: c.clone(), lead_hours: 24 };
        assert!(matches!(acc(&[flat], &clim, &lat_weights(&g)), Err(Error::DegenerateAnomaly)));
    }

    #[test]
    fn skillful_lead_conventions() {
        assert_eq!(skillful_lead(&[24, 48, 72], &[0.9, 0.7, 0.5], 0.6).unwrap(), 48);
        assert_eq!(skillful_lead(&[24, 48, 72], &[0.9, 0.7, 0.65], 0.6).unwrap(), 72);
        assert_eq!(skillful_lead(&[24, 48, 72], &[0.9, 0.55, 0.8], 0.6).unwrap(), 24);
        assert!(matches!(skillful_lead(&[24, 48], &[0.6, 0.9], 0.6), Err(Error::NeverSkillful)));
    }

    #[test]
    fn empty_eval_is_an_error() {
        let lw = LatWeights::uniform(2);
        assert!(matches!(rmse(&[], &lw), Err(Error::EmptyEval)));
        assert!(matches!(bias(&[], &lw), Err(Error::EmptyEval)));
    }

    #[test]
    fn scorecard_percent_difference() {
        let row = |run: &str, r: f64| MetricRow { run: run.into(), variable: 0, lead_hours: 24, rmse: r, bias: 0.0, acc: 0.9 };
        let s = scorecard(&[row("base", 2.0)], &[row("cand", 1.5)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].pct_diff + 25.0).abs() < 1e-12);
    }
}
