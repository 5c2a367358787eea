//! Weighted L1 field loss shared by forecast pretraining, rollout
//! fine-tuning and assimilation-model training.

use crate::grid::{LatWeights, StateField, VariableWeights};

/// `(1/VHW) * sum_{v,i,j} w(v) L(i) |pred - truth|`.
pub fn weighted_l1(pred: &StateField, truth: &StateField, vw: &VariableWeights, lw: &LatWeights) -> f64 {
    let s = pred.spec();
    let mut total = 0.0;
    for v in 0..s.levels {
        for i in 0..s.rows {
            let w = vw.at(v) * lw.at(i);
            let base = s.idx(v, i, 0);
            let row: f64 = (0..s.cols).map(|j| (pred.data()[base + j] - truth.data()[base + j]).abs()).sum();
            total += w * row;
        }
    }
    total / s.len() as f64
}

/// Loss and its (sub)gradient with respect to `pred`, scaled by `scale`.
/// The subgradient of |0| is taken as 0.
pub fn weighted_l1_grad(pred: &StateField, truth: &StateField, vw: &VariableWeights, lw: &LatWeights, scale: f64) -> (f64, StateField) {
    let s = *pred.spec();
    let mut g = StateField::zeros(s, pred.time);
    let n = s.len() as f64;
    for v in 0..s.levels {
        for i in 0..s.rows {
            let w = vw.at(v) * lw.at(i) / n * scale;
            for j in 0..s.cols {
                let k = s.idx(v, i, j);
                let d = pred.data()[k] - truth.data()[k];
                g.data_mut()[k] = if d > 0.0 {
                    w
                } else if d < 0.0 {
                    -w
                } else {
                    0.0
                };
            }
        }
    }
    (weighted_l1(pred, truth, vw, lw), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{lat_weights, GridSpec};

    #[test]
    fn unit_error_with_unit_weights_is_one() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let a = StateField::filled(g, 0, 1.0);
        let b = StateField::zeros(g, 0);
        let loss = weighted_l1(&a, &b, &VariableWeights::uniform(2), &LatWeights::uniform(4));
        assert_eq!(loss, 1.0);
        assert_eq!(weighted_l1(&a, &a, &VariableWeights::uniform(2), &lat_weights(&g)), 0.0);
    }

    #[test]
    fn hand_built_case_matches_pointwise_formula() {
        let g = GridSpec::new(2, 2, 4).unwrap();
        let vw = VariableWeights::new(vec![0.5, 2.0]).unwrap();
        let lw = lat_weights(&g);
        let mut pred = StateField::zeros(g, 0);
        let truth = StateField::zeros(g, 0);
        let vals = [0.3, -1.2, 0.0, 2.5, -0.7, 0.1, 4.0, -3.3, 1.1, 0.0, -0.4, 0.9, 2.2, -2.2, 0.05, 7.0];
        pred.data_mut().copy_from_slice(&vals);
        let mut want = 0.0;
        for (k, x) in vals.iter().enumerate() {
            let v = k / 8;
            let i = (k / 4) % 2;
            want += vw.at(v) * lw.at(i) * x.abs();
        }
        want /= 16.0;
        assert!((weighted_l1(&pred, &truth, &vw, &lw) - want).abs() < 1e-12);
    }
}
