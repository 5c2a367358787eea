use gradda::daflow::DaModel;
use gradda::dynamics::{tendency, DynParams};
use gradda::forecast::{aggregate_plan, DEFAULT_LEADS};
use gradda::fourdvar::{cost, BackgroundTerm, Stream};
use gradda::gradcheck::GradCase;
use gradda::grid::{build_climatology, lat_weights, GridSpec, LatWeights, LevelStats, StateField, VariableWeights};
use gradda::io::{decode_state, encode_state, quantize};
use gradda::losses::weighted_l1;
use gradda::netcore::{Activation, CondNet, Conditioning, LayerSpec};
use gradda::verify::{acc, bias, rmse, skillful_lead, EvalPair};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> impl Strategy<Value = GridSpec> {
    (1usize..=3, 2usize..=8, 4usize..=12).prop_map(|(v, h, w)| GridSpec::new(v, h, w).unwrap())
}

fn field(spec: GridSpec, time: i64, seed: u64, scale: f64) -> StateField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..spec.len()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    StateField::from_vec(spec, time, data).unwrap()
}

/// Two climatology slots at hours 0 and 12, each the mean of two random
/// fields, so anomalies are nonzero almost surely.
fn eval_setup(spec: GridSpec, seed: u64) -> (Vec<EvalPair>, Vec<StateField>) {
    let clim_states: Vec<StateField> = (0..4).map(|k| field(spec, 12 * k, seed.wrapping_add(100 + k as u64), 3.0)).collect();
    let eval = (0..3)
        .map(|k| EvalPair {
            pred: field(spec, 12 * k, seed.wrapping_add(2 * k as u64), 5.0),
            truth: field(spec, 12 * k, seed.wrapping_add(2 * k as u64 + 1), 5.0),
            lead_hours: 24,
        })
        .collect();
    (eval, clim_states)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lat_weights_have_unit_mean_and_equatorial_symmetry(rows in 2usize..200) {
        let spec = GridSpec::new(1, rows, 4).unwrap();
        let lw = lat_weights(&spec);
        let mean = lw.as_slice().iter().sum::<f64>() / rows as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        for i in 0..rows {
            prop_assert!(lw.at(i) > 0.0);
            prop_assert!((lw.at(i) - lw.at(rows - 1 - i)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_plan_sums_to_lead(lead in 1u32..=240) {
        let plan = aggregate_plan(lead, &DEFAULT_LEADS).unwrap();
        prop_assert_eq!(plan.iter().map(|l| l.hours()).sum::<u32>(), lead);
        prop_assert!(plan.windows(2).all(|w| w[0].hours() >= w[1].hours()));
        prop_assert!(plan.iter().all(|l| DEFAULT_LEADS.contains(&l.hours())));
    }

    #[test]
    fn climatology_of_constant_sequence_is_that_constant(spec in grid(), c in -50.0f64..50.0) {
        let states: Vec<StateField> = (0..6).map(|k| StateField::filled(spec, 12 * k, c)).collect();
        let clim = build_climatology(&states, 12).unwrap();
        for s in 0..clim.slot_count() {
            // Summing then dividing may round by an ulp or two.
            prop_assert!(clim.slot(s).iter().all(|&x| (x - c).abs() <= 4.0 * f64::EPSILON * c.abs()));
        }
    }

    #[test]
    fn state_encoding_round_trips_at_storage_precision(spec in grid(), seed in any::<u64>(), time in -1000i64..100_000) {
        let x = field(spec, time, seed, 20.0);
        let back = decode_state(&encode_state(&x)).unwrap();
        prop_assert_eq!(&back, &quantize(&x));
        prop_assert_eq!(decode_state(&encode_state(&back)).unwrap(), back);
    }

    #[test]
    fn tendency_is_stencil_local(spec in grid(), seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let p = DynParams::new(spec.levels, 8.0);
        let x = field(spec, 0, seed, 4.0);
        let k = pick.index(spec.len());
        let (v0, i0, j0) = (k / spec.columns(), (k % spec.columns()) / spec.cols, k % spec.cols);
        let mut y = x.clone();
        y.data_mut()[k] += 0.5;
        let (tx, ty) = (tendency(&x, &p), tendency(&y, &p));
        for v in 0..spec.levels {
            for i in 0..spec.rows {
                for j in 0..spec.cols {
                    let dj = (j as isize - j0 as isize).rem_euclid(spec.cols as isize);
                    let near_j = dj.min(spec.cols as isize - dj) <= 2;
                    let near = near_j && i.abs_diff(i0) <= 1 && v.abs_diff(v0) <= 1;
                    if !near {
                        prop_assert_eq!(tx.get(v, i, j), ty.get(v, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn bias_free_film_net_maps_zero_to_zero(
        dims in prop::collection::vec(1usize..8, 2..5),
        cond in prop::collection::vec(-3.0f64..3.0, 3),
        seed in any::<u64>(),
    ) {
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .map(|w| LayerSpec::new(w[0], w[1], Conditioning::Film, false, Activation::Tanh))
            .collect();
        let net = CondNet::new(layers, 3, seed).unwrap();
        prop_assert!(net.preserves_zero());
        let out = net.forward(&vec![0.0; dims[0]], &cond).unwrap();
        prop_assert!(out.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn weighted_l1_of_perfect_prediction_is_zero(spec in grid(), seed in any::<u64>()) {
        let x = field(spec, 0, seed, 10.0);
        let l = weighted_l1(&x, &x, &VariableWeights::uniform(spec.levels), &lat_weights(&spec));
        prop_assert_eq!(l, 0.0);
    }

    #[test]
    fn acc_is_bounded(spec in grid(), seed in any::<u64>()) {
        let (eval, clim_states) = eval_setup(spec, seed);
        let clim = build_climatology(&clim_states, 12).unwrap();
        for a in acc(&eval, &clim, &lat_weights(&spec)).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn metrics_are_invariant_under_joint_longitude_rotation(spec in grid(), seed in any::<u64>(), shift in 0usize..12) {
        let lw = lat_weights(&spec);
        let (eval, clim_states) = eval_setup(spec, seed);
        let clim = build_climatology(&clim_states, 12).unwrap();
        let rot_eval: Vec<EvalPair> = eval
            .iter()
            .map(|p| EvalPair { pred: p.pred.rotate_lon(shift), truth: p.truth.rotate_lon(shift), lead_hours: p.lead_hours })
            .collect();
        let rot_states: Vec<StateField> = clim_states.iter().map(|s| s.rotate_lon(shift)).collect();
        let rot_clim = build_climatology(&rot_states, 12).unwrap();
        let close = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        prop_assert!(close(rmse(&eval, &lw).unwrap(), rmse(&rot_eval, &lw).unwrap()));
        prop_assert!(close(bias(&eval, &lw).unwrap(), bias(&rot_eval, &lw).unwrap()));
        prop_assert!(close(acc(&eval, &clim, &lw).unwrap(), acc(&rot_eval, &rot_clim, &lw).unwrap()));
    }

    #[test]
    fn bias_flips_sign_when_pred_and_truth_swap(spec in grid(), seed in any::<u64>()) {
        let lw = lat_weights(&spec);
        let (eval, _) = eval_setup(spec, seed);
        let swapped: Vec<EvalPair> = eval
            .iter()
            .map(|p| EvalPair { pred: p.truth.clone(), truth: p.pred.clone(), lead_hours: p.lead_hours })
            .collect();
        for (a, b) in bias(&eval, &lw).unwrap().iter().zip(bias(&swapped, &lw).unwrap()) {
            prop_assert!((a + b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn rmse_is_nonnegative_and_zero_only_for_identical_fields(spec in grid(), seed in any::<u64>()) {
        let lw = LatWeights::uniform(spec.rows);
        let (eval, _) = eval_setup(spec, seed);
        prop_assert!(rmse(&eval, &lw).unwrap().iter().all(|&r| r > 0.0));
        let same: Vec<EvalPair> = eval.iter().map(|p| EvalPair { pred: p.truth.clone(), ..p.clone() }).collect();
        prop_assert!(rmse(&same, &lw).unwrap().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn skillful_lead_is_last_lead_of_leading_run(scores in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let leads: Vec<u32> = (1..=scores.len() as u32).map(|k| 24 * k).collect();
        match skillful_lead(&leads, &scores, 0.6) {
            Ok(lead) => {
                let n = (lead / 24) as usize;
                prop_assert!(scores[..n].iter().all(|&s| s > 0.6));
                prop_assert!(n == scores.len() || scores[n] <= 0.6);
            }
            Err(_) => prop_assert!(scores[0] <= 0.6),
        }
    }

    #[test]
    fn zero_gradient_leaves_background_unchanged(spec in grid(), seed in any::<u64>(), hidden in 1usize..16) {
        let xb = field(spec, 0, seed, 8.0);
        let stats = LevelStats::from_states(std::slice::from_ref(&xb)).unwrap();
        let model = DaModel::new(Stream::Conv, stats, hidden, seed).unwrap();
        let xa = model.apply(&xb, &StateField::zeros(spec, 0)).unwrap();
        prop_assert_eq!(xa, xb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cost_is_nonnegative(seed in any::<u64>(), scale in 0.0f64..2.0) {
        let case = GradCase::random(seed).unwrap();
        let streams = case.streams(1.0, 5.0).unwrap();
        let x = case.xb.axpy(scale, &field(case.spec, 0, seed ^ 0x5eed, 1.0)).unwrap();
        let bg = BackgroundTerm::from_clim_std(0.1, &vec![1.0; case.spec.levels]);
        prop_assert!(cost(&x, &case.xb, &case.plan, &streams, &case.fc, &bg).unwrap() >= 0.0);
        prop_assert!(cost(&x, &case.xb, &case.plan, &streams, &case.fc, &BackgroundTerm::Omitted).unwrap() >= 0.0);
    }
}
