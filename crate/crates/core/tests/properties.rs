use fedmerge::checkpoint::{decode_checkpoint, encode_checkpoint};
use fedmerge::fedsim::{generate_task_family, local_sgd, one_shot_fedavg, FedAvg, NoiseKey, TaskFamilySpec};
use fedmerge::heterometrics::heterogeneity_at_point;
use fedmerge::merge::{merge_cclip, merge_fedgma, merge_fednova, merge_median, merge_task_arithmetic};
use fedmerge::params::{add, coordinate_median, global_l2_norm, scale};
use fedmerge::{ParamMap, ParamMap64, ParameterMap, TaskVector, TrainingMeta};
use proptest::prelude::*;
use std::path::Path;

const SHAPES: [&[usize]; 2] = [&[3, 2], &[4]];
const LEN: usize = 10;

fn map_from(values: &[f64]) -> ParamMap64 {
    let (a, b) = values.split_at(6);
    ParameterMap::from_entries([("a.weight", vec![3, 2], a.to_vec()), ("b.bias", vec![4], b.to_vec())]).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, LEN)
}

fn task_vectors(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(values(), 2..=max)
}

fn rel(a: &ParamMap64, b: &ParamMap64) -> f64 {
    let diff: f64 = a.values().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / global_l2_norm(b).max(f64::MIN_POSITIVE)
}

fn taus_of(raw: &[Vec<f64>]) -> Vec<TaskVector<f64>> {
    raw.iter().map(|v| TaskVector::new(map_from(v), None)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn scaling_roundtrips_and_scales_the_norm(v in values(), log_c in -3.0f64..3.0) {
        let c = 10f64.powf(log_c);
        let a = map_from(&v);
        prop_assert!(rel(&scale(&scale(&a, c), 1.0 / c), &a) <= 1e-6);
        let n = global_l2_norm(&a);
        prop_assert!((global_l2_norm(&scale(&a, c)) - c * n).abs() <= 1e-6 * c * n.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn median_ignores_input_order(raw in task_vectors(7), rotate in 0usize..7) {
        let maps: Vec<_> = raw.iter().map(|v| map_from(v)).collect();
        let mut shuffled = maps.clone();
        shuffled.rotate_left(rotate % maps.len());
        shuffled.reverse();
        prop_assert_eq!(coordinate_median(&maps).unwrap(), coordinate_median(&shuffled).unwrap());
    }

    #[test]
    fn median_of_two_is_the_midpoint(a in values(), b in values()) {
        let (a, b) = (map_from(&a), map_from(&b));
        let mid = scale(&add(&a, &b).unwrap(), 0.5);
        prop_assert_eq!(coordinate_median(&[a, b]).unwrap(), mid);
    }

    #[test]
    fn robust_merges_ignore_task_order(raw in task_vectors(6), base in values(), lambda in 0.05f64..2.0, rho in 0.05f64..1.0) {
        let base = map_from(&base);
        let taus = taus_of(&raw);
        let mut reversed = taus.clone();
        reversed.reverse();
        prop_assert_eq!(merge_median(&base, &taus, lambda).unwrap().merged, merge_median(&base, &reversed, lambda).unwrap().merged);
        prop_assert_eq!(merge_fedgma(&base, &taus, lambda, rho).unwrap().merged, merge_fedgma(&base, &reversed, lambda, rho).unwrap().merged);
        let radius = rho * 20.0;
        prop_assert_eq!(merge_cclip(&base, &taus, lambda, radius).unwrap().merged, merge_cclip(&base, &reversed, lambda, radius).unwrap().merged);
    }

    #[test]
    fn task_arithmetic_is_linear_in_lambda(raw in task_vectors(5), base in values(), lambda in 0.05f64..2.0, c in 0.1f64..5.0) {
        let base = map_from(&base);
        let taus = taus_of(&raw);
        let shift = |l: f64| {
            let merged = merge_task_arithmetic(&base, &taus, l).unwrap().merged;
            add(&merged, &scale(&base, -1.0)).unwrap()
        };
        prop_assert!(rel(&shift(c * lambda), &scale(&shift(lambda), c)) <= 1e-6);
    }

    #[test]
    fn clipped_task_vectors_stay_inside_the_ball(v in values(), base in values(), lambda in 0.1f64..2.0, rho in 0.0f64..40.0) {
        let base = map_from(&base);
        let taus = taus_of(&[v]);
        let merged = merge_cclip(&base, &taus, lambda, rho).unwrap().merged;
        let step = global_l2_norm(&add(&merged, &scale(&base, -1.0)).unwrap()) / lambda;
        prop_assert!(step <= rho * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn fedgma_passes_agreeing_coordinates_through(v in values(), base in values(), lambda in 0.1f64..2.0, rho in 0.01f64..=1.0) {
        // a task repeated T times agrees everywhere, so the mask is 1
        let base = map_from(&base);
        let taus = taus_of(&[v.clone(), v.clone(), v]);
        let gma = merge_fedgma(&base, &taus, lambda, rho).unwrap().merged;
        prop_assert!(rel(&gma, &merge_task_arithmetic(&base, &taus, lambda).unwrap().merged) <= 1e-12);
    }

    #[test]
    fn fedgma_never_amplifies(a in values(), b in values(), rho in 0.01f64..=1.0) {
        let base = map_from(&[0.0; LEN]);
        let taus = taus_of(&[a, b]);
        let gma = merge_fedgma(&base, &taus, 1.0, rho).unwrap().merged;
        let ta = merge_task_arithmetic(&base, &taus, 1.0).unwrap().merged;
        for (g, t) in gma.values().zip(ta.values()) {
            prop_assert!(g.abs() <= t.abs() + 1e-12 && g * t >= 0.0);
        }
    }

    #[test]
    fn fednova_ignores_common_rate_rescaling(
        raw in task_vectors(4),
        base in values(),
        rates in prop::collection::vec((0.001f64..0.5, 1usize..30), 4),
        c in 0.01f64..100.0,
    ) {
        let base = map_from(&base);
        let with_meta = |factor: f64| -> Vec<TaskVector<f64>> {
            raw.iter()
                .zip(&rates)
                .map(|(v, &(r, k))| TaskVector::new(map_from(v), Some(TrainingMeta::constant(r * factor, k).unwrap())))
                .collect()
        };
        let a = merge_fednova(&base, &with_meta(1.0), 0.7).unwrap().merged;
        let b = merge_fednova(&base, &with_meta(c), 0.7).unwrap().merged;
        prop_assert!(rel(&b, &a) <= 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(bits in prop::collection::vec(any::<u32>(), LEN)) {
        let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let (a, b) = data.split_at(6);
        let map: ParamMap = ParameterMap::from_entries([("a", SHAPES[0].to_vec(), a.to_vec()), ("b", SHAPES[1].to_vec(), b.to_vec())]).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&map), Path::new("mem")).unwrap();
        let back_bits: Vec<u32> = back.values().map(f32::to_bits).collect();
        prop_assert_eq!(back_bits, bits);
    }
}

#[test]
fn simulation_is_bit_deterministic() {
    let spec = TaskFamilySpec::quadratic(3, 6, 1.0, 2.0, 11).with_noise(0.1);
    let family = generate_task_family(&spec).unwrap();
    let schedules = vec![vec![0.05; 12], vec![0.1; 4], vec![0.02; 30]];
    let run = || FedAvg::new(&family.tasks, &schedules).beta(1.2).seed(9).run(&family.theta0, 3).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn merging_converged_runs_of_a_shared_minimizer_has_no_heterogeneity() {
    let spec = TaskFamilySpec::quadratic(4, 8, 0.0, 2.0, 3);
    let family = generate_task_family(&spec).unwrap();
    let schedules = vec![vec![0.5; 200]; 4];
    let merged = one_shot_fedavg(&family.tasks, &family.theta0, &schedules, 1.0, 0).unwrap();
    assert!(heterogeneity_at_point(&family.tasks, &merged).unwrap() <= 1e-12);

    // the same point through the merge path
    let taus: Vec<_> = family
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let end = local_sgd(task, &family.theta0, &schedules[t], NoiseKey::new(0, t, 0), false).unwrap();
            TaskVector::from_models(&family.theta0, &end.theta, None).unwrap()
        })
        .collect();
    let ta = merge_task_arithmetic(&family.theta0, &taus, 0.25).unwrap().merged;
    assert!(heterogeneity_at_point(&family.tasks, &ta).unwrap() <= 1e-12);
}
