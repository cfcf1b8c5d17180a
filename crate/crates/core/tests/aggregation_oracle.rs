use iowa_fl::aggregation::{
    compute_dynamic_c, f_la, fed_avg, iowa_dq, iowa_dq_with_c, iowa_sq, order_by_accuracy, w_fed_avg,
    DISCARD_THRESHOLD,
};
use iowa_fl::data::Dataset;
use iowa_fl::model::{ModelSpec, ParamVector};
use iowa_fl::{Aggregator, ClientUpdate, QuantifierParams, WFedAvgMode};
use ndarray::array;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn update(id: usize, values: Vec<f64>, n: usize, acc: f64) -> ClientUpdate {
    ClientUpdate::new(id, ParamVector::from_flat(values), n).with_accuracy(acc)
}

/// Rank positions by repeatedly picking the best remaining client.
fn naive_ranks(accs: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..accs.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if accs[left[k]] > accs[left[best]] {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn naive_q(x: f64, a: f64, b: f64, c: f64, y_b: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 || x >= c {
        1.0
    } else if x < a {
        0.0
    } else if x < b {
        y_b * (x - a) / (b - a)
    } else {
        y_b + (1.0 - y_b) * (x - b) / (c - b)
    }
}

/// Direct evaluation: rank by accuracy, weight rank `i` by
/// `Q(i/n) - Q((i-1)/n)`, sum term by term.
fn naive_owa(updates: &[ClientUpdate], q: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
    let accs: Vec<f64> = updates.iter().map(|u| u.accuracy.unwrap()).collect();
    let ranks = naive_ranks(&accs);
    let n = updates.len() as f64;
    let dim = updates[0].params.len();
    let mut out = vec![0.0; dim];
    let mut by_id = vec![0.0; updates.len()];
    for (i, &pos) in ranks.iter().enumerate() {
        let w = (q((i + 1) as f64 / n) - q(i as f64 / n)).max(0.0);
        by_id[pos] = w;
        for (o, v) in out.iter_mut().zip(updates[pos].params.values()) {
            *o += w * v;
        }
    }
    (out, by_id)
}

fn naive_c(accs: &[f64]) -> f64 {
    let mut max_gap: f64 = 0.0;
    for x in accs {
        for y in accs {
            max_gap = max_gap.max((x - y).abs());
        }
    }
    let top = accs.iter().cloned().fold(f64::MIN, f64::max);
    accs.iter().filter(|&&u| (top - u).abs() <= 0.75 * max_gap).count() as f64 / accs.len() as f64
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<ClientUpdate> {
    (0..n)
        .map(|id| {
            let values = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            // rational accuracies on a 1/20 grid
            let acc = rng.gen_range(0..=20) as f64 / 20.0;
            update(id, values, rng.gen_range(1..100), acc)
        })
        .collect()
}

fn assert_close(got: &[f64], want: &[f64]) {
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-9, "{got:?} vs {want:?}");
    }
}

#[test]
fn operators_match_naive_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let n = 1 + trial % 6;
        let batch = random_batch(&mut rng, n);
        let dim = batch[0].params.len();

        let mean: Vec<f64> = (0..dim)
            .map(|j| batch.iter().map(|u| u.params.values()[j]).sum::<f64>() / n as f64)
            .collect();
        assert_close(fed_avg(&batch).unwrap().values(), &mean);

        let total: usize = batch.iter().map(|u| u.num_samples).sum();
        let prop: Vec<f64> = (0..dim)
            .map(|j| batch.iter().map(|u| u.num_samples as f64 / total as f64 * u.params.values()[j]).sum())
            .collect();
        assert_close(w_fed_avg(&batch, WFedAvgMode::Normalized).unwrap().values(), &prop);
        let literal: Vec<f64> = (0..dim)
            .map(|j| batch.iter().map(|u| u.params.values()[j] / u.num_samples as f64).sum())
            .collect();
        assert_close(w_fed_avg(&batch, WFedAvgMode::AsWritten).unwrap().values(), &literal);

        let (out, report) = Aggregator::Al80.aggregate(&batch).unwrap();
        let (want, w) = naive_owa(&batch, |x| naive_q(x, 0.0, 0.8, 0.8, 1.0));
        assert_close(out.values(), &want);
        assert_close(&report.weight_list(), &w);

        for y_b in [0.4, 0.75] {
            let p = QuantifierParams::new(0.0, 0.2, 0.8, y_b).unwrap();
            let (out, report) = iowa_sq(&batch, &p).unwrap();
            let (want, w) = naive_owa(&batch, |x| naive_q(x, 0.0, 0.2, 0.8, y_b));
            assert_close(out.values(), &want);
            assert_close(&report.weight_list(), &w);

            let (out, report) = iowa_dq(&batch, 0.0, 0.2, y_b).unwrap();
            let accs: Vec<f64> = batch.iter().map(|u| u.accuracy.unwrap()).collect();
            let c = naive_c(&accs);
            let (want, w) = naive_owa(&batch, |x| naive_q(x, 0.0, 0.2 * c, c, y_b));
            assert_eq!(report.c_used, Some(c));
            assert_close(out.values(), &want);
            assert_close(&report.weight_list(), &w);
        }
    }
}

#[test]
fn dynamic_c_matches_brute_force_exhaustively() {
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    for n in 1..=4 {
        let mut idx = vec![0usize; n];
        loop {
            let mut accs: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
            accs.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(compute_dynamic_c(&accs).unwrap(), naive_c(&accs), "{accs:?}");
            let mut k = 0;
            while k < n && idx[k] == grid.len() - 1 {
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
            idx[k] += 1;
        }
    }
}

#[test]
fn worked_examples() {
    assert_eq!(compute_dynamic_c(&[0.9, 0.88, 0.85, 0.2]).unwrap(), 0.75);
    assert_eq!(compute_dynamic_c(&[0.5, 0.5, 0.5]).unwrap(), 1.0);
    assert_eq!(compute_dynamic_c(&[1.0, 0.0]).unwrap(), 0.5);
    assert!(compute_dynamic_c(&[]).is_err());

    let batch: Vec<_> = [0.9, 0.88, 0.85, 0.2]
        .iter()
        .enumerate()
        .map(|(i, &a)| update(i, vec![i as f64], 10, a))
        .collect();
    let (_, r) = iowa_dq(&batch, 0.0, 0.2, 0.75).unwrap();
    assert!((r.b_effective.unwrap() - 0.15).abs() < 1e-12);
    for (got, want) in r.weight_list().iter().zip([0.7916666666666666, 0.1041666666666667, 0.1041666666666667, 0.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(r.discarded_ids.iter().copied().collect::<Vec<_>>(), vec![3]);

    let accs = [0.3, 0.9, 0.5];
    let batch: Vec<_> = accs.iter().enumerate().map(|(i, &a)| update(i, vec![0.0], 1, a)).collect();
    assert_eq!(order_by_accuracy(&batch).unwrap(), vec![1, 2, 0]);

    let norm = w_fed_avg(&[update(0, vec![0.0], 1, 0.0), update(1, vec![4.0], 3, 0.0)], WFedAvgMode::Normalized).unwrap();
    assert!((norm.values()[0] - 3.0).abs() < 1e-12);
    let lit = w_fed_avg(&[update(0, vec![0.0], 1, 0.0), update(1, vec![4.0], 3, 0.0)], WFedAvgMode::AsWritten).unwrap();
    assert!((lit.values()[0] - 4.0 / 3.0).abs() < 1e-12);
}

#[test]
fn f_la_hand_example() {
    let spec = ModelSpec::logistic(2, 2);
    // W = diag(1, -1), zero bias: logits (x0, -x1)
    let params = ParamVector::new(vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0], spec.shapes()).unwrap();
    let val = Dataset::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![0, 1, 0], 2).unwrap();
    assert!((f_la(&params, &val, &spec).unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn report_matches_convex_combination(seed in any::<u64>(), n in 1usize..=8, pick in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, n);
        let agg = [
            Aggregator::FedAvg,
            Aggregator::WFedAvg(WFedAvgMode::Normalized),
            Aggregator::Al80,
            Aggregator::iowa_sq_default(0.75).unwrap(),
            Aggregator::iowa_dq_default(0.4).unwrap(),
        ][pick].clone();
        let (out, report) = agg.aggregate(&batch).unwrap();
        let weights = report.weight_list();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for j in 0..out.len() {
            let direct: f64 = batch.iter().zip(&weights).map(|(u, w)| w * u.params.values()[j]).sum();
            prop_assert!((out.values()[j] - direct).abs() <= 1e-9);
        }
        for (id, w) in &report.weights {
            prop_assert_eq!(report.discarded_ids.contains(id), *w < DISCARD_THRESHOLD);
        }
    }

    #[test]
    fn order_invariant_under_monotone_transform(accs in prop::collection::vec(0.0..=1.0f64, 1..10)) {
        let batch: Vec<_> = accs.iter().enumerate().map(|(i, &a)| update(i, vec![0.0], 1, a)).collect();
        let squashed: Vec<_> = accs.iter().enumerate().map(|(i, &a)| update(i, vec![0.0], 1, a * a * 0.5)).collect();
        prop_assert_eq!(order_by_accuracy(&batch).unwrap(), order_by_accuracy(&squashed).unwrap());
    }

    #[test]
    fn forced_c_reproduces_static(seed in any::<u64>(), n in 1usize..=10, y_b in 0.0..=1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, n);
        let (dq, dr) = iowa_dq_with_c(&batch, 0.0, 0.2, y_b, 0.8).unwrap();
        let p = QuantifierParams::new(0.0, 0.2 * 0.8, 0.8, y_b).unwrap();
        let (sq, sr) = iowa_sq(&batch, &p).unwrap();
        prop_assert_eq!(dq, sq);
        prop_assert_eq!(dr.weights, sr.weights);
    }

    #[test]
    fn identical_params_are_a_fixed_point(n in 1usize..=8, v in prop::collection::vec(-3.0..3.0f64, 3), y_b in 0.0..=1.0f64) {
        let batch: Vec<_> = (0..n).map(|i| update(i, v.clone(), i + 1, i as f64 / 10.0)).collect();
        let (out, _) = Aggregator::iowa_dq_default(y_b).unwrap().aggregate(&batch).unwrap();
        for (a, b) in out.values().iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn batch_errors() {
    assert!(fed_avg(&[]).is_err());
    let mismatched = [update(0, vec![1.0], 1, 0.5), update(1, vec![1.0, 2.0], 1, 0.5)];
    assert!(fed_avg(&mismatched).is_err());
    let missing = [ClientUpdate::new(0, ParamVector::from_flat(vec![1.0]), 1)];
    assert!(Aggregator::Al80.aggregate(&missing).is_err());
    assert!(Aggregator::FedAvg.aggregate(&missing).is_ok());
    let dup = [update(0, vec![1.0], 1, 0.5), update(0, vec![1.0], 1, 0.5)];
    assert!(Aggregator::FedAvg.aggregate(&dup).is_err());
    assert!(iowa_dq(&[update(0, vec![1.0], 1, 0.5)], 0.3, 0.2, 0.5).is_err());
}
