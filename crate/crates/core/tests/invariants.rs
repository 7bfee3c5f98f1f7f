use std::sync::Arc;

use approx::assert_abs_diff_eq;
use llsh_core::baselines::{BallTree, BruteIndex, KdTree};
use llsh_core::e2lsh::{E2lshIndex, E2lshParams};
use llsh_core::eval::{collision_prob, recall_at_k, GroundTruth, Stability};
use llsh_core::llsh::{fit_model, LlshConfig, LlshIndex, LlshModel};
use llsh_core::neural::TrainConfig;
use llsh_core::vecdata::{self, generate, DatasetSpec, Distribution, Format};
use llsh_core::{Dataset, Neighbor};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        Just(Distribution::Uniform),
        Just(Distribution::Normal),
        Just(Distribution::Lognormal),
        Just(Distribution::Exponential),
    ]
}

fn sorted(res: &[Neighbor]) -> bool {
    res.windows(2)
        .all(|w| (w[0].distance, w[0].id) < (w[1].distance, w[1].id))
}

// 1 - 2 Phi(-s) - 2 / (sqrt(2 pi) s) (1 - exp(-s^2 / 2)) with s = r / c
fn gaussian_collision_closed_form(c: f64, r: f64) -> f64 {
    let s = r / c;
    let tail = statrs::function::erf::erfc(s / std::f64::consts::SQRT_2);
    1.0 - tail - 2.0 / ((2.0 * std::f64::consts::PI).sqrt() * s) * (1.0 - (-s * s / 2.0).exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trees_agree_with_brute_force(
        kind in kind(),
        n in 1usize..400,
        d in 1usize..12,
        leaf in 1usize..40,
        topk in 1usize..15,
        seed in any::<u64>(),
    ) {
        let ds = Arc::new(generate(&DatasetSpec::new(kind, n, d, seed)).unwrap());
        let queries = generate(&DatasetSpec::new(kind, 8, d, seed ^ 1)).unwrap();
        let brute = BruteIndex::new(ds.clone());
        let kd = KdTree::build(ds.clone(), leaf).unwrap();
        let ball = BallTree::build(ds.clone(), leaf).unwrap();
        for q in queries.rows().chain([ds.row(n / 2)]) {
            let want = brute.query(q, topk).unwrap();
            prop_assert_eq!(want.len(), topk.min(n));
            prop_assert!(sorted(&want));
            prop_assert_eq!(&kd.query(q, topk).unwrap(), &want);
            prop_assert_eq!(&ball.query(q, topk).unwrap(), &want);
        }
    }

    #[test]
    fn e2lsh_indexes_every_point_once_per_table(
        n in 1usize..300,
        d in 1usize..10,
        tables in 1usize..6,
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let ds = Arc::new(generate(&DatasetSpec::new(Distribution::Normal, n, d, seed)).unwrap());
        let params = E2lshParams { tables, k, ..E2lshParams::default() };
        let idx = E2lshIndex::build(ds.clone(), params, seed).unwrap();
        for t in idx.table_set().tables() {
            prop_assert_eq!(t.len(), n);
        }
        for i in [0, n - 1] {
            let res = idx.query(ds.row(i), 3).unwrap();
            prop_assert!(res.len() <= 3 && sorted(&res));
            prop_assert_eq!(res[0].distance, 0.0);
        }
    }

    #[test]
    fn e2lsh_serialization_is_seed_determined(n in 1usize..200, seed in any::<u64>()) {
        let ds = Arc::new(generate(&DatasetSpec::new(Distribution::Uniform, n, 6, seed)).unwrap());
        let params = E2lshParams { tables: 3, k: 4, ..E2lshParams::default() };
        let bytes = |s| {
            let mut out = Vec::new();
            E2lshIndex::build(ds.clone(), params, s).unwrap().write_to(&mut out).unwrap();
            out
        };
        let a = bytes(seed);
        prop_assert_eq!(&a, &bytes(seed));
        let back = E2lshIndex::read_from(&a[..], ds.clone()).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn collision_probability_is_a_decreasing_probability(
        c in 0.05f64..50.0,
        r in 0.1f64..20.0,
    ) {
        for p in [Stability::Gaussian, Stability::Cauchy] {
            let here = collision_prob(c, r, p).unwrap();
            let farther = collision_prob(c * 1.5, r, p).unwrap();
            prop_assert!((0.0..=1.0).contains(&here));
            prop_assert!(farther < here);
        }
        let gaussian = collision_prob(c, r, Stability::Gaussian).unwrap();
        assert_abs_diff_eq!(gaussian, gaussian_collision_closed_form(c, r), epsilon = 1e-7);
    }

    #[test]
    fn brute_results_have_full_recall(n in 10usize..200, d in 1usize..8, topk in 1usize..10, seed in any::<u64>()) {
        let ds = generate(&DatasetSpec::new(Distribution::Exponential, n, d, seed)).unwrap();
        let queries = generate(&DatasetSpec::new(Distribution::Exponential, 5, d, !seed)).unwrap();
        let truth = GroundTruth::compute(&ds, &queries, topk).unwrap();
        let brute = BruteIndex::new(Arc::new(ds));
        let results: Vec<_> = queries.rows().map(|q| brute.query(q, topk).unwrap()).collect();
        prop_assert_eq!(recall_at_k(&results, &truth, topk).unwrap(), 1.0);
        let empty = vec![Vec::new(); results.len()];
        prop_assert_eq!(recall_at_k(&empty, &truth, topk).unwrap(), 0.0);
    }
}

#[test]
fn llshbin_and_csv_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&DatasetSpec::new(Distribution::Lognormal, 37, 5, 3)).unwrap();
    for name in ["a.llshbin", "a.csv"] {
        let path = dir.path().join(name);
        vecdata::write_vectors(&ds, &path, Format::from_path(&path)).unwrap();
        let back: Dataset = vecdata::read_vectors(&path, Format::from_path(&path)).unwrap();
        assert_eq!(back.dim(), 5);
        assert_eq!(back.values(), ds.values(), "{name}");
    }
}

#[test]
fn learned_pipeline_end_to_end() {
    let ds = Arc::new(generate(&DatasetSpec::new(Distribution::Uniform, 1500, 16, 9)).unwrap());
    let quick = TrainConfig { max_epochs: 20, ..LlshConfig::default().train };
    let cfg = LlshConfig {
        tables: 4,
        k: 4,
        m1: 12,
        m2: 8,
        m3: 8,
        train: quick,
        autoencoder: TrainConfig { max_epochs: 5, ..LlshConfig::default().autoencoder },
        ..LlshConfig::default()
    };
    let (model, report) = fit_model(&ds, &cfg, 9).unwrap();
    assert_eq!(report.holdout_rows, 150);
    assert!(report.holdout_fitting_rate > 0.5, "{}", report.holdout_fitting_rate);
    assert!(report.autoencoder.final_mse <= report.autoencoder.initial_mse);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.llm");
    model.write_to(std::fs::File::create(&path).unwrap()).unwrap();
    let back = LlshModel::read_from(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back.hash_all(&ds).unwrap(), model.hash_all(&ds).unwrap());

    let index = LlshIndex::build(Arc::new(back), ds.clone(), 4).unwrap();
    let res = index.query(ds.row(7), 5).unwrap();
    assert_eq!(res[0], Neighbor { id: 7, distance: 0.0 });
    assert!(sorted(&res));
    let truth = GroundTruth::compute(&ds, &ds.subset(&[1, 2, 3]), 5).unwrap();
    let results: Vec<_> = (1..4).map(|i| index.query(ds.row(i), 5).unwrap()).collect();
    let recall = recall_at_k(&results, &truth, 5).unwrap();
    assert!((0.2..=1.0).contains(&recall), "{recall}");
}
