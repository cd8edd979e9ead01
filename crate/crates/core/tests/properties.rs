use pengcde::dynamics::{generate, rhs, simulate_on, System, Task, TaskConfig};
use pengcde::equivariant::{basis_apply, conjugate, fuse, permute_rows, BasisMap, PermEquivWeights, Permutation};
use pengcde::graphgen::{gen_graph, perturb, GraphFamily, GraphKind, SeriesConfig};
use pengcde::io::{from_json, to_json};
use pengcde::neuralcde::{predict, GraphControl, ModelConfig, ModelParams, SolverConfig, Variant};
use pengcde::pathinterp::CubicPath;
use pengcde::solver::{tsit5_solve, AdaptiveConfig};
use pengcde::trainer::{median, Checkpoint, Normalization};
use pengcde::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| Tensor::new(vec![n, n], v).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = (Tensor, u64)> {
    (2usize..8).prop_flat_map(|n| (matrix(n), any::<u64>()))
}

fn family() -> impl Strategy<Value = GraphFamily> {
    prop_oneof![
        Just(GraphFamily::Grid),
        Just(GraphFamily::SmallWorld),
        Just(GraphFamily::PowerLaw),
        Just(GraphFamily::Community),
    ]
}

fn is_simple_graph(a: &Tensor) -> bool {
    let n = a.shape()[0];
    (0..n).all(|i| a.at(i, i) == 0.0 && (0..n).all(|j| a.at(i, j) == a.at(j, i) && (a.at(i, j) == 0.0 || a.at(i, j) == 1.0)))
}

fn pa_of(p: &Permutation, a: &Tensor) -> Tensor {
    conjugate(p, a).unwrap()
}

fn small_task(task: Task, family: GraphFamily, n: usize) -> TaskConfig {
    TaskConfig {
        task,
        series: SeriesConfig {
            graph: family.defaults(n),
            num_nodes: n,
            num_times: 12,
            num_changes: 2,
            ..SeriesConfig::desk(family)
        },
        regime: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_basis_map_commutes_with_conjugation((a, seed) in sized_matrix()) {
        let n = a.shape()[0];
        let p = Permutation::random(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let pa = conjugate(&p, &a).unwrap();
        for map in BasisMap::ALL {
            let lhs = basis_apply(map, &pa).unwrap();
            let rhs = conjugate(&p, &basis_apply(map, &a).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10, "{map:?}");
        }
    }

    #[test]
    fn fusion_is_linear_in_both_channels((a, seed) in sized_matrix(), c in -3.0f64..3.0) {
        let n = a.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = PermEquivWeights(std::array::from_fn(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)));
        let w2 = PermEquivWeights(std::array::from_fn(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)));
        let da = Tensor::from_fn(n, n, |i, j| (i as f64 - j as f64) * 0.3);
        let whole = fuse(&w1, &w2, &a.scale(c), &da.scale(c)).unwrap();
        let parts = fuse(&w1, &w2, &a, &da).unwrap().scale(c);
        prop_assert!(whole.max_abs_diff(&parts) < 1e-9);
    }

    #[test]
    fn permutation_inverse_undoes_it(n in 1usize..12, seed: u64) {
        let p = Permutation::random(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor::from_fn(n, 2, |i, j| (i * 2 + j) as f64);
        let back = permute_rows(&p.inverse(), &permute_rows(&p, &x).unwrap()).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn generated_graphs_are_simple(fam in family(), n in 4usize..40, seed: u64) {
        let a = gen_graph(&fam.defaults(n), n, seed).unwrap();
        prop_assert_eq!(a.shape(), &[n, n]);
        prop_assert!(is_simple_graph(&a));
    }

    #[test]
    fn perturbation_keeps_graphs_simple(n in 4usize..30, seed: u64, rate in 0.001f64..0.5) {
        let a = gen_graph(&GraphKind::SmallWorld { k: 2, p: 0.2 }, n, seed).unwrap();
        let b = perturb(&a, seed ^ 1, rate).unwrap();
        prop_assert!(is_simple_graph(&b));
        prop_assert!(perturb(&a, seed, 0.0).is_err());
    }

    #[test]
    fn series_are_well_formed(fam in family(), seed in 0u64..1000) {
        let s = generate(&small_task(Task::Heat, fam, 12), seed).unwrap();
        prop_assert!(s.times.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.times[0] >= 0.0 && *s.times.last().unwrap() <= 5.0);
        prop_assert_eq!(s.adjacency.len(), s.times.len());
        let mut all: Vec<usize> = s.split.train.iter().chain(&s.split.interp).chain(&s.split.extrap).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..s.times.len()).collect::<Vec<_>>());
        prop_assert!(s.split.extrap.iter().all(|&e| s.split.train.iter().all(|&t| t < e)));
    }

    #[test]
    fn series_json_round_trips(fam in family(), seed in 0u64..1000, task in prop_oneof![Just(Task::Heat), Just(Task::Sir)]) {
        let s = generate(&small_task(task, fam, 9), seed).unwrap();
        let text = to_json(&s).unwrap();
        let back = from_json(&text).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(to_json(&back).unwrap(), text);
    }

    #[test]
    fn generation_is_a_function_of_the_seed(seed in 0u64..1000) {
        let cfg = small_task(Task::Gene, GraphFamily::Community, 10);
        prop_assert_eq!(generate(&cfg, seed).unwrap(), generate(&cfg, seed).unwrap());
    }

    #[test]
    fn spline_passes_through_its_knots(ys in prop::collection::vec(-10.0f64..10.0, 3..12), gaps in prop::collection::vec(0.05f64..1.0, 12)) {
        let mut t = 0.0;
        let times: Vec<f64> = ys.iter().zip(&gaps).map(|(_, g)| { t += g; t }).collect();
        let samples: Vec<Tensor> = ys.iter().map(|&y| Tensor::new(vec![1], vec![y]).unwrap()).collect();
        let path = CubicPath::fit(&times, &samples).unwrap();
        for (ti, yi) in times.iter().zip(&ys) {
            prop_assert!((path.eval(*ti).unwrap().item() - yi).abs() < 1e-9);
        }
        let (lo, hi) = path.domain();
        prop_assert!(path.second_deriv(lo).unwrap().item().abs() < 1e-9);
        prop_assert!(path.second_deriv(hi).unwrap().item().abs() < 1e-9);
    }

    #[test]
    fn simulation_commutes_with_relabelling(seed in 0u64..200, task in prop_oneof![Just(Task::Heat), Just(Task::Gene), Just(Task::Opinion)]) {
        let n = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gen_graph(&GraphKind::Community { blocks: 2, p_in: 0.6, p_out: 0.2 }, n, seed).unwrap();
        let system = System::sample(task, n, &mut rng);
        let x0 = pengcde::dynamics::initial_state(task, n, &mut rng);
        let p = Permutation::random(n, &mut rng);
        let times = [0.0, 0.5, 1.0];
        let xs = simulate_on(&system, &times, &[a.clone(), a.clone(), a.clone()], &x0).unwrap();
        let pa = conjugate(&p, &a).unwrap();
        let ys = simulate_on(&system, &times, &[pa.clone(), pa.clone(), pa], &permute_rows(&p, &x0).unwrap()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            prop_assert!(permute_rows(&p, x).unwrap().max_abs_diff(y) < 1e-10);
        }
        let f = rhs(&system, &pa_of(&p, &a), &permute_rows(&p, &x0).unwrap()).unwrap();
        prop_assert!(permute_rows(&p, &rhs(&system, &a, &x0).unwrap()).unwrap().max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn tsit5_tracks_exponential_decay(rate in 0.1f64..3.0, z0 in -5.0f64..5.0) {
        let cfg = AdaptiveConfig { rtol: 1e-9, atol: 1e-12, ..AdaptiveConfig::default() };
        let out = tsit5_solve(|_t, z: &Tensor| Ok(z.scale(-rate)), Tensor::scalar(z0), 0.0, 1.0, &[0.5, 1.0], &cfg).unwrap();
        for (t, z) in [0.5, 1.0].iter().zip(&out.states) {
            let exact = z0 * (-rate * t).exp();
            prop_assert!((z.item() - exact).abs() <= 1e-7 * exact.abs().max(1e-3));
        }
    }

    #[test]
    fn normalised_training_features_are_standard(seed in 0u64..300) {
        let s = generate(&small_task(Task::Wealth, GraphFamily::SmallWorld, 10), seed).unwrap();
        let norm = Normalization::fit(std::slice::from_ref(&s)).unwrap();
        let feats = s.features.as_ref().unwrap();
        let vals: Vec<f64> = s.split.train.iter().flat_map(|&i| norm.apply(&feats[i]).unwrap().into_data()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn median_lies_between_extremes(v in prop::collection::vec(-100.0f64..100.0, 1..20)) {
        let m = median(&v);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn peng_forward_is_permutation_equivariant(seed in 0u64..1000, variant in prop_oneof![Just(Variant::Peng), Just(Variant::PengFeatures)]) {
        let n = 6;
        let series = generate(&small_task(Task::Heat, GraphFamily::Community, n), seed).unwrap();
        let feats = series.features.clone().unwrap();
        let params = ModelParams::init(ModelConfig::new(variant, n, 1, 1), seed).unwrap();
        let p = Permutation::random(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let control = |adj: &[Tensor], x: &[Tensor]| match variant {
            Variant::PengFeatures => GraphControl::new(&series.times, adj, Some(x)).unwrap(),
            _ => GraphControl::new(&series.times, adj, None).unwrap().with_initial_features(x[0].clone()),
        };
        let padj: Vec<Tensor> = series.adjacency.iter().map(|a| conjugate(&p, a).unwrap()).collect();
        let px: Vec<Tensor> = feats.iter().map(|x| permute_rows(&p, x).unwrap()).collect();
        let solver = SolverConfig::Rk4Knots { substeps: 2 };
        let save = &series.times[1..];
        let base = predict(&params, &control(&series.adjacency, &feats), save, &solver).unwrap();
        let moved = predict(&params, &control(&padj, &px), save, &solver).unwrap();
        for (b, m) in base.iter().zip(&moved) {
            prop_assert!(permute_rows(&p, b).unwrap().max_abs_diff(m) < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trips(seed: u64, variant in prop_oneof![Just(Variant::Peng), Just(Variant::PreMult), Just(Variant::Gnode)]) {
        let ck = Checkpoint {
            model: ModelParams::init(ModelConfig::new(variant, 5, 1, 1), seed).unwrap(),
            solver: SolverConfig::default(),
            seed,
            normalization: Some(Normalization { mean: vec![0.25], std: vec![1.5] }),
            task: Some("heat".into()),
            epochs_run: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        prop_assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}

#[test]
fn power_law_graphs_have_hubs() {
    let (n, runs) = (400usize, 100u64);
    let hubs = (0..runs)
        .filter(|&seed| {
            let a = gen_graph(&GraphKind::PowerLaw { m: 2 }, n, seed).unwrap();
            let degrees: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
            let mean = degrees.iter().sum::<f64>() / n as f64;
            degrees.iter().cloned().fold(0.0, f64::max) > 3.0 * mean
        })
        .count();
    assert!(hubs as u64 * 100 > 95 * runs, "{hubs} of {runs}");
}
