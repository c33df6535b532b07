use proptest::prelude::*;

use signlab::data::{generate_dataset, noise_norm_stats, write_dataset, DataConfig, Sample};
use signlab::grad::gradients;
use signlab::harness::config::RunConfig;
use signlab::model::{forward, forward_all, init_params, logistic_loss, softmax_rows, Head, ModelConfig};
use signlab::optim::{apply_step, OptimizerSpec, OptimizerState};
use signlab::probe::{beta_stats, snapshot, BetaStats};
use signlab::theory::{detect_transitions, predicted_times, TheoryConstants, Thresholds, TimeInputs};

fn small_data(seed: u64, len: usize) -> DataConfig {
    DataConfig { d: 30, s: 4, n: 3, context_len: len, sigma_p: 1.0, orthogonal: true, seed }
}

fn small_model(seed: u64, len: usize) -> ModelConfig {
    ModelConfig { d: 30, m_k: 3, m_v: 2, context_len: len, sigma_0: 0.5, init_seed: seed }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-700.0f64..700.0, 16), shift in -50.0f64..50.0) {
        let s = softmax_rows(&logits, 4);
        for row in s.chunks_exact(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let s2 = softmax_rows(&shifted, 4);
        for (a, b) in s.iter().zip(&s2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_invariant_under_patch_permutation(seed in 0u64..1000, rot in 1usize..4) {
        let params = init_params(&small_model(seed, 4)).unwrap();
        let ds = generate_dataset(&small_data(seed, 4)).unwrap();
        for sample in &ds.samples {
            let len = sample.context_len();
            let mut permuted = sample.clone();
            permuted.patches.rotate_left(rot);
            let relabel = |p: &usize| (p + len - rot) % len;
            permuted.signal_positions = sample.signal_positions.iter().map(relabel).collect();
            permuted.noise_positions = sample.noise_positions.iter().map(relabel).collect();
            let a = forward(&params, sample).unwrap().output;
            let b = forward(&params, &permuted).unwrap().output;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn dataset_bytes_are_deterministic(seed in any::<u64>()) {
        let bytes = |c: &DataConfig| {
            let mut out = Vec::new();
            write_dataset(&generate_dataset(c).unwrap(), &mut out).unwrap();
            out
        };
        let c = small_data(seed, 2);
        prop_assert_eq!(bytes(&c), bytes(&c));
    }

    #[test]
    fn supports_have_s_entries_off_the_signal(seed in any::<u64>(), s in 1usize..20) {
        let c = DataConfig { s, ..small_data(seed, 4) };
        let ds = generate_dataset(&c).unwrap();
        for patch in ds.samples.iter().flat_map(Sample::noise_patches) {
            prop_assert_eq!(patch.nnz(), s);
            prop_assert_eq!(patch.get(0), 0.0);
        }
    }

    #[test]
    fn manifest_round_trip(seed in any::<u64>(), d in 100usize..3000, zoom in prop::option::of(1u64..5000), adam in any::<bool>()) {
        let mut c = RunConfig::row_a(d, seed);
        c.zoom = zoom;
        if adam {
            c.optimizer = OptimizerSpec::adam(1e-4, 0.5, 0.999, 1e-15);
        }
        prop_assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn times_scale_inversely_with_eta(eta in 1e-6f64..1e-2, c in 0.1f64..10.0) {
        let data = DataConfig::row_a(2000, 1);
        let model = ModelConfig::row_a(2000, 1);
        let beta = BetaStats { beta_xi: 0.015, beta_mu: 0.007 };
        let a = predicted_times(&TimeInputs::new(&data, &model, eta), &beta, TheoryConstants::default()).unwrap();
        let b = predicted_times(&TimeInputs::new(&data, &model, c * eta), &beta, TheoryConstants::default()).unwrap();
        for ((_, x), (_, y)) in a.ordered().into_iter().zip(b.ordered()) {
            if let (Some(x), Some(y)) = (x, y) {
                prop_assert!((x / c - y).abs() <= 1e-12 * y.abs());
            }
        }
    }

    #[test]
    fn logistic_kernel_against_log1p(margin in -50.0f64..50.0) {
        let reference = (-margin).exp().ln_1p();
        prop_assert!((logistic_loss(margin) - reference).abs() <= 1e-14 * reference);
    }

    #[test]
    fn signgd_moves_each_entry_by_zero_or_eta(seed in 0u64..1000) {
        let eta = 1e-3;
        let ds = generate_dataset(&small_data(seed, 2)).unwrap();
        let params = init_params(&small_model(seed, 2)).unwrap();
        let head = Head::fixed(2);
        let caches = forward_all(&params, &head, &ds.samples).unwrap();
        let grads = gradients(&params, &head, false, &ds.samples, &caches).unwrap();
        let mut next = params.clone();
        apply_step(&OptimizerSpec::signgd(eta), &mut OptimizerState::default(), &mut next, None, &grads);
        for (a, b) in params.tensors().iter().zip(next.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let step = (y - x).abs();
                prop_assert!(step == 0.0 || (step - eta).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn snapshots_are_pure(seed in 0u64..1000) {
        let ds = generate_dataset(&small_data(seed, 2)).unwrap();
        let params = init_params(&small_model(seed, 2)).unwrap();
        let head = Head::fixed(2);
        let before = (params.clone(), ds.clone());
        let caches = forward_all(&params, &head, &ds.samples).unwrap();
        let a = snapshot(&params, &head, &ds, 0.0, &caches).unwrap();
        let b = snapshot(&params, &head, &ds, 0.0, &caches).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(before, (params, ds));
    }
}

#[test]
fn noise_norm_concentration() {
    // 1000 independent patches, 3 standard errors.
    let c = DataConfig { d: 4000, s: 40, n: 1000, context_len: 2, sigma_p: 0.3, orthogonal: true, seed: 11 };
    let norms = noise_norm_stats(&generate_dataset(&c).unwrap());
    let l1: Vec<f64> = norms.iter().map(|n| n.l1).collect();
    let l2: Vec<f64> = norms.iter().map(|n| n.l2sq).collect();
    let check = |xs: &[f64], want: f64| {
        let m = signlab::stats::mean(xs);
        let se = signlab::stats::std_error(xs);
        assert!((m - want).abs() <= 3.0 * se, "mean {m} vs {want} (se {se})");
    };
    let s = c.s as f64;
    check(&l1, (2.0 / std::f64::consts::PI).sqrt() * c.sigma_p * s);
    check(&l2, c.sigma_p * c.sigma_p * s);
}

#[test]
fn labels_are_balanced() {
    let c = DataConfig { d: 50, s: 2, n: 10_000, context_len: 2, sigma_p: 1.0, orthogonal: true, seed: 5 };
    let ds = generate_dataset(&c).unwrap();
    let pos = ds.samples.iter().filter(|s| s.y == 1).count() as f64;
    let n = c.n as f64;
    assert!((pos - n / 2.0).abs() <= 4.0 * n.sqrt(), "{pos} positives");
}

#[test]
fn detector_is_idempotent_on_a_real_trace() {
    let mut config = RunConfig::row_a(400, 3);
    config.iters = 120;
    let out = signlab::harness::pipeline::run(&config, None).unwrap();
    let th = Thresholds::default();
    let a = detect_transitions(&out.trace.main, &th).unwrap();
    let b = detect_transitions(&out.trace.main, &th).unwrap();
    assert_eq!(a, b);
}

#[test]
fn increment_law_holds_with_disjoint_supports() {
    // Tiny sparse regime where supports are disjoint: every inner-product
    // increment is 0, eta ||mu|| or eta ||xi_i||_1 (value noise: twice that).
    let mut config = RunConfig::row_a(2000, 7);
    config.n = 4;
    config.s = 5;
    config.sigma_p = 2.0 / 5f64.sqrt();
    config.iters = 30;
    config.probe.dense_until = 30;
    config.probe.test_every = 0;
    let out = signlab::harness::pipeline::run(&config, None).unwrap();
    assert!(out.trace.main.context.supports_disjoint);
    let audit = signlab::probe::increment_audit(&out.trace.main);
    assert!(audit.skipped.is_none());
    assert!(audit.flags.is_empty(), "{} flags, first {:?}", audit.flags.len(), audit.flags.first());
}

#[test]
fn beta_stats_are_positive_at_random_init() {
    let ds = generate_dataset(&small_data(1, 2)).unwrap();
    let params = init_params(&small_model(1, 2)).unwrap();
    let b = beta_stats(&params, &ds);
    assert!(b.beta_xi > 0.0 && b.beta_mu > 0.0);
}
