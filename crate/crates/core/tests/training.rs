mod support;

use msreid_core::clustering::{cluster_groups, divide_groups, state_from_labels};
use msreid_core::stage1::run_stage1;
use msreid_core::stage2::{mss_hinge, run_stage2, stage2_loss};
use msreid_core::stage3::{run_stage3, text_guided_loss};
use msreid_core::synthgen::{default_specs, generate_dataset};
use msreid_core::{
    AblationFlags, ChmMode, ClusterConfig, Dims, Group, ImageEncoder, ImageEncoderDims, InstanceMode, OfflineTextBank,
    Stage1Config, Stage2Config, Stage3Config, TextEncoder, TextState, TrainRecord,
};
use proptest::prelude::*;
use support::fixtures::{rng, unit_vec, Toy};

const CLUSTERING: ClusterConfig = ClusterConfig { eps: 0.2, min_samples: 3 };

fn small_world(seed: u64, scenario_embedding: bool) -> (Vec<TrainRecord>, ImageEncoder) {
    let dataset = generate_dataset(&default_specs(6, 4, 0.05), Dims::default(), seed).unwrap();
    let dims = ImageEncoderDims { input_dim: 48, hidden_dim: 24, output_dim: 24, num_scenarios: 3 };
    let encoder = ImageEncoder::init(dims, seed + 1, scenario_embedding).unwrap();
    let train = dataset.train_records(1.0);
    let (records, _) = divide_groups(&train, &dataset.specs, &encoder, seed + 2).unwrap();
    (records, encoder)
}

fn stage1_config() -> Stage1Config {
    Stage1Config { epochs: 3, batch_size: 8, temperature: 0.05, lr: 2e-3, warmup_epochs: 2, seed: 17 }
}

fn stage3_config() -> Stage3Config {
    let s1 = stage1_config();
    Stage3Config {
        epochs: s1.epochs,
        batch_size: s1.batch_size,
        temperature: s1.temperature,
        lr: s1.lr,
        warmup_epochs: s1.warmup_epochs,
        seed: s1.seed,
        k: 3,
        ..Stage3Config::default()
    }
}

#[test]
fn joint_stage_with_every_extra_off_reproduces_homogeneous_training() {
    let (records, encoder) = small_world(3, true);
    let s1 = run_stage1(&records, encoder.clone(), &stage1_config(), CLUSTERING, &mut |_, _| {}).unwrap();
    let flags = AblationFlags { scenario_embedding: true, mss: false, dru: false, chm: ChmMode::Off, instance: InstanceMode::Off };
    let cfg = Stage3Config { lambda_tgc: 0.0, ..stage3_config() };
    let empty = OfflineTextBank { cluster_reps: Default::default(), instance_reps: Default::default() };
    let s3 = run_stage3(&records, encoder, &empty, &cfg, CLUSTERING, flags, &mut |_, _, _| {}).unwrap();
    assert_eq!(s1.history.len(), s3.history.len());
    for (a, b) in s1.history.iter().zip(&s3.history) {
        assert!(a.loss > 0.0);
        assert_eq!(a.loss.to_bits(), b.hc.to_bits(), "epoch {}", a.epoch);
        assert_eq!(b.total.to_bits(), b.hc.to_bits());
    }
    assert_eq!(s1.encoder.snapshot(), s3.encoder.snapshot());
}

#[test]
fn full_chain_keeps_encoders_frozen_and_losses_additive() {
    let (records, encoder) = small_world(5, true);
    let s1 = run_stage1(&records, encoder.clone(), &stage1_config(), CLUSTERING, &mut |_, _| {}).unwrap();
    let reps = encoder.encode_all(&records).unwrap();
    let state = state_from_labels(&records, &reps, &s1.state.record_labels).unwrap();
    let s2cfg = Stage2Config { epochs: 2, batch_size: 16, token_dim: 6, lr: 0.05, seed: 4, ..Stage2Config::default() };
    let text = TextEncoder::init(s2cfg.num_tokens, s2cfg.token_dim, 24, 8).unwrap();
    let (image_before, text_before) = (encoder.snapshot(), format!("{text:?}"));
    let s2 = run_stage2(&records, &state, &encoder, &text, &s2cfg).unwrap();
    assert_eq!(encoder.snapshot(), image_before);
    assert_eq!(format!("{text:?}"), text_before);
    assert_eq!(s2.history.len(), 2);

    // instance reps start equal to their cluster's rep
    assert_eq!(s2.bank.cluster_reps.len(), state.cluster_keys().len());
    for (i, r) in records.iter().enumerate() {
        match state.key_of(&records, i) {
            Some(key) => assert_eq!(s2.bank.instance_reps.get(&r.record_id), Some(&s2.bank.cluster_reps[&key])),
            None => assert!(!s2.bank.instance_reps.contains_key(&r.record_id)),
        }
    }

    let cfg = Stage3Config { lambda_tgc: 0.7, ..stage3_config() };
    let flags = AblationFlags::variant(7).unwrap();
    let mut seen = 0;
    let out = run_stage3(&records, s1.encoder, &s2.bank, &cfg, CLUSTERING, flags, &mut |e, _, pairs| {
        seen += 1;
        assert_eq!(pairs.retained(), e.retained_pairs);
    })
    .unwrap();
    assert_eq!(seen, 3);
    for e in &out.history {
        let sum = e.hc + e.chc + e.ihc + cfg.lambda_tgc * e.tgc;
        assert!((e.total - sum).abs() <= 1e-12, "epoch {}: {} vs {sum}", e.epoch, e.total);
        assert!(e.hc > 0.0 && e.tgc > 0.0);
    }
    for v in out.text.instance.iter().flatten() {
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn joint_loss_is_additive_on_random_batches() {
    let gap = support::additivity_gap(50);
    assert!(gap <= 1e-12, "{gap:e}");
}

#[test]
fn identical_scenario_means_activate_every_hinge() {
    for s in 2..=5usize {
        for kappa in [0.5, 1.0, 2.0, 3.0] {
            assert_eq!(support::mss_identical_means(s, kappa, s as u64), (s * (s - 1)) as f64 * kappa);
        }
    }
}

#[test]
fn identical_prompts_give_the_full_hinge_through_the_text_encoder() {
    // every cluster's prompt is the same, so every scenario mean coincides
    let toy = Toy::new(1);
    let cfg = Stage2Config { num_tokens: 2, token_dim: 3, lambda_mss: 2.0, kappa: 1.0, ..Stage2Config::default() };
    let (text, mut tokens) = toy.text_model(cfg.num_tokens, cfg.token_dim, 1);
    let shared = tokens.tokens(&toy.cluster_keys()[0]).unwrap().to_vec();
    for key in toy.cluster_keys() {
        tokens.tokens_mut(&key).unwrap().clone_from(&shared);
    }
    let l = stage2_loss(&toy.records, &toy.batch, &toy.reps, &toy.labels, &text, &tokens, &cfg).unwrap();
    let s = toy.scenarios;
    assert_eq!(l.mss, (s * (s - 1)) as f64 * cfg.kappa);
    assert_eq!(l.min_mean_dist2, 0.0);
}

proptest! {
    #[test]
    fn hinge_vanishes_exactly_when_scenarios_are_separated(seed in 0u64..500, scale in 0.1f64..2.0, kappa in 0.2f64..2.0) {
        let mut r = rng(seed);
        let means: Vec<Vec<f64>> = (0..3).map(|_| unit_vec(&mut r, 4).iter().map(|x| x * scale).collect()).collect();
        let (loss, grads) = mss_hinge(&means, kappa);
        let separated = (0..3).all(|g| (0..3).all(|h| g == h || msreid_core::numerics::sq_dist(&means[g], &means[h]) >= kappa));
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, separated);
        if separated {
            prop_assert!(grads.iter().flatten().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn clustered_pools_hold_exactly_the_clustered_records(seed in 0u64..4) {
        let (records, encoder) = small_world(seed, seed % 2 == 0);
        let state = cluster_groups(&records, &encoder.encode_all(&records).unwrap(), CLUSTERING).unwrap();
        prop_assert_eq!(state.record_labels.len(), records.len());
        let clustered: usize = state.clustered_pools().iter().map(Vec::len).sum();
        prop_assert_eq!(clustered, state.num_clustered());
    }
}

#[test]
fn equal_text_reps_give_ln2_per_anchor() {
    let mut r = rng(3);
    let records: Vec<TrainRecord> = [Group::A, Group::B]
        .into_iter()
        .enumerate()
        .map(|(i, group)| TrainRecord { record_id: i, scenario: 0, group, raw: unit_vec(&mut r, 5) })
        .collect();
    let dims = ImageEncoderDims { input_dim: 5, hidden_dim: 4, output_dim: 3, num_scenarios: 1 };
    let encoder = ImageEncoder::init(dims, 2, true).unwrap();
    let reps = encoder.encode_all(&records).unwrap();
    let state = state_from_labels(&records, &reps, &[Some(0), Some(0)]).unwrap();
    let t = unit_vec(&mut r, 3);
    let text = TextState { instance: vec![Some(t.clone()), Some(t)], cluster: Default::default() };
    let l = text_guided_loss(&records, &[0, 1], &encoder, &state, &text, 1.0).unwrap();
    assert!((l.tgc - std::f64::consts::LN_2).abs() < 1e-15);
}
