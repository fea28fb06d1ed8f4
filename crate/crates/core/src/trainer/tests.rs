use proptest::prelude::*;

use super::*;
use crate::data::{generate_synthetic_dataset, DatasetSpec, ImageShape};
use crate::losses::LossConfig;

fn tiny_data() -> Vec<ImageSample> {
    generate_synthetic_dataset(&DatasetSpec {
        n_subjects: 4,
        frontal_per_subject: 3,
        profile_per_subject: 2,
        image_size: ImageShape::new(16, 16, 1),
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn tiny_model() -> GeneratorConfig {
    GeneratorConfig {
        image_size: ImageShape::new(16, 16, 1),
        base_channels: 4,
        n_down: 2,
        embedding_dim: 4,
        ..GeneratorConfig::default()
    }
}

fn tiny_config(preset: AblationPreset, max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        max_steps,
        seed: 7,
        ablation_preset: preset,
        checkpoint_every: 4,
        log_every: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

/// Every parameter of every network as raw bits, keyed by name.
fn param_bits<T: Scalar>(state: &ModelState<T>) -> Vec<(String, Vec<u64>)> {
    state
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.data.iter().map(|v| v.as_f64().to_bits()).collect()))
        .collect()
}

fn net_bits<T: Scalar>(params: Vec<(String, &crate::layers::Param<T>)>) -> Vec<Vec<u64>> {
    params
        .into_iter()
        .map(|(_, p)| p.data.iter().map(|v| v.as_f64().to_bits()).collect())
        .collect()
}

fn breakdown_bits(b: &LossBreakdown) -> [u64; 8] {
    [
        b.l_cpl,
        b.l_gan_profile,
        b.l_gan_frontal,
        b.l_l2,
        b.l_perceptual,
        b.total,
        b.d_loss_profile,
        b.d_loss_frontal,
    ]
    .map(f64::to_bits)
}

fn run_steps<T: Scalar>(trainer: &mut Trainer<T>, data: &[ImageSample], n: usize) -> Vec<[u64; 8]> {
    (0..n).map(|_| breakdown_bits(&trainer.step(data).unwrap())).collect()
}

fn determinism<T: Scalar>() {
    let data = tiny_data();
    let mut a = Trainer::<T>::new(&tiny_model(), tiny_config(AblationPreset::Full, 10)).unwrap();
    let mut b = Trainer::<T>::new(&tiny_model(), tiny_config(AblationPreset::Full, 10)).unwrap();
    assert_eq!(run_steps(&mut a, &data, 10), run_steps(&mut b, &data, 10));
    assert_eq!(param_bits(&a.state), param_bits(&b.state));
}

#[test]
fn identical_seeds_give_identical_runs() {
    determinism::<f32>();
    determinism::<f64>();
}

fn resume_equivalence<T: Scalar>() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::<T>::new(&tiny_model(), tiny_config(AblationPreset::Full, 15)).unwrap();
    let expected = run_steps(&mut straight, &data, 15);

    let mut first = Trainer::<T>::new(&tiny_model(), tiny_config(AblationPreset::Full, 15)).unwrap();
    let mut got = run_steps(&mut first, &data, 5);
    let path = first.save(dir.path()).unwrap();
    let mut resumed = Trainer::<T>::resume(&path).unwrap();
    assert_eq!(resumed.state.step, 5);
    got.extend(run_steps(&mut resumed, &data, 10));
    assert_eq!(got, expected);
    assert_eq!(param_bits(&resumed.state), param_bits(&straight.state));
    assert_eq!(resumed.optimizer, straight.optimizer);
}

#[test]
fn resume_matches_uninterrupted_run() {
    resume_equivalence::<f32>();
    resume_equivalence::<f64>();
}

#[test]
fn checkpoint_round_trip_is_idempotent_and_complete() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::<f64>::new(&tiny_model(), tiny_config(AblationPreset::Full, 3)).unwrap();
    run_steps(&mut t, &data, 3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let m1 = save_checkpoint(&t.state, &t.optimizer, &t.config, &a).unwrap();
    let (state, opt, config) = load_checkpoint::<f64>(&a).unwrap();
    assert_eq!(param_bits(&state), param_bits(&t.state));
    assert_eq!(opt, t.optimizer);
    assert_eq!(config, t.config);
    let m2 = save_checkpoint(&state, &opt, &config, &b).unwrap();
    assert_eq!(m1.digest, m2.digest);
    assert_eq!(m1.version, CHECKPOINT_VERSION);

    let mut expected: Vec<String> = t.state.named_params().into_iter().map(|(n, _)| n).collect();
    expected.sort();
    let mut listed: Vec<String> = m1.model_array_names().into_iter().map(String::from).collect();
    listed.sort();
    assert_eq!(listed, expected);
}

fn saved(dir: &Path) -> PathBuf {
    let t = Trainer::<f32>::new(&tiny_model(), tiny_config(AblationPreset::Full, 1)).unwrap();
    let path = dir.join("ckpt");
    save_checkpoint(&t.state, &t.optimizer, &t.config, &path).unwrap();
    path
}

fn edit_manifest(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let file = path.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&file, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn corrupted_payload_is_a_digest_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    let bin = path.join("params.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&bin, bytes).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
}

#[test]
fn foreign_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    edit_manifest(&path, |v| v["version"] = "pfcpgan-ckpt-0".into());
    let err = load_checkpoint::<f32>(&path).unwrap_err();
    assert!(matches!(err, Error::VersionMismatch { .. }), "{err}");
}

#[test]
fn absent_array_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    let mut removed = String::new();
    edit_manifest(&path, |v| {
        let arrays = v["arrays"].as_array_mut().unwrap();
        removed = arrays[0]["name"].as_str().unwrap().to_string();
        arrays.remove(0);
    });
    let err = load_checkpoint::<f32>(&path).unwrap_err();
    assert!(matches!(err, Error::MissingArray(ref n) if *n == removed), "{err}");
}

#[test]
fn precision_mismatch_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved(dir.path());
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn cpl_l2_masks_adversarial_and_perceptual_terms() {
    let data = tiny_data();
    let mut t = Trainer::<f64>::new(&tiny_model(), tiny_config(AblationPreset::CplL2, 3)).unwrap();
    let discs_before = (
        net_bits(t.state.disc_profile.named_params()),
        net_bits(t.state.disc_frontal.named_params()),
    );
    for _ in 0..3 {
        let b = t.step(&data).unwrap();
        assert_eq!((b.l_gan_profile, b.l_gan_frontal, b.l_perceptual), (0.0, 0.0, 0.0));
        assert_eq!((b.d_loss_profile, b.d_loss_frontal), (0.0, 0.0));
        assert_eq!(b.total, b.l_cpl + 0.25 * b.l_l2);
    }
    let discs_after = (
        net_bits(t.state.disc_profile.named_params()),
        net_bits(t.state.disc_frontal.named_params()),
    );
    assert_eq!(discs_before, discs_after);

    let mut t = Trainer::<f64>::new(&tiny_model(), tiny_config(AblationPreset::CplL2Gan, 1)).unwrap();
    let b = t.step(&data).unwrap();
    assert_eq!(b.l_perceptual, 0.0);
    assert!(b.l_gan_profile > 0.0 && b.d_loss_profile > 0.0);
}

#[test]
fn masked_terms_contribute_no_gradient() {
    let data = tiny_data();
    let state = init_model::<f64>(&tiny_model(), 2).unwrap();
    let mut rng = batch_rng(1, 0);
    let batch = sample_pair_batch(&data, 6, &mut rng).unwrap();
    let masked = tiny_config(AblationPreset::CplL2, 1);
    let zeroed = TrainConfig {
        ablation_preset: AblationPreset::Full,
        loss_config: LossConfig {
            lambda_1: 0.0,
            lambda_2: 0.0,
            ..LossConfig::default()
        },
        ..masked.clone()
    };
    let (bm, gm) = generator_objective(&state, &batch, &masked).unwrap();
    let (bz, gz) = generator_objective(&state, &batch, &zeroed).unwrap();
    assert_eq!(bm.total, bz.total);
    for (a, b) in [(&gm.profile, &gz.profile), (&gm.frontal, &gz.frontal)] {
        assert_eq!(net_bits(a.named_params()), net_bits(b.named_params()));
    }
}

#[test]
fn full_objective_uses_default_weights() {
    let data = tiny_data();
    let state = init_model::<f64>(&tiny_model(), 4).unwrap();
    let mut rng = batch_rng(3, 0);
    let batch = sample_pair_batch(&data, 6, &mut rng).unwrap();
    let (b, _) = generator_objective(&state, &batch, &tiny_config(AblationPreset::Full, 1)).unwrap();
    let expected =
        b.l_cpl + (b.l_gan_profile + b.l_gan_frontal) + 0.25 * b.l_perceptual + 0.25 * b.l_l2;
    assert!((b.total - expected).abs() < 1e-12);
    assert!(b.l_perceptual > 0.0 && b.l_gan_frontal > 0.0);
}

#[test]
fn perceptual_network_stays_frozen() {
    let data = tiny_data();
    let mut t = Trainer::<f32>::new(&tiny_model(), tiny_config(AblationPreset::Full, 4)).unwrap();
    let before = net_bits(t.state.perceptual.named_params());
    t.run(&data, None).unwrap();
    assert_eq!(net_bits(t.state.perceptual.named_params()), before);
}

#[test]
fn discriminator_and_generator_updates_are_separate() {
    let data = tiny_data();
    let config = tiny_config(AblationPreset::Full, 1);
    let state0 = init_model::<f64>(&tiny_model(), 9).unwrap();
    let mut rng = batch_rng(config.seed, 0);
    let batch = sample_pair_batch(&data, config.batch_size, &mut rng).unwrap();

    // Discriminator update alone, by hand.
    let mut d_only = state0.clone();
    let mut opt = OptimizerStates::new(&d_only);
    let (profiles, frontals, _) = split_batch(&batch).unwrap();
    let (x, traces) = forward_both(&d_only, &profiles, &frontals).unwrap();
    let (_, gp) = discriminator_grad(&d_only.disc_profile, &x[0], traces[0].output()).unwrap();
    let (_, gf) = discriminator_grad(&d_only.disc_frontal, &x[1], traces[1].output()).unwrap();
    let adam = config.adam();
    adam.step(d_only.disc_profile.params_mut(), &param_refs_disc(&gp), &mut opt.disc_profile);
    adam.step(d_only.disc_frontal.params_mut(), &param_refs_disc(&gf), &mut opt.disc_frontal);
    assert_eq!(
        net_bits(d_only.gen_profile.named_params()),
        net_bits(state0.gen_profile.named_params())
    );
    assert_ne!(
        net_bits(d_only.disc_profile.named_params()),
        net_bits(state0.disc_profile.named_params())
    );

    // The full step leaves the discriminators where the D update put them.
    let mut full = state0.clone();
    let mut opt = OptimizerStates::new(&full);
    train_step(&mut full, &mut opt, &mut FeatureCache::new(), &batch, &config).unwrap();
    for (a, b) in [
        (&full.disc_profile, &d_only.disc_profile),
        (&full.disc_frontal, &d_only.disc_frontal),
    ] {
        assert_eq!(net_bits(a.named_params()), net_bits(b.named_params()));
    }
    assert_ne!(
        net_bits(full.gen_frontal.named_params()),
        net_bits(state0.gen_frontal.named_params())
    );
    assert_eq!(full.step, 1);
}

#[test]
fn zero_steps_returns_the_initial_state() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::<f32>::new(&tiny_model(), tiny_config(AblationPreset::Full, 0)).unwrap();
    let init = param_bits(&t.state);
    let out = t.run(&data, Some(dir.path())).unwrap();
    assert!(out.records.is_empty() && out.checkpoints.is_empty());
    assert_eq!(param_bits(&t.state), init);
}

#[test]
fn run_logs_and_checkpoints_on_schedule() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::<f32>::new(&tiny_model(), tiny_config(AblationPreset::Full, 9)).unwrap();
    let out = t.run(&data, Some(dir.path())).unwrap();
    let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![2, 4, 6, 8, 9]);
    assert!(out.records.iter().all(|r| r.n_genuine == 3 && r.n_impostor == 3));
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["step_000004", "step_000008", "step_000009"]);
    let text = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TRAIN_LOG_HEADER));
    assert_eq!(lines.count(), 5);
}

#[test]
fn unbalanced_batches_are_rejected() {
    let data = tiny_data();
    let mut rng = batch_rng(0, 0);
    let mut batch = sample_pair_batch(&data, 6, &mut rng).unwrap();
    batch.retain(|p| p.is_genuine());
    let mut state = init_model::<f32>(&tiny_model(), 0).unwrap();
    let mut opt = OptimizerStates::new(&state);
    let err = train_step(
        &mut state,
        &mut opt,
        &mut FeatureCache::new(),
        &batch,
        &tiny_config(AblationPreset::Full, 1),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(state.step, 0);
}

#[test]
fn non_finite_loss_aborts_the_step() {
    let data = tiny_data();
    let mut t = Trainer::<f32>::new(&tiny_model(), tiny_config(AblationPreset::CplL2, 3)).unwrap();
    t.state.gen_profile.embed.weight.data[0] = f32::NAN;
    let err = t.run(&data, None).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("step 0")), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { batch_size: 5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { log_every: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!("cpl_l2_gan".parse::<AblationPreset>().unwrap(), AblationPreset::CplL2Gan);
    assert!("gan".parse::<AblationPreset>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn logged_breakdowns_satisfy_the_weighted_sum(seed in 0u64..1000, preset in 0usize..3) {
        let data = tiny_data();
        let config = TrainConfig { seed, ..tiny_config(AblationPreset::ALL[preset], 2) };
        let lc = config.loss_config.clone();
        let mut t = Trainer::<f64>::new(&tiny_model(), config).unwrap();
        for r in t.run(&data, None).unwrap().records {
            let b = r.breakdown;
            prop_assert!(b.all_finite());
            let sum = b.l_cpl
                + lc.lambda_1 * (b.l_gan_profile + b.l_gan_frontal)
                + lc.lambda_2 * b.l_perceptual
                + lc.lambda_3 * b.l_l2;
            prop_assert!((b.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }
}
