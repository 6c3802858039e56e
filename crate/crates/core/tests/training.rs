use featgen::data::{make_synthetic, FeatureDataset, SynthSpec};
use featgen::gan_train::{synthesize_features, train, TrainConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> FeatureDataset {
    make_synthetic(&SynthSpec::new(3, 2, 6, 4, 10)).unwrap()
}

fn quick(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.hidden_g = 12;
    cfg.hidden_d = Some(12);
    cfg.critic_steps = 2;
    cfg.learn_rate = 1e-3;
    cfg.cls.epochs = 3;
    cfg
}

#[test]
fn one_log_row_per_generator_step() {
    let ds = small();
    for variant in Variant::ALL {
        let mut cfg = quick(variant);
        cfg.critic_warmup = 7;
        let out = train(&cfg, &ds, None).unwrap();
        // 30 training rows in batches of 8
        assert_eq!(out.log.len(), 2 * 4, "{variant}");
        assert!(out.log.iter().all(|r| [r.loss_d, r.loss_g, r.loss_cls, r.gp].iter().all(|v| v.is_finite())));
        assert_eq!(out.discriminator.is_some(), variant != Variant::FGmmn);
        assert_eq!(out.classifier.is_some(), variant == Variant::FClsWgan);
    }
}

#[test]
fn same_seed_same_run() {
    let ds = small();
    let cfg = quick(Variant::FClsWgan);
    let a = train(&cfg, &ds, None).unwrap();
    let b = train(&cfg, &ds, None).unwrap();
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.log, b.log);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(train(&other, &ds, None).unwrap().generator, a.generator);
}

#[test]
fn zero_beta_follows_the_wgan_trajectory() {
    let ds = small();
    let mut cls = quick(Variant::FClsWgan);
    cls.beta_cls = 0.0;
    let wgan = quick(Variant::FWgan);
    let a = train(&cls, &ds, None).unwrap();
    let b = train(&wgan, &ds, None).unwrap();
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.discriminator, b.discriminator);
}

#[test]
fn warmup_trains_the_critic_first() {
    let ds = small();
    let plain = quick(Variant::FWgan);
    let mut warm = plain.clone();
    warm.critic_warmup = 20;
    let a = train(&plain, &ds, None).unwrap();
    let b = train(&warm, &ds, None).unwrap();
    assert_ne!(a.discriminator, b.discriminator);
    assert_eq!(a.log.len(), b.log.len());

    // nothing to warm up for without generator steps
    let mut idle = warm.clone();
    idle.epochs = 0;
    let mut bare = plain.clone();
    bare.epochs = 0;
    assert_eq!(train(&idle, &ds, None).unwrap().discriminator, train(&bare, &ds, None).unwrap().discriminator);
}

#[test]
fn synthesized_rows_are_non_negative_and_grouped() {
    let ds = small();
    let out = train(&quick(Variant::FGan), &ds, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let syn = synthesize_features(&out.generator, ds.class_embeddings(), ds.unseen_ids(), 5, &mut rng).unwrap();
    assert_eq!(syn.features.dim(), (10, 6));
    assert!(syn.features.iter().all(|v| *v >= 0.0));
    let want: Vec<u32> = ds.unseen_ids().iter().flat_map(|&c| [c; 5]).collect();
    assert_eq!(syn.labels, want);
}

#[test]
fn bad_config_is_rejected_before_training() {
    let ds = small();
    let mut cfg = quick(Variant::FWgan);
    cfg.lambda_gp = -1.0;
    assert!(train(&cfg, &ds, None).is_err());
}
