mod common;

use numgrad::{Adam, AdamConfig, Tape};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use planner::citysynth::{generate_dataset, Dataset};
use planner::config::RunConfig;
use planner::gridgen::{train_grid_stage, GridExample, GridGenConfig, GridTraining, HeadMode};
use planner::pipeline::{self, PlannerModel};
use planner::zonedisc::{best_permutation_accuracy, default_alpha, discover_zones, fit_topics, DEFAULT_BETA};
use planner::zonegan::{make_batch, train_zone_gan, GanTraining, ZoneExample, ZoneGan, ZoneGanConfig};
use planner::Error;

fn tiny() -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::default();
    cfg.k = 64;
    cfg.n = 5;
    cfg.m = 2;
    let ds = generate_dataset(cfg.seed, cfg.k, cfg.n, cfg.m).unwrap();
    (cfg, ds)
}

fn gan_config(n: usize, m: usize) -> ZoneGanConfig {
    ZoneGanConfig {
        n,
        m,
        cond_width: 24,
        noise_dim: 16,
        hidden: 128,
        lambda: 1.0,
        non_saturating: false,
        augment: true,
    }
}

/// Random conditions paired with zone plans from the tiny dataset.
fn zone_examples(ds: &Dataset, cfg: &RunConfig) -> Vec<ZoneExample> {
    let (_, zones) = pipeline::discover_dataset_zones(ds, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    zones
        .into_iter()
        .map(|plan| ZoneExample {
            z: (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            plan,
        })
        .collect()
}

#[test]
fn planted_recovery_holds_across_seeds() {
    for seed in [1, 2, 3] {
        let (corpus, layout) = common::planted_corpus(10, 300, seed);
        let docs = corpus.documents().len();
        let state = fit_topics(corpus, 2, default_alpha(2), DEFAULT_BETA, 150, seed + 100).unwrap();
        assert!(state.is_consistent());
        let acc = best_permutation_accuracy(&vec![layout; docs], &discover_zones(&state, 10).unwrap(), 2);
        assert!(acc >= 0.9, "seed {seed}: {acc}");
    }
}

#[test]
fn tiny_gan_learns_the_label_marginals() {
    let (cfg, ds) = tiny();
    let examples = zone_examples(&ds, &cfg);
    let run = train_zone_gan(
        &examples,
        gan_config(5, 2),
        &GanTraining {
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            seed: 9,
        },
    )
    .unwrap();
    let first = &run.epochs[1];
    assert!(first.mean_real_score > first.mean_fake_score, "{first:?}");
    let (start, end) = (run.epochs[0].label_kl, run.epochs.last().unwrap().label_kl);
    assert!(end < start, "label KL {start} -> {end}");
    assert_eq!(run.steps.len(), 40 * 4);
    assert!(run.steps.iter().all(|s| s.generator_loss.is_finite() && s.discriminator_loss.is_finite()));
    assert!(run.steps.iter().all(|s| s.discriminator_loss <= 0.0 && s.kl >= 0.0));
}

#[test]
fn gan_training_is_deterministic() {
    let (cfg, ds) = tiny();
    let examples = zone_examples(&ds, &cfg);
    let opts = GanTraining {
        epochs: 3,
        batch_size: 16,
        lr: 2e-4,
        seed: 4,
    };
    let a = train_zone_gan(&examples, gan_config(5, 2), &opts).unwrap();
    let b = train_zone_gan(&examples, gan_config(5, 2), &opts).unwrap();
    assert_eq!(a.model.generator.fingerprint(), b.model.generator.fingerprint());
    assert_eq!(a.model.discriminator.fingerprint(), b.model.discriminator.fingerprint());
    assert_eq!(a.steps, b.steps);
}

#[test]
fn each_player_step_leaves_the_other_untouched() {
    let (cfg, ds) = tiny();
    let examples = zone_examples(&ds, &cfg);
    let mut gan = ZoneGan::new(gan_config(5, 2), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = make_batch(&gan, &examples, &(0..16).collect::<Vec<_>>(), &mut rng).unwrap();
    let (g0, d0) = (gan.generator.fingerprint(), gan.discriminator.fingerprint());

    let fake = gan.sample_plans(&batch);
    let mut tape = Tape::new();
    let dv = gan.discriminator.bind(&mut tape);
    let ld = gan.discriminator_loss(&mut tape, &dv, &batch, &fake);
    let neg = tape.scale(ld, -1.0);
    let grads = tape.backward(neg).unwrap();
    gan.discriminator.accumulate(&grads, &dv);
    Adam::new(AdamConfig::with_lr(1e-3), &gan.discriminator).step(&mut gan.discriminator).unwrap();
    assert_eq!(gan.generator.fingerprint(), g0);
    let d1 = gan.discriminator.fingerprint();
    assert_ne!(d1, d0);

    let mut tape = Tape::new();
    let gv = gan.generator.bind(&mut tape);
    let frozen = gan.discriminator.bind_frozen(&mut tape);
    let (lg, _) = gan.generator_loss(&mut tape, &gv, &frozen, &batch);
    let grads = tape.backward(lg).unwrap();
    gan.generator.accumulate(&grads, &gv);
    Adam::new(AdamConfig::with_lr(1e-3), &gan.generator).step(&mut gan.generator).unwrap();
    assert_eq!(gan.discriminator.fingerprint(), d1);
    assert_ne!(gan.generator.fingerprint(), g0);
}

#[test]
fn tiny_grid_stage_halves_its_loss() {
    let (cfg, ds) = tiny();
    let (_, zones) = pipeline::discover_dataset_zones(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let examples: Vec<GridExample> = ds
        .train()
        .map(|s| {
            let z: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            GridExample::new(z, &zones[s.index], cfg.m, &s.configuration).unwrap()
        })
        .collect();
    let config = GridGenConfig {
        n: 5,
        m: 2,
        c: 20,
        width: 24,
        heads: 4,
        head_mode: HeadMode::Split,
        attention: true,
        train_w_a: true,
    };
    let run = train_grid_stage(
        &examples,
        config,
        &GridTraining {
            epochs: 50,
            batch_size: 16,
            lr: 1e-2,
            seed: 2,
        },
    )
    .unwrap();
    assert_eq!(run.history.len(), 51);
    let (start, end) = (run.history[0], *run.history.last().unwrap());
    assert!(end <= 0.5 * start, "L_S {start} -> {end}");
}

#[test]
fn full_head_mode_trains_and_round_trips() {
    let (mut cfg, ds) = tiny();
    cfg.head_mode = HeadMode::Full;
    cfg.epochs_encoder = 2;
    cfg.epochs_gan = 2;
    cfg.epochs_grid = 2;
    let (_, zones) = pipeline::discover_dataset_zones(&ds, &cfg).unwrap();
    let (model, _) = pipeline::train(&ds, &zones, &cfg).unwrap();
    assert_eq!(model.grid.params.by_name("attention.w_t").unwrap().value.shape(), &[96, 24]);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = PlannerModel::load(dir.path(), &cfg, ds.n).unwrap();
    assert!(numgrad::checkpoint::encode(&back.grid.params) == numgrad::checkpoint::encode(&model.grid.params));
    let mut split = cfg.clone();
    split.head_mode = HeadMode::Split;
    assert!(PlannerModel::load(dir.path(), &split, ds.n).is_err());
}

#[test]
fn untrained_and_missing_stages_are_reported() {
    let (cfg, ds) = tiny();
    let base = PlannerModel::untrained(&cfg, ds.n).unwrap();
    let graph = ds.samples[0].context_graph().unwrap();
    assert!(matches!(base.generate(&graph, ds.samples[0].instruction, 0), Err(Error::Untrained(_))));
    assert!(base.generate_unchecked(&graph, ds.samples[0].instruction, 0).is_ok());
    assert!(matches!(base.save(std::path::Path::new("unused")), Err(Error::Untrained(_))));

    let dir = tempfile::tempdir().unwrap();
    match PlannerModel::load(dir.path(), &cfg, ds.n) {
        Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "encoder"),
        other => panic!("expected a missing stage, got {:?}", other.map(|_| ())),
    }
    match pipeline::load_zones(dir.path(), ds.len(), ds.n, cfg.m) {
        Err(Error::MissingStage { .. }) => {}
        other => panic!("expected a missing stage, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn mismatched_dataset_is_rejected() {
    let (mut cfg, ds) = tiny();
    let (_, zones) = pipeline::discover_dataset_zones(&ds, &cfg).unwrap();
    cfg.m = 3;
    assert!(matches!(pipeline::train(&ds, &zones, &cfg), Err(Error::Invalid { .. })));
}
