mod common;

use common::{short_corpus, tiny_train_config};
use xis2::checkpoint::{self, GENERATOR_MAGIC};
use xis2::dataio::CorpusItem;
use xis2::frontend::G2PTable;
use xis2::generator::Generator;
use xis2::losses::LossReport;
use xis2::numerics::{ParamStore, Tensor};
use xis2::trainer::{lr_schedule, TrainConfig, Trainer, CHECKPOINT_DIR, GENERATOR_FILE, LOG_FILE};
use xis2::Error;

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(cfg, G2PTable::builtin()).unwrap()
}

fn run(cfg: TrainConfig, corpus: &[CorpusItem], out: &std::path::Path) -> (Trainer, Vec<LossReport>) {
    let mut t = trainer(cfg);
    let summary = t.train(corpus, out, |_, _| Ok(())).unwrap();
    (t, summary.reports)
}

#[test]
fn one_epoch_of_four_items_at_batch_two_is_two_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..tiny_train_config()
    };
    let (t, reports) = run(cfg, &short_corpus(4, 1), dir.path());
    assert_eq!(t.step(), 2);
    assert_eq!(reports.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2]);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);

    // a ragged last batch still counts as a step
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..tiny_train_config()
    };
    let (t, _) = run(cfg, &short_corpus(4, 1), &dir.path().join("ragged"));
    assert_eq!(t.step(), 4);
}

#[test]
fn every_epoch_visits_every_item_once() {
    let t = trainer(TrainConfig {
        batch_size: 3,
        seed: 5,
        ..tiny_train_config()
    });
    for epoch in 0..3u64 {
        let mut seen: Vec<usize> = (1..=4).flat_map(|s| t.batch_indices(10, epoch * 4 + s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>(), "epoch {epoch}");
    }
}

#[test]
fn reports_follow_the_schedule_and_recombine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        max_steps: 3,
        batch_size: 2,
        ..tiny_train_config()
    };
    let (_, reports) = run(cfg.clone(), &short_corpus(4, 2), dir.path());
    for r in &reports {
        let lr = lr_schedule(r.step, cfg.warmup_steps, cfg.generator.d_model, cfg.base_lr).unwrap();
        assert_eq!(r.lr, lr);
        let w = &cfg.weights;
        let total = w.lambda[0] * r.adv_g + w.lambda[1] * r.acoustic(w) + w.lambda[2] * r.feature;
        assert!((r.total_g - total).abs() < 1e-9);
        assert_eq!(r.total_d, r.adv_d);
        for v in [r.adv_g, r.adv_d, r.mel, r.pitch, r.vuv, r.dur, r.feature] {
            assert!(v.is_finite() && v > 0.0, "{r:?}");
        }
    }
}

#[test]
fn ablation_ladder_zeroes_exactly_the_adversarial_terms() {
    let corpus = short_corpus(4, 3);
    for (use_sd, use_dd) in [(false, false), (true, false), (false, true), (true, true)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            use_sd,
            use_dd,
            max_steps: 2,
            batch_size: 2,
            ..tiny_train_config()
        };
        let (t, reports) = run(cfg, &corpus, dir.path());
        let gan = use_sd || use_dd;
        assert_eq!(t.discriminator().is_some(), gan);
        for r in &reports {
            for v in [r.adv_g, r.adv_d, r.feature, r.total_d] {
                assert_eq!(v > 0.0, gan, "sd {use_sd} dd {use_dd}: {r:?}");
                assert!(v >= 0.0);
            }
            assert!(r.mel > 0.0 && r.dur > 0.0);
        }
    }
}

#[test]
fn one_step_moves_every_parameter_that_receives_gradient() {
    let corpus = short_corpus(2, 4);
    let mut t = trainer(TrainConfig {
        batch_size: 2,
        ..tiny_train_config()
    });
    let g_before = t.generator().1.clone();
    let d_before = t.discriminator().unwrap().1.clone();
    let batch: Vec<&CorpusItem> = corpus.iter().collect();
    t.train_step(&batch).unwrap();

    let used: std::collections::BTreeSet<usize> = batch
        .iter()
        .flat_map(|it| xis2::frontend::g2p_expand(&it.score, t.table()).unwrap().phoneme_ids)
        .collect();
    let (_, g_after) = t.generator();
    for id in g_before.ids() {
        let name = g_before.name(id);
        let (a, b) = (g_before.get(id), g_after.get(id));
        if name == "embed.phoneme" {
            let width = a.shape()[1];
            for row in 0..a.shape()[0] {
                let moved = a.data()[row * width..(row + 1) * width] != b.data()[row * width..(row + 1) * width];
                assert_eq!(moved, used.contains(&row), "phoneme row {row}");
            }
        } else if !name.starts_with("embed.") {
            assert_ne!(a, b, "{name} did not move");
        }
    }
    let (_, d_after) = t.discriminator().unwrap();
    for id in d_before.ids() {
        assert_ne!(d_before.get(id), d_after.get(id), "{} did not move", d_before.name(id));
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let corpus = short_corpus(4, 5);
    let cfg = TrainConfig {
        max_steps: 4,
        batch_size: 2,
        grad_clip: 0.5,
        ..tiny_train_config()
    };
    let (a, ra) = run(cfg.clone(), &corpus, tempfile::tempdir().unwrap().path());
    let (b, rb) = run(cfg.clone(), &corpus, tempfile::tempdir().unwrap().path());
    assert_eq!(ra, rb);
    assert_eq!(a.generator().1.fingerprint(), b.generator().1.fingerprint());
    assert_eq!(a.discriminator().unwrap().1.fingerprint(), b.discriminator().unwrap().1.fingerprint());

    let (c, _) = run(TrainConfig { seed: 1, ..cfg }, &corpus, tempfile::tempdir().unwrap().path());
    assert_ne!(a.generator().1.fingerprint(), c.generator().1.fingerprint());
}

#[test]
fn resumed_run_matches_uninterrupted_run_over_fifty_steps() {
    let corpus = short_corpus(6, 6);
    let cfg = TrainConfig {
        max_steps: 70,
        batch_size: 2,
        checkpoint_every: 20,
        ..tiny_train_config()
    };
    let whole = tempfile::tempdir().unwrap();
    let (full, reports) = run(cfg.clone(), &corpus, whole.path());

    let split = tempfile::tempdir().unwrap();
    let (_, first) = run(TrainConfig { max_steps: 20, ..cfg.clone() }, &corpus, split.path());
    assert_eq!(first[..], reports[..20]);
    let (resumed, rest) = run(TrainConfig { resume: true, ..cfg }, &corpus, split.path());
    assert_eq!(rest.len(), 50);
    assert_eq!(rest[..], reports[20..]);
    assert_eq!(resumed.generator().1.fingerprint(), full.generator().1.fingerprint());
    assert_eq!(
        resumed.discriminator().unwrap().1.fingerprint(),
        full.discriminator().unwrap().1.fingerprint()
    );
    let log = std::fs::read_to_string(split.path().join(LOG_FILE)).unwrap();
    assert_eq!(log, std::fs::read_to_string(whole.path().join(LOG_FILE)).unwrap());
}

#[test]
fn saved_state_round_trips_bit_exactly() {
    let corpus = short_corpus(2, 7);
    let dir = tempfile::tempdir().unwrap();
    let (t, _) = run(TrainConfig { max_steps: 2, batch_size: 2, ..tiny_train_config() }, &corpus, dir.path());
    let mut u = trainer(TrainConfig { max_steps: 2, batch_size: 2, seed: 99, ..tiny_train_config() });
    u.load_state(&dir.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(u.step(), 2);
    assert_eq!(u.generator().1.fingerprint(), t.generator().1.fingerprint());
    assert_eq!(u.discriminator().unwrap().1.fingerprint(), t.discriminator().unwrap().1.fingerprint());
}

#[test]
fn generator_checkpoints_load_across_the_ablation_ladder() {
    let corpus = short_corpus(2, 8);
    let dir = tempfile::tempdir().unwrap();
    let plain = TrainConfig { use_sd: false, use_dd: false, max_steps: 1, batch_size: 2, ..tiny_train_config() };
    run(plain, &corpus, dir.path());
    let ckpt = dir.path().join(CHECKPOINT_DIR).join(GENERATOR_FILE);

    let full = tiny_train_config();
    let mut store = ParamStore::<f32>::new();
    Generator::init(&full.generator_config(), &mut store, &mut common::rng(0)).unwrap();
    checkpoint::load(&ckpt, GENERATOR_MAGIC, &mut store).unwrap();

    // plain FFT blocks lack the conv units, so the architectures differ
    let fft = TrainConfig { use_convfft: false, ..tiny_train_config() };
    let mut store = ParamStore::<f32>::new();
    Generator::init(&fft.generator_config(), &mut store, &mut common::rng(0)).unwrap();
    assert!(checkpoint::load(&ckpt, GENERATOR_MAGIC, &mut store).is_err());
}

#[test]
fn divergence_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let good = short_corpus(2, 9);
    let cfg = TrainConfig { max_steps: 2, batch_size: 2, ..tiny_train_config() };
    run(cfg.clone(), &good, dir.path());
    let ckpt = dir.path().join(CHECKPOINT_DIR).join(GENERATOR_FILE);
    let saved = std::fs::read(&ckpt).unwrap();

    // finite targets whose squared error overflows single precision
    let mut bad = good.clone();
    let mel = &bad[0].target.mel;
    bad[0].target.mel = Tensor::new(mel.shape().to_vec(), vec![3e38f32; mel.numel()]).unwrap();
    let mut t = trainer(TrainConfig { resume: true, max_steps: 4, ..cfg });
    let err = t.train(&bad, dir.path(), |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
    assert_eq!(std::fs::read(&ckpt).unwrap(), saved);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let err = TrainConfig::from_toml("batch_sise = 2\n").unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("batch_sise") && m.contains("batch_size")), "{err}");
    assert!(TrainConfig::from_toml("[generator]\nd_modle = 3\n").is_err());
    let cfg = TrainConfig::from_toml("epochs = 0\n").unwrap();
    assert!(cfg.validate().is_err());
    let back = TrainConfig::from_toml(&tiny_train_config().to_toml()).unwrap();
    assert_eq!(back, tiny_train_config());
    assert!(Trainer::new(TrainConfig { batch_size: 0, ..tiny_train_config() }, G2PTable::builtin()).is_err());
}
