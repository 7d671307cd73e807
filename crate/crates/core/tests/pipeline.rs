use std::path::PathBuf;
use std::sync::OnceLock;

use slid::augment::AugmentPools;
use slid::encoder::EncoderConfig;
use slid::error::Error;
use slid::features::FeatureConfig;
use slid::heads::HeadKind;
use slid::metrics::{compute_eer, open_reader, read_predictions, write_predictions};
use slid::pipeline::*;
use slid::synthkit::*;

struct Fixture {
    dir: PathBuf,
    corpus: Corpus,
    split: CorpusSplit,
    pools: (PathBuf, PathBuf),
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pipeline_fixture");
        let _ = std::fs::remove_dir_all(&dir);
        let spec = SynthSpec {
            n_languages: 5,
            n_unseen_languages: 2,
            n_speakers: 8,
            utts_per_speaker_language: 2,
            languages_per_speaker: (2, 5),
            utterance_seconds: 1.0,
            seed: 4,
            language_seed: 9,
        };
        let corpus = gen_corpus(&spec, dir.join("corpus")).unwrap();
        let split = split_corpus(&corpus.manifest, &corpus.unseen_languages(), &SplitConfig::default(), 2).unwrap();
        let pools = gen_augment_pools(dir.join("aug"), 2, 2, 5).unwrap();
        Fixture { dir, corpus, split, pools }
    })
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        crop_seconds: 0.5,
        features: FeatureConfig {
            mel_bands: 8,
            ..FeatureConfig::default()
        },
        encoder: EncoderConfig {
            input_dim: 8,
            layer_channels: vec![8, 8],
            kernel_sizes: vec![3, 3],
            dilations: vec![1, 2],
            res2_scale: 2,
            se_bottleneck: 4,
            attention_hidden: 4,
            embedding_dim: 6,
        },
        seed: 13,
        ..TrainConfig::default()
    };
    cfg.optim.lr0 = 1e-2;
    cfg.augment.noise_pool = Some(fixture().pools.0.clone());
    cfg.augment.rir_pool = Some(fixture().pools.1.clone());
    cfg
}

fn pools() -> AugmentPools {
    AugmentPools::load(&tiny_config().augment).unwrap()
}

fn trained() -> &'static TrainOutcome {
    static T: OnceLock<TrainOutcome> = OnceLock::new();
    T.get_or_init(|| {
        let f = fixture();
        train_with_pools(&f.split.train, &f.split.val, &tiny_config(), None, &pools()).unwrap()
    })
}

fn scratch(name: &str) -> PathBuf {
    let d = fixture().dir.join(name);
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let ckpt = &trained().best;
    let path = scratch("ckpt").join("model.lidc");
    save_checkpoint(&path, ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(&loaded, ckpt);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = trained().best.to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut at {cut}");
    }
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"RIFF");
    assert!(matches!(Checkpoint::from_bytes(&foreign), Err(Error::CorruptCheckpoint(_))));
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::VersionMismatch { .. })));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(load_checkpoint("/nonexistent/model.lidc"), Err(Error::NotFound(_))));
}

#[test]
fn zero_epochs_returns_the_initial_checkpoint() {
    let f = fixture();
    let init = &trained().last;
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config()
    };
    let out = train_with_pools(&f.split.train, &f.split.val, &cfg, Some(init), &pools()).unwrap();
    assert_eq!(&out.last, init);
    assert!(out.log.is_empty());
}

#[test]
fn identically_seeded_runs_have_identical_logs() {
    let f = fixture();
    let again = train_with_pools(&f.split.train, &f.split.val, &tiny_config(), None, &pools()).unwrap();
    assert_eq!(again.log, trained().log);
    assert_eq!(again.last, trained().last);
}

#[test]
fn training_reduces_the_loss() {
    let log = &trained().log;
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|l| l.train_loss.is_finite() && l.val_micro_accuracy.is_some()));
    let f = fixture();
    let cfg = TrainConfig {
        epochs: 6,
        head: HeadKind::Ce,
        ..tiny_config()
    };
    let out = train_with_pools(&f.split.train, &f.split.val, &cfg, None, &pools()).unwrap();
    assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss, "{:?}", out.log);
}

#[test]
fn unreadable_utterances_are_tolerated_up_to_the_limit() {
    let f = fixture();
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    let mut one_bad = f.split.train.clone();
    one_bad.entries[0].rel_path = PathBuf::from("wav/does_not_exist.wav");
    cfg.max_skip_fraction = 0.5;
    let out = train_with_pools(&one_bad, &f.split.val, &cfg, None, &pools()).unwrap();
    assert_eq!(out.skipped, vec![one_bad.entries[0].utt_id.clone()]);
    cfg.max_skip_fraction = 0.0;
    assert!(matches!(train_with_pools(&one_bad, &f.split.val, &cfg, None, &pools()), Err(Error::Data(_))));
}

#[test]
fn task1_report_agrees_with_its_prediction_file() {
    let f = fixture();
    let report = run_task1(&f.split.test, &trained().best).unwrap();
    assert_eq!(report.predictions.len(), f.split.test.len());
    let path = scratch("task1").join("pred.txt");
    write_predictions(std::fs::File::create(&path).unwrap(), &report.predictions).unwrap();
    let back = read_predictions(open_reader(&path).unwrap()).unwrap();
    let truth: std::collections::BTreeMap<_, _> =
        f.split.test.entries.iter().map(|e| (e.utt_id.clone(), e.language.clone())).collect();
    let correct = back.iter().filter(|(u, p)| &truth[u] == p).count();
    assert_eq!(correct as f64 / back.len() as f64, report.micro_accuracy);
    assert!((0.0..=1.0).contains(&report.macro_accuracy));
}

#[test]
fn task1_rejects_languages_outside_the_inventory() {
    let f = fixture();
    assert!(matches!(run_task1(&f.split.unseen, &trained().best), Err(Error::UnknownLabel(_))));
}

#[test]
fn task2_eer_matches_recomputation_from_scores() {
    let f = fixture();
    let trials = gen_trials(&f.split.unseen, 40, 1).unwrap();
    let pairs: Vec<(String, String)> = trials.key.iter().map(|k| (k.enroll_id.clone(), k.test_id.clone())).collect();
    let r = run_task2_with_checkpoint(&pairs, &trials.enrollment, &f.split.unseen, &trained().best, Some(&trials.key))
        .unwrap();
    assert_eq!(r.scores.len(), 40);
    assert!(r.scores.iter().all(|s| (-1.0..=1.0).contains(&s.score)));
    assert_eq!(r.eer.unwrap(), compute_eer(&r.scores).unwrap());
    let table = extract_embeddings(&f.split.unseen, &trained().best).unwrap();
    let unkeyed = run_task2(&pairs, &trials.enrollment, &table, None).unwrap();
    let a: Vec<f64> = unkeyed.scores.iter().map(|s| s.score).collect();
    let b: Vec<f64> = r.scores.iter().map(|s| s.score).collect();
    assert_eq!(a, b);
}

#[test]
fn embeddings_are_deterministic_and_finite() {
    let f = fixture();
    let ckpt = &trained().best;
    let a = extract_embeddings(&f.split.test, ckpt).unwrap();
    let b = extract_embeddings(&f.split.test, ckpt).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), f.split.test.len());
    assert!(a.values().all(|e| e.values.len() == 6 && e.norm().is_finite() && e.norm() > 0.0));
    let path = scratch("embed").join("emb.txt");
    write_embeddings(std::fs::File::create(&path).unwrap(), &a).unwrap();
    assert_eq!(read_embeddings(open_reader(&path).unwrap()).unwrap(), a);
    let empty = f.split.test.filter(|_| false);
    assert!(extract_embeddings(&empty, ckpt).unwrap().is_empty());
}

#[test]
fn corpus_generation_is_byte_deterministic() {
    let f = fixture();
    let spec = SynthSpec {
        n_languages: 5,
        n_unseen_languages: 2,
        n_speakers: 8,
        utts_per_speaker_language: 2,
        languages_per_speaker: (2, 5),
        utterance_seconds: 1.0,
        seed: 4,
        language_seed: 9,
    };
    let again = gen_corpus(&spec, scratch("regen")).unwrap();
    assert_eq!(again.manifest.entries, f.corpus.manifest.entries);
    assert_eq!(f.corpus.unseen_languages().len(), 2);
    for e in &f.corpus.manifest.entries {
        let a = std::fs::read(f.corpus.manifest.path_of(e)).unwrap();
        let b = std::fs::read(again.manifest.path_of(e)).unwrap();
        assert_eq!(a, b, "{}", e.utt_id);
    }
    let per_speaker: usize = f.corpus.plan.speakers.iter().map(|s| s.languages.len() * 2).sum();
    assert_eq!(f.corpus.manifest.len(), per_speaker);
    let reloaded = Manifest::load(f.dir.join("corpus").join("manifest.tsv")).unwrap();
    assert_eq!(reloaded.entries, f.corpus.manifest.entries);
}
