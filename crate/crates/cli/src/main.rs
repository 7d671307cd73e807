use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use slid::heads::HeadKind;
use slid::metrics::{
    compute_eer, macro_accuracy, micro_accuracy, open_reader, read_key, read_predictions, read_scores, write_predictions,
    write_scores, Prediction, PredictionSet,
};
use slid::pipeline::{
    extract_embeddings, load_checkpoint, read_embeddings, run_task1, run_task2, save_checkpoint, write_embeddings,
    TrainConfig,
};
use slid::synthkit::{
    gen_augment_pools, gen_corpus, gen_trials, read_enrollment_map, read_trial_list, split_corpus, Manifest,
    SplitConfig, SynthSpec,
};

/// Environment variable holding the number of worker threads.
const WORKERS_ENV: &str = "SLID_WORKERS";

#[derive(Parser)]
#[command(name = "slid", version, about = "Spoken language identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with splits, verification trials and augmentation pools.
    Synth(SynthArgs),
    /// Train an encoder and margin head.
    Train(TrainArgs),
    /// Write one embedding per utterance.
    Embed(EmbedArgs),
    /// Closed-set language classification with micro and macro accuracy.
    Task1(Task1Args),
    /// Enrollment/test verification scoring, with EER when a key is given.
    Task2(Task2Args),
    /// Compute metrics from score or prediction files.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total number of languages, seen and unseen.
    #[arg(long, default_value_t = 10)]
    languages: usize,
    #[arg(long, default_value_t = 3)]
    unseen: usize,
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    utts_per_pair: usize,
    #[arg(long, default_value_t = 2)]
    min_languages_per_speaker: usize,
    #[arg(long, default_value_t = 10)]
    max_languages_per_speaker: usize,
    #[arg(long, default_value_t = 4.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    language_seed: u64,
    /// Verification trials over the unseen languages (0 to skip).
    #[arg(long, default_value_t = 400)]
    trials: usize,
    #[arg(long, default_value_t = 4)]
    noise_files: usize,
    #[arg(long, default_value_t = 4)]
    rir_files: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to fine-tune from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Where to write the selected checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Also keep the final-epoch checkpoint here.
    #[arg(long)]
    out_last: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Task1Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out_pred: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Task2Args {
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    enroll_map: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Manifest locating the audio; required with `--ckpt`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Precomputed embeddings instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out_scores: PathBuf,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score file (`enroll_id test_id score`); needs `--key`.
    #[arg(long, requires = "key")]
    scores: Option<PathBuf>,
    #[arg(long)]
    key: Option<PathBuf>,
    /// Prediction file (`utt_id label`); needs `--manifest` for the truth.
    #[arg(long, requires = "manifest")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{WORKERS_ENV}={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_languages: a.languages,
        n_unseen_languages: a.unseen,
        n_speakers: a.speakers,
        utts_per_speaker_language: a.utts_per_pair,
        languages_per_speaker: (a.min_languages_per_speaker, a.max_languages_per_speaker),
        utterance_seconds: a.seconds,
        seed: a.seed,
        language_seed: a.language_seed,
    };
    let corpus = gen_corpus(&spec, &a.out)?;
    let unseen = corpus.unseen_languages();
    let split = split_corpus(&corpus.manifest, &unseen, &SplitConfig::default(), a.seed)?;
    split.save(a.out.join("splits"))?;
    if a.trials > 0 && !split.unseen.is_empty() {
        gen_trials(&split.unseen, a.trials, a.seed)?.save(a.out.join("trials"))?;
    }
    if a.noise_files + a.rir_files > 0 {
        gen_augment_pools(a.out.join("augment"), a.noise_files, a.rir_files, a.seed)?;
    }
    println!(
        "{} utterances; train {} val {} test {} unseen {}",
        corpus.manifest.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.unseen.len()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(h) = a.head {
        cfg.head = h;
    }
    if let Some(m) = a.margin {
        cfg.margin.margin_m = m;
    }
    if let Some(s) = a.scale {
        cfg.margin.scale_s = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr0 = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let train_set = load_manifest(&a.train_manifest)?;
    let val_set = match &a.val_manifest {
        Some(p) => load_manifest(p)?,
        None => Manifest::new(".", Vec::new()),
    };
    let init = a.init.as_ref().map(load_checkpoint).transpose()?;
    let outcome = slid::pipeline::train(&train_set, &val_set, &cfg, init.as_ref())?;
    for line in &outcome.log {
        println!("{line}");
    }
    save_checkpoint(&a.out, &outcome.best)?;
    if let Some(p) = &a.out_last {
        save_checkpoint(p, &outcome.last)?;
    }
    info!("selected epoch {}; wrote {}", outcome.best_epoch, a.out.display());
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let table = extract_embeddings(&manifest, &ckpt)?;
    write_embeddings(create(&a.out)?, &table)?;
    println!("{} embeddings of dimension {}", table.len(), ckpt.encoder_config.embedding_dim);
    Ok(())
}

fn task1(a: Task1Args) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let report = run_task1(&manifest, &ckpt)?;
    write_predictions(create(&a.out_pred)?, &report.predictions)?;
    let summary = report.summary();
    if let Some(p) = &a.report {
        write_text(p, &summary)?;
    }
    print!("{summary}");
    Ok(())
}

fn task2(a: Task2Args) -> Result<()> {
    let trials = read_trial_list(&a.trials)?;
    let enrollment = read_enrollment_map(&a.enroll_map)?;
    let key = a.key.as_deref().map(|p| read_key(open_reader(p)?)).transpose()?;
    let report = match (&a.ckpt, &a.embeddings) {
        (Some(ckpt), None) => {
            let Some(manifest) = &a.manifest else {
                bail!("--ckpt needs --manifest to locate the audio");
            };
            let manifest = load_manifest(manifest)?;
            slid::pipeline::run_task2_with_checkpoint(&trials, &enrollment, &manifest, &load_checkpoint(ckpt)?, key.as_deref())?
        }
        (None, Some(emb)) => {
            let table = read_embeddings(open_reader(emb)?)?;
            run_task2(&trials, &enrollment, &table, key.as_deref())?
        }
        _ => bail!("give either --ckpt (with --manifest) or --embeddings"),
    };
    write_scores(create(&a.out_scores)?, &report.scores)?;
    let summary = report.summary();
    if let Some(p) = &a.report {
        write_text(p, &summary)?;
    }
    print!("{summary}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut done = false;
    if let (Some(scores), Some(key)) = (&a.scores, &a.key) {
        let scores = read_scores(open_reader(scores)?)?;
        let key = read_key(open_reader(key)?)?;
        let eer = compute_eer(&slid::metrics::attach_labels(&scores, &key)?)?;
        println!("trials {}\neer {:.6}\nthreshold {:.6}", scores.len(), eer.eer, eer.threshold);
        done = true;
    }
    if let (Some(preds), Some(manifest)) = (&a.predictions, &a.manifest) {
        let manifest = load_manifest(manifest)?;
        let truth: BTreeMap<&str, &str> =
            manifest.entries.iter().map(|e| (e.utt_id.as_str(), e.language.as_str())).collect();
        let items = read_predictions(open_reader(preds)?)?
            .into_iter()
            .map(|(utt_id, predicted)| {
                let t = truth
                    .get(utt_id.as_str())
                    .with_context(|| format!("{utt_id} is not in the manifest"))?;
                Ok(Prediction {
                    truth: t.to_string(),
                    utt_id,
                    predicted,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = PredictionSet::new(manifest.languages().into_iter().collect(), items);
        println!(
            "utterances {}\nmicro_accuracy {:.6}\nmacro_accuracy {:.6}",
            set.items.len(),
            micro_accuracy(&set)?,
            macro_accuracy(&set)?
        );
        done = true;
    }
    if !done {
        bail!("give --scores with --key, or --predictions with --manifest");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_workers()?;
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Task1(a) => task1(a),
        Command::Task2(a) => task2(a),
        Command::Eval(a) => eval(a),
    }
}
