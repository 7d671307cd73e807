//! Synthetic speaker-controlled multilingual corpus.
//!
//! A *language* is a small inventory of resonant filter sets ("units", three
//! formant resonators each) together with a unit transition matrix and a
//! typical segment duration. A *speaker* is a glottal pulse train with its own
//! fundamental frequency, intonation, amplitude contour, breathiness and gain.
//! An utterance passes the speaker's excitation through a random walk over the
//! language's units, so language identity lives in the spectral shapes and
//! their temporal pattern, and speaker identity lives in pitch and level.
//!
//! Every speaker talks in several languages, which makes the speaker a tempting
//! shortcut during training; splits hold out whole speakers so that shortcut
//! does not pay off at test time.
//!
//! Languages are drawn from `language_seed`, speakers and utterances from
//! `seed`, so two corpora with the same `language_seed` share their language
//! definitions but not their speakers.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{synthetic_noise, synthetic_rir};
use crate::error::{Error, Result};
use crate::features::{write_wav, Waveform, SAMPLE_RATE_HZ};
use crate::metrics::{TrialKey, TrialLabel};

const UNITS_PER_LANGUAGE: usize = 4;
const UNSEEN_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Total number of languages, seen and unseen.
    pub n_languages: usize,
    /// How many of those are held out of training entirely.
    pub n_unseen_languages: usize,
    pub n_speakers: usize,
    pub utts_per_speaker_language: usize,
    /// Inclusive range for the number of languages each speaker uses.
    pub languages_per_speaker: (usize, usize),
    pub utterance_seconds: f64,
    pub seed: u64,
    pub language_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_languages: 10,
            n_unseen_languages: 3,
            n_speakers: 20,
            utts_per_speaker_language: 4,
            languages_per_speaker: (2, 10),
            utterance_seconds: 4.0,
            seed: 0,
            language_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_seen(&self) -> usize {
        self.n_languages.saturating_sub(self.n_unseen_languages)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_languages < 2 || self.n_speakers == 0 || self.utts_per_speaker_language == 0 {
            return bad("need at least 2 languages, 1 speaker and 1 utterance per speaker-language".into());
        }
        if self.n_seen() < 2 {
            return bad(format!(
                "{} languages with {} unseen leaves fewer than 2 seen languages",
                self.n_languages, self.n_unseen_languages
            ));
        }
        let (lo, hi) = self.languages_per_speaker;
        if lo < 2 || lo > hi || hi > self.n_languages {
            return bad(format!(
                "languages per speaker {lo}..={hi} must lie within 2..={}",
                self.n_languages
            ));
        }
        if !(self.utterance_seconds >= 0.1) || !self.utterance_seconds.is_finite() {
            return bad(format!("utterance length {} s", self.utterance_seconds));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        (self.utterance_seconds * SAMPLE_RATE_HZ as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Resonator {
    pub freq_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Language {
    pub name: String,
    pub unseen: bool,
    pub units: Vec<[Resonator; 3]>,
    pub transitions: Vec<Vec<f64>>,
    pub mean_segment_s: f64,
}

impl Language {
    fn generate(name: String, unseen: bool, rng: &mut ChaCha8Rng) -> Self {
        let units = (0..UNITS_PER_LANGUAGE)
            .map(|_| {
                let band = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| Resonator {
                    freq_hz: rng.random_range(lo..hi),
                    bandwidth_hz: rng.random_range(50.0..120.0),
                };
                [band(rng, 300.0, 850.0), band(rng, 900.0, 2400.0), band(rng, 2500.0, 3600.0)]
            })
            .collect();
        let transitions = (0..UNITS_PER_LANGUAGE)
            .map(|_| {
                let w: Vec<f64> = (0..UNITS_PER_LANGUAGE).map(|_| rng.random::<f64>().powi(3) + 0.02).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Language {
            name,
            unseen,
            units,
            transitions,
            mean_segment_s: rng.random_range(0.06..0.22),
        }
    }
}

/// The language inventory implied by a spec: seen languages `L00…`, then unseen `U00…`.
pub fn languages(spec: &SynthSpec) -> Vec<Language> {
    let make = |name: String, unseen: bool, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.language_seed);
        rng.set_stream(stream);
        Language::generate(name, unseen, &mut rng)
    };
    let mut out: Vec<Language> = (0..spec.n_seen())
        .map(|i| make(format!("L{i:02}"), false, i as u64))
        .collect();
    out.extend((0..spec.n_unseen_languages).map(|i| make(format!("U{i:02}"), true, UNSEEN_STREAM_BASE + i as u64)));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub f0_hz: f64,
    pub gain: f64,
    pub contour_rate_hz: f64,
    pub contour_depth: f64,
    pub intonation_depth: f64,
    pub breathiness: f64,
    /// Indices into the language inventory.
    pub languages: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPlan {
    pub languages: Vec<Language>,
    pub speakers: Vec<Speaker>,
}

/// Draws languages, speakers and speaker-language assignments without rendering audio.
pub fn plan_corpus(spec: &SynthSpec) -> Result<CorpusPlan> {
    spec.validate()?;
    let langs = languages(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.languages_per_speaker;
    let speakers = (0..spec.n_speakers)
        .map(|s| {
            let count = rng.random_range(lo..=hi);
            let mut pool: Vec<usize> = (0..langs.len()).collect();
            pool.shuffle(&mut rng);
            let mut chosen = pool[..count].to_vec();
            chosen.sort_unstable();
            Speaker {
                id: format!("S{s:03}"),
                f0_hz: rng.random_range(85.0..255.0),
                gain: rng.random_range(0.3..0.8),
                contour_rate_hz: rng.random_range(0.5..3.0),
                contour_depth: rng.random_range(0.1..0.5),
                intonation_depth: rng.random_range(0.02..0.12),
                breathiness: rng.random_range(0.02..0.1),
                languages: chosen,
            }
        })
        .collect();
    Ok(CorpusPlan {
        languages: langs,
        speakers,
    })
}

struct ResonatorState {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl ResonatorState {
    fn new() -> Self {
        ResonatorState { a: 1.0, b: 0.0, c: 0.0, y1: 0.0, y2: 0.0 }
    }

    fn tune(&mut self, r: &Resonator) {
        let fs = SAMPLE_RATE_HZ as f64;
        self.c = -(-2.0 * PI * r.bandwidth_hz / fs).exp();
        self.b = 2.0 * (-PI * r.bandwidth_hz / fs).exp() * (2.0 * PI * r.freq_hz / fs).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Renders one utterance of `speaker` talking in `language`.
pub fn synthesize(language: &Language, speaker: &Speaker, n_samples: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let fs = SAMPLE_RATE_HZ as f64;
    let ramp = (0.01 * fs) as usize;
    let mut out = vec![0.0; n_samples];
    let mut filters = [ResonatorState::new(), ResonatorState::new(), ResonatorState::new()];
    let contour_phase = rng.random_range(0.0..2.0 * PI);
    let intonation_phase = rng.random_range(0.0..2.0 * PI);
    let mut unit = rng.random_range(0..language.units.len());
    let mut phase = rng.random::<f64>();
    let mut glottal = 0.0;
    let mut pos = 0;
    while pos < n_samples {
        let dur = ((language.mean_segment_s * rng.random_range(0.6..1.4)) * fs) as usize;
        let end = (pos + dur.max(1)).min(n_samples);
        for (f, r) in filters.iter_mut().zip(&language.units[unit]) {
            f.tune(r);
        }
        let len = end - pos;
        for n in pos..end {
            let t = n as f64 / fs;
            let f0 = speaker.f0_hz * (1.0 + speaker.intonation_depth * (2.0 * PI * 0.4 * t + intonation_phase).sin());
            phase += f0 * (1.0 + 0.01 * rng.random_range(-1.0..1.0)) / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            glottal = 0.7 * glottal + pulse;
            let x = glottal + speaker.breathiness * rng.random_range(-1.0..1.0);
            let y = filters.iter_mut().fold(x, |acc, f| f.step(acc));
            let k = n - pos;
            let edge = k.min(len - 1 - k).min(ramp) as f64 / ramp as f64;
            let envelope = 0.25 + 0.75 * (0.5 - 0.5 * (PI * edge).cos());
            let contour = 1.0 + speaker.contour_depth * (2.0 * PI * speaker.contour_rate_hz * t + contour_phase).sin();
            out[n] = y * envelope * contour;
        }
        let row = &language.transitions[unit];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        unit = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                unit = j;
                break;
            }
        }
        pos = end;
    }
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { speaker.gain / peak } else { 0.0 };
    for v in &mut out {
        *v = *v * scale + 0.002 * rng.random_range(-1.0..1.0);
    }
    Waveform::new(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub rel_path: PathBuf,
    pub language: String,
    pub speaker: String,
}

/// Utterance list; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            root: root.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.rel_path)
    }

    pub fn languages(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.language.clone()).collect()
    }

    pub fn speakers(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.speaker.clone()).collect()
    }

    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Reads a four-column TSV; the root becomes the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let reader = std::io::BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), i + 1),
                    format!("expected 4 tab-separated columns, found {}", cols.len()),
                ));
            }
            entries.push(ManifestEntry {
                utt_id: cols[0].to_string(),
                rel_path: PathBuf::from(cols[1]),
                language: cols[2].to_string(),
                speaker: cols[3].to_string(),
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, entries })
    }

    /// Writes the TSV with paths rebased onto the destination directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dest_root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut w = BufWriter::new(fs::File::create(path)?);
        for e in &self.entries {
            let abs = self.root.join(&e.rel_path);
            let rel = if dest_root == self.root {
                e.rel_path.clone()
            } else {
                relative_to(&abs, &dest_root)
            };
            writeln!(w, "{}\t{}\t{}\t{}", e.utt_id, rel.display(), e.language, e.speaker)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (path, base) = (abs(path), abs(base));
    let pc: Vec<_> = path.components().collect();
    let bc: Vec<_> = base.components().collect();
    let common = pc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    if common == 0 {
        return path;
    }
    let mut rel = PathBuf::new();
    for _ in common..bc.len() {
        rel.push("..");
    }
    for c in &pc[common..] {
        rel.push(c);
    }
    rel
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub plan: CorpusPlan,
}

impl Corpus {
    pub fn unseen_languages(&self) -> BTreeSet<String> {
        self.plan.languages.iter().filter(|l| l.unseen).map(|l| l.name.clone()).collect()
    }
}

/// Renders the corpus under `out_dir`: `wav/*.wav`, `manifest.tsv` and `languages.tsv`.
///
/// Utterances are rendered in parallel, each from its own random stream, so the
/// output bytes do not depend on the number of worker threads.
pub fn gen_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Corpus> {
    let out_dir = out_dir.as_ref();
    let plan = plan_corpus(spec)?;
    fs::create_dir_all(out_dir.join("wav"))?;
    let mut jobs = Vec::new();
    for spk in &plan.speakers {
        for &l in &spk.languages {
            for k in 0..spec.utts_per_speaker_language {
                jobs.push((spk, l, k));
            }
        }
    }
    let n_samples = spec.samples();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, (spk, l, k))| {
            let lang = &plan.languages[*l];
            let utt_id = format!("{}_{}_{:03}", spk.id, lang.name, k);
            let rel_path = PathBuf::from("wav").join(format!("{utt_id}.wav"));
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(idx as u64 + 1);
            let wave = synthesize(lang, spk, n_samples, &mut rng);
            write_wav(out_dir.join(&rel_path), &wave)?;
            Ok(ManifestEntry {
                utt_id,
                rel_path,
                language: lang.name.clone(),
                speaker: spk.id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(out_dir, entries);
    manifest.save(out_dir.join("manifest.tsv"))?;
    write_language_table(out_dir.join("languages.tsv"), &plan.languages)?;
    Ok(Corpus { manifest, plan })
}

fn write_language_table(path: PathBuf, langs: &[Language]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in langs {
        writeln!(w, "{}\t{}", l.name, if l.unseen { "unseen" } else { "seen" })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `languages.tsv` and returns the names marked unseen.
pub fn read_unseen_languages(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
    let mut unseen = BTreeSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match line.split('\t').collect::<Vec<_>>().as_slice() {
            [name, "unseen"] => {
                unseen.insert(name.to_string());
            }
            [_, "seen"] => {}
            _ => {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), i + 1),
                    "expected `name<TAB>seen|unseen`",
                ))
            }
        }
    }
    Ok(unseen)
}

/// Writes `noise/*.wav` (white and low-passed noise) and `rir/*.wav`
/// (exponentially decaying impulse responses) under `dir`.
pub fn gen_augment_pools(dir: impl AsRef<Path>, n_noise: usize, n_rir: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (noise_dir, rir_dir) = (dir.join("noise"), dir.join("rir"));
    fs::create_dir_all(&noise_dir)?;
    fs::create_dir_all(&rir_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_noise {
        let mut w = synthetic_noise(2 * SAMPLE_RATE_HZ as usize, 0.5, &mut rng);
        if i % 2 == 1 {
            let pole: f64 = rng.random_range(0.5..0.95);
            let mut state = 0.0;
            for v in &mut w.samples {
                state = pole * state + (1.0 - pole) * *v;
                *v = state;
            }
        }
        write_wav(noise_dir.join(format!("noise_{i:03}.wav")), &w)?;
    }
    for i in 0..n_rir {
        let rt60 = rng.random_range(0.2..0.8);
        let w = synthetic_rir((0.3 * SAMPLE_RATE_HZ as f64) as usize, rt60, &mut rng);
        write_wav(rir_dir.join(format!("rir_{i:03}.wav")), &w)?;
    }
    Ok((noise_dir, rir_dir))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub max_attempts: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.25,
            val_fraction: 0.125,
            max_attempts: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
    /// Every utterance in an unseen language; used only for verification trials.
    pub unseen: Manifest,
}

impl CorpusSplit {
    /// Writes `train.tsv`, `val.tsv`, `test.tsv` and `unseen.tsv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.train.save(dir.join("train.tsv"))?;
        self.val.save(dir.join("val.tsv"))?;
        self.test.save(dir.join("test.tsv"))?;
        self.unseen.save(dir.join("unseen.tsv"))
    }
}

/// Speaker-disjoint train/validation/test split over the seen languages.
///
/// Speakers are shuffled and cut by the requested fractions (rounded to whole
/// speakers); the shuffle is redrawn until train and test each cover every seen
/// language.
pub fn split_corpus(
    manifest: &Manifest,
    unseen_languages: &BTreeSet<String>,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<CorpusSplit> {
    if manifest.is_empty() {
        return Err(Error::InfeasibleSplit("manifest is empty".into()));
    }
    let seen = manifest.filter(|e| !unseen_languages.contains(&e.language));
    let unseen = manifest.filter(|e| unseen_languages.contains(&e.language));
    let seen_langs = seen.languages();
    let speakers: Vec<String> = seen.speakers().into_iter().collect();
    let n = speakers.len();
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).max(1);
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    if n_test + n_val >= n {
        return Err(Error::InfeasibleSplit(format!(
            "{n} speakers cannot supply {n_test} test and {n_val} validation speakers and still train"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts.max(1) {
        let mut order = speakers.clone();
        order.shuffle(&mut rng);
        let test_spk: BTreeSet<&String> = order[..n_test].iter().collect();
        let val_spk: BTreeSet<&String> = order[n_test..n_test + n_val].iter().collect();
        let test = seen.filter(|e| test_spk.contains(&e.speaker));
        let val = seen.filter(|e| val_spk.contains(&e.speaker));
        let train = seen.filter(|e| !test_spk.contains(&e.speaker) && !val_spk.contains(&e.speaker));
        if train.languages() == seen_langs && test.languages() == seen_langs {
            return Ok(CorpusSplit {
                train,
                val,
                test,
                unseen,
            });
        }
    }
    Err(Error::InfeasibleSplit(format!(
        "no speaker split within {} attempts covers all {} seen languages in both train and test",
        cfg.max_attempts,
        seen_langs.len()
    )))
}

/// Verification trials with single-utterance enrollments named `enr_<utt_id>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialSet {
    pub key: Vec<TrialKey>,
    pub enrollment: BTreeMap<String, Vec<String>>,
}

impl TrialSet {
    /// Writes `trials.lst` (`enroll_id test_id`), `trials.key` and `enroll.map` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("trials.lst"))?);
        for k in &self.key {
            writeln!(w, "{} {}", k.enroll_id, k.test_id)?;
        }
        w.flush()?;
        crate::metrics::write_key(BufWriter::new(fs::File::create(dir.join("trials.key"))?), &self.key)?;
        write_enrollment_map(dir.join("enroll.map"), &self.enrollment)
    }
}

pub fn write_enrollment_map(path: impl AsRef<Path>, map: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (enroll, utts) in map {
        for u in utts {
            writeln!(w, "{enroll} {u}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `enroll_id utt_id` lines, grouping utterances per enrollment id.
pub fn read_enrollment_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>> {
    let path = path.as_ref();
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (line_no, line) in fs::read_to_string(path)
        .map_err(|_| Error::NotFound(path.to_path_buf()))?
        .lines()
        .enumerate()
    {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => {}
            [e, u] => map.entry(e.to_string()).or_default().push(u.to_string()),
            _ => {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), line_no + 1),
                    "expected `enroll_id utt_id`",
                ))
            }
        }
    }
    Ok(map)
}

/// Reads a trial list of `enroll_id test_id` pairs.
pub fn read_trial_list(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line_no, line) in fs::read_to_string(path)
        .map_err(|_| Error::NotFound(path.to_path_buf()))?
        .lines()
        .enumerate()
    {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => {}
            [e, t] | [e, t, _] => out.push((e.to_string(), t.to_string())),
            _ => {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), line_no + 1),
                    "expected `enroll_id test_id`",
                ))
            }
        }
    }
    Ok(out)
}

/// Balanced target/nontarget trials over `manifest`.
///
/// Half the trials (rounded up) pair two utterances of the same language, the
/// rest pair different languages. The test utterance comes from a different
/// speaker than the enrollment whenever the manifest allows it.
pub fn gen_trials(manifest: &Manifest, n_trials: usize, seed: u64) -> Result<TrialSet> {
    let mut by_lang: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_lang.entry(e.language.as_str()).or_default().push(e);
    }
    if by_lang.len() < 2 {
        return Err(Error::InfeasibleTrials(format!(
            "need at least 2 languages, manifest has {}",
            by_lang.len()
        )));
    }
    let target_langs: Vec<&str> = by_lang.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| *k).collect();
    let n_target = n_trials.div_ceil(2);
    if n_target > 0 && target_langs.is_empty() {
        return Err(Error::InfeasibleTrials("no language has two utterances".into()));
    }
    let langs: Vec<&str> = by_lang.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick_test = |rng: &mut ChaCha8Rng, enroll: &ManifestEntry, pool: &[&ManifestEntry]| -> String {
        let cross: Vec<&&ManifestEntry> = pool
            .iter()
            .filter(|e| e.speaker != enroll.speaker && e.utt_id != enroll.utt_id)
            .collect();
        if !cross.is_empty() {
            return cross[rng.random_range(0..cross.len())].utt_id.clone();
        }
        let other: Vec<&&ManifestEntry> = pool.iter().filter(|e| e.utt_id != enroll.utt_id).collect();
        other[rng.random_range(0..other.len())].utt_id.clone()
    };
    let mut key = Vec::with_capacity(n_trials);
    let mut enrollment = BTreeMap::new();
    for i in 0..n_trials {
        let target = i < n_target;
        let enroll_lang = if target {
            target_langs[rng.random_range(0..target_langs.len())]
        } else {
            langs[rng.random_range(0..langs.len())]
        };
        let pool = &by_lang[enroll_lang];
        let enroll = pool[rng.random_range(0..pool.len())];
        let test_id = if target {
            pick_test(&mut rng, enroll, pool)
        } else {
            let others: Vec<&str> = langs.iter().copied().filter(|l| *l != enroll_lang).collect();
            let other = others[rng.random_range(0..others.len())];
            pick_test(&mut rng, enroll, &by_lang[other])
        };
        let enroll_id = format!("enr_{}", enroll.utt_id);
        enrollment
            .entry(enroll_id.clone())
            .or_insert_with(|| vec![enroll.utt_id.clone()]);
        key.push(TrialKey {
            enroll_id,
            test_id,
            label: if target { TrialLabel::Target } else { TrialLabel::Nontarget },
        });
    }
    key.shuffle(&mut rng);
    Ok(TrialSet { key, enrollment })
}
