//! Shared oracles for the integration tests: a central finite-difference
//! gradient checker with kink exclusion, per-layer gradient cases, and a
//! brute-force EER sweep.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slid::encoder::{
    AttentivePool, BatchNorm, Conv1d, EncoderConfig, EncoderParams, Linear, Mode, Res2, SeGate, SeRes2Block, TdnnLayer,
};
use slid::features::FeatureMatrix;
use slid::heads::{
    aam_loss, ce_loss, cosine_backward, cosine_logits, ram_loss, ClassPrototypes, CosineLogits, LossOutput,
    MarginConfig,
};
use slid::metrics::{ScoreRecord, TrialLabel};
use slid::tensor::{Mat, NamedTensorMut, TensorKind};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale of this size.
pub const FD_MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_MAGNITUDE_FLOOR)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdStats {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.max_rel = self.max_rel.max(o.max_rel);
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel < FD_TOLERANCE && self.skipped * 10 <= self.checked
    }
}

/// Anything whose trainable tensors can be enumerated in a fixed order.
pub trait Params: Clone {
    fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>>;
}

macro_rules! impl_params {
    ($($t:ty),*) => {$(
        impl Params for $t {
            fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
                let mut v = Vec::new();
                self.collect_mut("", &mut v);
                v
            }
        }
    )*};
}
impl_params!(Conv1d, BatchNorm, TdnnLayer, Linear, Res2, SeGate, AttentivePool, SeRes2Block);

impl Params for EncoderParams {
    fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        self.named_tensors_mut()
    }
}

/// Scalar objective evaluated at a parameter setting and input batch, with the
/// sign pattern of every kink it passed through.
pub type Objective<'f, L> = dyn Fn(&L, &[Mat]) -> (f64, Vec<bool>) + 'f;

fn perturbed<L: Params>(model: &L, tensor: usize, index: usize, delta: f64) -> L {
    let mut m = model.clone();
    let mut ts = m.tensors_mut();
    ts[tensor].tensor.data[index] += delta;
    drop(ts);
    m
}

/// Central difference at `FD_STEP`, Richardson-extrapolated with the half
/// step so the truncation error is O(h⁴) instead of O(h²). `None` when any
/// probe crosses a kink.
fn central<F: Fn(f64) -> (f64, Vec<bool>)>(f: F, base_kinks: &[bool]) -> Option<f64> {
    let diff = |h: f64| {
        let (plus, kp) = f(h);
        let (minus, km) = f(-h);
        (kp == base_kinks && km == base_kinks).then(|| (plus - minus) / (2.0 * h))
    };
    let (full, half) = (diff(FD_STEP)?, diff(FD_STEP / 2.0)?);
    Some((4.0 * half - full) / 3.0)
}

/// Compares analytic parameter and input gradients against central differences.
///
/// A coordinate is skipped when either probe changes the kink signature, since
/// the objective is then not differentiable along the probe.
pub fn fd_check<L: Params>(model: &L, inputs: &[Mat], f: &Objective<'_, L>, grad_model: &L, grad_inputs: &[Mat]) -> FdStats {
    let mut stats = FdStats::default();
    let (_, base_kinks) = f(model, inputs);
    let mut gm = grad_model.clone();
    let grads: Vec<(TensorKind, Vec<f64>)> = gm.tensors_mut().iter().map(|t| (t.kind, t.tensor.data.clone())).collect();
    for (ti, (kind, g)) in grads.iter().enumerate() {
        if *kind != TensorKind::Param {
            continue;
        }
        for (i, a) in g.iter().enumerate() {
            match central(|d| f(&perturbed(model, ti, i, d), inputs), &base_kinks) {
                Some(n) => {
                    stats.checked += 1;
                    stats.max_rel = stats.max_rel.max(rel_err(*a, n));
                }
                None => stats.skipped += 1,
            }
        }
    }
    for (xi, gx) in grad_inputs.iter().enumerate() {
        for i in 0..gx.data.len() {
            let probe = |d: f64| {
                let mut xs = inputs.to_vec();
                xs[xi].data[i] += d;
                f(model, &xs)
            };
            match central(probe, &base_kinks) {
                Some(n) => {
                    stats.checked += 1;
                    stats.max_rel = stats.max_rel.max(rel_err(gx.data[i], n));
                }
                None => stats.skipped += 1,
            }
        }
    }
    stats
}

pub fn random_mat(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn jitter<L: Params>(model: &mut L, rng: &mut ChaCha8Rng) {
    for t in model.tensors_mut() {
        if t.kind == TensorKind::Param {
            for v in &mut t.tensor.data {
                *v += 0.3 * rng.random_range(-1.0..1.0);
            }
        }
    }
}

fn weighted(ys: &[Mat], rs: &[Mat]) -> f64 {
    ys.iter()
        .zip(rs)
        .map(|(y, r)| y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

pub fn conv_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout, t) = (3, 4, 9);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let layer = Conv1d::new(cin, cout, k, rng.random_range(1..=3), &mut rng);
    let x = random_mat(cin, t, 1.0, &mut rng);
    let r = random_mat(cout, t, 1.0, &mut rng);
    let f = |l: &Conv1d, xs: &[Mat]| (weighted(&[l.forward(&xs[0]).unwrap()], std::slice::from_ref(&r)), vec![]);
    let mut g = layer.zeros_like();
    let gx = layer.backward(&x, &r, &mut g);
    fd_check(&layer, &[x], &f, &g, &[gx])
}

pub fn batchnorm_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bn = BatchNorm::new(3);
    jitter(&mut bn, &mut rng);
    let xs: Vec<Mat> = (0..3).map(|_| random_mat(3, 5, 2.0, &mut rng)).collect();
    let rs: Vec<Mat> = (0..3).map(|_| random_mat(3, 5, 1.0, &mut rng)).collect();
    let f = |l: &BatchNorm, xs: &[Mat]| (weighted(&l.forward(xs, Mode::Train).0, &rs), vec![]);
    let (_, cache) = bn.forward(&xs, Mode::Train);
    let mut g = bn.zeros_like();
    let gx = bn.backward(&cache.unwrap(), &rs, &mut g);
    fd_check(&bn, &xs, &f, &g, &gx)
}

pub fn tdnn_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = TdnnLayer::new(3, 4, 3, rng.random_range(1..=2), &mut rng);
    jitter(&mut layer, &mut rng);
    let xs: Vec<Mat> = (0..2).map(|_| random_mat(3, 7, 1.0, &mut rng)).collect();
    let rs: Vec<Mat> = (0..2).map(|_| random_mat(4, 7, 1.0, &mut rng)).collect();
    let f = |l: &TdnnLayer, xs: &[Mat]| {
        let (ys, cache) = l.forward(xs, Mode::Train).unwrap();
        let mut kinks = Vec::new();
        cache.kink_signature(&mut kinks);
        (weighted(&ys, &rs), kinks)
    };
    let (_, cache) = layer.forward(&xs, Mode::Train).unwrap();
    let mut g = layer.zeros_like();
    let gx = layer.backward(&cache, &rs, &mut g).unwrap();
    fd_check(&layer, &xs, &f, &g, &gx)
}

pub fn linear_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = Linear::new(5, 3, &mut rng);
    let x = random_mat(1, 5, 1.0, &mut rng);
    let r = random_mat(1, 3, 1.0, &mut rng);
    let f = |l: &Linear, xs: &[Mat]| {
        let y = l.forward(&xs[0].data);
        (y.iter().zip(&r.data).map(|(a, b)| a * b).sum(), vec![])
    };
    let mut g = layer.zeros_like();
    let gx = layer.backward(&x.data, &r.data, &mut g);
    fd_check(&layer, &[x], &f, &g, &[Mat::from_vec(1, 5, gx).unwrap()])
}

pub fn res2_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = [1, 2, 3][rng.random_range(0..3)];
    let mut layer = Res2::new(6, scale, 3, rng.random_range(1..=2), &mut rng).unwrap();
    jitter(&mut layer, &mut rng);
    let xs: Vec<Mat> = (0..2).map(|_| random_mat(6, 6, 1.0, &mut rng)).collect();
    let rs: Vec<Mat> = (0..2).map(|_| random_mat(6, 6, 1.0, &mut rng)).collect();
    let f = |l: &Res2, xs: &[Mat]| {
        let (ys, cache) = l.forward(xs, Mode::Train).unwrap();
        let mut kinks = Vec::new();
        cache.kink_signature(&mut kinks);
        (weighted(&ys, &rs), kinks)
    };
    let (_, cache) = layer.forward(&xs, Mode::Train).unwrap();
    let mut g = layer.zeros_like();
    let gx = layer.backward(&cache, &rs, &mut g).unwrap();
    fd_check(&layer, &xs, &f, &g, &gx)
}

pub fn se_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = SeGate::new(4, 2, &mut rng);
    jitter(&mut layer, &mut rng);
    let x = random_mat(4, 6, 1.5, &mut rng);
    let r = random_mat(4, 6, 1.0, &mut rng);
    let f = |l: &SeGate, xs: &[Mat]| {
        let (y, cache) = l.forward(&xs[0]).unwrap();
        let mut kinks = Vec::new();
        cache.kink_signature(&mut kinks);
        (weighted(&[y], std::slice::from_ref(&r)), kinks)
    };
    let (_, cache) = layer.forward(&x).unwrap();
    let mut g = layer.zeros_like();
    let gx = layer.backward(&cache, &r, &mut g);
    fd_check(&layer, &[x], &f, &g, &[gx])
}

pub fn pool_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = AttentivePool::new(3, 4, &mut rng);
    jitter(&mut layer, &mut rng);
    let x = random_mat(3, 7, 1.0, &mut rng);
    let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |l: &AttentivePool, xs: &[Mat]| {
        let (y, cache) = l.forward(&xs[0]).unwrap();
        let mut kinks = Vec::new();
        cache.kink_signature(&mut kinks);
        (y.iter().zip(&r).map(|(a, b)| a * b).sum(), kinks)
    };
    let (_, cache) = layer.forward(&x).unwrap();
    let mut g = layer.zeros_like();
    let gx = layer.backward(&cache, &r, &mut g);
    fd_check(&layer, &[x], &f, &g, &[gx])
}

pub fn block_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = [4, 6][rng.random_range(0..2)];
    let mut block = SeRes2Block {
        pre: TdnnLayer::new(cin, 4, 1, 1, &mut rng),
        res2: Res2::new(4, 2, 3, 2, &mut rng).unwrap(),
        post: TdnnLayer::new(4, 4, 1, 1, &mut rng),
        se: SeGate::new(4, 2, &mut rng),
    };
    jitter(&mut block, &mut rng);
    let xs: Vec<Mat> = (0..3).map(|_| random_mat(cin, 6, 1.0, &mut rng)).collect();
    let rs: Vec<Mat> = (0..3).map(|_| random_mat(4, 6, 1.0, &mut rng)).collect();
    let f = |l: &SeRes2Block, xs: &[Mat]| {
        let (ys, cache) = l.forward(xs, Mode::Train).unwrap();
        let mut kinks = Vec::new();
        cache.kink_signature(&mut kinks);
        (weighted(&ys, &rs), kinks)
    };
    let (_, cache) = block.forward(&xs, Mode::Train).unwrap();
    let mut g = block.zeros_like();
    let gx = block.backward(&cache, &rs, &mut g).unwrap();
    fd_check(&block, &xs, &f, &g, &gx)
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        input_dim: 5,
        layer_channels: vec![4, 4],
        kernel_sizes: vec![3, 3],
        dilations: vec![1, 1],
        res2_scale: 2,
        se_bottleneck: 2,
        attention_hidden: 3,
        embedding_dim: 3,
    }
}

/// Parameter gradients of the whole encoder on a 2-utterance batch.
pub fn encoder_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EncoderParams::init(&tiny_encoder_config(), seed).unwrap();
    let feats: Vec<FeatureMatrix> = [6, 6, 6]
        .iter()
        .map(|&t| FeatureMatrix {
            frames: random_mat(t, 5, 1.0, &mut rng),
        })
        .collect();
    let r = random_mat(3, 3, 1.0, &mut rng);
    let f = |p: &EncoderParams, _: &[Mat]| {
        let (e, tape) = p.forward(&feats, Mode::Train).unwrap();
        (weighted(&[e], std::slice::from_ref(&r)), tape.kink_signature())
    };
    let (_, tape) = params.forward(&feats, Mode::Train).unwrap();
    let g = params.backward(&tape, &r).unwrap();
    fd_check(&params, &[], &f, &g, &[])
}

/// Loss-only check on a cosine matrix: entries are probed one at a time.
fn head_case(
    seed: u64,
    classes: usize,
    loss: impl Fn(&CosineLogits, &[usize]) -> LossOutput,
    excluded: impl Fn(&Mat, &[usize]) -> bool,
) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let mut stats = FdStats::default();
    let cos = random_mat(n, classes, 0.95, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let out = loss(&CosineLogits { values: cos.clone() }, &labels);
    for i in 0..cos.data.len() {
        let probe = |d: f64| {
            let mut m = cos.clone();
            m.data[i] += d;
            let excl = excluded(&m, &labels);
            (loss(&CosineLogits { values: m }, &labels).loss, excl)
        };
        let (lp, ep) = probe(FD_STEP);
        let (lm, em) = probe(-FD_STEP);
        if ep || em || excluded(&cos, &labels) {
            stats.skipped += 1;
            continue;
        }
        stats.checked += 1;
        stats.max_rel = stats.max_rel.max(rel_err(out.grad.data[i], (lp - lm) / (2.0 * FD_STEP)));
    }
    stats
}

pub fn ce_case(seed: u64) -> FdStats {
    head_case(seed, 5, |c, y| ce_loss(c, y, 30.0).unwrap(), |_, _| false)
}

pub fn aam_case(seed: u64) -> FdStats {
    let cfg = MarginConfig {
        scale_s: 30.0,
        margin_m: 0.2,
    };
    let switch = (std::f64::consts::PI - cfg.margin_m).cos();
    head_case(
        seed,
        5,
        |c, y| aam_loss(c, y, &cfg).unwrap(),
        |m, y| y.iter().enumerate().any(|(i, &t)| (m.get(i, t) - switch).abs() < 2.0 * FD_STEP),
    )
}

/// Cases with any pairwise margin within two probe steps of its hinge are excluded.
pub fn ram_case(seed: u64) -> FdStats {
    let cfg = MarginConfig {
        scale_s: 30.0,
        margin_m: 0.2,
    };
    head_case(
        seed,
        5,
        |c, y| ram_loss(c, y, &cfg).unwrap(),
        |m, y| {
            y.iter().enumerate().any(|(i, &t)| {
                (0..m.cols).any(|j| j != t && (m.get(i, j) + cfg.margin_m - m.get(i, t)).abs() < 4.0 * FD_STEP)
            })
        },
    )
}

/// Gradient of a weighted sum of cosine logits with respect to embeddings and prototypes.
pub fn cosine_case(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, d) = (3, 4, 5);
    let emb = random_mat(n, d, 1.0, &mut rng);
    let protos = random_mat(c, d, 1.0, &mut rng);
    let r = random_mat(n, c, 1.0, &mut rng);
    let f = |xs: &[Mat]| {
        let cos = cosine_logits(&xs[0], &ClassPrototypes::from_mat(&xs[1])).unwrap();
        weighted(&[cos.values], std::slice::from_ref(&r))
    };
    let p = ClassPrototypes::from_mat(&protos);
    let cos = cosine_logits(&emb, &p).unwrap();
    let (ge, gp) = cosine_backward(&r, &emb, &p, &cos).unwrap();
    let mut stats = FdStats::default();
    let base = [emb, protos];
    for (which, g) in [ge, gp].iter().enumerate() {
        for i in 0..g.data.len() {
            let probe = |dlt: f64| {
                let mut xs = base.clone();
                xs[which].data[i] += dlt;
                f(&xs)
            };
            let num = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            stats.checked += 1;
            stats.max_rel = stats.max_rel.max(rel_err(g.data[i], num));
        }
    }
    stats
}

pub type GradientCase = fn(u64) -> FdStats;

pub const GRADIENT_CASES: [(&str, GradientCase); 13] = [
    ("conv1d", conv_case),
    ("batchnorm", batchnorm_case),
    ("tdnn", tdnn_case),
    ("linear", linear_case),
    ("res2", res2_case),
    ("se_gate", se_case),
    ("attentive_pool", pool_case),
    ("se_res2_block", block_case),
    ("tiny_encoder", encoder_case),
    ("cosine_logits", cosine_case),
    ("ce_head", ce_case),
    ("aam_head", aam_case),
    ("ram_head", ram_case),
];

/// Runs one case over seeds `0..seeds`, merging statistics.
pub fn run_gradient_case(case: GradientCase, seeds: u64) -> FdStats {
    let mut total = FdStats::default();
    for s in 0..seeds {
        total.merge(case(s));
    }
    total
}

/// Exhaustive EER: FAR and FRR are recounted from scratch at every candidate
/// threshold (each unique score and +∞), then the first sign change of
/// FAR − FRR is interpolated linearly.
pub fn brute_force_eer(records: &[ScoreRecord]) -> f64 {
    let tar: Vec<f64> = records.iter().filter(|r| r.label == TrialLabel::Target).map(|r| r.score).collect();
    let non: Vec<f64> = records.iter().filter(|r| r.label == TrialLabel::Nontarget).map(|r| r.score).collect();
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fa = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
            let fr = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
            (fa, fr)
        })
        .collect();
    for k in 0..rates.len() {
        let (fa, fr) = rates[k];
        if fa - fr <= 0.0 {
            if k == 0 || fa == fr {
                return fa;
            }
            let (fa0, fr0) = rates[k - 1];
            let lam = (fa0 - fr0) / ((fa0 - fr0) - (fa - fr));
            return fa0 + lam * (fa - fa0);
        }
    }
    unreachable!("FAR − FRR reaches −1 at +∞")
}

pub fn random_trials(n: usize, rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let mut recs: Vec<ScoreRecord> = (0..n)
        .map(|i| {
            let target = rng.random_bool(0.5);
            // coarse grid so ties occur
            let base: f64 = (rng.random_range(0..60) as f64) / 20.0;
            ScoreRecord {
                enroll_id: format!("e{i}"),
                test_id: format!("t{i}"),
                score: if target { base + 0.5 } else { base },
                label: if target { TrialLabel::Target } else { TrialLabel::Nontarget },
            }
        })
        .collect();
    recs[0].label = TrialLabel::Target;
    recs[1].label = TrialLabel::Nontarget;
    recs
}
