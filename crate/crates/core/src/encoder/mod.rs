//! Desk-scale ECAPA-style utterance encoder with hand-written reverse mode.
//!
//! Layout: a first TDNN layer, a stack of SE-Res2 blocks, a 1×1 aggregation
//! layer over the concatenated outputs of every layer, attentive statistics
//! pooling and a final affine projection to the embedding.

pub mod layers;
pub mod pool;
pub mod res2;
pub mod se;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{BatchNorm, Conv1d, Linear, Mode, TdnnLayer};
pub use pool::{AttentivePool, ASP_VAR_EPS};
pub use res2::Res2;
pub use se::SeGate;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::tensor::{Mat, NamedTensor, NamedTensorMut};
use layers::TdnnCache;
use pool::PoolCache;
use res2::Res2Cache;
use se::SeCache;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layer_channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub dilations: Vec<usize>,
    pub res2_scale: usize,
    pub se_bottleneck: usize,
    pub attention_hidden: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            layer_channels: vec![128, 128, 128],
            kernel_sizes: vec![5, 3, 3],
            dilations: vec![1, 2, 3],
            res2_scale: 4,
            se_bottleneck: 32,
            attention_hidden: 64,
            embedding_dim: 192,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let n = self.layer_channels.len();
        if n == 0 || self.kernel_sizes.len() != n || self.dilations.len() != n {
            return bad("layer_channels, kernel_sizes and dilations must be non-empty and equal length".into());
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad("kernel sizes must be odd".into());
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be at least 1".into());
        }
        if self.res2_scale == 0 || self.layer_channels.iter().any(|c| *c == 0 || c % self.res2_scale != 0) {
            return bad(format!(
                "layer channels {:?} must be positive multiples of res2_scale {}",
                self.layer_channels, self.res2_scale
            ));
        }
        if self.input_dim == 0 || self.se_bottleneck == 0 || self.attention_hidden == 0 || self.embedding_dim == 0 {
            return bad("input_dim, se_bottleneck, attention_hidden and embedding_dim must be positive".into());
        }
        Ok(())
    }

    pub fn aggregate_channels(&self) -> usize {
        self.layer_channels.iter().sum()
    }
}

/// Utterance-level embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        crate::tensor::norm(&self.values)
    }

    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm("embedding".into()));
        }
        Ok(Embedding {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }
}

/// 1×1 TDNN → Res2 → 1×1 TDNN → SE gate, with a residual when shapes allow.
#[derive(Clone, Debug, PartialEq)]
pub struct SeRes2Block {
    pub pre: TdnnLayer,
    pub res2: Res2,
    pub post: TdnnLayer,
    pub se: SeGate,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pre: TdnnCache,
    res2: Res2Cache,
    post: TdnnCache,
    se: Vec<SeCache>,
}

impl BlockCache {
    pub fn kink_signature(&self, out: &mut Vec<bool>) {
        self.pre.kink_signature(out);
        self.res2.kink_signature(out);
        self.post.kink_signature(out);
        for s in &self.se {
            s.kink_signature(out);
        }
    }
}

impl SeRes2Block {
    fn residual(&self) -> bool {
        self.pre.conv.in_channels() == self.se.channels()
    }

    pub fn zeros_like(&self) -> Self {
        SeRes2Block {
            pre: self.pre.zeros_like(),
            res2: self.res2.zeros_like(),
            post: self.post.zeros_like(),
            se: self.se.zeros_like(),
        }
    }

    pub fn forward(&self, xs: &[Mat], mode: Mode) -> Result<(Vec<Mat>, BlockCache)> {
        let (a, pre) = self.pre.forward(xs, mode)?;
        let (b, res2) = self.res2.forward(&a, mode)?;
        let (c, post) = self.post.forward(&b, mode)?;
        let mut ys = Vec::with_capacity(c.len());
        let mut se = Vec::with_capacity(c.len());
        for (i, m) in c.iter().enumerate() {
            let (mut y, cache) = self.se.forward(m)?;
            if self.residual() {
                y.add_assign(&xs[i]);
            }
            ys.push(y);
            se.push(cache);
        }
        Ok((ys, BlockCache { pre, res2, post, se }))
    }

    pub fn backward(&self, cache: &BlockCache, gys: &[Mat], grad: &mut SeRes2Block) -> Result<Vec<Mat>> {
        let g_c: Vec<Mat> = gys
            .iter()
            .zip(&cache.se)
            .map(|(g, c)| self.se.backward(c, g, &mut grad.se))
            .collect();
        let g_b = self.post.backward(&cache.post, &g_c, &mut grad.post)?;
        let g_a = self.res2.backward(&cache.res2, &g_b, &mut grad.res2)?;
        let mut gx = self.pre.backward(&cache.pre, &g_a, &mut grad.pre)?;
        if self.residual() {
            for (a, b) in gx.iter_mut().zip(gys) {
                a.add_assign(b);
            }
        }
        Ok(gx)
    }

    fn update_running(&mut self, cache: &BlockCache) {
        self.pre.update_running(&cache.pre);
        self.res2.update_running(&cache.res2);
        self.post.update_running(&cache.post);
    }

    pub fn add_assign(&mut self, other: &SeRes2Block) {
        self.pre.add_assign(&other.pre);
        self.res2.add_assign(&other.res2);
        self.post.add_assign(&other.post);
        self.se.add_assign(&other.se);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.pre.collect(&format!("{prefix}.pre"), out);
        self.res2.collect(&format!("{prefix}.res2"), out);
        self.post.collect(&format!("{prefix}.post"), out);
        self.se.collect(&format!("{prefix}.se"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        self.pre.collect_mut(&format!("{prefix}.pre"), out);
        self.res2.collect_mut(&format!("{prefix}.res2"), out);
        self.post.collect_mut(&format!("{prefix}.post"), out);
        self.se.collect_mut(&format!("{prefix}.se"), out);
    }
}

/// Every tensor of the encoder, trainable or running statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub first: TdnnLayer,
    pub blocks: Vec<SeRes2Block>,
    pub aggregate: TdnnLayer,
    pub pool: AttentivePool,
    pub projection: Linear,
}

/// Intermediate values of one batched forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    mode: Mode,
    first: TdnnCache,
    blocks: Vec<BlockCache>,
    aggregate: TdnnCache,
    pool: Vec<PoolCache>,
    pooled: Vec<Vec<f64>>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Sign pattern of every ReLU input and variance clamp in the pass.
    ///
    /// Two passes with equal signatures went through the same linear pieces,
    /// which is what a finite-difference check needs to be meaningful.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut out = Vec::new();
        self.first.kink_signature(&mut out);
        for b in &self.blocks {
            b.kink_signature(&mut out);
        }
        self.aggregate.kink_signature(&mut out);
        for p in &self.pool {
            p.kink_signature(&mut out);
        }
        out
    }
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = &cfg.layer_channels;
        let first = TdnnLayer::new(cfg.input_dim, ch[0], cfg.kernel_sizes[0], cfg.dilations[0], &mut rng);
        let mut blocks = Vec::with_capacity(ch.len() - 1);
        for i in 1..ch.len() {
            blocks.push(SeRes2Block {
                pre: TdnnLayer::new(ch[i - 1], ch[i], 1, 1, &mut rng),
                res2: Res2::new(ch[i], cfg.res2_scale, cfg.kernel_sizes[i], cfg.dilations[i], &mut rng)?,
                post: TdnnLayer::new(ch[i], ch[i], 1, 1, &mut rng),
                se: SeGate::new(ch[i], cfg.se_bottleneck, &mut rng),
            });
        }
        let agg = cfg.aggregate_channels();
        Ok(EncoderParams {
            first,
            blocks,
            aggregate: TdnnLayer::new(agg, agg, 1, 1, &mut rng),
            pool: AttentivePool::new(agg, cfg.attention_hidden, &mut rng),
            projection: Linear::new(2 * agg, cfg.embedding_dim, &mut rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            first: self.first.zeros_like(),
            blocks: self.blocks.iter().map(SeRes2Block::zeros_like).collect(),
            aggregate: self.aggregate.zeros_like(),
            pool: self.pool.zeros_like(),
            projection: self.projection.zeros_like(),
        }
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        self.first.collect("encoder.first", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("encoder.blocks.{i}"), &mut out);
        }
        self.aggregate.collect("encoder.aggregate", &mut out);
        self.pool.collect("encoder.pool", &mut out);
        self.projection.collect("encoder.projection", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let mut out = Vec::new();
        self.first.collect_mut("encoder.first", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("encoder.blocks.{i}"), &mut out);
        }
        self.aggregate.collect_mut("encoder.aggregate", &mut out);
        self.pool.collect_mut("encoder.pool", &mut out);
        self.projection.collect_mut("encoder.projection", &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|t| t.kind == crate::tensor::TensorKind::Param)
            .map(|t| t.tensor.len())
            .sum()
    }

    /// Batched forward pass. Returns an `N × embedding_dim` matrix and the tape.
    pub fn forward(&self, feats: &[FeatureMatrix], mode: Mode) -> Result<(Mat, Tape)> {
        let input_dim = self.first.conv.in_channels();
        for f in feats {
            if f.dim() != input_dim {
                return Err(Error::ShapeMismatch(format!(
                    "features have {} dims, encoder expects {input_dim}",
                    f.dim()
                )));
            }
            if f.num_frames() == 0 {
                return Err(Error::ShapeMismatch("utterance has no frames".into()));
            }
        }
        let xs: Vec<Mat> = feats.iter().map(|f| f.frames.transpose()).collect();
        let (mut h, first) = self.first.forward(&xs, mode)?;
        let mut layer_outputs = vec![h.clone()];
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, mode)?;
            h = next;
            layer_outputs.push(h.clone());
            blocks.push(cache);
        }
        let concat = (0..xs.len())
            .map(|b| {
                let parts: Vec<&Mat> = layer_outputs.iter().map(|o| &o[b]).collect();
                Mat::vstack(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        let (agg, aggregate) = self.aggregate.forward(&concat, mode)?;
        if agg.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFiniteActivation("aggregation layer".into()));
        }
        let dim = self.projection.out_dim();
        let mut out = Mat::zeros(xs.len(), dim);
        let mut pool = Vec::with_capacity(xs.len());
        let mut pooled = Vec::with_capacity(xs.len());
        for (b, m) in agg.iter().enumerate() {
            let (stats, cache) = self.pool.forward(m)?;
            let e = self.projection.forward(&stats);
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation("embedding".into()));
            }
            out.row_mut(b).copy_from_slice(&e);
            pool.push(cache);
            pooled.push(stats);
        }
        Ok((
            out,
            Tape {
                mode,
                first,
                blocks,
                aggregate,
                pool,
                pooled,
            },
        ))
    }

    /// Exact gradients of `Σ_i ⟨upstream_i, embedding_i⟩` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, upstream: &Mat) -> Result<EncoderParams> {
        if tape.mode != Mode::Train {
            return Err(Error::State("backward needs a train-mode forward pass".into()));
        }
        if upstream.rows != tape.pooled.len() || upstream.cols != self.projection.out_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.rows,
                upstream.cols,
                tape.pooled.len(),
                self.projection.out_dim()
            )));
        }
        let mut grad = self.zeros_like();
        let g_agg: Vec<Mat> = (0..upstream.rows)
            .map(|b| {
                let g_stats = self
                    .projection
                    .backward(&tape.pooled[b], upstream.row(b), &mut grad.projection);
                self.pool.backward(&tape.pool[b], &g_stats, &mut grad.pool)
            })
            .collect();
        let g_concat = self.aggregate.backward(&tape.aggregate, &g_agg, &mut grad.aggregate)?;

        let widths: Vec<usize> = std::iter::once(self.first.conv.out_channels())
            .chain(self.blocks.iter().map(|b| b.se.channels()))
            .collect();
        let mut offsets = vec![0];
        for w in &widths {
            offsets.push(offsets.last().unwrap() + w);
        }
        let slice = |k: usize| -> Vec<Mat> {
            g_concat.iter().map(|g| g.slice_rows(offsets[k], offsets[k + 1])).collect()
        };

        let mut carry: Option<Vec<Mat>> = None;
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let mut g = slice(k + 1);
            if let Some(c) = carry.take() {
                for (a, b) in g.iter_mut().zip(&c) {
                    a.add_assign(b);
                }
            }
            carry = Some(block.backward(&tape.blocks[k], &g, &mut grad.blocks[k])?);
        }
        let mut g = slice(0);
        if let Some(c) = carry {
            for (a, b) in g.iter_mut().zip(&c) {
                a.add_assign(b);
            }
        }
        self.first.backward(&tape.first, &g, &mut grad.first)?;
        Ok(grad)
    }

    /// Folds the batch statistics of a train-mode pass into the running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Train {
            return;
        }
        self.first.update_running(&tape.first);
        for (b, c) in self.blocks.iter_mut().zip(&tape.blocks) {
            b.update_running(c);
        }
        self.aggregate.update_running(&tape.aggregate);
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        self.first.add_assign(&other.first);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_assign(b);
        }
        self.aggregate.add_assign(&other.aggregate);
        self.pool.add_assign(&other.pool);
        self.projection.add_assign(&other.projection);
    }
}

/// Embeds one utterance. Train mode uses the utterance's own batch statistics.
pub fn embed(feats: &FeatureMatrix, params: &EncoderParams, cfg: &EncoderConfig, mode: Mode) -> Result<Embedding> {
    if feats.dim() != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "features have {} dims, config expects {}",
            feats.dim(),
            cfg.input_dim
        )));
    }
    let (out, _) = params.forward(std::slice::from_ref(feats), mode)?;
    Ok(Embedding { values: out.data })
}

/// Encoder parameters plus the cached forward pass a backward call consumes.
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: EncoderParams,
    tape: Option<Tape>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(&cfg, seed)?;
        Ok(Encoder {
            cfg,
            params,
            tape: None,
        })
    }

    pub fn from_params(cfg: EncoderConfig, params: EncoderParams) -> Self {
        Encoder {
            cfg,
            params,
            tape: None,
        }
    }

    /// Train-mode pass over a batch; updates running statistics and keeps the tape.
    pub fn forward_train(&mut self, feats: &[FeatureMatrix]) -> Result<Mat> {
        let (out, tape) = self.params.forward(feats, Mode::Train)?;
        self.params.update_running_stats(&tape);
        self.tape = Some(tape);
        Ok(out)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.tape.as_ref()
    }

    /// Consumes the cached forward pass.
    pub fn backward(&mut self, upstream: &Mat) -> Result<EncoderParams> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("encoder backward without a cached forward pass".into()))?;
        self.params.backward(&tape, upstream)
    }

    pub fn embed(&self, feats: &FeatureMatrix) -> Result<Embedding> {
        embed(feats, &self.params, &self.cfg, Mode::Eval)
    }

    pub fn embed_batch(&self, feats: &[FeatureMatrix]) -> Result<Vec<Embedding>> {
        let (out, _) = self.params.forward(feats, Mode::Eval)?;
        Ok((0..out.rows)
            .map(|r| Embedding {
                values: out.row(r).to_vec(),
            })
            .collect())
    }
}
