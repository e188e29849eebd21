//! Frozen ViT-style encoder with prefix injection.
//!
//! Tokens are processed as a stacked `(B·N') × D` matrix so projections and
//! layer norms run once per block; attention is evaluated per sample and
//! per head on slices of that matrix. Learnable prefixes are prepended to the
//! per-head key and value slices only, so the query length (and therefore
//! the output length) never changes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::weights::WeightFile;

pub const LN_EPS: f64 = 1e-6;
/// Standard deviation of prompt-token initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Number of blocks `L`.
    pub depth: usize,
    /// Hidden width `D`.
    pub hidden: usize,
    pub heads: usize,
    /// Sequence length `N`, class token included.
    pub tokens: usize,
    pub mlp_ratio: f64,
    /// Raw features per patch token; inputs have `(N - 1) * chunk` features.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: 32,
            heads: 4,
            tokens: 9,
            mlp_ratio: 4.0,
            chunk: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if self.hidden == 0 || self.heads == 0 {
            return bad("hidden and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.tokens < 2 {
            return bad(format!("tokens must be >= 2, got {}", self.tokens));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if self.chunk == 0 {
            return bad("chunk must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden as f64 * self.mlp_ratio).round() as usize
    }

    pub fn feature_dim(&self) -> usize {
        (self.tokens - 1) * self.chunk
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `D × 3D`, columns ordered Q | K | V.
    pub qkv: Tensor,
    pub proj: Tensor,
    pub mlp1: Tensor,
    pub mlp2: Tensor,
    /// `2 × D`: gamma row, then beta row.
    pub ln1: Tensor,
    pub ln2: Tensor,
}

/// Frozen backbone weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    pub blocks: Vec<BlockParams>,
    /// `chunk × D` patch projection.
    pub embed: Tensor,
    /// `1 × D`.
    pub cls: Tensor,
    /// `N × D`.
    pub pos: Tensor,
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

fn identity_ln(d: usize) -> Tensor {
    Tensor::from_fn(&[2, d], |i| if i < d { 1.0 } else { 0.0 })
}

/// Deterministic random backbone. Draw order: embed, cls, pos, then per
/// block qkv, proj, mlp1, mlp2. Layer norms start as the identity affine.
pub fn init_encoder(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let d = cfg.hidden;
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = Rng::new(cfg.seed);
    let embed = gaussian(&mut rng, &[cfg.chunk, d], std);
    let cls = gaussian(&mut rng, &[1, d], std);
    let pos = gaussian(&mut rng, &[cfg.tokens, d], std);
    let blocks = (0..cfg.depth)
        .map(|_| BlockParams {
            qkv: gaussian(&mut rng, &[d, 3 * d], std),
            proj: gaussian(&mut rng, &[d, d], std),
            mlp1: gaussian(&mut rng, &[d, cfg.mlp_hidden()], std),
            mlp2: gaussian(&mut rng, &[cfg.mlp_hidden(), d], std),
            ln1: identity_ln(d),
            ln2: identity_ln(d),
        })
        .collect();
    Ok(EncoderParams {
        cfg: cfg.clone(),
        blocks,
        embed,
        cls,
        pos,
    })
}

/// Prefix supplied to one block.
#[derive(Clone, Debug)]
pub enum BlockPrefix {
    None,
    /// One `(p^k, p^v)` pair for every sample.
    Shared(Var, Var),
    /// One pair per sample in the batch.
    PerSample(Vec<(Var, Var)>),
}

impl BlockPrefix {
    fn for_sample(&self, b: usize) -> Option<(Var, Var)> {
        match self {
            BlockPrefix::None => None,
            BlockPrefix::Shared(k, v) => Some((*k, *v)),
            BlockPrefix::PerSample(pairs) => Some(pairs[b]),
        }
    }
}

/// Collects the attention-probability matrices of a forward pass.
#[derive(Debug, Default)]
pub struct AttentionProbe {
    pub probs: Vec<Var>,
}

struct BoundBlock {
    qkv: Var,
    proj: Var,
    mlp1: Var,
    mlp2: Var,
    ln1: (Var, Var),
    ln2: (Var, Var),
}

fn bind_ln(tape: &mut Tape, ln: &Tensor) -> (Var, Var) {
    let d = ln.cols();
    let gamma = Tensor::from_parts(vec![d], ln.row(0).to_vec());
    let beta = Tensor::from_parts(vec![d], ln.row(1).to_vec());
    (tape.constant(gamma), tape.constant(beta))
}

impl BlockParams {
    fn bind(&self, tape: &mut Tape) -> BoundBlock {
        BoundBlock {
            qkv: tape.constant(self.qkv.clone()),
            proj: tape.constant(self.proj.clone()),
            mlp1: tape.constant(self.mlp1.clone()),
            mlp2: tape.constant(self.mlp2.clone()),
            ln1: bind_ln(tape, &self.ln1),
            ln2: bind_ln(tape, &self.ln2),
        }
    }
}

/// Single-head attention with an optional key/value prefix:
/// `softmax(q [pk; k]ᵀ · scale) [pv; v]`, normalized jointly over all
/// prefix and sequence keys.
pub fn prefix_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    scale: f64,
    probe: Option<&mut AttentionProbe>,
) -> Result<Var> {
    let (k, v) = match prefix {
        Some((pk, pv)) => {
            if tape.value(pk).shape() != tape.value(pv).shape() {
                return Err(Error::dim(
                    "prefix_attention",
                    format!(
                        "key prefix {:?} vs value prefix {:?}",
                        tape.value(pk).shape(),
                        tape.value(pv).shape()
                    ),
                ));
            }
            (tape.concat_rows(pk, k)?, tape.concat_rows(pv, v)?)
        }
        None => (k, v),
    };
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, scale);
    let probs = tape.softmax_rows(scores)?;
    if let Some(p) = probe {
        p.probs.push(probs);
    }
    tape.matmul(probs, v)
}

impl EncoderParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile::new();
        for (i, b) in self.blocks.iter().enumerate() {
            wf.insert(format!("block{i}.qkv"), b.qkv.clone());
            wf.insert(format!("block{i}.proj"), b.proj.clone());
            wf.insert(format!("block{i}.mlp1"), b.mlp1.clone());
            wf.insert(format!("block{i}.mlp2"), b.mlp2.clone());
            wf.insert(format!("block{i}.ln1"), b.ln1.clone());
            wf.insert(format!("block{i}.ln2"), b.ln2.clone());
        }
        wf.insert("embed", self.embed.clone());
        wf.insert("cls", self.cls.clone());
        wf.insert("pos", self.pos.clone());
        wf
    }

    /// Builds params from a weight file, checking every tensor against `cfg`.
    pub fn from_weight_file(cfg: &EncoderConfig, wf: &WeightFile) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let h = cfg.mlp_hidden();
        let take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = wf
                .get(&name)
                .ok_or_else(|| Error::Config(format!("weight file lacks tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::dim(
                    "weights",
                    format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            Ok(t.clone())
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                Ok(BlockParams {
                    qkv: take(format!("block{i}.qkv"), &[d, 3 * d])?,
                    proj: take(format!("block{i}.proj"), &[d, d])?,
                    mlp1: take(format!("block{i}.mlp1"), &[d, h])?,
                    mlp2: take(format!("block{i}.mlp2"), &[h, d])?,
                    ln1: take(format!("block{i}.ln1"), &[2, d])?,
                    ln2: take(format!("block{i}.ln2"), &[2, d])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            embed: take("embed".into(), &[cfg.chunk, d])?,
            cls: take("cls".into(), &[1, d])?,
            pos: take("pos".into(), &[cfg.tokens, d])?,
        })
    }

    pub fn load(cfg: &EncoderConfig, path: &Path) -> Result<Self> {
        Self::from_weight_file(cfg, &WeightFile::read(path)?)
    }

    /// Input embedding: split each row into `N - 1` chunks, project, prepend
    /// the class token and add positions. Returns `(B·N) × D`.
    pub fn embed(&self, tape: &mut Tape, batch: &Tensor) -> Result<Var> {
        let cfg = &self.cfg;
        let (b, f) = batch
            .dims2()
            .ok_or_else(|| Error::dim("embed", format!("batch shape {:?}", batch.shape())))?;
        if f != cfg.feature_dim() {
            return Err(Error::dim(
                "embed",
                format!(
                    "feature dim {f}, expected {} = ({} - 1) x {}",
                    cfg.feature_dim(),
                    cfg.tokens,
                    cfg.chunk
                ),
            ));
        }
        let n = cfg.tokens;
        // All chunks of all samples in one matrix: (B·(N-1)) × chunk.
        let chunks = tape.constant(Tensor::from_parts(
            vec![b * (n - 1), cfg.chunk],
            batch.data().to_vec(),
        ));
        let w = tape.constant(self.embed.clone());
        let projected = tape.matmul(chunks, w)?;
        let cls = tape.constant(self.cls.clone());
        let pos = tape.constant(self.pos.clone());
        let mut seqs = Vec::with_capacity(b);
        for s in 0..b {
            let patches = tape.slice(projected, s * (n - 1)..(s + 1) * (n - 1), 0..cfg.hidden)?;
            let seq = tape.concat_rows(cls, patches)?;
            seqs.push(tape.add(seq, pos)?);
        }
        tape.concat_rows_many(&seqs)
    }

    /// Pre-norm transformer block on a stacked `(B·N') × D` input.
    pub fn attention_block(
        &self,
        tape: &mut Tape,
        h: Var,
        batch: usize,
        block: usize,
        prefix: &BlockPrefix,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        let params = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::Config(format!("block {block} out of range")))?;
        let bound = params.bind(tape);
        self.block_forward(tape, &bound, h, batch, prefix, probe, None)
    }

    /// With `only_row = Some(r)`, queries and everything after attention
    /// are restricted to row `r` of each sample, giving a `B × D` output.
    /// Every op is row-wise past the keys and values, so those rows are
    /// bit-identical to the full computation.
    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        tape: &mut Tape,
        blk: &BoundBlock,
        h: Var,
        batch: usize,
        prefix: &BlockPrefix,
        mut probe: Option<&mut AttentionProbe>,
        only_row: Option<usize>,
    ) -> Result<Var> {
        let d = self.cfg.hidden;
        let dh = self.cfg.head_dim();
        let heads = self.cfg.heads;
        let rows = tape.value(h).rows();
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::dim(
                "attention_block",
                format!("{rows} rows do not split into {batch} samples"),
            ));
        }
        let seq = rows / batch;
        if let BlockPrefix::PerSample(pairs) = prefix {
            if pairs.len() != batch {
                return Err(Error::dim(
                    "attention_block",
                    format!("{} per-sample prefixes for batch {batch}", pairs.len()),
                ));
            }
        }

        let a = tape.layer_norm(h, blk.ln1.0, blk.ln1.1, LN_EPS)?;
        let qkv = tape.matmul(a, blk.qkv)?;
        let scale = 1.0 / (dh as f64).sqrt();

        // Per-head slices of a shared prefix are the same for every sample.
        let shared_heads = match prefix {
            BlockPrefix::Shared(pk, pv) => Some(self.split_prefix(tape, *pk, *pv)?),
            _ => None,
        };

        let mut samples = Vec::with_capacity(batch);
        for s in 0..batch {
            let sample_heads = match (&shared_heads, prefix.for_sample(s)) {
                (Some(_), _) => None,
                (None, Some((pk, pv))) => Some(self.split_prefix(tape, pk, pv)?),
                (None, None) => None,
            };
            let rows = s * seq..(s + 1) * seq;
            let q_rows = match only_row {
                Some(r) => s * seq + r..s * seq + r + 1,
                None => rows.clone(),
            };
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let c = hd * dh;
                let q = tape.slice(qkv, q_rows.clone(), c..c + dh)?;
                let k = tape.slice(qkv, rows.clone(), d + c..d + c + dh)?;
                let v = tape.slice(qkv, rows.clone(), 2 * d + c..2 * d + c + dh)?;
                let pre = shared_heads
                    .as_ref()
                    .or(sample_heads.as_ref())
                    .map(|ph| ph[hd]);
                outs.push(prefix_attention(
                    tape,
                    q,
                    k,
                    v,
                    pre,
                    scale,
                    probe.as_deref_mut(),
                )?);
            }
            samples.push(tape.concat_cols_many(&outs)?);
        }
        let attn = tape.concat_rows_many(&samples)?;
        let attn = tape.matmul(attn, blk.proj)?;
        let h = match only_row {
            Some(r) => {
                let picked: Vec<Var> = (0..batch)
                    .map(|s| tape.slice(h, s * seq + r..s * seq + r + 1, 0..d))
                    .collect::<Result<_>>()?;
                tape.concat_rows_many(&picked)?
            }
            None => h,
        };
        let h = tape.add(h, attn)?;

        let m = tape.layer_norm(h, blk.ln2.0, blk.ln2.1, LN_EPS)?;
        let m = tape.matmul(m, blk.mlp1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, blk.mlp2)?;
        tape.add(h, m)
    }

    fn split_prefix(&self, tape: &mut Tape, pk: Var, pv: Var) -> Result<Vec<(Var, Var)>> {
        let d = self.cfg.hidden;
        for p in [pk, pv] {
            if tape.value(p).cols() != d || tape.value(p).dims2().is_none() {
                return Err(Error::dim(
                    "attention_block",
                    format!("prompt shape {:?}, expected M x {d}", tape.value(p).shape()),
                ));
            }
        }
        let m = tape.value(pk).rows();
        if tape.value(pv).rows() != m {
            return Err(Error::dim(
                "attention_block",
                format!(
                    "key prompt {:?} vs value prompt {:?}",
                    tape.value(pk).shape(),
                    tape.value(pv).shape()
                ),
            ));
        }
        let dh = self.cfg.head_dim();
        (0..self.cfg.heads)
            .map(|hd| {
                let c = hd * dh;
                Ok((
                    tape.slice(pk, 0..m, c..c + dh)?,
                    tape.slice(pv, 0..m, c..c + dh)?,
                ))
            })
            .collect()
    }

    /// Full forward pass returning the class-token feature `g` per sample
    /// (`B × D`). `prefixes[i]` feeds block `i`; missing entries mean no
    /// prefix. At most one of `prefixes` / `input_prompt` may be given.
    pub fn encode(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        prefixes: Option<&[BlockPrefix]>,
        input_prompt: Option<Var>,
    ) -> Result<Var> {
        self.encode_probed(tape, batch, prefixes, input_prompt, None)
    }

    pub fn encode_probed(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        prefixes: Option<&[BlockPrefix]>,
        input_prompt: Option<Var>,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        if prefixes.is_some() && input_prompt.is_some() {
            return Err(Error::Config(
                "prefix prompts and an input prompt cannot both be active".into(),
            ));
        }
        if let Some(p) = prefixes {
            if p.len() > self.cfg.depth {
                return Err(Error::Config(format!(
                    "{} prefixed blocks exceed depth {}",
                    p.len(),
                    self.cfg.depth
                )));
            }
        }
        let b = batch.rows();
        let mut h = self.embed(tape, batch)?;
        let mut seq = self.cfg.tokens;
        let mut cls_row = 0;
        if let Some(ip) = input_prompt {
            let m = tape.value(ip).rows();
            if tape.value(ip).cols() != self.cfg.hidden {
                return Err(Error::dim(
                    "encode",
                    format!("input prompt {:?}, expected M x {}", tape.value(ip).shape(), self.cfg.hidden),
                ));
            }
            let mut seqs = Vec::with_capacity(b);
            for s in 0..b {
                let tokens = tape.slice(h, s * seq..(s + 1) * seq, 0..self.cfg.hidden)?;
                seqs.push(tape.concat_rows(ip, tokens)?);
            }
            h = tape.concat_rows_many(&seqs)?;
            seq += m;
            cls_row = m;
        }
        let none = BlockPrefix::None;
        let depth = self.cfg.depth;
        // Only the class token leaves the encoder, so the last block skips
        // the other rows unless attention maps are being collected.
        let short_last = probe.is_none();
        for i in 0..depth {
            let prefix = prefixes.and_then(|p| p.get(i)).unwrap_or(&none);
            let bound = self.blocks[i].bind(tape);
            let only = (short_last && i + 1 == depth).then_some(cls_row);
            h = self.block_forward(tape, &bound, h, b, prefix, probe.as_deref_mut(), only)?;
        }
        if short_last {
            return Ok(h);
        }
        let cls: Vec<Var> = (0..b)
            .map(|s| {
                let r = s * seq + cls_row;
                tape.slice(h, r..r + 1, 0..self.cfg.hidden)
            })
            .collect::<Result<_>>()?;
        tape.concat_rows_many(&cls)
    }

    /// Prompt-free features without keeping a tape around.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.encode(&mut tape, batch, None, None)?;
        Ok(tape.value(g).clone())
    }
}

/// `K` pairs of `M × D` key/value prefixes for blocks `0..K`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub length: usize,
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PromptSet {
    pub fn new(layers: usize, length: usize, hidden: usize, rng: &mut Rng) -> Self {
        let layers = (0..layers)
            .map(|_| {
                (
                    gaussian(rng, &[length, hidden], PROMPT_INIT_STD),
                    gaussian(rng, &[length, hidden], PROMPT_INIT_STD),
                )
            })
            .collect();
        Self { length, layers }
    }

    pub fn injected_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(k, v)| [k, v]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(k, v)| [k, v]).collect()
    }

    /// Registers the prompts as learnable leaves. Returns per-block prefixes
    /// and the leaf handles in [`PromptSet::tensors`] order.
    pub fn bind(&self, tape: &mut Tape) -> (Vec<BlockPrefix>, Vec<Var>) {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        let prefixes = self
            .layers
            .iter()
            .map(|(k, v)| {
                let (pk, pv) = (tape.param(k.clone()), tape.param(v.clone()));
                vars.extend([pk, pv]);
                BlockPrefix::Shared(pk, pv)
            })
            .collect();
        (prefixes, vars)
    }
}

/// `M` learnable tokens prepended to the embedded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPrompt {
    pub tokens: Tensor,
}

impl InputPrompt {
    pub fn new(length: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            tokens: gaussian(rng, &[length, hidden], PROMPT_INIT_STD),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.param(self.tokens.clone())
    }
}
