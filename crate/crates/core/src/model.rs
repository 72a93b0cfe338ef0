//! Toy single-head Transformer with seeded weights.
//!
//! Two architectures are supported: a classic encoder-decoder and a prefix
//! LM, where the source tokens form a bidirectionally attended prefix that
//! generation continues from. Layers are `x + attn(x)·W_o`, then
//! `x + ffn(x)`, with no normalization.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CacheSet, LayerCache};
use crate::error::{Error, Result};
use crate::tensor::{bmm, bmm_nt, matmul, softmax_rows, Tensor, MASKED};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_RESERVED: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[serde(rename = "encdec")]
    EncoderDecoder,
    #[serde(rename = "prefixlm")]
    PrefixLm,
}

impl ArchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchKind::EncoderDecoder => "encdec",
            ArchKind::PrefixLm => "prefixlm",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "encdec" | "encoder-decoder" => Ok(ArchKind::EncoderDecoder),
            "prefixlm" | "prefix-lm" => Ok(ArchKind::PrefixLm),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ArchKind,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn encoder_decoder(layers: usize, dim: usize, vocab: usize) -> Self {
        ModelConfig {
            kind: ArchKind::EncoderDecoder,
            num_encoder_layers: layers,
            num_decoder_layers: layers,
            embed_dim: dim,
            ffn_dim: 2 * dim,
            vocab_size: vocab,
            max_positions: 256,
        }
    }

    pub fn prefix_lm(layers: usize, dim: usize, vocab: usize) -> Self {
        ModelConfig {
            kind: ArchKind::PrefixLm,
            num_encoder_layers: 0,
            num_decoder_layers: layers,
            embed_dim: dim,
            ffn_dim: 2 * dim,
            vocab_size: vocab,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if self.vocab_size < NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size must be at least {NUM_RESERVED} (pad, bos, eos, unk)"
            )));
        }
        if self.kind == ArchKind::PrefixLm && self.num_encoder_layers != 0 {
            return Err(Error::Config(
                "prefix-lm models have no encoder layers".into(),
            ));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    pub w_in: Tensor,
    pub w_out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: AttnWeights,
    pub ffn: FfnWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttnWeights,
    pub cross_attn: Option<AttnWeights>,
    pub ffn: FfnWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    /// `[V, D]`; the output projection reuses it transposed.
    pub embedding: Tensor,
    /// `[max_positions, D]` sinusoidal table.
    pub positions: Tensor,
}

/// Draws every matrix from `U(-1/sqrt(D), 1/sqrt(D))`.
pub fn init_weights(seed: u64, config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let d = config.embed_dim;
    let bound = 1.0 / (d as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |rows: usize, cols: usize| -> Tensor {
        Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-bound..=bound))
    };

    let embedding = mat(config.vocab_size, d);
    let encoder = (0..config.num_encoder_layers)
        .map(|_| EncoderLayer {
            self_attn: AttnWeights {
                wq: mat(d, d),
                wk: mat(d, d),
                wv: mat(d, d),
                wo: mat(d, d),
            },
            ffn: FfnWeights {
                w_in: mat(d, config.ffn_dim),
                w_out: mat(config.ffn_dim, d),
            },
        })
        .collect();
    let with_cross = config.kind == ArchKind::EncoderDecoder;
    let decoder = (0..config.num_decoder_layers)
        .map(|_| {
            let self_attn = AttnWeights {
                wq: mat(d, d),
                wk: mat(d, d),
                wv: mat(d, d),
                wo: mat(d, d),
            };
            let cross_attn = with_cross.then(|| AttnWeights {
                wq: mat(d, d),
                wk: mat(d, d),
                wv: mat(d, d),
                wo: mat(d, d),
            });
            DecoderLayer {
                self_attn,
                cross_attn,
                ffn: FfnWeights {
                    w_in: mat(d, config.ffn_dim),
                    w_out: mat(config.ffn_dim, d),
                },
            }
        })
        .collect();

    Ok(Weights {
        encoder,
        decoder,
        embedding,
        positions: sinusoidal_positions(config.max_positions, d),
    })
}

fn sinusoidal_positions(count: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[count, d], |i| {
        let pos = (i / d) as f32;
        let j = i % d;
        let freq = 1.0 / 10000f32.powf((2 * (j / 2)) as f32 / d as f32);
        if j.is_multiple_of(2) {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Right-padded source token ids `[B, N]` with per-row valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    ids: Vec<u32>,
    batch: usize,
    width: usize,
    lengths: Vec<usize>,
}

impl SourceBatch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for row in rows {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat_n(PAD, width - row.len()));
        }
        SourceBatch {
            ids,
            batch: rows.len(),
            width,
            lengths: rows.iter().map(Vec::len).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.width..b * self.width + self.lengths[b]]
    }

    fn padded_row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.width..(b + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[B, N, D]`
    pub hidden: Tensor,
    pub source_lengths: Vec<usize>,
}

/// Hidden inputs of every decoder layer at the prefix positions, `[B, N, D]`
/// each.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixStates {
    pub layer_inputs: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

/// What the decoder is conditioned on, kept by sessions that recompute
/// everything from scratch.
#[derive(Clone, Debug)]
pub enum Conditioning {
    Encoded(EncoderOutput),
    Prefix(SourceBatch),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    attn_scale: f32,
}

impl Model {
    pub fn new(seed: u64, config: ModelConfig) -> Result<Self> {
        let weights = init_weights(seed, &config)?;
        Ok(Self::from_weights(config, weights))
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Self {
        let attn_scale = 1.0 / (config.embed_dim as f32).sqrt();
        Model {
            config,
            weights,
            attn_scale,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Multiplier applied to raw attention scores, `1/sqrt(D)`.
    pub fn attn_scale(&self) -> f32 {
        self.attn_scale
    }

    fn check_ids(&self, ids: impl IntoIterator<Item = u32>) -> Result<()> {
        let v = self.config.vocab_size;
        for id in ids {
            if id as usize >= v {
                return Err(Error::Index {
                    op: "embed",
                    index: id as usize,
                    bound: v,
                });
            }
        }
        Ok(())
    }

    /// Token embedding scaled by `sqrt(D)` plus the position encoding.
    fn embed_token(&self, id: u32, position: usize, dst: &mut [f32]) -> Result<()> {
        if position >= self.config.max_positions {
            return Err(Error::state(format!(
                "position {position} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let scale = (self.config.embed_dim as f32).sqrt();
        let e = self.weights.embedding.row(id as usize);
        let p = self.weights.positions.row(position);
        for ((o, &x), &y) in dst.iter_mut().zip(e).zip(p) {
            *o = x * scale + y;
        }
        Ok(())
    }

    /// Embeds one token per row: `[R] -> [R, 1, D]`.
    pub fn embed_step(&self, ids: &[u32], positions: &[usize]) -> Result<Tensor> {
        self.check_ids(ids.iter().copied())?;
        let d = self.config.embed_dim;
        let mut out = Tensor::zeros(&[ids.len(), 1, d]);
        for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            self.embed_token(id, pos, out.row_mut(r))?;
        }
        Ok(out)
    }

    fn embed_sequence(&self, ids: &[u32], first_position: usize) -> Result<Tensor> {
        self.check_ids(ids.iter().copied())?;
        let d = self.config.embed_dim;
        let mut out = Tensor::zeros(&[1, ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            self.embed_token(id, first_position + i, &mut out.data_mut()[i * d..(i + 1) * d])?;
        }
        Ok(out)
    }

    pub(crate) fn ffn(&self, ffn: &FfnWeights, x: &Tensor) -> Result<Tensor> {
        let mut h = matmul(x, &ffn.w_in)?;
        h.relu();
        matmul(&h, &ffn.w_out)
    }

    /// `[R, 1, D] -> [R, V]` through the tied embedding.
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let d = self.config.embed_dim;
        let rows = hidden.numel() / d;
        let scale = (d as f32).sqrt();
        let v = self.config.vocab_size;
        let mut out = vec![0.0f32; rows * v];
        for r in 0..rows {
            let h = &hidden.data()[r * d..(r + 1) * d];
            for (tok, o) in out[r * v..(r + 1) * v].iter_mut().enumerate() {
                let e = self.weights.embedding.row(tok);
                *o = h.iter().zip(e).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
        }
        Tensor::new(vec![rows, v], out)
    }

    /// Scaled dot-product attention over explicit sequences:
    /// `q_in [1, Lq, D]`, `kv_in [1, Lk, D]`, `allowed(i, j)` selects visible keys.
    fn attend_full(
        &self,
        w: &AttnWeights,
        q_in: &Tensor,
        kv_in: &Tensor,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Result<Tensor> {
        if q_in.shape()[1] == 0 {
            return Ok(Tensor::zeros(&[1, 0, self.config.embed_dim]));
        }
        let q = matmul(q_in, &w.wq)?;
        let k = matmul(kv_in, &w.wk)?;
        let v = matmul(kv_in, &w.wv)?;
        let mut scores = bmm_nt(&q, &k)?;
        let lk = k.shape()[1];
        for (i, row) in scores.data_mut().chunks_mut(lk.max(1)).enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s = if allowed(i, j) {
                    *s * self.attn_scale
                } else {
                    MASKED
                };
            }
        }
        let probs = softmax_rows(&scores)?;
        matmul(&bmm(&probs, &v)?, &w.wo)
    }

    /// Bidirectional encoder over right-padded sources; pad keys are masked.
    pub fn encode(&self, sources: &SourceBatch) -> Result<EncoderOutput> {
        if self.config.kind != ArchKind::EncoderDecoder {
            return Err(Error::UnsupportedArchitecture {
                op: "encode",
                arch: "prefix-lm",
            });
        }
        if let Some(row) = sources.lengths().iter().position(|&l| l == 0) {
            return Err(Error::Config(format!(
                "encoder-decoder source row {row} is empty; cross attention needs at least one key"
            )));
        }
        let (b, n, d) = (sources.batch(), sources.width(), self.config.embed_dim);
        let mut hidden = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            let len = sources.lengths()[bi];
            let mut x = self.embed_sequence(sources.padded_row(bi), 0)?;
            for layer in &self.weights.encoder {
                let a = self.attend_full(&layer.self_attn, &x, &x, |_, j| j < len)?;
                x.add_assign(&a)?;
                x.add_assign(&self.ffn(&layer.ffn, &x)?)?;
            }
            hidden.extend_from_slice(x.data());
        }
        Ok(EncoderOutput {
            hidden: Tensor::new(vec![b, n, d], hidden)?,
            source_lengths: sources.lengths().to_vec(),
        })
    }

    /// Runs the decoder stack over the prefix with bidirectional attention
    /// restricted to valid prefix positions, recording each layer's input.
    pub fn encode_prefix(&self, sources: &SourceBatch) -> Result<PrefixStates> {
        if self.config.kind != ArchKind::PrefixLm {
            return Err(Error::UnsupportedArchitecture {
                op: "encode_prefix",
                arch: "encoder-decoder",
            });
        }
        let (b, n, d) = (sources.batch(), sources.width(), self.config.embed_dim);
        let layers = self.weights.decoder.len();
        let mut per_layer: Vec<Vec<f32>> = vec![Vec::with_capacity(b * n * d); layers];
        for bi in 0..b {
            let len = sources.lengths()[bi];
            let mut x = self.embed_sequence(sources.padded_row(bi), 0)?;
            for (l, layer) in self.weights.decoder.iter().enumerate() {
                per_layer[l].extend_from_slice(x.data());
                let a = self.attend_full(&layer.self_attn, &x, &x, |_, j| j < len)?;
                x.add_assign(&a)?;
                x.add_assign(&self.ffn(&layer.ffn, &x)?)?;
            }
        }
        Ok(PrefixStates {
            layer_inputs: per_layer
                .into_iter()
                .map(|data| Tensor::new(vec![b, n, d], data))
                .collect::<Result<_>>()?,
            lengths: sources.lengths().to_vec(),
        })
    }

    /// Runs both passes needed before decoding starts.
    pub fn condition(&self, sources: &SourceBatch) -> Result<Conditioning> {
        Ok(match self.config.kind {
            ArchKind::EncoderDecoder => Conditioning::Encoded(self.encode(sources)?),
            ArchKind::PrefixLm => Conditioning::Prefix(sources.clone()),
        })
    }

    /// One incremental step: `y_prev [B*M]` ids in, logits `[B*M, V]` out.
    /// `step` is 1-based and must follow the steps already held by `caches`.
    pub fn decode_step(&self, y_prev: &[u32], caches: &mut CacheSet, step: usize) -> Result<Tensor> {
        if step != caches.steps() + 1 {
            return Err(Error::state(format!(
                "decode step {step} does not follow cache holding {} steps",
                caches.steps()
            )));
        }
        if y_prev.len() != caches.rows() {
            return Err(Error::dim("decode_step", &[y_prev.len()], &[caches.rows()]));
        }
        let strategy = crate::attention::strategy_for(caches.mode());
        strategy.step(self, caches, y_prev)
    }

    /// Incremental step through per-layer caches. Shared by the caching
    /// strategies; layer attention dispatches on the cache layout.
    pub(crate) fn decode_step_cached(&self, y_prev: &[u32], caches: &mut CacheSet) -> Result<Tensor> {
        let positions = caches.next_positions();
        let mut h = self.embed_step(y_prev, &positions)?;
        if caches.layers().len() != self.weights.decoder.len() {
            return Err(Error::state("cache layer count does not match the model"));
        }
        for (layer, cache) in self.weights.decoder.iter().zip(caches.layers_mut()) {
            let LayerCache {
                self_attn,
                cross_attn,
            } = cache;
            let (a, _) = self_attn.attend(&h, &layer.self_attn, self.attn_scale)?;
            h.add_assign(&matmul(&a, &layer.self_attn.wo)?)?;
            if let (Some(w), Some(cross)) = (&layer.cross_attn, cross_attn.as_ref()) {
                let (a, _) = cross.attend(&h, w, self.attn_scale)?;
                h.add_assign(&matmul(&a, &w.wo)?)?;
            }
            let f = self.ffn(&layer.ffn, &h)?;
            h.add_assign(&f)?;
        }
        caches.advance();
        self.logits(&h)
    }

    /// Cache-free oracle: recomputes every layer over the full sequence
    /// (`bos` plus generated tokens per row) and returns the logits of the
    /// last position. Rows are grouped into beams of `rows / B`.
    pub fn decode_step_nocache(&self, full_prefix: &[Vec<u32>], cond: &Conditioning) -> Result<Tensor> {
        let batch = match cond {
            Conditioning::Encoded(enc) => enc.source_lengths.len(),
            Conditioning::Prefix(src) => src.batch(),
        };
        let rows = full_prefix.len();
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::dim("decode_step_nocache", &[rows], &[batch]));
        }
        let beam = rows / batch;
        let d = self.config.embed_dim;
        let mut last = Tensor::zeros(&[rows, 1, d]);
        for (r, seq) in full_prefix.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::state("nocache decode needs at least the bos token"));
            }
            let b = r / beam;
            let h = match cond {
                Conditioning::Encoded(enc) => self.full_encdec_row(seq, enc, b)?,
                Conditioning::Prefix(src) => self.full_prefix_row(seq, src.row(b))?,
            };
            let t = h.shape()[1];
            last.row_mut(r).copy_from_slice(&h.data()[(t - 1) * d..t * d]);
        }
        self.logits(&last)
    }

    fn full_encdec_row(&self, seq: &[u32], enc: &EncoderOutput, b: usize) -> Result<Tensor> {
        let d = self.config.embed_dim;
        let n = enc.hidden.shape()[1];
        let src_len = enc.source_lengths[b];
        let memory = Tensor::new(vec![1, n, d], enc.hidden.row(b).to_vec())?;
        let mut x = self.embed_sequence(seq, 0)?;
        for layer in &self.weights.decoder {
            let a = self.attend_full(&layer.self_attn, &x, &x, |i, j| j <= i)?;
            x.add_assign(&a)?;
            if let Some(w) = &layer.cross_attn {
                let a = self.attend_full(w, &x, &memory, |_, j| j < src_len)?;
                x.add_assign(&a)?;
            }
            x.add_assign(&self.ffn(&layer.ffn, &x)?)?;
        }
        Ok(x)
    }

    fn full_prefix_row(&self, seq: &[u32], prefix: &[u32]) -> Result<Tensor> {
        let p = prefix.len();
        let mut ids = prefix.to_vec();
        ids.extend_from_slice(seq);
        let mut x = self.embed_sequence(&ids, 0)?;
        let visible = |i: usize, j: usize| if i < p { j < p } else { j <= i };
        for layer in &self.weights.decoder {
            let a = self.attend_full(&layer.self_attn, &x, &x, visible)?;
            x.add_assign(&a)?;
            x.add_assign(&self.ffn(&layer.ffn, &x)?)?;
        }
        let d = self.config.embed_dim;
        let t = seq.len();
        Tensor::new(vec![1, t, d], x.data()[p * d..].to_vec())
    }
}

/// Reshapes `[B, N, D]` to the beam-free `[B, 1, N, D]` layout.
pub(crate) fn beam_free(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim("beam_free", s, &[0, 0, 0]));
    }
    x.clone().reshape(&[s[0], 1, s[1], s[2]])
}
