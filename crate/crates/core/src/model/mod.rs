//! GPT-2 style decoder: pre-layer-norm blocks, learned absolute positions,
//! optional tying of the output head to the token embedding.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{AttentionShape, Graph, Tensor, Var};
use crate::vocab::{NUM_SPECIALS, PAD};
use crate::{Error, Result, Scalar};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

pub const INIT_STD: f64 = 0.02;

/// Number of parameter tensors in one transformer block.
pub const TENSORS_PER_BLOCK: usize = 16;

const BLOCK_TENSOR_NAMES: [&str; TENSORS_PER_BLOCK] = [
    "ln1.gain", "ln1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
    "attn.v.weight", "attn.v.bias", "attn.o.weight", "attn.o.bias", "ln2.gain", "ln2.bias",
    "mlp.fc.weight", "mlp.fc.bias", "mlp.proj.weight", "mlp.proj.bias",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_tie() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, 4 heads, width 128, context 256.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            context_len: 256,
            vocab_size,
            tie_embeddings: true,
        }
    }

    /// GPT-2 base dimensions over a 25,370-token base vocabulary grown by
    /// `added` characters. Expressible, not meant for CPU training.
    pub fn full_scale(added: usize) -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            context_len: 1024,
            vocab_size: 25_370 + added,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Param(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < NUM_SPECIALS {
            return Err(Error::Param(format!(
                "vocab_size {} is smaller than the {NUM_SPECIALS} special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let shapes = [
                vec![d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d],
                vec![d, d], vec![d], vec![d], vec![d], vec![d, f], vec![f], vec![f, d], vec![d],
            ];
            for (name, shape) in BLOCK_TENSOR_NAMES.iter().zip(shapes) {
                out.push((format!("h.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("lm_head".to_string(), vec![self.vocab_size, d]));
        }
        out
    }
}

/// Token ids of a padded batch, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads rows with PAD to the longest row (or to `seq` when given).
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R], seq: Option<usize>) -> Result<Self> {
        let longest = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let seq = seq.unwrap_or(longest);
        if longest > seq {
            return Err(Error::Shape(format!("row of length {longest} in a batch of width {seq}")));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            ids.extend_from_slice(r.as_ref());
            ids.extend(std::iter::repeat_n(PAD, seq - r.as_ref().len()));
        }
        Ok(TokenBatch {
            ids,
            batch: rows.len(),
            seq,
            lengths: rows.iter().map(|r| r.as_ref().len()).collect(),
        })
    }
}

/// Anything that yields next-token logits for a token prefix.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;

    fn context_len(&self) -> usize;

    /// Logits for every position of `ids`: `ids.len()` rows of `vocab_size`.
    fn logits(&self, ids: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptModel<S> {
    config: ModelConfig,
    params: Vec<Tensor<S>>,
}

fn normal_tensor<S: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

impl<S: Scalar> GptModel<S> {
    /// Weights and embeddings from Normal(0, 0.02), biases 0, layer-norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".gain") {
                    Tensor::filled(shape, S::one())
                } else if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    normal_tensor(shape, &mut rng)
                }
            })
            .collect();
        Ok(GptModel { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest();
        if manifest.len() != params.len()
            || manifest.iter().zip(&params).any(|((_, shape), p)| shape != p.shape())
        {
            return Err(Error::Shape("parameters do not match the model config".into()));
        }
        Ok(GptModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.manifest().into_iter().map(|(n, _)| n).collect()
    }

    /// Trainable element count; a tied head is counted once.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> GptModel<T> {
        GptModel {
            config: self.config,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Grows the embedding (and untied head) to `vocab_size` rows; new rows
    /// are drawn from Normal(0, 0.02). Existing rows are untouched.
    pub fn resize_vocab(&mut self, vocab_size: usize, seed: u64) -> Result<()> {
        let old = self.config.vocab_size;
        if vocab_size < old {
            return Err(Error::Param(format!(
                "cannot shrink vocabulary from {old} to {vocab_size}"
            )));
        }
        let d = self.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grow = |t: &mut Tensor<S>| {
            let rows = normal_tensor::<S>(vec![vocab_size - old, d], &mut rng);
            t.push_rows(rows.data())
        };
        grow(&mut self.params[0])?;
        if !self.config.tie_embeddings {
            let last = self.params.len() - 1;
            grow(&mut self.params[last])?;
        }
        self.config.vocab_size = vocab_size;
        Ok(())
    }

    /// Registers every parameter as a graph leaf (ids are storage indices).
    pub fn register(&self, graph: &mut Graph<S>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| graph.param(p, i))
            .collect()
    }

    /// Builds the forward pass into `graph`; returns logits `[batch * seq, vocab]`.
    pub fn forward_graph(&self, graph: &mut Graph<S>, batch: &TokenBatch) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq > cfg.context_len {
            return Err(Error::TooLong {
                len: batch.seq,
                context_len: cfg.context_len,
            });
        }
        if batch.ids.len() != batch.batch * batch.seq || batch.lengths.len() != batch.batch {
            return Err(Error::Shape("token batch is inconsistent".into()));
        }
        if let Some(&l) = batch.lengths.iter().find(|&&l| l > batch.seq) {
            return Err(Error::Shape(format!("row length {l} exceeds batch width {}", batch.seq)));
        }
        let p = self.register(graph);
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let tok = graph.gather(p[0], &batch.ids)?;
        let pos = graph.gather(p[1], &positions)?;
        let mut x = graph.add(tok, pos)?;
        let shape = AttentionShape {
            batch: batch.batch,
            seq: batch.seq,
            heads: cfg.n_heads,
        };
        for l in 0..cfg.n_layers {
            let w = &p[2 + l * TENSORS_PER_BLOCK..2 + (l + 1) * TENSORS_PER_BLOCK];
            let h = graph.layer_norm(x, w[0], w[1])?;
            let proj = |graph: &mut Graph<S>, weight: Var, bias: Var| -> Result<Var> {
                let y = graph.matmul(h, weight)?;
                graph.add_row(y, bias)
            };
            let q = proj(graph, w[2], w[3])?;
            let k = proj(graph, w[4], w[5])?;
            let v = proj(graph, w[6], w[7])?;
            let a = graph.attention(q, k, v, shape, &batch.lengths)?;
            let o = graph.matmul(a, w[8])?;
            let o = graph.add_row(o, w[9])?;
            x = graph.add(x, o)?;

            let h = graph.layer_norm(x, w[10], w[11])?;
            let f = graph.matmul(h, w[12])?;
            let f = graph.add_row(f, w[13])?;
            let f = graph.gelu(f);
            let f = graph.matmul(f, w[14])?;
            let f = graph.add_row(f, w[15])?;
            x = graph.add(x, f)?;
        }
        let base = 2 + cfg.n_layers * TENSORS_PER_BLOCK;
        let x = graph.layer_norm(x, p[base], p[base + 1])?;
        let head = if cfg.tie_embeddings { p[0] } else { p[base + 2] };
        graph.matmul_nt(x, head)
    }

    /// Logits `[batch, seq, vocab]` for a padded batch.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor<S>> {
        let mut graph = Graph::new();
        let logits = self.forward_graph(&mut graph, batch)?;
        let data = graph.value(logits).to_vec();
        Tensor::new(vec![batch.batch, batch.seq, self.config.vocab_size], data)
    }
}

impl<S: Scalar> CausalLm for GptModel<S> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let batch = TokenBatch::from_rows(&[ids], None)?;
        Ok(self.forward(&batch)?.data().iter().map(|x| x.f64()).collect())
    }
}
