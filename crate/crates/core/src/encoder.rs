//! Sentence encoders: embedding lookup, pooling, optional attention blocks
//! and an output head, plus the student-to-teacher projection.
//!
//! Parameter names:
//!
//! | name                | shape                         |
//! |---------------------|-------------------------------|
//! | `embedding`         | `[V, embed_dim]`              |
//! | `block{i}.query`    | `[embed_dim, embed_dim]`      |
//! | `block{i}.key`      | `[embed_dim, embed_dim]`      |
//! | `block{i}.value`    | `[embed_dim, embed_dim]`      |
//! | `head.weight`       | `[embed_dim, output_dim]`     |
//! | `head.bias`         | `[output_dim]`                |
//! | `projection`        | `[teacher_dim, output_dim]`   |

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Params, Tape, Var};
use crate::tensor::{self, Tensor};
use crate::vocab::{tokenize, Sentence, Vocabulary};

pub const EMBEDDING: &str = "embedding";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const PROJECTION: &str = "projection";

pub const DEFAULT_TEACHER_DIM: usize = 32;
pub const DEFAULT_EMBED_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean of token embeddings, no head. Output dim equals embed dim.
    Mean,
    /// Mean of token embeddings followed by a dense head.
    MeanMlp,
    /// `blocks` residual self-attention blocks, mean pooling, dense head.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub pooling: Pooling,
    pub blocks: usize,
    pub output_dim: usize,
    pub head_activation: Activation,
    pub frozen: bool,
}

impl EncoderConfig {
    /// Mean pooling plus one tanh dense layer.
    pub fn student(embed_dim: usize, output_dim: usize) -> Self {
        Self {
            embed_dim,
            pooling: Pooling::MeanMlp,
            blocks: 0,
            output_dim,
            head_activation: Activation::Tanh,
            frozen: false,
        }
    }

    pub fn attention_student(embed_dim: usize, blocks: usize, output_dim: usize) -> Self {
        Self {
            pooling: Pooling::Attention,
            blocks,
            ..Self::student(embed_dim, output_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.output_dim == 0 {
            return Err(Error::Invalid("encoder dimensions must be positive".into()));
        }
        match self.pooling {
            Pooling::Mean if self.output_dim != self.embed_dim => Err(Error::Invalid(format!(
                "mean pooling without a head needs output_dim == embed_dim ({} != {})",
                self.output_dim, self.embed_dim
            ))),
            Pooling::Mean | Pooling::MeanMlp if self.blocks != 0 => Err(Error::Invalid(
                "attention blocks are only valid with attention pooling".into(),
            )),
            Pooling::Attention if self.blocks == 0 => {
                Err(Error::Invalid("attention pooling needs at least one block".into()))
            }
            _ => Ok(()),
        }
    }

    fn has_head(&self) -> bool {
        self.pooling != Pooling::Mean
    }
}

fn block_names(i: usize) -> [String; 3] {
    [format!("block{i}.query"), format!("block{i}.key"), format!("block{i}.value")]
}

/// Shapes every parameter must have for `config`, projection excluded.
fn expected_shapes(vocab: &Vocabulary, config: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
    let d = config.embed_dim;
    let mut shapes = BTreeMap::from([(EMBEDDING.to_string(), vec![vocab.size, d])]);
    for i in 0..config.blocks {
        for name in block_names(i) {
            shapes.insert(name, vec![d, d]);
        }
    }
    if config.has_head() {
        shapes.insert(HEAD_WEIGHT.to_string(), vec![d, config.output_dim]);
        shapes.insert(HEAD_BIAS.to_string(), vec![config.output_dim]);
    }
    shapes
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub vocab: Vocabulary,
    pub config: EncoderConfig,
    pub params: Params,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * std;
    }
    t
}

impl Encoder {
    pub fn new(vocab: Vocabulary, config: EncoderConfig, params: Params) -> Result<Self> {
        let enc = Self { vocab, config, params };
        enc.validate()?;
        Ok(enc)
    }

    /// Randomly initialised trainable encoder.
    pub fn init(seed: u64, vocab: Vocabulary, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut params = Params::new();
        params.insert(EMBEDDING.into(), normal_tensor(&mut rng, &[vocab.size, d], 1.0));
        for i in 0..config.blocks {
            for name in block_names(i) {
                params.insert(name, normal_tensor(&mut rng, &[d, d], inv_sqrt_d));
            }
        }
        if config.has_head() {
            params.insert(HEAD_WEIGHT.into(), normal_tensor(&mut rng, &[d, config.output_dim], inv_sqrt_d));
            params.insert(HEAD_BIAS.into(), Tensor::zeros(&[config.output_dim]));
        }
        Self::new(vocab, config, params)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = expected_shapes(&self.vocab, &self.config);
        for (name, shape) in &expected {
            let p = self.params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("encoder", shape, p.shape()));
            }
            if !p.all_finite() {
                return Err(Error::NonFinite { op: "encoder" });
            }
        }
        for name in self.params.keys() {
            if !expected.contains_key(name) && name != PROJECTION {
                return Err(Error::Invalid(format!("unexpected encoder parameter `{name}`")));
            }
        }
        if let Some(m) = self.params.get(PROJECTION) {
            if m.shape().len() != 2 || m.shape()[1] != self.config.output_dim {
                return Err(Error::shape("projection", &[0, self.config.output_dim], m.shape()));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn projection(&self) -> Option<&Tensor> {
        self.params.get(PROJECTION)
    }

    /// Adds a projection to `teacher_dim` when the output dimension differs,
    /// drawn uniformly from `±1/sqrt(output_dim)`. Removes a stale one when
    /// the dimensions agree.
    pub fn align_to_teacher(&mut self, teacher_dim: usize, seed: u64) {
        let out = self.config.output_dim;
        if teacher_dim == out {
            self.params.remove(PROJECTION);
            return;
        }
        if self.projection().is_some_and(|m| m.shape() == [teacher_dim, out]) {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let bound = 1.0 / (out as f64).sqrt();
        let mut m = Tensor::zeros(&[teacher_dim, out]);
        for v in m.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        self.params.insert(PROJECTION.into(), m);
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.as_str() != PROJECTION)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn tokenize_batch(&self, batch: &[Sentence]) -> Result<Vec<Vec<usize>>> {
        batch.iter().map(|s| tokenize(s, &self.vocab)).collect()
    }

    /// Registers the encoder's parameters on `tape`: as trainable leaves,
    /// or as constants when the encoder is frozen. The projection is only
    /// bound when `with_projection` is set.
    pub fn bind(&self, tape: &Tape, with_projection: bool) -> Result<BTreeMap<String, Var>> {
        let trainable = !self.config.frozen;
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            if name == PROJECTION && !with_projection {
                continue;
            }
            let v = if trainable { tape.param(name, t)? } else { tape.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Ok(vars)
    }

    /// Encodes pre-tokenized sentences into an `[n, output_dim]` batch.
    pub fn forward(&self, tape: &Tape, vars: &BTreeMap<String, Var>, tokens: &[Vec<usize>]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot encode an empty batch".into()));
        }
        let get = |name: &str| vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.into()));
        let table = get(EMBEDDING)?;
        let pooled = match self.config.pooling {
            Pooling::Mean | Pooling::MeanMlp => tape.segment_mean(table, tokens)?,
            Pooling::Attention => {
                let scale = 1.0 / (self.config.embed_dim as f64).sqrt();
                let mut rows = Vec::with_capacity(tokens.len());
                for ids in tokens {
                    let mut x = tape.gather_rows(table, ids)?;
                    for i in 0..self.config.blocks {
                        let [q, k, v] = block_names(i);
                        let q = tape.matmul(x, get(&q)?)?;
                        let k = tape.matmul(x, get(&k)?)?;
                        let v = tape.matmul(x, get(&v)?)?;
                        let scores = tape.scale(tape.matmul(q, tape.transpose(k)?)?, scale)?;
                        let attn = tape.softmax_rows(scores)?;
                        x = tape.add(x, tape.matmul(attn, v)?)?;
                    }
                    rows.push(tape.mean_rows(x)?);
                }
                tape.concat_rows(&rows)?
            }
        };
        if !self.config.has_head() {
            return Ok(pooled);
        }
        let hidden = tape.matmul(pooled, get(HEAD_WEIGHT)?)?;
        let hidden = tape.add_row_broadcast(hidden, get(HEAD_BIAS)?)?;
        match self.config.head_activation {
            Activation::Identity => Ok(hidden),
            Activation::Tanh => tape.tanh(hidden),
        }
    }

    /// Gradient-free encoding. A pure function of `(batch, self)`.
    pub fn encode(&self, batch: &[Sentence]) -> Result<Tensor> {
        let tokens = self.tokenize_batch(batch)?;
        self.encode_tokens(&tokens)
    }

    pub fn encode_tokens(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = tape.bind(&self.params, false)?;
        let out = self.forward(&tape, &vars, tokens)?;
        tape.value(out)
    }
}

/// Something that maps sentences to an `[n, dim]` embedding batch.
pub trait SentenceEncoder {
    fn embed(&self, batch: &[Sentence]) -> Result<Tensor>;
}

impl SentenceEncoder for Encoder {
    fn embed(&self, batch: &[Sentence]) -> Result<Tensor> {
        self.encode(batch)
    }
}

impl<F> SentenceEncoder for F
where
    F: Fn(&[Sentence]) -> Result<Tensor>,
{
    fn embed(&self, batch: &[Sentence]) -> Result<Tensor> {
        self(batch)
    }
}

/// `h M^T`: maps an `[n, student_dim]` batch through a
/// `[teacher_dim, student_dim]` matrix to `[n, teacher_dim]`.
pub fn project(tape: &Tape, h: Var, m: Var) -> Result<Var> {
    let hs = tape.shape(h)?;
    let ms = tape.shape(m)?;
    if hs.len() != 2 || ms.len() != 2 || hs[1] != ms[1] {
        return Err(Error::shape("project", &hs, &ms));
    }
    tape.matmul(h, tape.transpose(m)?)
}

pub fn project_tensor(h: &Tensor, m: &Tensor) -> Result<Tensor> {
    if h.shape().len() != 2 || m.shape().len() != 2 || h.cols() != m.cols() {
        return Err(Error::shape("project", h.shape(), m.shape()));
    }
    tensor::matmul(h, &tensor::transpose(m)?)
}

/// Settings for the synthetic teacher's structured embedding table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherOptions {
    pub embed_dim: usize,
    /// Token ids are grouped into this many latent classes by `id % classes`.
    pub latent_classes: usize,
    /// Per-token deviation from its class centroid.
    pub token_noise: f64,
}

pub const DEFAULT_LATENT_CLASSES: usize = 16;

impl Default for TeacherOptions {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            latent_classes: DEFAULT_LATENT_CLASSES,
            token_noise: 0.5,
        }
    }
}

/// A frozen, seeded teacher: class-structured random embedding table,
/// mean pooling, fixed random linear head.
pub fn make_synthetic_teacher(seed: u64, vocab: Vocabulary, output_dim: usize) -> Result<Encoder> {
    make_synthetic_teacher_with(seed, vocab, output_dim, TeacherOptions::default())
}

pub fn make_synthetic_teacher_with(
    seed: u64,
    vocab: Vocabulary,
    output_dim: usize,
    opts: TeacherOptions,
) -> Result<Encoder> {
    if output_dim == 0 || opts.embed_dim == 0 || opts.latent_classes == 0 {
        return Err(Error::Invalid("teacher dimensions and class count must be positive".into()));
    }
    let config = EncoderConfig {
        embed_dim: opts.embed_dim,
        pooling: Pooling::MeanMlp,
        blocks: 0,
        output_dim,
        head_activation: Activation::Identity,
        frozen: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = opts.embed_dim;
    let centroids = normal_tensor(&mut rng, &[opts.latent_classes, d], 1.0);
    let mut table = normal_tensor(&mut rng, &[vocab.size, d], opts.token_noise);
    for (id, row) in table.data_mut().chunks_mut(d).enumerate() {
        for (v, c) in row.iter_mut().zip(centroids.row(id % opts.latent_classes)) {
            *v += c;
        }
    }
    let head = normal_tensor(&mut rng, &[d, output_dim], 1.0 / (d as f64).sqrt());
    let params = Params::from([
        (EMBEDDING.to_string(), table),
        (HEAD_WEIGHT.to_string(), head),
        (HEAD_BIAS.to_string(), Tensor::zeros(&[output_dim])),
    ]);
    Encoder::new(vocab, config, params)
}
