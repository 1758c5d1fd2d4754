//! Toy two-modality network: an attention encoder over EEG amplitude tokens,
//! a patch perceptron over the resampled other-modality (OM) image, a stack
//! of cross-attention decoder blocks with OM queries and EEG keys/values, and
//! a one-hidden-layer classifier over the released features.
//!
//! Every forward pass runs on a [`Graph`], which binds the flat parameter
//! store to fresh autodiff leaves. Inputs are batched along a leading axis.

mod input;

use std::cell::RefCell;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::privacy::{NormalizationSpec, PrivacyError};
use crate::random::open_unit;
use crate::Scalar;

pub use input::{
    patchify, positional_encoding, token_frequencies, transform_om, window_count,
    window_frequencies, window_pooling, window_positional, EegTokenizer,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{0} contains a non-finite value")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ModelError::Shape(format!(
                "buffer of length {} does not fill {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::NonFinite(what))
        }
    }
}

/// One labelled observation of both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample<T> {
    /// channels × timesteps
    pub eeg: Matrix<T>,
    /// om_dims × timesteps
    pub om: Matrix<T>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub eeg_channels: usize,
    pub timesteps: usize,
    pub om_dims: usize,
    pub vocab: usize,
    /// Timesteps merged into one encoder position.
    pub window: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub d_feat: usize,
    pub eeg_layers: usize,
    pub cross_layers: usize,
    /// Resampled OM image width.
    pub om_width: usize,
    pub patch: usize,
    pub om_hidden: usize,
    pub classifier_hidden: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            eeg_channels: 8,
            timesteps: 128,
            om_dims: 4,
            vocab: 32,
            window: 16,
            d_model: 32,
            d_k: 32,
            d_ff: 32,
            d_feat: 16,
            eeg_layers: 2,
            cross_layers: 3,
            om_width: 16,
            patch: 4,
            om_hidden: 32,
            classifier_hidden: 32,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eeg_channels", self.eeg_channels),
            ("timesteps", self.timesteps),
            ("om_dims", self.om_dims),
            ("vocab", self.vocab),
            ("window", self.window),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_feat", self.d_feat),
            ("cross_layers", self.cross_layers),
            ("om_width", self.om_width),
            ("patch", self.patch),
            ("om_hidden", self.om_hidden),
            ("classifier_hidden", self.classifier_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_k != self.d_model {
            return Err(ModelError::Config(format!(
                "residual blocks need d_k = d_model, got {} and {}",
                self.d_k, self.d_model
            )));
        }
        if self.om_dims % self.patch != 0 || self.om_width % self.patch != 0 {
            return Err(ModelError::Config(format!(
                "{}x{} OM image is not divisible into {p}x{p} patches",
                self.om_dims,
                self.om_width,
                p = self.patch
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Length of the concatenated feature vector.
    pub fn feature_len(&self) -> usize {
        3 * self.d_feat
    }

    pub fn positions(&self) -> usize {
        window_count(self.timesteps, self.window)
    }

    pub fn patches(&self) -> usize {
        (self.om_dims / self.patch) * (self.om_width / self.patch)
    }
}

/// Parameter group, used to pick what a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Eeg,
    Om,
    Cross,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Eeg, Group::Om, Group::Cross, Group::Classifier];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat store of every trainable weight.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ModelParams<T> {
    fn add(&mut self, name: String, group: Group, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.params.push(Param {
            name,
            group,
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Query/key/value projections of one attention core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d_k: usize,
}

/// Attention core followed by a feed-forward sublayer, both residual and
/// layer-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub attn: AttentionParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embed: ParamId,
    pub eeg_blocks: Vec<Block>,
    pub eeg_head: Linear,
    pub om_mlp1: Linear,
    pub om_mlp2: Linear,
    pub om_embed: Linear,
    pub cross_blocks: Vec<Block>,
    pub cross_head: Linear,
    pub cls1: Linear,
    pub cls2: Linear,
}

struct Builder<'r, T, R: Rng + ?Sized> {
    params: ModelParams<T>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn uniform(&mut self, name: String, group: Group, shape: Vec<usize>, a: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(a * (2.0 * open_unit::<f64, _>(self.rng) - 1.0)))
            .collect();
        self.params.add(name, group, shape, data)
    }

    fn linear(&mut self, name: &str, group: Group, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = self.uniform(format!("{name}.w"), group, vec![fan_in, fan_out], a);
        let b = bias.then(|| {
            self.params
                .add(format!("{name}.b"), group, vec![fan_out], vec![T::zero(); fan_out])
        });
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    fn block(&mut self, name: &str, group: Group, cfg: &ModelConfig) -> Block {
        let (d, dk) = (cfg.d_model, cfg.d_k);
        let a = (6.0 / (d + dk) as f64).sqrt();
        let attn = AttentionParams {
            w_q: self.uniform(format!("{name}.w_q"), group, vec![d, dk], a),
            w_k: self.uniform(format!("{name}.w_k"), group, vec![d, dk], a),
            w_v: self.uniform(format!("{name}.w_v"), group, vec![d, dk], a),
            d_k: dk,
        };
        Block {
            attn,
            ff1: self.linear(&format!("{name}.ff1"), group, dk, cfg.d_ff, true),
            ff2: self.linear(&format!("{name}.ff2"), group, cfg.d_ff, dk, true),
        }
    }
}

/// Network weights together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ModelParams<T>,
    layout: Layout,
    pe: Vec<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            params: ModelParams::default(),
            rng,
        };
        let p2 = cfg.patch * cfg.patch;
        let embed = b.uniform("eeg.embed".into(), Group::Eeg, vec![cfg.vocab, cfg.d_model], 1.0);
        let eeg_blocks = (0..cfg.eeg_layers)
            .map(|l| b.block(&format!("eeg.layer{l}"), Group::Eeg, &cfg))
            .collect();
        let eeg_head = b.linear("eeg.head", Group::Eeg, cfg.d_model, cfg.d_feat, true);
        let om_mlp1 = b.linear("om.mlp1", Group::Om, p2, cfg.om_hidden, true);
        let om_mlp2 = b.linear("om.mlp2", Group::Om, cfg.om_hidden, cfg.d_feat, true);
        let om_embed = b.linear("cross.query_embed", Group::Cross, p2, cfg.d_model, true);
        let cross_blocks = (0..cfg.cross_layers)
            .map(|l| b.block(&format!("cross.layer{l}"), Group::Cross, &cfg))
            .collect();
        let cross_head = b.linear("cross.head", Group::Cross, cfg.d_k, cfg.d_feat, true);
        let k = cfg.feature_len();
        let cls1 = b.linear("classifier.hidden", Group::Classifier, k, cfg.classifier_hidden, true);
        let cls2 = b.linear(
            "classifier.out",
            Group::Classifier,
            cfg.classifier_hidden,
            cfg.classes,
            true,
        );
        let layout = Layout {
            embed,
            eeg_blocks,
            eeg_head,
            om_mlp1,
            om_mlp2,
            om_embed,
            cross_blocks,
            cross_head,
            cls1,
            cls2,
        };
        let pe = window_positional(cfg.timesteps, cfg.window, cfg.d_model);
        Ok(Self {
            params: b.params,
            cfg,
            layout,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Binds the weights; only parameters in `grad` collect gradients.
    pub fn graph(&self, grad: &[Group]) -> Graph<'_, T> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if grad.contains(&p.group) {
                    Tensor::param(p.data.clone(), &p.shape)
                } else {
                    Tensor::new(p.data.clone(), &p.shape)
                }
                .expect("parameter buffers match their shapes")
            })
            .collect();
        Graph {
            model: self,
            params,
            attention: RefCell::new(None),
        }
    }
}

/// Per-sample inputs in the form the network consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared<T> {
    /// Window-pooled EEG token frequencies, `[positions × vocab]`.
    pub eeg_freq: Vec<T>,
    /// Flattened OM patches, `[patches × patch²]`.
    pub patches: Vec<T>,
    pub label: usize,
}

/// Fitted input pipeline shared by training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor<T> {
    cfg: ModelConfig,
    tokenizer: EegTokenizer<T>,
}

impl<T: Scalar> Preprocessor<T> {
    pub fn fit<'a, I>(cfg: &ModelConfig, train: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ModalitySample<T>>,
    {
        cfg.validate()?;
        let tokenizer = EegTokenizer::fit(train.into_iter().map(|s| &s.eeg), cfg.vocab)?;
        Self::new(cfg, tokenizer)
    }

    pub fn new(cfg: &ModelConfig, tokenizer: EegTokenizer<T>) -> Result<Self> {
        if tokenizer.channels() != cfg.eeg_channels || tokenizer.vocab() != cfg.vocab {
            return Err(ModelError::Config(format!(
                "tokenizer has {} channels and {} bins, model expects {} and {}",
                tokenizer.channels(),
                tokenizer.vocab(),
                cfg.eeg_channels,
                cfg.vocab
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            tokenizer,
        })
    }

    pub fn tokenizer(&self) -> &EegTokenizer<T> {
        &self.tokenizer
    }

    pub fn prepare(&self, s: &ModalitySample<T>) -> Result<Prepared<T>> {
        let cfg = &self.cfg;
        if s.eeg.cols != cfg.timesteps {
            return Err(ModelError::Shape(format!(
                "eeg signal has {} timesteps, model expects {}",
                s.eeg.cols, cfg.timesteps
            )));
        }
        if s.om.rows != cfg.om_dims {
            return Err(ModelError::Shape(format!(
                "om signal has {} rows, model expects {}",
                s.om.rows, cfg.om_dims
            )));
        }
        if s.label >= cfg.classes {
            return Err(ModelError::Shape(format!("label {} out of range", s.label)));
        }
        let ids = self.tokenizer.tokenize(&s.eeg)?;
        let eeg_freq = window_frequencies(&ids, cfg.eeg_channels, cfg.timesteps, cfg.window, cfg.vocab);
        let img = transform_om(&s.om, cfg.om_width)?;
        let patches = patchify(&img, cfg.om_dims, cfg.om_width, cfg.patch)?;
        Ok(Prepared {
            eeg_freq,
            patches,
            label: s.label,
        })
    }

    pub fn prepare_all<'a, I>(&self, samples: I) -> Result<Vec<Prepared<T>>>
    where
        I: IntoIterator<Item = &'a ModalitySample<T>>,
        T: 'a,
    {
        samples.into_iter().map(|s| self.prepare(s)).collect()
    }
}

/// The three per-modality feature blocks, their concatenation and its
/// normalized form. All tensors are `[batch × ·]`.
#[derive(Debug, Clone)]
pub struct Embeddings<T: Scalar> {
    pub f_e: Tensor<T>,
    pub f_o: Tensor<T>,
    pub f_c: Tensor<T>,
    pub raw: Tensor<T>,
    pub f: Option<Tensor<T>>,
}

/// One forward (and possibly backward) pass over bound parameters.
pub struct Graph<'m, T: Scalar> {
    model: &'m Model<T>,
    params: Vec<Tensor<T>>,
    attention: RefCell<Option<Vec<Tensor<T>>>>,
}

impl<T: Scalar> Graph<'_, T> {
    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    /// Gradient of every parameter, `None` where nothing was accumulated.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.params.iter().map(|p| p.grad()).collect()
    }

    /// Keeps every attention weight matrix computed from now on.
    pub fn record_attention(&self) {
        *self.attention.borrow_mut() = Some(Vec::new());
    }

    pub fn attention_maps(&self) -> Vec<Tensor<T>> {
        self.attention.borrow().clone().unwrap_or_default()
    }

    pub fn linear(&self, x: &Tensor<T>, l: &Linear) -> Result<Tensor<T>> {
        let y = x.matmul(self.param(l.w))?;
        match l.b {
            None => Ok(y),
            Some(b) => {
                let rows = y.numel() / l.fan_out;
                let bias = self.param(b).repeat(rows).reshape(y.shape())?;
                Ok(y.add(&bias)?)
            }
        }
    }

    /// `softmax(q kᵀ / √d_k) v` over batched `[B × · × d]` inputs; returns
    /// the output and the attention weights.
    pub fn attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let d_k = *q.shape().last().unwrap_or(&1);
        let scores = q
            .bmm(&k.transpose()?)?
            .mul_scalar(T::one() / T::of(d_k as f64).sqrt());
        let weights = scores.softmax()?;
        if let Some(maps) = self.attention.borrow_mut().as_mut() {
            maps.push(weights.detach());
        }
        Ok((weights.bmm(v)?, weights))
    }

    fn block(&self, y: &Tensor<T>, kv: &Tensor<T>, b: &Block) -> Result<Tensor<T>> {
        let eps = T::of(1e-5);
        let q = y.matmul(self.param(b.attn.w_q))?;
        let k = kv.matmul(self.param(b.attn.w_k))?;
        let v = kv.matmul(self.param(b.attn.w_v))?;
        let (ca, _) = self.attention(&q, &k, &v)?;
        let y1 = y.add(&ca)?.layer_normalize(eps)?;
        let ff = self.linear(&self.linear(&y1, &b.ff1)?.tanh(), &b.ff2)?;
        Ok(y1.add(&ff)?.layer_normalize(eps)?)
    }

    /// Decoder block `layer`: queries from `q_src` `[B × m × d]`, keys and
    /// values from `kv_src` `[B × n × d]`; output `[B × m × d_k]`.
    pub fn cross_attention_layer(
        &self,
        q_src: &Tensor<T>,
        kv_src: &Tensor<T>,
        layer: usize,
    ) -> Result<Tensor<T>> {
        let blocks = &self.model.layout.cross_blocks;
        let b = blocks.get(layer).ok_or_else(|| {
            ModelError::Config(format!("no cross-attention layer {layer} of {}", blocks.len()))
        })?;
        let d = self.model.cfg.d_model;
        if q_src.shape().last() != Some(&d) || kv_src.shape().last() != Some(&d) {
            return Err(ModelError::Shape(format!(
                "cross-attention inputs {:?} and {:?} must end in d_model = {d}",
                q_src.shape(),
                kv_src.shape()
            )));
        }
        self.block(q_src, kv_src, b)
    }

    /// Per-timestep token embeddings plus positional encoding of one signal's
    /// token ids (`channels × timesteps`), `[timesteps × d_model]`.
    pub fn transform_eeg(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let cfg = &self.model.cfg;
        let (c, t) = (cfg.eeg_channels, cfg.timesteps);
        if ids.is_empty() || ids.len() != c * t {
            return Err(ModelError::Shape(format!(
                "{} token ids for a {c}x{t} signal",
                ids.len()
            )));
        }
        let freq = Tensor::new(token_frequencies(ids, c, t, cfg.vocab), &[t, cfg.vocab])?;
        let pe = Tensor::new(positional_encoding(t, cfg.d_model), &[t, cfg.d_model])?;
        Ok(freq.matmul(self.param(self.model.layout.embed))?.add(&pe)?)
    }

    /// Averages a `[timesteps × d]` sequence over the encoder windows.
    pub fn merge_windows(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.model.cfg;
        let pool = Tensor::new(
            window_pooling(cfg.timesteps, cfg.window),
            &[cfg.positions(), cfg.timesteps],
        )?;
        Ok(pool.matmul(seq)?)
    }

    /// Window-level token sequence `[B × positions × d_model]` of a batch.
    pub fn eeg_sequence(&self, batch: &[&Prepared<T>]) -> Result<Tensor<T>> {
        let cfg = &self.model.cfg;
        let (n, s) = (batch.len(), cfg.positions());
        if n == 0 {
            return Err(ModelError::Empty("batch"));
        }
        let mut freq = Vec::with_capacity(n * s * cfg.vocab);
        for p in batch {
            freq.extend_from_slice(&p.eeg_freq);
        }
        let freq = Tensor::new(freq, &[n * s, cfg.vocab])?;
        let pe = Tensor::new(self.model.pe.clone(), &[s, cfg.d_model])?.repeat(n);
        let x = freq
            .matmul(self.param(self.model.layout.embed))?
            .reshape(&[n, s, cfg.d_model])?;
        Ok(x.add(&pe)?)
    }

    /// Flattened patches of a batch, `[B × patches × patch²]`.
    pub fn patch_tensor(&self, batch: &[&Prepared<T>]) -> Result<Tensor<T>> {
        let cfg = &self.model.cfg;
        let (n, p, p2) = (batch.len(), cfg.patches(), cfg.patch * cfg.patch);
        if n == 0 {
            return Err(ModelError::Empty("batch"));
        }
        let mut data = Vec::with_capacity(n * p * p2);
        for s in batch {
            data.extend_from_slice(&s.patches);
        }
        Ok(Tensor::new(data, &[n, p, p2])?)
    }

    /// EEG feature `[B × d_feat]` from a `[B × positions × d_model]` sequence.
    pub fn encode_eeg(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        if seq.shape().len() != 3 || seq.shape()[1] == 0 {
            return Err(ModelError::Shape(format!(
                "eeg encoder input {:?} is not a non-empty batch of sequences",
                seq.shape()
            )));
        }
        let layout = &self.model.layout;
        let mut h = seq.clone();
        for b in &layout.eeg_blocks {
            h = self.block(&h, &h, b)?;
        }
        Ok(self.linear(&h.mean_axis(1)?, &layout.eeg_head)?.tanh())
    }

    /// OM feature `[B × d_feat]` from `[B × patches × patch²]`.
    pub fn encode_om(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let layout = &self.model.layout;
        let h = self.linear(patches, &layout.om_mlp1)?.relu();
        let h = self.linear(&h, &layout.om_mlp2)?;
        Ok(h.mean_axis(1)?.tanh())
    }

    /// Cross-modal feature `[B × d_feat]`: the decoder stack over OM patch
    /// queries attending to the EEG sequence, mean-pooled.
    pub fn extract_cross_modal(&self, seq: &Tensor<T>, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let layout = &self.model.layout;
        let mut y = self.linear(patches, &layout.om_embed)?;
        for l in 0..layout.cross_blocks.len() {
            y = self.cross_attention_layer(&y, seq, l)?;
        }
        Ok(self.linear(&y.mean_axis(1)?, &layout.cross_head)?.tanh())
    }

    /// Feature blocks and their concatenation; `f` is filled in when
    /// `bounds` is given.
    pub fn forward_features(
        &self,
        batch: &[&Prepared<T>],
        bounds: Option<&NormalizationSpec<T>>,
    ) -> Result<Embeddings<T>> {
        let seq = self.eeg_sequence(batch)?;
        let patches = self.patch_tensor(batch)?;
        let f_e = self.encode_eeg(&seq)?;
        let f_o = self.encode_om(&patches)?;
        let f_c = self.extract_cross_modal(&seq, &patches)?;
        let raw = Tensor::concat(&[f_e.clone(), f_o.clone(), f_c.clone()], 1)?;
        let f = bounds.map(|b| self.normalize(&raw, b)).transpose()?;
        Ok(Embeddings {
            f_e,
            f_o,
            f_c,
            raw,
            f,
        })
    }

    /// Clamped per-feature min-max map of `[B × k]` features onto `[0, 1]`.
    pub fn normalize(&self, raw: &Tensor<T>, bounds: &NormalizationSpec<T>) -> Result<Tensor<T>> {
        let k = bounds.len();
        if raw.shape().len() != 2 || raw.shape()[1] != k {
            return Err(ModelError::Shape(format!(
                "features {:?} do not match {k} normalization bounds",
                raw.shape()
            )));
        }
        let n = raw.shape()[0];
        let lo = Tensor::new(bounds.lo().to_vec(), &[k])?.repeat(n);
        let inv: Vec<T> = bounds
            .lo()
            .iter()
            .zip(bounds.hi())
            .map(|(&l, &h)| T::one() / (h - l))
            .collect();
        let inv = Tensor::new(inv, &[k])?.repeat(n);
        Ok(raw.sub(&lo)?.mul(&inv)?.clamp(T::zero(), T::one()))
    }

    /// Class logits `[B × classes]` of released features `[B × k]`.
    pub fn classify(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.model.cfg.feature_len();
        if f.shape().len() != 2 || f.shape()[1] != k {
            return Err(ModelError::Shape(format!(
                "classifier expects [batch, {k}] features, got {:?}",
                f.shape()
            )));
        }
        let layout = &self.model.layout;
        let h = self.linear(f, &layout.cls1)?.tanh();
        self.linear(&h, &layout.cls2)
    }
}

