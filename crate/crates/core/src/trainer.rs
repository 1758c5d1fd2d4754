//! Two-step training: per mini-batch one momentum step on the network
//! weights with the drop rates frozen, then one step on the drop-rate logits
//! with the network frozen. Training releases use Gumbel-Softmax masks so the
//! loss is differentiable in the rates; evaluation uses hard Gumbel-Max masks
//! and real Laplace noise.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::data::{self, DataError};
use crate::gumbel::{anneal, gumbel_from_uniform, hard_from_gumbel, GumbelConfig};
use crate::metrics::Confusion;
use crate::model::{
    Group, ModalitySample, Model, ModelConfig, ModelError, Prepared, Preprocessor,
};
use crate::privacy::{
    allocate_budget, laplace_from_uniform, BaselineConfig, DropoutRates, NormalizationSpec,
    PrivacyBudget, PrivacyError, RateBounds,
};
use crate::random::{open_unit, stream, Stream, StreamRng};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss in the {phase} step of epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        phase: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// How features are released to the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme<T> {
    /// Learned per-feature drop rates with budgets split per feature.
    ElementWise { eps: PrivacyBudget<T> },
    /// One fixed drop rate and one noise budget for every feature.
    Uniform { baseline: BaselineConfig<T> },
    /// No masking, no noise.
    NonPrivate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub scheme: Scheme<T>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_p: T,
    pub lr_w: T,
    pub momentum: T,
    pub gumbel: GumbelConfig<T>,
    pub seed: u64,
    /// Weight steps per mini-batch.
    pub model_steps: usize,
    /// Rate steps per mini-batch.
    pub rate_steps: usize,
    pub rate_bounds: RateBounds<T>,
    pub init_rate: T,
    pub train_frac: f64,
    /// Narrowest feature range the normalization bounds may have.
    pub min_feature_width: T,
    /// Tail mass cut from each end of every feature's range when fitting
    /// normalization bounds; 0 is the min-max fit.
    pub norm_quantile: T,
    /// Normalized features forced to zero before every release.
    pub ablate_features: Vec<usize>,
    pub model: ModelConfig,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(scheme: Scheme<T>) -> Self {
        Self {
            scheme,
            epochs: 30,
            batch_size: 32,
            lr_p: T::of(1e-2),
            lr_w: T::of(1e-3),
            momentum: T::of(0.9),
            gumbel: GumbelConfig::default(),
            seed: 0,
            model_steps: 1,
            rate_steps: 1,
            rate_bounds: RateBounds::default(),
            init_rate: T::of(0.5),
            train_frac: 0.7,
            min_feature_width: T::of(1e-6),
            norm_quantile: T::zero(),
            ablate_features: Vec::new(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr_p >= T::zero() && self.lr_w >= T::zero()) {
            return bad("learning rates must be non-negative");
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return bad("momentum must be in [0, 1)");
        }
        if !self.gumbel.is_valid() {
            return bad("temperature schedule needs 0 < floor <= start and decay in (0, 1]");
        }
        if self.model_steps == 0 {
            return bad("at least one weight step per batch is needed");
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad("train fraction must be in (0, 1)");
        }
        if !(self.init_rate > T::zero() && self.init_rate < T::one()) {
            return bad("initial drop rate must be in (0, 1)");
        }
        if !(self.norm_quantile >= T::zero() && self.norm_quantile < T::of(0.5)) {
            return bad("normalization quantile must be in [0, 0.5)");
        }
        if !(self.min_feature_width > T::zero()) {
            return bad("minimum feature width must be positive");
        }
        if let Some(&i) = self.ablate_features.iter().find(|&&i| i >= self.model.feature_len()) {
            return Err(TrainError::Config(format!("ablated feature {i} out of range")));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Fixed randomness of one release of a `[rows × k]` feature batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseDraws<T> {
    pub rows: usize,
    pub k: usize,
    /// Gumbel draws, `[rows × k × 2]` with the drop class first.
    pub gumbel: Vec<T>,
    /// Unit Laplace draws, `[rows × k]`.
    pub laplace: Vec<T>,
}

impl<T: Scalar> ReleaseDraws<T> {
    pub fn sample<R: Rng + ?Sized>(rows: usize, k: usize, rng: &mut R) -> Self {
        let n = rows * k;
        let mut gumbel = Vec::with_capacity(2 * n);
        let mut laplace = Vec::with_capacity(n);
        for _ in 0..n {
            gumbel.push(gumbel_from_uniform(open_unit::<T, _>(rng)));
            gumbel.push(gumbel_from_uniform(open_unit::<T, _>(rng)));
            laplace.push(laplace_from_uniform(open_unit::<T, _>(rng)));
        }
        Self {
            rows,
            k,
            gumbel,
            laplace,
        }
    }

    fn gumbel_gap(&self) -> Vec<T> {
        self.gumbel.chunks(2).map(|g| g[1] - g[0]).collect()
    }

    /// Hard keep indicators for per-feature drop rates `w`.
    pub fn hard_mask(&self, w: &[T]) -> Vec<T> {
        self.gumbel
            .chunks(2)
            .enumerate()
            .map(|(i, g)| {
                let wi = w[i % self.k];
                hard_from_gumbel([wi, T::one() - wi], [g[0], g[1]]).values()[1]
            })
            .collect()
    }
}

/// Which routes into the rate logits stay differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradPaths {
    pub mask: bool,
    pub noise: bool,
}

impl GradPaths {
    pub const BOTH: Self = Self {
        mask: true,
        noise: true,
    };
}

/// Relaxed element-wise release `f ⊙ m + t / ε'(w)` of `f` `[rows × k]`,
/// with soft keep values `m = σ((g₁ − g₀ + ln(1−w) − ln w) / τ)` and
/// `w = clamp(σ(logits))`.
pub fn relaxed_release<T: Scalar>(
    f: &Tensor<T>,
    logits: &Tensor<T>,
    bounds: RateBounds<T>,
    eps: PrivacyBudget<T>,
    tau: T,
    draws: &ReleaseDraws<T>,
    paths: GradPaths,
) -> Result<Tensor<T>> {
    let (rows, k) = (draws.rows, draws.k);
    if f.shape() != [rows, k] || logits.shape() != [k] {
        return Err(TrainError::Config(format!(
            "release of {:?} features with {:?} logits and {rows}x{k} draws",
            f.shape(),
            logits.shape()
        )));
    }
    let w = logits.sigmoid().clamp(bounds.w_min, bounds.w_max);
    let pick = |on: bool| if on { w.clone() } else { w.detach() };
    let (wm, wn) = (pick(paths.mask), pick(paths.noise));

    let log_odds = wm.neg().add_scalar(T::one()).log().sub(&wm.log())?;
    let gap = Tensor::new(draws.gumbel_gap(), &[rows, k])?;
    let mask = gap
        .add(&log_odds.repeat(rows))?
        .mul_scalar(T::one() / tau)
        .sigmoid();

    // ε' = ln(1 + (e^ε − 1)/(1 − w))
    let eps_prime = wn
        .neg()
        .add_scalar(T::one())
        .recip()
        .mul_scalar(eps.epsilon().exp_m1())
        .add_scalar(T::one())
        .log();
    let t = Tensor::new(draws.laplace.clone(), &[rows, k])?;
    let noise = t.div(&eps_prime.repeat(rows))?;
    Ok(f.mul(&mask)?.add(&noise)?)
}

/// Release used at evaluation time and by the uniform scheme: hard masks
/// and real Laplace noise. `f` is `[rows × k]` flattened.
pub fn hard_release<T: Scalar>(
    f: &[T],
    scheme: &Scheme<T>,
    rates: &DropoutRates<T>,
    draws: &ReleaseDraws<T>,
) -> Result<Vec<T>> {
    let k = draws.k;
    let (w, b): (Vec<T>, Vec<T>) = match scheme {
        Scheme::NonPrivate => return Ok(f.to_vec()),
        Scheme::ElementWise { eps } => (rates.rates(), allocate_budget(rates, *eps)?.scales),
        Scheme::Uniform { baseline } => (vec![baseline.mu(); k], vec![baseline.scale(); k]),
    };
    let mask = draws.hard_mask(&w);
    Ok(f
        .iter()
        .zip(mask)
        .zip(&draws.laplace)
        .enumerate()
        .map(|(i, ((&x, m), &t))| x * m + t * b[i % k])
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Mean per-block drop rate and noise scale, blocks ordered EEG, OM, CM.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMeans {
    pub rate: [f64; 3],
    pub scale: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tau: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub macro_f1: f64,
    pub blocks: BlockMeans,
}

pub const BLOCK_NAMES: [&str; 3] = ["eeg", "om", "cm"];

/// Per-feature diagnostics of one modality block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAllocation {
    pub name: &'static str,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub mean_abs_f: Vec<f64>,
}

impl BlockAllocation {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_w(&self) -> f64 {
        Self::mean(&self.w)
    }

    pub fn mean_b(&self) -> f64 {
        Self::mean(&self.b)
    }

    pub fn mean_f(&self) -> f64 {
        Self::mean(&self.mean_abs_f)
    }
}

/// Per-block arrays `(w_i, b_i, mean |f_i|)` for the element-wise scheme.
pub fn allocation_report<T: Scalar>(
    rates: &DropoutRates<T>,
    eps: PrivacyBudget<T>,
    features: &[T],
    d_feat: usize,
) -> Result<Vec<BlockAllocation>> {
    let k = rates.len();
    if k != 3 * d_feat || features.len() % k != 0 {
        return Err(TrainError::Config(format!(
            "{k} rates and {} feature values do not form three blocks of {d_feat}",
            features.len()
        )));
    }
    let budget = allocate_budget(rates, eps)?;
    let rows = (features.len() / k).max(1);
    let mut mean_abs = vec![0.0; k];
    for row in features.chunks(k) {
        for (m, v) in mean_abs.iter_mut().zip(row) {
            *m += v.to_f64_lossy().abs();
        }
    }
    mean_abs.iter_mut().for_each(|m| *m /= rows as f64);
    let w = rates.rates();
    Ok(BLOCK_NAMES
        .iter()
        .enumerate()
        .map(|(bi, &name)| {
            let r = bi * d_feat..(bi + 1) * d_feat;
            BlockAllocation {
                name,
                w: w[r.clone()].iter().map(|x| x.to_f64_lossy()).collect(),
                b: budget.scales[r.clone()].iter().map(|x| x.to_f64_lossy()).collect(),
                mean_abs_f: mean_abs[r].to_vec(),
            }
        })
        .collect())
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub rates: DropoutRates<T>,
    pub preprocessor: Preprocessor<T>,
    pub bounds: Option<NormalizationSpec<T>>,
    pub metrics: Vec<EpochMetrics>,
    /// Normalized training features under the final weights and bounds.
    pub train_features: Vec<T>,
}

impl<T> TrainOutcome<T> {
    pub fn best_test_acc(&self) -> Option<f64> {
        self.metrics.iter().map(|m| m.test_acc).reduce(f64::max)
    }

    pub fn best_macro_f1(&self) -> Option<f64> {
        self.metrics.iter().map(|m| m.macro_f1).reduce(f64::max)
    }
}

const EVAL_CHUNK: usize = 256;

/// Mutable training state over prepared splits.
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig<T>,
    preprocessor: Preprocessor<T>,
    train: Vec<Prepared<T>>,
    test: Vec<Prepared<T>>,
    model: Model<T>,
    rates: DropoutRates<T>,
    bounds: Option<NormalizationSpec<T>>,
    velocity_p: Vec<Vec<T>>,
    velocity_w: Vec<T>,
    /// Raw training features under the current weights, when known.
    cached_raw: Option<Vec<T>>,
    epoch: usize,
    shuffle_rng: StreamRng,
    train_rng: StreamRng,
    eval_rng: StreamRng,
}

impl<T: Scalar> Trainer<T> {
    /// Fits the input pipeline on `train` and initializes the network from
    /// the seed. Shape fields of the model configuration are taken from the
    /// data.
    pub fn new(
        mut cfg: TrainConfig<T>,
        train: &[ModalitySample<T>],
        test: &[ModalitySample<T>],
    ) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| TrainError::Config("empty training split".into()))?;
        cfg.model.eeg_channels = first.eeg.rows;
        cfg.model.timesteps = first.eeg.cols;
        cfg.model.om_dims = first.om.rows;
        cfg.validate()?;
        let preprocessor = Preprocessor::fit(&cfg.model, train)?;
        let train_p = preprocessor.prepare_all(train)?;
        let test_p = preprocessor.prepare_all(test)?;
        let model = Model::new(cfg.model.clone(), &mut stream(cfg.seed, Stream::Init))?;
        let k = cfg.model.feature_len();
        let rates = DropoutRates::uniform(k, cfg.init_rate, cfg.rate_bounds)?;
        let velocity_p = model.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Ok(Self {
            preprocessor,
            train: train_p,
            test: test_p,
            model,
            rates,
            bounds: None,
            velocity_p,
            velocity_w: vec![T::zero(); k],
            cached_raw: None,
            epoch: 0,
            shuffle_rng: stream(cfg.seed, Stream::Shuffle),
            train_rng: stream(cfg.seed, Stream::Train),
            eval_rng: stream(cfg.seed, Stream::Eval),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig<T> {
        &self.cfg
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn rates(&self) -> &DropoutRates<T> {
        &self.rates
    }

    pub fn rates_mut(&mut self) -> &mut DropoutRates<T> {
        &mut self.rates
    }

    pub fn bounds(&self) -> Option<&NormalizationSpec<T>> {
        self.bounds.as_ref()
    }

    pub fn set_bounds(&mut self, bounds: NormalizationSpec<T>) {
        self.bounds = Some(bounds);
    }

    pub fn train_set(&self) -> &[Prepared<T>] {
        &self.train
    }

    pub fn test_set(&self) -> &[Prepared<T>] {
        &self.test
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn tau(&self) -> T {
        anneal(&self.cfg.gumbel, self.epoch)
    }

    fn eps(&self) -> Option<PrivacyBudget<T>> {
        match self.cfg.scheme {
            Scheme::ElementWise { eps } => Some(eps),
            _ => None,
        }
    }

    fn labels(batch: &[&Prepared<T>]) -> Vec<usize> {
        batch.iter().map(|p| p.label).collect()
    }

    fn ablate(&self, f: Tensor<T>) -> Result<Tensor<T>> {
        if self.cfg.ablate_features.is_empty() {
            return Ok(f);
        }
        let k = self.cfg.model.feature_len();
        let mut keep = vec![T::one(); k];
        for &i in &self.cfg.ablate_features {
            keep[i] = T::zero();
        }
        let rows = f.shape()[0];
        Ok(f.mul(&Tensor::new(keep, &[k])?.repeat(rows))?)
    }

    fn require_bounds(&self) -> Result<&NormalizationSpec<T>> {
        self.bounds
            .as_ref()
            .ok_or_else(|| TrainError::Config("normalization bounds are not fitted yet".into()))
    }

    /// Training-time release of normalized features for the current scheme.
    fn train_release(
        &self,
        f: &Tensor<T>,
        logits: &Tensor<T>,
        draws: &ReleaseDraws<T>,
        paths: GradPaths,
    ) -> Result<Tensor<T>> {
        match &self.cfg.scheme {
            Scheme::NonPrivate => Ok(f.clone()),
            Scheme::ElementWise { eps } => relaxed_release(
                f,
                logits,
                self.cfg.rate_bounds,
                *eps,
                self.tau(),
                draws,
                paths,
            ),
            Scheme::Uniform { baseline } => {
                let mask = draws.hard_mask(&vec![baseline.mu(); draws.k]);
                let b = baseline.scale();
                let noise = draws.laplace.iter().map(|&t| t * b).collect();
                let mask = Tensor::new(mask, f.shape())?;
                Ok(f.mul(&mask)?.add(&Tensor::new(noise, f.shape())?)?)
            }
        }
    }

    /// Training loss on `batch` with fixed draws, and the weight gradients.
    pub fn model_gradient(
        &self,
        batch: &[&Prepared<T>],
        draws: &ReleaseDraws<T>,
    ) -> Result<(T, Vec<Option<Vec<T>>>)> {
        let bounds = self.require_bounds()?;
        let g = self.model.graph(&Group::ALL);
        let f = g.forward_features(batch, Some(bounds))?.f.expect("bounds given");
        let f = self.ablate(f)?;
        let logits = Tensor::new(self.rates.logits().to_vec(), &[self.rates.len()])?;
        let released = self.train_release(&f, &logits, draws, GradPaths::BOTH)?;
        let loss = g.classify(&released)?.cross_entropy(&Self::labels(batch))?;
        let value = loss.item()?;
        loss.backward()?;
        Ok((value, g.grads()))
    }

    /// Training loss with the weights frozen; the gradient with respect to
    /// the rate logits flows through the routes in `paths`.
    pub fn rate_gradient(
        &self,
        batch: &[&Prepared<T>],
        draws: &ReleaseDraws<T>,
        paths: GradPaths,
    ) -> Result<(T, Vec<T>)> {
        let bounds = self.require_bounds()?;
        let g = self.model.graph(&[]);
        let f = g.forward_features(batch, Some(bounds))?.f.expect("bounds given");
        self.rate_gradient_from_features(&f, &Self::labels(batch), draws, paths)
    }

    /// [`rate_gradient`](Self::rate_gradient) for already-computed normalized
    /// features `[rows × k]`.
    pub fn rate_gradient_from_features(
        &self,
        f: &Tensor<T>,
        labels: &[usize],
        draws: &ReleaseDraws<T>,
        paths: GradPaths,
    ) -> Result<(T, Vec<T>)> {
        let g = self.model.graph(&[]);
        let f = self.ablate(f.detach())?;
        let logits = Tensor::param(self.rates.logits().to_vec(), &[self.rates.len()])?;
        let released = self.train_release(&f, &logits, draws, paths)?;
        let loss = g.classify(&released)?.cross_entropy(labels)?;
        let value = loss.item()?;
        loss.backward()?;
        Ok((value, logits.grad_or_zeros()))
    }

    /// One momentum step on the network weights; returns the batch loss.
    pub fn step_model(&mut self, batch: &[&Prepared<T>], draws: &ReleaseDraws<T>) -> Result<T> {
        let (loss, grads) = self.model_gradient(batch, draws)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "weight",
                epoch: self.epoch,
                batch: 0,
            });
        }
        let (mu, lr) = (self.cfg.momentum, self.cfg.lr_p);
        for ((p, v), g) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(self.velocity_p.iter_mut())
            .zip(grads)
        {
            let Some(g) = g else { continue };
            for ((x, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *x -= lr * *vi;
            }
        }
        self.cached_raw = None;
        Ok(loss)
    }

    /// One momentum step on the rate logits, re-clamped to the rate bounds;
    /// returns the batch loss. A no-op outside the element-wise scheme.
    pub fn step_rates(&mut self, batch: &[&Prepared<T>], draws: &ReleaseDraws<T>) -> Result<T> {
        if self.eps().is_none() {
            return Ok(T::zero());
        }
        let (loss, grad) = self.rate_gradient(batch, draws, GradPaths::BOTH)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "rate",
                epoch: self.epoch,
                batch: 0,
            });
        }
        let (mu, lr) = (self.cfg.momentum, self.cfg.lr_w);
        let mut logits = self.rates.logits().to_vec();
        for ((x, v), g) in logits.iter_mut().zip(self.velocity_w.iter_mut()).zip(grad) {
            *v = mu * *v + g;
            *x -= lr * *v;
        }
        self.rates.set_logits(&logits)?;
        Ok(loss)
    }

    /// Raw (unnormalized) features of a split under the current weights,
    /// flattened `[n × k]`.
    pub fn raw_features(&self, split: &[Prepared<T>]) -> Result<Vec<T>> {
        let g = self.model.graph(&[]);
        let mut out = Vec::with_capacity(split.len() * self.cfg.model.feature_len());
        for chunk in split.chunks(EVAL_CHUNK) {
            let batch: Vec<_> = chunk.iter().collect();
            out.extend_from_slice(g.forward_features(&batch, None)?.raw.data());
        }
        Ok(out)
    }

    /// Normalizes (and ablates) raw features with the current bounds.
    pub fn normalize(&self, raw: &[T]) -> Result<Vec<T>> {
        let bounds = self.require_bounds()?;
        let k = bounds.len();
        let g = self.model.graph(&[]);
        let t = Tensor::new(raw.to_vec(), &[raw.len() / k, k])?;
        Ok(self.ablate(g.normalize(&t, bounds)?)?.data().to_vec())
    }

    fn fit_bounds(&mut self) -> Result<()> {
        let raw = match self.cached_raw.take() {
            Some(raw) => raw,
            None => self.raw_features(&self.train)?,
        };
        let k = self.cfg.model.feature_len();
        self.bounds = Some(NormalizationSpec::fit_quantiles(
            raw.chunks(k),
            self.cfg.norm_quantile,
            self.cfg.min_feature_width,
        )?);
        Ok(())
    }

    /// Classifies normalized features `[n × k]` after a hard release drawn
    /// from `rng`.
    pub fn evaluate_features<R: Rng + ?Sized>(
        &self,
        f: &[T],
        labels: &[usize],
        scheme: &Scheme<T>,
        rng: &mut R,
    ) -> Result<Evaluation> {
        let k = self.cfg.model.feature_len();
        let n = labels.len();
        if n == 0 || f.len() != n * k {
            return Err(TrainError::Config(format!(
                "cannot evaluate {} feature values against {n} labels",
                f.len()
            )));
        }
        let draws = ReleaseDraws::sample(n, k, rng);
        let released = hard_release(f, scheme, &self.rates, &draws)?;
        let g = self.model.graph(&[]);
        let mut preds = Vec::with_capacity(n);
        let mut loss = 0.0;
        for (ci, chunk) in released.chunks(EVAL_CHUNK * k).enumerate() {
            let rows = chunk.len() / k;
            let logits = g.classify(&Tensor::new(chunk.to_vec(), &[rows, k])?)?;
            let y = &labels[ci * EVAL_CHUNK..ci * EVAL_CHUNK + rows];
            loss += logits.cross_entropy(y)?.item()?.to_f64_lossy() * rows as f64;
            let c = self.cfg.model.classes;
            preds.extend(logits.data().chunks(c).map(|row| {
                (1..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            }));
        }
        let conf = Confusion::new(&preds, labels, self.cfg.model.classes);
        Ok(Evaluation {
            accuracy: conf.accuracy(),
            macro_f1: conf.macro_f1(),
            loss: loss / n as f64,
            predictions: preds,
        })
    }

    /// Normalized features of a split with the current bounds.
    pub fn features(&self, split: &[Prepared<T>]) -> Result<Vec<T>> {
        self.normalize(&self.raw_features(split)?)
    }

    fn block_means(&self) -> Result<BlockMeans> {
        let d = self.cfg.model.d_feat;
        let k = 3 * d;
        let (w, b): (Vec<f64>, Vec<f64>) = match &self.cfg.scheme {
            Scheme::NonPrivate => (vec![0.0; k], vec![0.0; k]),
            Scheme::Uniform { baseline } => (
                vec![baseline.mu().to_f64_lossy(); k],
                vec![baseline.scale().to_f64_lossy(); k],
            ),
            Scheme::ElementWise { eps } => (
                self.rates.rates().iter().map(|x| x.to_f64_lossy()).collect(),
                allocate_budget(&self.rates, *eps)?
                    .scales
                    .iter()
                    .map(|x| x.to_f64_lossy())
                    .collect(),
            ),
        };
        let mean = |v: &[f64], i: usize| v[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64;
        Ok(BlockMeans {
            rate: [mean(&w, 0), mean(&w, 1), mean(&w, 2)],
            scale: [mean(&b, 0), mean(&b, 1), mean(&b, 2)],
        })
    }

    /// One pass over the training split followed by evaluation of both
    /// splits under hard masks and real noise.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        self.fit_bounds()?;
        let k = self.cfg.model.feature_len();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let train = std::mem::take(&mut self.train);
        let result = (|| -> Result<()> {
            for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
                let batch: Vec<&Prepared<T>> = idx.iter().map(|&i| &train[i]).collect();
                for _ in 0..self.cfg.model_steps {
                    let draws = ReleaseDraws::sample(batch.len(), k, &mut self.train_rng);
                    self.step_model(&batch, &draws).map_err(|e| with_batch(e, bi))?;
                }
                if self.eps().is_some() {
                    for _ in 0..self.cfg.rate_steps {
                        let draws = ReleaseDraws::sample(batch.len(), k, &mut self.train_rng);
                        self.step_rates(&batch, &draws).map_err(|e| with_batch(e, bi))?;
                    }
                }
            }
            Ok(())
        })();
        self.train = train;
        result?;

        let train_raw = self.raw_features(&self.train)?;
        let test_raw = self.raw_features(&self.test)?;
        let train_f = self.normalize(&train_raw)?;
        let test_f = self.normalize(&test_raw)?;
        let train_y: Vec<usize> = self.train.iter().map(|p| p.label).collect();
        let test_y: Vec<usize> = self.test.iter().map(|p| p.label).collect();
        let scheme = self.cfg.scheme;
        let mut rng = self.eval_rng.clone();
        let tr = self.evaluate_features(&train_f, &train_y, &scheme, &mut rng)?;
        let te = if test_y.is_empty() {
            None
        } else {
            Some(self.evaluate_features(&test_f, &test_y, &scheme, &mut rng)?)
        };
        self.eval_rng = rng;

        let metrics = EpochMetrics {
            epoch: self.epoch,
            tau: self.tau().to_f64_lossy(),
            train_acc: tr.accuracy,
            test_acc: te.as_ref().map_or(f64::NAN, |e| e.accuracy),
            train_loss: tr.loss,
            test_loss: te.as_ref().map_or(f64::NAN, |e| e.loss),
            macro_f1: te.as_ref().map_or(f64::NAN, |e| e.macro_f1),
            blocks: self.block_means()?,
        };
        self.cached_raw = Some(train_raw);
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs the configured number of epochs, handing each record to
    /// `on_epoch` as soon as it is available.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome<T>> {
        let mut metrics = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let m = self.run_epoch()?;
            on_epoch(&m);
            metrics.push(m);
        }
        let train_features = if self.bounds.is_some() {
            let raw = match self.cached_raw.take() {
                Some(r) => r,
                None => self.raw_features(&self.train)?,
            };
            self.normalize(&raw)?
        } else {
            Vec::new()
        };
        Ok(TrainOutcome {
            model: self.model,
            rates: self.rates,
            preprocessor: self.preprocessor,
            bounds: self.bounds,
            metrics,
            train_features,
        })
    }
}

fn with_batch(e: TrainError, batch: usize) -> TrainError {
    match e {
        TrainError::NonFiniteLoss { phase, epoch, .. } => TrainError::NonFiniteLoss {
            phase,
            epoch,
            batch,
        },
        other => other,
    }
}

/// Splits `dataset` with the configured fraction and seed, then trains.
pub fn train<T: Scalar>(
    dataset: &[ModalitySample<T>],
    cfg: TrainConfig<T>,
) -> Result<TrainOutcome<T>> {
    let (tr, te) = data::split(dataset, cfg.train_frac, cfg.seed)?;
    Trainer::new(cfg, &tr, &te)?.run(|_| {})
}
