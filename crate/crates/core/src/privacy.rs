//! Element-wise Laplacian dropout.
//!
//! A normalized feature vector `f` in `[0, 1]^k` is released as
//! `f ⊙ m + r`, where `m_i ~ Bernoulli(1 - w_i)` keeps or drops each
//! coordinate and `r_i ~ Lap(b_i)`. Given a total budget `ε` and drop rate
//! `w_i`, the per-feature budget
//!
//! ```text
//! ε_i' = ln((e^ε - w_i) / (1 - w_i)),    b_i = 1 / ε_i'
//! ```
//!
//! makes the release `ε`-DP under single-coordinate adjacency on `[0, 1]`,
//! because `w_i + (1 - w_i) e^{ε_i'} = e^ε`. Dropping more often (larger
//! `w_i`) buys a larger `ε_i'`, i.e. less noise on the coordinates that are
//! kept.
//!
//! The uniform scheme (one rate `μ`, one noise budget `ε'` for all features)
//! is kept alongside as the baseline it generalizes.

use rand::Rng;
use thiserror::Error;

use crate::random::open_unit;
use crate::Scalar;

/// Default lower clamp on drop rates.
pub const DEFAULT_W_MIN: f64 = 1e-4;
/// Default upper clamp on drop rates.
pub const DEFAULT_W_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrivacyError {
    #[error("privacy budget must be positive and finite, got {0}")]
    InvalidBudget(f64),
    #[error("drop rate {rate} at index {index} is outside [0, 1)")]
    InvalidRate { index: usize, rate: f64 },
    #[error("rate bounds must satisfy 0 < w_min < w_max < 1, got [{0}, {1}]")]
    InvalidRateBounds(f64, f64),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("normalization bounds at index {index} need hi > lo, got lo={lo} hi={hi}")]
    DegenerateBounds { index: usize, lo: f64, hi: f64 },
    #[error("feature vector is not normalized to [0, 1]; sensitivity 1 does not hold")]
    NotNormalized,
    #[error("value {value} at index {index} lies outside [0, 1]")]
    OutOfUnitRange { index: usize, value: f64 },
    #[error("uniform drop rate must lie in (0, 1), got {0}")]
    InvalidUniformRate(f64),
    #[error("sample count must be at least 1")]
    EmptySample,
    #[error("tail quantile must lie in [0, 0.5), got {0}")]
    InvalidQuantile(f64),
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

fn check_finite<T: Scalar>(values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(PrivacyError::NonFinite {
            index,
            value: values[index].to_f64_lossy(),
        }),
        None => Ok(()),
    }
}

fn check_len(left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(PrivacyError::LengthMismatch { left, right })
    }
}

/// Total per-release privacy budget `ε > 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PrivacyBudget<T>(T);

impl<T: Scalar> PrivacyBudget<T> {
    pub fn new(epsilon: T) -> Result<Self> {
        if epsilon.is_finite() && epsilon > T::zero() {
            Ok(Self(epsilon))
        } else {
            Err(PrivacyError::InvalidBudget(epsilon.to_f64_lossy()))
        }
    }

    pub fn epsilon(self) -> T {
        self.0
    }
}

/// A feature vector, raw or normalized into `[0, 1]^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    values: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn raw(values: Vec<T>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// Wraps values already known to lie in `[0, 1]`.
    pub fn normalized(values: Vec<T>) -> Result<Self> {
        for (index, v) in values.iter().enumerate() {
            if !(*v >= T::zero() && *v <= T::one()) {
                return Err(PrivacyError::OutOfUnitRange {
                    index,
                    value: v.to_f64_lossy(),
                });
            }
        }
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-feature min-max bounds mapping raw features onto `[0, 1]`.
///
/// After the (clamped) map every coordinate ranges over `[0, 1]`, so changing
/// one coordinate moves the vector by at most 1 in L1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationSpec<T> {
    lo: Vec<T>,
    hi: Vec<T>,
}

impl<T: Scalar> NormalizationSpec<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        check_len(lo.len(), hi.len())?;
        check_finite(&lo)?;
        check_finite(&hi)?;
        for (index, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if h <= l {
                return Err(PrivacyError::DegenerateBounds {
                    index,
                    lo: l.to_f64_lossy(),
                    hi: h.to_f64_lossy(),
                });
            }
        }
        Ok(Self { lo, hi })
    }

    /// Fits bounds to the per-feature min and max over `rows`.
    ///
    /// Features whose observed range is narrower than `min_width` are widened
    /// symmetrically to `min_width` so the map stays well defined.
    pub fn fit<'a, I>(rows: I, min_width: T) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut lo: Vec<T> = Vec::new();
        let mut hi: Vec<T> = Vec::new();
        for row in rows {
            check_finite(row)?;
            if lo.is_empty() {
                lo = row.to_vec();
                hi = row.to_vec();
                continue;
            }
            check_len(lo.len(), row.len())?;
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        if lo.is_empty() {
            return Err(PrivacyError::EmptySample);
        }
        let half = T::of(0.5);
        for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
            let width = *h - *l;
            if width < min_width {
                let mid = (*h + *l) * half;
                *l = mid - min_width * half;
                *h = mid + min_width * half;
            }
        }
        Self::new(lo, hi)
    }

    /// Fits bounds to the per-feature `q` and `1 − q` empirical quantiles
    /// (nearest rank); `q = 0` is the plain min-max fit. Values beyond the
    /// bounds are clamped by [`normalize`].
    pub fn fit_quantiles<'a, I>(rows: I, q: T, min_width: T) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        if !(q >= T::zero() && q < T::of(0.5)) {
            return Err(PrivacyError::InvalidQuantile(q.to_f64_lossy()));
        }
        let mut columns: Vec<Vec<T>> = Vec::new();
        for row in rows {
            check_finite(row)?;
            if columns.is_empty() {
                columns = vec![Vec::new(); row.len()];
            }
            check_len(columns.len(), row.len())?;
            for (c, &v) in columns.iter_mut().zip(row) {
                c.push(v);
            }
        }
        let n = columns.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(PrivacyError::EmptySample);
        }
        let lo_rank = (q * T::of((n - 1) as f64)).round().to_usize().unwrap_or(0);
        let hi_rank = n - 1 - lo_rank;
        let mut lo = Vec::with_capacity(columns.len());
        let mut hi = Vec::with_capacity(columns.len());
        for mut c in columns {
            c.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            lo.push(c[lo_rank]);
            hi.push(c[hi_rank]);
        }
        Self::fit([lo.as_slice(), hi.as_slice()], min_width)
    }

    pub fn lo(&self) -> &[T] {
        &self.lo
    }

    pub fn hi(&self) -> &[T] {
        &self.hi
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// Per-coordinate sensitivity of the normalized output.
    pub fn sensitivity(&self) -> T {
        T::one()
    }
}

/// Maps raw features into `[0, 1]` with the given bounds.
pub fn normalize<T: Scalar>(f: &[T], spec: &NormalizationSpec<T>) -> Result<FeatureVector<T>> {
    check_len(f.len(), spec.len())?;
    check_finite(f)?;
    let values = f
        .iter()
        .zip(spec.lo.iter().zip(&spec.hi))
        .map(|(&x, (&l, &h))| ((x - l) / (h - l)).max(T::zero()).min(T::one()))
        .collect();
    Ok(FeatureVector {
        values,
        normalized: true,
    })
}

/// Clamp interval `[w_min, w_max]` for drop rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBounds<T> {
    pub w_min: T,
    pub w_max: T,
}

impl<T: Scalar> RateBounds<T> {
    pub fn new(w_min: T, w_max: T) -> Result<Self> {
        if w_min > T::zero() && w_min < w_max && w_max < T::one() {
            Ok(Self { w_min, w_max })
        } else {
            Err(PrivacyError::InvalidRateBounds(
                w_min.to_f64_lossy(),
                w_max.to_f64_lossy(),
            ))
        }
    }

    /// Logit interval matching the rate interval.
    pub fn logit_range(&self) -> (T, T) {
        (logit(self.w_min), logit(self.w_max))
    }
}

impl<T: Scalar> Default for RateBounds<T> {
    fn default() -> Self {
        Self {
            w_min: T::of(DEFAULT_W_MIN),
            w_max: T::of(DEFAULT_W_MAX),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// Per-feature drop rates, stored as trainable logits.
///
/// The rate is `w_i = clamp(sigmoid(logit_i), w_min, w_max)` and the
/// drop/keep class probabilities are `π_i = (w_i, 1 - w_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutRates<T> {
    logits: Vec<T>,
    bounds: RateBounds<T>,
}

impl<T: Scalar> DropoutRates<T> {
    pub fn from_logits(logits: Vec<T>, bounds: RateBounds<T>) -> Result<Self> {
        check_finite(&logits)?;
        Ok(Self { logits, bounds })
    }

    /// Rates given directly; each is clamped into the bounds.
    pub fn from_rates(rates: &[T], bounds: RateBounds<T>) -> Result<Self> {
        for (index, &w) in rates.iter().enumerate() {
            if !(w >= T::zero() && w <= T::one()) {
                return Err(PrivacyError::InvalidRate {
                    index,
                    rate: w.to_f64_lossy(),
                });
            }
        }
        let logits = rates
            .iter()
            .map(|&w| logit(w.max(bounds.w_min).min(bounds.w_max)))
            .collect();
        Ok(Self { logits, bounds })
    }

    pub fn uniform(k: usize, rate: T, bounds: RateBounds<T>) -> Result<Self> {
        Self::from_rates(&vec![rate; k], bounds)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn bounds(&self) -> RateBounds<T> {
        self.bounds
    }

    pub fn rate(&self, i: usize) -> T {
        sigmoid(self.logits[i])
            .max(self.bounds.w_min)
            .min(self.bounds.w_max)
    }

    pub fn rates(&self) -> Vec<T> {
        (0..self.len()).map(|i| self.rate(i)).collect()
    }

    /// `(drop, keep)` probabilities for every feature.
    pub fn class_probs(&self) -> Vec<[T; 2]> {
        self.rates().into_iter().map(|w| [w, T::one() - w]).collect()
    }

    /// Replaces the logits, clamping each into the logit range of the bounds.
    pub fn set_logits(&mut self, logits: &[T]) -> Result<()> {
        check_len(self.logits.len(), logits.len())?;
        check_finite(logits)?;
        let (lo, hi) = self.bounds.logit_range();
        for (dst, &src) in self.logits.iter_mut().zip(logits) {
            *dst = src.max(lo).min(hi);
        }
        Ok(())
    }
}

/// Per-feature noise budgets `ε_i'` and Laplace scales `b_i = 1 / ε_i'`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerFeatureBudget<T> {
    pub eps_prime: Vec<T>,
    pub scales: Vec<T>,
}

fn check_rate<T: Scalar>(index: usize, w: T) -> Result<()> {
    if w.is_finite() && w >= T::zero() && w < T::one() {
        Ok(())
    } else {
        Err(PrivacyError::InvalidRate {
            index,
            rate: w.to_f64_lossy(),
        })
    }
}

/// Noise budget `ε' = ln((e^ε - w) / (1 - w))` for a single rate.
///
/// `w = 0` is accepted and yields `ε' = ε`.
pub fn eps_prime<T: Scalar>(w: T, eps: PrivacyBudget<T>) -> Result<T> {
    check_rate(0, w)?;
    Ok(eps_prime_unchecked(w, eps.epsilon()))
}

#[inline]
pub(crate) fn eps_prime_unchecked<T: Scalar>(w: T, eps: T) -> T {
    // (e^ε - w)/(1 - w) = 1 + (e^ε - 1)/(1 - w)
    (eps.exp_m1() / (T::one() - w)).ln_1p()
}

/// `dε'/dw = (e^ε - 1) / ((e^ε - w)(1 - w))` for a single rate.
pub fn eps_prime_derivative<T: Scalar>(w: T, eps: PrivacyBudget<T>) -> Result<T> {
    check_rate(0, w)?;
    let e = eps.epsilon();
    Ok(e.exp_m1() / ((e.exp() - w) * (T::one() - w)))
}

/// Per-feature budgets induced by raw rates.
pub fn allocate_rates<T: Scalar>(rates: &[T], eps: PrivacyBudget<T>) -> Result<PerFeatureBudget<T>> {
    let mut eps_prime = Vec::with_capacity(rates.len());
    for (index, &w) in rates.iter().enumerate() {
        check_rate(index, w)?;
        eps_prime.push(eps_prime_unchecked(w, eps.epsilon()));
    }
    let scales = eps_prime.iter().map(|&e| T::one() / e).collect();
    Ok(PerFeatureBudget { eps_prime, scales })
}

/// Splits the total budget between dropping and noising, feature by feature.
pub fn allocate_budget<T: Scalar>(
    w: &DropoutRates<T>,
    eps: PrivacyBudget<T>,
) -> Result<PerFeatureBudget<T>> {
    allocate_rates(&w.rates(), eps)
}

/// Analytic derivative of each `ε_i'` with respect to its rate `w_i`.
pub fn budget_gradient<T: Scalar>(w: &DropoutRates<T>, eps: PrivacyBudget<T>) -> Result<Vec<T>> {
    w.rates()
        .into_iter()
        .enumerate()
        .map(|(index, rate)| {
            check_rate(index, rate)?;
            eps_prime_derivative(rate, eps)
        })
        .collect()
}

/// Keep (1) / drop (0) indicators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    bits: Vec<u8>,
}

impl MaskVector {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Unit Laplace noise together with its per-feature scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub unit_noise: Vec<T>,
    pub scaled_noise: Vec<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn new(unit_noise: Vec<T>, budget: &PerFeatureBudget<T>) -> Result<Self> {
        let scaled_noise = scale_noise(&unit_noise, budget)?;
        Ok(Self {
            unit_noise,
            scaled_noise,
        })
    }
}

/// Inverse CDF of the standard Laplace distribution.
#[inline]
pub fn laplace_from_uniform<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    let c = u - half;
    if c == T::zero() {
        return T::zero();
    }
    -c.signum() * (T::one() - T::of(2.0) * c.abs()).ln()
}

/// `n` i.i.d. draws from `Lap(1)`.
pub fn sample_unit_laplace<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<T>> {
    if n == 0 {
        return Err(PrivacyError::EmptySample);
    }
    Ok((0..n).map(|_| laplace_from_uniform(open_unit::<T, _>(rng))).collect())
}

/// `r_i = b_i t_i`: if `t ~ Lap(1)` then `b t ~ Lap(b)`.
pub fn scale_noise<T: Scalar>(t: &[T], budget: &PerFeatureBudget<T>) -> Result<Vec<T>> {
    check_len(t.len(), budget.scales.len())?;
    Ok(t.iter().zip(&budget.scales).map(|(&t, &b)| b * t).collect())
}

fn mask_from_rates<T: Scalar, R: Rng + ?Sized>(rates: &[T], rng: &mut R) -> MaskVector {
    let bits = rates
        .iter()
        .map(|&w| {
            let u: T = T::of(rng.gen::<f64>());
            u8::from(u >= w)
        })
        .collect();
    MaskVector { bits }
}

/// Draws `m_i = 0` with probability `w_i`, else 1.
pub fn sample_mask<T: Scalar, R: Rng + ?Sized>(w: &DropoutRates<T>, rng: &mut R) -> MaskVector {
    mask_from_rates(&w.rates(), rng)
}

fn masked_plus_noise<T: Scalar>(f: &[T], mask: &MaskVector, noise: &[T]) -> Vec<T> {
    f.iter()
        .zip(&mask.bits)
        .zip(noise)
        .map(|((&x, &m), &r)| if m == 1 { x + r } else { r })
        .collect()
}

/// Releases `f ⊙ m + r` with a fresh mask and fresh noise.
pub fn release<T: Scalar, R: Rng + ?Sized>(
    f: &FeatureVector<T>,
    w: &DropoutRates<T>,
    eps: PrivacyBudget<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !f.is_normalized() {
        return Err(PrivacyError::NotNormalized);
    }
    check_len(f.len(), w.len())?;
    let budget = allocate_budget(w, eps)?;
    let mask = sample_mask(w, rng);
    let noise = NoiseDraw::new(sample_unit_laplace(f.len(), rng)?, &budget)?;
    Ok(masked_plus_noise(f.values(), &mask, &noise.scaled_noise))
}

/// Uniform scheme: one drop rate `μ` and one noise budget `ε'` for all features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig<T> {
    mu: T,
    eps_prime_uniform: T,
}

impl<T: Scalar> BaselineConfig<T> {
    pub fn new(mu: T, eps_prime_uniform: T) -> Result<Self> {
        if !(mu > T::zero() && mu < T::one()) {
            return Err(PrivacyError::InvalidUniformRate(mu.to_f64_lossy()));
        }
        PrivacyBudget::new(eps_prime_uniform)?;
        Ok(Self {
            mu,
            eps_prime_uniform,
        })
    }

    /// Uniform scheme whose total budget equals `eps`.
    pub fn matched(mu: T, eps: PrivacyBudget<T>) -> Result<Self> {
        if !(mu > T::zero() && mu < T::one()) {
            return Err(PrivacyError::InvalidUniformRate(mu.to_f64_lossy()));
        }
        Self::new(mu, eps_prime(mu, eps)?)
    }

    pub fn mu(&self) -> T {
        self.mu
    }

    pub fn eps_prime_uniform(&self) -> T {
        self.eps_prime_uniform
    }

    pub fn scale(&self) -> T {
        T::one() / self.eps_prime_uniform
    }
}

/// `ε = ln[(1 - μ) e^{ε'} + μ]`.
pub fn baseline_total_budget<T: Scalar>(cfg: &BaselineConfig<T>) -> PrivacyBudget<T> {
    // ln(1 + (1 - μ)(e^{ε'} - 1)), positive whenever μ < 1 and ε' > 0
    PrivacyBudget(((T::one() - cfg.mu) * cfg.eps_prime_uniform.exp_m1()).ln_1p())
}

/// Uniform-rate mask followed by uniform-scale Laplace noise.
pub fn baseline_release<T: Scalar, R: Rng + ?Sized>(
    f: &FeatureVector<T>,
    cfg: &BaselineConfig<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !f.is_normalized() {
        return Err(PrivacyError::NotNormalized);
    }
    let rates = vec![cfg.mu; f.len()];
    let mask = mask_from_rates(&rates, rng);
    let scale = cfg.scale();
    let noise: Vec<T> = sample_unit_laplace::<T, _>(f.len(), rng)?
        .into_iter()
        .map(|t| scale * t)
        .collect();
    Ok(masked_plus_noise(f.values(), &mask, &noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{stream, Stream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn eps(x: f64) -> PrivacyBudget<f64> {
        PrivacyBudget::new(x).unwrap()
    }

    #[test]
    fn budget_rejects_non_positive() {
        assert!(PrivacyBudget::new(0.0).is_err());
        assert!(PrivacyBudget::new(-1.0).is_err());
        assert!(PrivacyBudget::new(f64::NAN).is_err());
        assert!(PrivacyBudget::new(f64::INFINITY).is_err());
    }

    #[test]
    fn no_dropout_keeps_the_whole_budget() {
        assert_eq!(eps_prime(0.0, eps(1.0)).unwrap(), 1.0);
    }

    #[test]
    fn half_dropout_allocation() {
        // ln((e - 0.5) / 0.5) and its reciprocal, evaluated to 30 digits
        // with mpmath.
        let e1 = eps_prime(0.5, eps(1.0)).unwrap();
        assert_relative_eq!(e1, 1.489_880_125_644_750_0, max_relative = 1e-14);
        assert_relative_eq!(1.0 / e1, 0.671_194_938_966_815_9, max_relative = 1e-14);
        assert_relative_eq!(0.5 + 0.5 * e1.exp(), std::f64::consts::E, max_relative = 1e-15);
    }

    #[test]
    fn allocation_rejects_bad_rates() {
        assert!(eps_prime(1.0, eps(1.0)).is_err());
        assert!(eps_prime(-0.1, eps(1.0)).is_err());
        assert!(eps_prime(f64::NAN, eps(1.0)).is_err());
        assert!(allocate_rates(&[0.2, 1.5], eps(1.0)).is_err());
    }

    #[test]
    fn gradient_values() {
        let g = eps_prime_derivative(0.5, eps(1.0)).unwrap();
        // (e - 1) / ((e - 0.5) * 0.5)
        assert_relative_eq!(g, 1.549_200_652_878_871_8, max_relative = 1e-14);
        let g0 = eps_prime_derivative(0.0, eps(1.0)).unwrap();
        assert_relative_eq!(g0, 1.0 - (-1.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let h = 1e-6;
        for &(w, e) in &[(0.1, 0.01), (0.5, 1.0), (0.9, 0.1), (0.33, 3.0)] {
            let fd = (eps_prime(w + h, eps(e)).unwrap() - eps_prime(w - h, eps(e)).unwrap())
                / (2.0 * h);
            let g = eps_prime_derivative(w, eps(e)).unwrap();
            assert_relative_eq!(g, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn laplace_inverse_cdf_points() {
        assert_eq!(laplace_from_uniform(0.5f64), 0.0);
        assert_relative_eq!(laplace_from_uniform(0.9f64), 5f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(laplace_from_uniform(0.1f64), -(5f64.ln()), max_relative = 1e-14);
    }

    #[test]
    fn laplace_mean_abs_is_one() {
        let mut rng = stream(11, Stream::Train);
        let xs: Vec<f64> = sample_unit_laplace(100_000, &mut rng).unwrap();
        let m = xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64;
        assert!((m - 1.0).abs() < 0.02, "mean |x| = {m}");
        assert!(sample_unit_laplace::<f64, _>(0, &mut rng).is_err());
    }

    #[test]
    fn scale_noise_examples() {
        let b = PerFeatureBudget {
            eps_prime: vec![2.0, 4.0],
            scales: vec![0.5, 0.25],
        };
        assert_eq!(scale_noise(&[1.0, -2.0], &b).unwrap(), vec![0.5, -0.5]);
        assert_eq!(scale_noise(&[0.0, 0.0], &b).unwrap(), vec![0.0, 0.0]);
        assert!(scale_noise(&[0.0], &b).is_err());
    }

    #[test]
    fn mask_frequencies() {
        let bounds = RateBounds::default();
        let n = 100_000;
        let mut rng = stream(5, Stream::Train);
        let w = DropoutRates::from_rates(&[0.0, 0.5, 1.0], bounds).unwrap();
        let mut kept = [0usize; 3];
        for _ in 0..n {
            let m = sample_mask(&w, &mut rng);
            for (k, b) in kept.iter_mut().zip(m.bits()) {
                *k += *b as usize;
            }
        }
        assert!(kept[0] as f64 / n as f64 >= 0.999);
        assert!((kept[1] as f64 / n as f64 - 0.5).abs() < 0.01);
        assert!((kept[2] as f64 / n as f64) < 0.001);
    }

    #[test]
    fn normalize_examples() {
        let spec = NormalizationSpec::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let out = normalize(&[1.0, 3.0], &spec).unwrap();
        assert_eq!(out.values(), &[0.5, 1.0]);
        assert!(out.is_normalized());
        assert_eq!(normalize(&[0.0, 0.0], &spec).unwrap().values(), &[0.0, 0.0]);
        assert_eq!(normalize(&[2.0, 2.0], &spec).unwrap().values(), &[1.0, 1.0]);
        assert_eq!(spec.sensitivity(), 1.0);
        assert!(NormalizationSpec::new(vec![1.0], vec![1.0]).is_err());
        assert!(NormalizationSpec::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn fit_widens_constant_features() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 3.0], vec![1.0, 3.0]];
        let spec = NormalizationSpec::fit(rows.iter().map(|r| r.as_slice()), 1e-6).unwrap();
        assert_eq!(spec.lo()[0], 0.0);
        assert_eq!(spec.hi()[0], 1.0);
        assert!(spec.hi()[1] > spec.lo()[1]);
    }

    #[test]
    fn release_rejects_raw_input() {
        let w = DropoutRates::uniform(1, 0.5, RateBounds::default()).unwrap();
        let mut rng = stream(1, Stream::Train);
        let f = FeatureVector::raw(vec![0.5]);
        assert_eq!(
            release(&f, &w, eps(1.0), &mut rng),
            Err(PrivacyError::NotNormalized)
        );
    }

    #[test]
    fn release_with_tiny_noise_and_no_drop() {
        // ε = 20 gives b ≈ 0.05: single outputs stay within 0.25 of the
        // input with probability 1 - e^{-5} ≈ 0.993, and the mean output
        // sits at 0 within 1e-3.
        let w = DropoutRates::uniform(4, 0.0, RateBounds::default()).unwrap();
        let f = FeatureVector::normalized(vec![0.0; 4]).unwrap();
        let mut rng = stream(2, Stream::Train);
        let trials = 100_000;
        let mut close = 0usize;
        let mut sum = 0.0;
        for _ in 0..trials {
            let out = release(&f, &w, eps(20.0), &mut rng).unwrap();
            close += out.iter().filter(|x| x.abs() < 0.25).count();
            sum += out[0];
        }
        assert!(close as f64 / (4 * trials) as f64 > 0.99);
        assert!((sum / trials as f64).abs() < 1e-3);
    }

    #[test]
    fn release_expectation_is_kept_mass() {
        let w = DropoutRates::from_rates(&[0.2, 0.7], RateBounds::default()).unwrap();
        let f = FeatureVector::normalized(vec![1.0, 0.6]).unwrap();
        let mut rng = stream(9, Stream::Train);
        let n = 200_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let out = release(&f, &w, eps(1.0), &mut rng).unwrap();
            sum[0] += out[0];
            sum[1] += out[1];
        }
        assert!((sum[0] / n as f64 - 0.8).abs() < 0.01);
        assert!((sum[1] / n as f64 - 0.18).abs() < 0.01);
    }

    #[test]
    fn releases_are_reproducible() {
        let w = DropoutRates::uniform(8, 0.3, RateBounds::default()).unwrap();
        let f = FeatureVector::normalized(vec![0.25; 8]).unwrap();
        let a = release(&f, &w, eps(0.5), &mut stream(4, Stream::Eval)).unwrap();
        let b = release(&f, &w, eps(0.5), &mut stream(4, Stream::Eval)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_budget_examples() {
        let cfg = BaselineConfig::new(0.5, 1.0).unwrap();
        // ln(0.5 e + 0.5)
        assert_relative_eq!(
            baseline_total_budget(&cfg).epsilon(),
            0.620_114_506_958_277_5,
            max_relative = 1e-14
        );
        let tiny = BaselineConfig::new(1e-12, 0.7).unwrap();
        assert_relative_eq!(baseline_total_budget(&tiny).epsilon(), 0.7, max_relative = 1e-9);
        let matched = BaselineConfig::matched(0.5, eps(1.0)).unwrap();
        assert_relative_eq!(baseline_total_budget(&matched).epsilon(), 1.0, max_relative = 1e-14);
        assert!(BaselineConfig::new(0.0, 1.0).is_err());
        assert!(BaselineConfig::new(1.0, 1.0).is_err());
        assert!(BaselineConfig::new(0.5, 0.0).is_err());
    }

    #[test]
    fn baseline_release_drop_frequency() {
        let cfg = BaselineConfig::new(0.5, 1.0).unwrap();
        let f = FeatureVector::normalized(vec![1.0; 3]).unwrap();
        let mut rng = stream(8, Stream::Train);
        let n = 100_000;
        // with f = 1 the output is 1 + r when kept and r when dropped; the
        // mean is 1 - μ.
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let out = baseline_release(&f, &cfg, &mut rng).unwrap();
            for (s, o) in sum.iter_mut().zip(&out) {
                *s += o;
            }
        }
        for s in sum {
            assert!((s / n as f64 - 0.5).abs() < 0.015);
        }
        let quiet = BaselineConfig::new(DEFAULT_W_MIN, 20.0).unwrap();
        let zero = FeatureVector::normalized(vec![0.0; 3]).unwrap();
        let out = baseline_release(&zero, &quiet, &mut rng).unwrap();
        assert!(out.iter().all(|x| x.abs() < 0.5));
    }

    proptest! {
        #[test]
        fn budget_identity_holds(w in 1e-6f64..0.999_999, e in 1e-3f64..10.0) {
            let ep = eps_prime(w, eps(e)).unwrap();
            let lhs = w + (1.0 - w) * ep.exp();
            prop_assert!(((lhs - e.exp()) / e.exp()).abs() < 1e-9);
            prop_assert!(ep >= e);
            prop_assert!(1.0 / ep <= 1.0 / e);
        }

        #[test]
        fn allocation_increases_with_rate(w in 1e-4f64..0.99, dw in 1e-4f64..0.009, e in 1e-2f64..5.0) {
            let a = eps_prime(w, eps(e)).unwrap();
            let b = eps_prime(w + dw, eps(e)).unwrap();
            prop_assert!(b > a);
            prop_assert!(eps_prime_derivative(w, eps(e)).unwrap() > 0.0);
        }

        #[test]
        fn class_probs_sum_to_one(l in -12.0f64..12.0) {
            let w = DropoutRates::from_logits(vec![l], RateBounds::default()).unwrap();
            let [d, k] = w.class_probs()[0];
            prop_assert_eq!(d + k, 1.0);
            prop_assert!(d >= DEFAULT_W_MIN && d <= DEFAULT_W_MAX);
        }

        #[test]
        fn normalized_output_in_unit_range(x in -10.0f64..10.0, lo in -5.0f64..0.0, width in 0.1f64..5.0) {
            let spec = NormalizationSpec::new(vec![lo], vec![lo + width]).unwrap();
            let v = normalize(&[x], &spec).unwrap().values()[0];
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
