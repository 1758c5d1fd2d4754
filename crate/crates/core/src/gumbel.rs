//! Gumbel-Max and Gumbel-Softmax sampling of the per-feature drop/keep
//! category.
//!
//! Class probabilities are ordered `(drop, keep)`; the mask value of a
//! feature is the keep component. Hard (argmax) samples are exact categorical
//! draws and are used at evaluation time; soft (softmax at temperature `τ`)
//! samples are differentiable in the log-probabilities and drive training.

use rand::Rng;

use crate::random::open_unit;
use crate::Scalar;

/// Temperature schedule `τ_e = max(τ_floor, τ_start · decay^e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig<T> {
    pub tau_start: T,
    pub decay: T,
    pub tau_floor: T,
}

impl<T: Scalar> Default for GumbelConfig<T> {
    fn default() -> Self {
        Self {
            tau_start: T::one(),
            decay: T::of(0.95),
            tau_floor: T::of(0.1),
        }
    }
}

impl<T: Scalar> GumbelConfig<T> {
    pub fn is_valid(&self) -> bool {
        self.tau_floor > T::zero()
            && self.tau_start >= self.tau_floor
            && self.decay > T::zero()
            && self.decay <= T::one()
    }
}

/// Temperature for `epoch`; non-increasing and never below the floor.
pub fn anneal<T: Scalar>(cfg: &GumbelConfig<T>, epoch: usize) -> T {
    let e = i32::try_from(epoch).unwrap_or(i32::MAX);
    (cfg.tau_start * cfg.decay.powi(e)).max(cfg.tau_floor)
}

/// A two-class categorical vector, either relaxed (soft) or one-hot (hard).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalPair<T> {
    values: [T; 2],
}

impl<T: Scalar> CategoricalPair<T> {
    pub fn one_hot(index: usize) -> Self {
        let mut values = [T::zero(); 2];
        values[index.min(1)] = T::one();
        Self { values }
    }

    /// Relaxed pair; `None` unless both entries are in `[0, 1]` and sum to 1.
    pub fn soft(v0: T, v1: T) -> Option<Self> {
        let ok = |v: T| v >= T::zero() && v <= T::one();
        let tol = T::of(1e-12);
        (ok(v0) && ok(v1) && (v0 + v1 - T::one()).abs() <= tol).then_some(Self { values: [v0, v1] })
    }

    pub fn values(&self) -> [T; 2] {
        self.values
    }

    pub fn is_one_hot(&self) -> bool {
        let [a, b] = self.values;
        (a == T::one() && b == T::zero()) || (a == T::zero() && b == T::one())
    }

    pub fn argmax(&self) -> usize {
        usize::from(self.values[1] > self.values[0])
    }
}

/// Gumbel(0, 1) draw from a uniform `u` in (0, 1).
#[inline]
pub fn gumbel_from_uniform<T: Scalar>(u: T) -> T {
    -(-u.ln()).ln()
}

/// `n` i.i.d. Gumbel(0, 1) draws.
pub fn sample_gumbel<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| gumbel_from_uniform(open_unit::<T, _>(rng)))
        .collect()
}

/// Gumbel-Max: one-hot at `argmax_j [g_j + log π_j]`, ties to the lower index.
pub fn hard_from_gumbel<T: Scalar>(pi: [T; 2], g: [T; 2]) -> CategoricalPair<T> {
    let s0 = g[0] + pi[0].ln();
    let s1 = g[1] + pi[1].ln();
    CategoricalPair::one_hot(usize::from(s1 > s0))
}

/// Gumbel-Softmax: `softmax((g + log π) / τ)`.
pub fn soft_from_gumbel<T: Scalar>(pi: [T; 2], g: [T; 2], tau: T) -> CategoricalPair<T> {
    let s0 = (g[0] + pi[0].ln()) / tau;
    let s1 = (g[1] + pi[1].ln()) / tau;
    let m = s0.max(s1);
    let e0 = (s0 - m).exp();
    let e1 = (s1 - m).exp();
    let z = e0 + e1;
    let v1 = e1 / z;
    CategoricalPair {
        values: [T::one() - v1, v1],
    }
}

pub fn sample_hard<T: Scalar, R: Rng + ?Sized>(pi: [T; 2], rng: &mut R) -> CategoricalPair<T> {
    let g = sample_gumbel(2, rng);
    hard_from_gumbel(pi, [g[0], g[1]])
}

pub fn sample_soft<T: Scalar, R: Rng + ?Sized>(
    pi: [T; 2],
    tau: T,
    rng: &mut R,
) -> CategoricalPair<T> {
    let g = sample_gumbel(2, rng);
    soft_from_gumbel(pi, [g[0], g[1]], tau)
}

/// Mask value of a feature: the keep component.
#[inline]
pub fn mask_from_categorical<T: Scalar>(v: &CategoricalPair<T>) -> T {
    v.values[1]
}
