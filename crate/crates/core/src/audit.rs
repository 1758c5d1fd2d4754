//! Privacy auditing of the scalar Laplacian-dropout mechanism.
//!
//! A coordinate `f` is released as `m f + r` with `m ~ Bernoulli(1 - w)` and
//! `r ~ Lap(b)`, so its output density is the two-component mixture
//!
//! ```text
//! p(s | f) = w Lap(s; 0, b) + (1 - w) Lap(s; f, b).
//! ```
//!
//! Between the kinks `{0, f1, f2}` the log ratio `ln p(s|f1) / p(s|f2)` is
//! monotone, so its supremum over `s` is attained at a kink or in one of the
//! two tails, both of which have closed forms. Coordinates are masked and
//! noised independently, hence the per-coordinate loss is the loss of the
//! whole vector release under single-coordinate adjacency.

use std::fmt::{self, Write as _};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::privacy::{
    baseline_total_budget, eps_prime, laplace_from_uniform, BaselineConfig, PrivacyBudget,
    PrivacyError,
};
use crate::random::open_unit;
use crate::Scalar;

/// Slack on the claimed budget before a pair counts as a violation.
pub const VIOLATION_TOL: f64 = 1e-6;
/// Smallest Monte Carlo sample accepted per distribution.
pub const MIN_DRAWS: usize = 100_000;
/// Bins need at least this many draws in both histograms to be compared.
pub const MIN_BIN_COUNT: u64 = 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuditError {
    #[error("feature values must be finite, got ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("pair ({0}, {1}) leaves [0, 1]; use the extended-range mode")]
    OutOfRange(f64, f64),
    #[error("Laplace scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("drop rate must lie in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("at least {MIN_DRAWS} draws are needed, got {0}")]
    TooFewDraws(usize),
    #[error("{0}")]
    Config(String),
    #[error("no bin holds {MIN_BIN_COUNT} draws in both histograms")]
    DegenerateHistogram,
    #[error("empty pair family")]
    EmptyFamily,
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

pub type Result<T> = std::result::Result<T, AuditError>;

/// Two scalar inputs that differ in the audited coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacentPair<T> {
    pub f1: T,
    pub f2: T,
}

impl<T: Scalar> AdjacentPair<T> {
    /// A pair inside the normalized range `[0, 1]`.
    pub fn new(f1: T, f2: T) -> Result<Self> {
        let p = Self::extended(f1, f2)?;
        let unit = |x: T| x >= T::zero() && x <= T::one();
        if unit(f1) && unit(f2) {
            Ok(p)
        } else {
            Err(AuditError::OutOfRange(f1.to_f64_lossy(), f2.to_f64_lossy()))
        }
    }

    /// Any finite pair; outside `[0, 1]` the claimed budget need not hold.
    pub fn extended(f1: T, f2: T) -> Result<Self> {
        if f1.is_finite() && f2.is_finite() {
            Ok(Self { f1, f2 })
        } else {
            Err(AuditError::NonFinite(f1.to_f64_lossy(), f2.to_f64_lossy()))
        }
    }

    pub fn in_unit_range(&self) -> bool {
        let unit = |x: T| x >= T::zero() && x <= T::one();
        unit(self.f1) && unit(self.f2)
    }
}

/// Where the supremum of the log ratio sits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    LowerTail,
    UpperTail,
    Kink(f64),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::LowerTail => f.write_str("tail:-inf"),
            Location::UpperTail => f.write_str("tail:+inf"),
            Location::Kink(s) => write!(f, "kink:{s}"),
        }
    }
}

/// Supremum of the privacy loss of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupLoss<T> {
    /// `sup_s ln p(s|f1) / p(s|f2)`.
    pub forward: T,
    /// `sup_s ln p(s|f2) / p(s|f1)`.
    pub backward: T,
    pub location: Location,
}

impl<T: Scalar> SupLoss<T> {
    pub fn value(&self) -> T {
        self.forward.max(self.backward)
    }
}

fn check_mechanism<T: Scalar>(w: T, b: T) -> Result<()> {
    if !(w >= T::zero() && w <= T::one()) {
        return Err(AuditError::InvalidRate(w.to_f64_lossy()));
    }
    if !(b > T::zero() && b.is_finite()) {
        return Err(AuditError::InvalidScale(b.to_f64_lossy()));
    }
    Ok(())
}

fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::neg_infinity() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Output density of the mechanism at `s`.
pub fn output_density<T: Scalar>(s: T, f: T, w: T, b: T) -> T {
    let half_b = T::of(0.5) / b;
    w * half_b * (-s.abs() / b).exp() + (T::one() - w) * half_b * (-(s - f).abs() / b).exp()
}

/// `ln p(s|f)` up to the additive constant `-ln 2b`.
fn log_density_shape<T: Scalar>(s: T, f: T, w: T, b: T) -> T {
    log_add_exp(w.ln() - s.abs() / b, (T::one() - w).ln() - (s - f).abs() / b)
}

/// `ln p(s|f1) - ln p(s|f2)`.
pub fn log_ratio<T: Scalar>(s: T, f1: T, f2: T, w: T, b: T) -> T {
    log_density_shape(s, f1, w, b) - log_density_shape(s, f2, w, b)
}

/// `ln(w + (1 - w) e^x)`, accurate for small `x`.
fn tail_term<T: Scalar>(x: T, w: T) -> T {
    ((T::one() - w) * x.exp_m1()).ln_1p()
}

/// Log ratio in the limits `s → -∞` and `s → +∞`.
pub fn tail_log_ratios<T: Scalar>(f1: T, f2: T, w: T, b: T) -> (T, T) {
    let lower = tail_term(-f1 / b, w) - tail_term(-f2 / b, w);
    let upper = tail_term(f1 / b, w) - tail_term(f2 / b, w);
    (lower, upper)
}

/// Exact supremum of the privacy loss of `(f1, f2)` for rate `w` and
/// Laplace scale `b`.
pub fn sup_log_ratio_scaled<T: Scalar>(pair: AdjacentPair<T>, w: T, b: T) -> Result<SupLoss<T>> {
    check_mechanism(w, b)?;
    let (f1, f2) = (pair.f1, pair.f2);
    let (lower, upper) = tail_log_ratios(f1, f2, w, b);
    let mut candidates = vec![(lower, Location::LowerTail), (upper, Location::UpperTail)];
    for s in [T::zero(), f1, f2] {
        candidates.push((log_ratio(s, f1, f2, w, b), Location::Kink(s.to_f64_lossy())));
    }
    let mut forward = T::neg_infinity();
    let mut backward = T::neg_infinity();
    let mut best = T::neg_infinity();
    let mut location = Location::UpperTail;
    // the ratio is flat beyond the outermost kink, so a kink can tie a tail;
    // ties go to the tail, which comes first
    let tie = T::of(1e-12);
    for (v, loc) in candidates {
        forward = forward.max(v);
        backward = backward.max(-v);
        if v.abs() > best + tie * best.abs().max(T::one()) || best == T::neg_infinity() {
            best = v.abs();
            location = loc;
        }
    }
    Ok(SupLoss {
        forward,
        backward,
        location,
    })
}

/// [`sup_log_ratio_scaled`] with `b = 1 / ε'(w)` allocated from the claimed
/// budget.
pub fn sup_log_ratio<T: Scalar>(
    pair: AdjacentPair<T>,
    w: T,
    eps: PrivacyBudget<T>,
) -> Result<SupLoss<T>> {
    let b = T::one() / eps_prime(w, eps)?;
    sup_log_ratio_scaled(pair, w, b)
}

/// Supremum of `|ln p(s|f1)/p(s|f2)|` over `s` in `[lo, hi]`: the end
/// points and the kinks inside.
pub fn sup_on_interval<T: Scalar>(pair: AdjacentPair<T>, w: T, b: T, lo: T, hi: T) -> T {
    let mut pts = vec![lo, hi];
    pts.extend([T::zero(), pair.f1, pair.f2].into_iter().filter(|&k| k > lo && k < hi));
    pts.into_iter()
        .map(|s| log_ratio(s, pair.f1, pair.f2, w, b).abs())
        .fold(T::zero(), T::max)
}

/// Probability that `Lap(mu, b)` lands in `[a, c]`, without cancellation in
/// the tails.
fn laplace_mass(a: f64, c: f64, mu: f64, b: f64) -> f64 {
    if a >= mu {
        0.5 * ((-(a - mu) / b).exp() - (-(c - mu) / b).exp())
    } else if c <= mu {
        0.5 * (((c - mu) / b).exp() - ((a - mu) / b).exp())
    } else {
        1.0 - 0.5 * ((a - mu) / b).exp() - 0.5 * (-(c - mu) / b).exp()
    }
}

/// Probability that the release of `f` lands in `[a, c]`.
pub fn bin_mass(a: f64, c: f64, f: f64, w: f64, b: f64) -> f64 {
    w * laplace_mass(a, c, 0.0, b) + (1.0 - w) * laplace_mass(a, c, f, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub draws: usize,
    pub bins: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            draws: 1_000_000,
            bins: 200,
            bootstrap: 200,
            seed: 0,
        }
    }
}

/// Histogram estimate of the privacy loss of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    /// Max over eligible bins of `|ln(c1 / c2)|`.
    pub estimate: f64,
    /// `|mean_boot - estimate| + 2.576 sd_boot` over Poisson bootstrap
    /// replicates of the counts.
    pub width: f64,
    pub boot_mean: f64,
    pub boot_sd: f64,
    /// The same statistic with exact bin probabilities in place of counts,
    /// over the same bins.
    pub restricted_sup: f64,
    /// Pointwise supremum over the span of the eligible bins.
    pub pointwise_sup: f64,
    pub eligible_bins: usize,
    pub range: (f64, f64),
}

impl McEstimate {
    pub fn agrees_with(&self, reference: f64) -> bool {
        (self.estimate - reference).abs() <= self.width
    }
}

/// One scalar release of `f`.
#[inline]
pub fn release_scalar<R: Rng + ?Sized>(f: f64, w: f64, b: f64, rng: &mut R) -> f64 {
    let keep = rng.gen::<f64>() >= w;
    let r = b * laplace_from_uniform(open_unit::<f64, _>(rng));
    if keep {
        f + r
    } else {
        r
    }
}

/// Monte Carlo cross-check of [`sup_log_ratio_scaled`]: both output
/// distributions are histogrammed on a shared grid over
/// `[min(0, f) - 10b, max(1, f) + 10b]`.
pub fn monte_carlo_ratio<R: Rng + ?Sized>(
    pair: AdjacentPair<f64>,
    w: f64,
    b: f64,
    cfg: &McConfig,
    rng: &mut R,
) -> Result<McEstimate> {
    check_mechanism(w, b)?;
    if cfg.draws < MIN_DRAWS {
        return Err(AuditError::TooFewDraws(cfg.draws));
    }
    if cfg.bins == 0 || cfg.bootstrap < 2 {
        return Err(AuditError::Config(
            "need at least one bin and two bootstrap replicates".into(),
        ));
    }
    let lo = pair.f1.min(pair.f2).min(0.0) - 10.0 * b;
    let hi = pair.f1.max(pair.f2).max(1.0) + 10.0 * b;
    let width = (hi - lo) / cfg.bins as f64;
    let histogram = |f: f64, rng: &mut R| {
        let mut counts = vec![0u64; cfg.bins];
        for _ in 0..cfg.draws {
            let s = release_scalar(f, w, b, rng);
            if s >= lo && s < hi {
                let i = (((s - lo) / width) as usize).min(cfg.bins - 1);
                counts[i] += 1;
            }
        }
        counts
    };
    let c1 = histogram(pair.f1, rng);
    let c2 = histogram(pair.f2, rng);
    let eligible: Vec<usize> = (0..cfg.bins)
        .filter(|&i| c1[i] >= MIN_BIN_COUNT && c2[i] >= MIN_BIN_COUNT)
        .collect();
    if eligible.is_empty() {
        return Err(AuditError::DegenerateHistogram);
    }

    let stat = |a: &dyn Fn(usize) -> f64, c: &dyn Fn(usize) -> f64| {
        eligible
            .iter()
            .map(|&i| (a(i).ln() - c(i).ln()).abs())
            .fold(0.0, f64::max)
    };
    let estimate = stat(&|i| c1[i] as f64, &|i| c2[i] as f64);

    // Poisson bootstrap: every draw gets an independent Poisson(1) weight,
    // which makes each bin count Poisson with the observed count as mean;
    // both histograms share n, so normalization cancels in expectation
    let mut reps = Vec::with_capacity(cfg.bootstrap);
    for _ in 0..cfg.bootstrap {
        let mut resample = |c: &[u64]| -> Vec<f64> {
            eligible
                .iter()
                .map(|&i| {
                    let lambda = c[i] as f64;
                    Poisson::new(lambda).map_or(lambda, |p| p.sample(rng)).max(1.0)
                })
                .collect()
        };
        let r1 = resample(&c1);
        let r2 = resample(&c2);
        let v = r1
            .iter()
            .zip(&r2)
            .map(|(a, c)| (a.ln() - c.ln()).abs())
            .fold(0.0, f64::max);
        reps.push(v);
    }
    let m = reps.len() as f64;
    let boot_mean = reps.iter().sum::<f64>() / m;
    let boot_sd = (reps.iter().map(|v| (v - boot_mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();

    let edge = |i: usize| lo + i as f64 * width;
    let restricted_sup = stat(
        &|i| bin_mass(edge(i), edge(i + 1), pair.f1, w, b),
        &|i| bin_mass(edge(i), edge(i + 1), pair.f2, w, b),
    );
    let span_lo = edge(eligible[0]);
    let span_hi = edge(eligible[eligible.len() - 1] + 1);
    Ok(McEstimate {
        estimate,
        width: (boot_mean - estimate).abs() + 2.576 * boot_sd,
        boot_mean,
        boot_sd,
        restricted_sup,
        pointwise_sup: sup_on_interval(pair, w, b, span_lo, span_hi),
        eligible_bins: eligible.len(),
        range: (lo, hi),
    })
}

/// Audit result for one pair at one rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub f1: f64,
    pub f2: f64,
    pub w: f64,
    pub b: f64,
    pub forward: f64,
    pub backward: f64,
    pub measured: f64,
    pub location: Location,
    pub margin: f64,
    /// `None` outside `[0, 1]`, where no verdict is given.
    pub exceeds: Option<bool>,
    pub mc: Option<McEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub scheme: String,
    pub claimed: f64,
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    /// The same measurements judged against another claimed budget.
    pub fn with_claim(mut self, claimed: f64) -> Self {
        self.claimed = claimed;
        for e in &mut self.entries {
            e.margin = claimed - e.measured;
            e.exceeds = e.exceeds.map(|_| e.measured > claimed + VIOLATION_TOL);
        }
        self
    }

    /// Largest loss over the pairs inside `[0, 1]`.
    pub fn max_measured(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.exceeds.is_some())
            .map(|e| e.measured)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst(&self) -> Option<&AuditEntry> {
        self.entries
            .iter()
            .filter(|e| e.exceeds.is_some())
            .max_by(|a, b| a.measured.total_cmp(&b.measured))
    }

    pub fn margin(&self) -> f64 {
        self.claimed - self.max_measured()
    }

    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.exceeds == Some(true)).count()
    }

    pub fn extended_pairs(&self) -> usize {
        self.entries.iter().filter(|e| e.exceeds.is_none()).count()
    }

    pub fn mc_disagreements(&self) -> usize {
        self.entries
            .iter()
            .filter_map(|e| e.mc.as_ref())
            .filter(|m| !m.agrees_with(m.restricted_sup))
            .count()
    }

    /// `key=value` summary lines followed by one comma-separated row per
    /// entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format=dpmld-audit/1");
        let _ = writeln!(out, "scheme={}", self.scheme);
        let _ = writeln!(out, "claimed_eps={}", self.claimed);
        let _ = writeln!(out, "entries={}", self.entries.len());
        if let Some(w) = self.worst() {
            let _ = writeln!(out, "max_measured={}", w.measured);
            let _ = writeln!(out, "max_at=({}, {}) w={} {}", w.f1, w.f2, w.w, w.location);
            let _ = writeln!(out, "margin={}", self.margin());
        }
        let _ = writeln!(out, "violations={}", self.violations());
        let _ = writeln!(out, "extended_pairs={}", self.extended_pairs());
        let _ = writeln!(out, "mc_disagreements={}", self.mc_disagreements());
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "f1,f2,w,b,sup_forward,sup_backward,measured,location,margin,verdict,\
             mc_estimate,mc_width,mc_restricted_sup,mc_bins"
        );
        for e in &self.entries {
            let verdict = match e.exceeds {
                Some(true) => "exceeds",
                Some(false) => "ok",
                None => "extended",
            };
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                e.f1, e.f2, e.w, e.b, e.forward, e.backward, e.measured, e.location, e.margin,
                verdict
            );
            match &e.mc {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        ",{},{},{},{}",
                        m.estimate, m.width, m.restricted_sup, m.eligible_bins
                    );
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }
}

fn entry(pair: AdjacentPair<f64>, w: f64, b: f64, claimed: f64) -> Result<AuditEntry> {
    let sup = sup_log_ratio_scaled(pair, w, b)?;
    let measured = sup.value();
    Ok(AuditEntry {
        f1: pair.f1,
        f2: pair.f2,
        w,
        b,
        forward: sup.forward,
        backward: sup.backward,
        measured,
        location: sup.location,
        margin: claimed - measured,
        exceeds: pair
            .in_unit_range()
            .then_some(measured > claimed + VIOLATION_TOL),
        mc: None,
    })
}

/// Analytic audit of the element-wise scheme over every pair and rate.
pub fn audit_mechanism(
    eps: PrivacyBudget<f64>,
    w_grid: &[f64],
    pairs: &[AdjacentPair<f64>],
) -> Result<AuditReport> {
    if pairs.is_empty() || w_grid.is_empty() {
        return Err(AuditError::EmptyFamily);
    }
    let mut entries = Vec::with_capacity(pairs.len() * w_grid.len());
    for &w in w_grid {
        let b = 1.0 / eps_prime(w, eps)?;
        for &p in pairs {
            entries.push(entry(p, w, b, eps.epsilon())?);
        }
    }
    Ok(AuditReport {
        scheme: "element-wise".into(),
        claimed: eps.epsilon(),
        entries,
    })
}

/// The same audit for the uniform scheme, whose claimed budget is
/// `ln[(1 - μ) e^{ε'} + μ]`.
pub fn audit_baseline(cfg: &BaselineConfig<f64>, pairs: &[AdjacentPair<f64>]) -> Result<AuditReport> {
    if pairs.is_empty() {
        return Err(AuditError::EmptyFamily);
    }
    let claimed = baseline_total_budget(cfg).epsilon();
    let entries = pairs
        .iter()
        .map(|&p| entry(p, cfg.mu(), cfg.scale(), claimed))
        .collect::<Result<_>>()?;
    Ok(AuditReport {
        scheme: format!("uniform mu={} eps_prime={}", cfg.mu(), cfg.eps_prime_uniform()),
        claimed,
        entries,
    })
}

/// Adds Monte Carlo columns to the entries selected by `pick`.
pub fn attach_monte_carlo<R: Rng + ?Sized>(
    report: &mut AuditReport,
    cfg: &McConfig,
    mut pick: impl FnMut(&AuditEntry) -> bool,
    rng: &mut R,
) -> Result<()> {
    for e in report.entries.iter_mut().filter(|e| pick(e)) {
        let pair = AdjacentPair::extended(e.f1, e.f2)?;
        e.mc = Some(monte_carlo_ratio(pair, e.w, e.b, cfg, rng)?);
    }
    Ok(())
}

/// All ordered pairs of the grid `{0, step, 2 step, ..., 1}`.
pub fn grid_pairs(step: f64) -> Result<Vec<AdjacentPair<f64>>> {
    let pts = unit_grid(step)?;
    let mut out = Vec::with_capacity(pts.len() * pts.len());
    for &a in &pts {
        for &c in &pts {
            out.push(AdjacentPair::new(a, c)?);
        }
    }
    Ok(out)
}

/// `{0, step, ..., 1}` with the points computed as `i · step`.
pub fn unit_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(AuditError::Config(format!("grid step {step} is not in (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    if ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(AuditError::Config(format!("grid step {step} does not divide 1")));
    }
    Ok((0..=n).map(|i| (i as f64 * step).min(1.0)).collect())
}

/// The pair that attains the claimed budget.
pub fn worst_case_pair() -> AdjacentPair<f64> {
    AdjacentPair { f1: 1.0, f2: 0.0 }
}
