//! Turning raw modality matrices into model inputs: amplitude tokens for the
//! EEG signal, a resampled image and its patch grid for the other modality.

use super::{Matrix, ModelError, Result};
use crate::Scalar;

/// Per-channel equal-width amplitude bins fitted on training signals.
#[derive(Debug, Clone, PartialEq)]
pub struct EegTokenizer<T> {
    lo: Vec<T>,
    hi: Vec<T>,
    vocab: usize,
}

impl<T: Scalar> EegTokenizer<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>, vocab: usize) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(ModelError::Config(format!(
                "tokenizer bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if vocab == 0 {
            return Err(ModelError::Config("vocabulary must be non-empty".into()));
        }
        Ok(Self { lo, hi, vocab })
    }

    /// Channel-wise min and max over every signal in `signals`.
    pub fn fit<'a, I>(signals: I, vocab: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Matrix<T>>,
    {
        let mut lo: Vec<T> = Vec::new();
        let mut hi: Vec<T> = Vec::new();
        for x in signals {
            x.check_finite("eeg")?;
            if lo.is_empty() {
                lo = vec![T::infinity(); x.rows];
                hi = vec![T::neg_infinity(); x.rows];
            }
            if x.rows != lo.len() {
                return Err(ModelError::Shape(format!(
                    "eeg signal has {} channels, expected {}",
                    x.rows,
                    lo.len()
                )));
            }
            for (c, row) in x.data.chunks(x.cols.max(1)).enumerate() {
                for &v in row {
                    lo[c] = lo[c].min(v);
                    hi[c] = hi[c].max(v);
                }
            }
        }
        if lo.is_empty() {
            return Err(ModelError::Empty("tokenizer training set"));
        }
        Self::new(lo, hi, vocab)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn channels(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[T] {
        &self.lo
    }

    pub fn hi(&self) -> &[T] {
        &self.hi
    }

    /// Bin of amplitude `x` on channel `c`; values outside the fitted range
    /// fall into the end bins.
    pub fn token(&self, c: usize, x: T) -> usize {
        let (lo, hi) = (self.lo[c], self.hi[c]);
        if hi <= lo {
            return 0;
        }
        let pos = ((x - lo) / (hi - lo) * T::of(self.vocab as f64)).floor();
        let top = self.vocab - 1;
        if pos <= T::zero() {
            0
        } else {
            pos.to_usize().map_or(top, |p| p.min(top))
        }
    }

    /// Token ids in the layout of `x` (channels × timesteps).
    pub fn tokenize(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        if x.is_empty() {
            return Err(ModelError::Empty("eeg signal"));
        }
        if x.rows != self.channels() {
            return Err(ModelError::Shape(format!(
                "eeg signal has {} channels, tokenizer was fitted on {}",
                x.rows,
                self.channels()
            )));
        }
        x.check_finite("eeg")?;
        Ok(x
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| self.token(i / x.cols, v))
            .collect())
    }
}

/// Sinusoidal positional encoding, `[positions × d]`.
pub fn positional_encoding<T: Scalar>(positions: usize, d: usize) -> Vec<T> {
    let mut pe = Vec::with_capacity(positions * d);
    for t in 0..positions {
        for j in 0..d {
            let freq = 10_000f64.powf(-((j - j % 2) as f64) / d as f64);
            let angle = t as f64 * freq;
            pe.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    pe
}

/// Number of pooled positions for `timesteps` split into windows.
pub fn window_count(timesteps: usize, window: usize) -> usize {
    timesteps.div_ceil(window)
}

/// Averaging matrix `[windows × timesteps]`; the last window may be short.
pub fn window_pooling<T: Scalar>(timesteps: usize, window: usize) -> Vec<T> {
    let s = window_count(timesteps, window);
    let mut p = vec![T::zero(); s * timesteps];
    for w in 0..s {
        let start = w * window;
        let end = (start + window).min(timesteps);
        let share = T::one() / T::of((end - start) as f64);
        for t in start..end {
            p[w * timesteps + t] = share;
        }
    }
    p
}

/// Per-timestep token frequencies, `[timesteps × vocab]`, averaged over
/// channels.
pub fn token_frequencies<T: Scalar>(
    ids: &[usize],
    channels: usize,
    timesteps: usize,
    vocab: usize,
) -> Vec<T> {
    let share = T::one() / T::of(channels as f64);
    let mut a = vec![T::zero(); timesteps * vocab];
    for c in 0..channels {
        for t in 0..timesteps {
            a[t * vocab + ids[c * timesteps + t]] += share;
        }
    }
    a
}

/// Token frequencies pooled over windows, `[windows × vocab]`; each row sums
/// to one.
pub fn window_frequencies<T: Scalar>(
    ids: &[usize],
    channels: usize,
    timesteps: usize,
    window: usize,
    vocab: usize,
) -> Vec<T> {
    let s = window_count(timesteps, window);
    let mut a = vec![T::zero(); s * vocab];
    for c in 0..channels {
        for t in 0..timesteps {
            let w = t / window;
            let len = (timesteps - w * window).min(window);
            a[w * vocab + ids[c * timesteps + t]] += T::one() / T::of((channels * len) as f64);
        }
    }
    a
}

/// Window means of the positional encoding, `[windows × d]`.
pub fn window_positional<T: Scalar>(timesteps: usize, window: usize, d: usize) -> Vec<T> {
    let pe = positional_encoding::<T>(timesteps, d);
    let pool = window_pooling::<T>(timesteps, window);
    let s = window_count(timesteps, window);
    let mut out = vec![T::zero(); s * d];
    for w in 0..s {
        for t in 0..timesteps {
            let p = pool[w * timesteps + t];
            if p != T::zero() {
                for j in 0..d {
                    out[w * d + j] += p * pe[t * d + j];
                }
            }
        }
    }
    out
}

/// Linear resampling of every row of `x` to `width` points; the result is an
/// `[rows × width × 1]` image stored row-major.
pub fn transform_om<T: Scalar>(x: &Matrix<T>, width: usize) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(ModelError::Empty("om signal"));
    }
    if width == 0 {
        return Err(ModelError::Config("image width must be positive".into()));
    }
    x.check_finite("om")?;
    let n = x.cols;
    let mut img = Vec::with_capacity(x.rows * width);
    for row in x.data.chunks(n) {
        for j in 0..width {
            if n == 1 || width == 1 {
                img.push(row[0]);
                continue;
            }
            let pos = T::of((j * (n - 1)) as f64) / T::of((width - 1) as f64);
            let i = pos.floor().to_usize().unwrap_or(0).min(n - 1);
            let frac = pos - T::of(i as f64);
            if frac == T::zero() || i + 1 >= n {
                img.push(row[i]);
            } else {
                img.push(row[i] + (row[i + 1] - row[i]) * frac);
            }
        }
    }
    Ok(img)
}

/// Splits an `[h × w]` image into non-overlapping `patch × patch` tiles,
/// each flattened row-major; tiles are ordered row-major over the grid.
pub fn patchify<T: Scalar>(img: &[T], h: usize, w: usize, patch: usize) -> Result<Vec<T>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Shape(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    if img.len() != h * w {
        return Err(ModelError::Shape(format!(
            "image buffer of length {} is not {h}x{w}",
            img.len()
        )));
    }
    let mut out = Vec::with_capacity(img.len());
    for gi in 0..h / patch {
        for gj in 0..w / patch {
            for r in 0..patch {
                let start = (gi * patch + r) * w + gj * patch;
                out.extend_from_slice(&img[start..start + patch]);
            }
        }
    }
    Ok(out)
}
