//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `&mut impl Rng`. Runs derive
//! independent named streams from one master seed so that adding draws to one
//! consumer never shifts the draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::Scalar;

/// Generator used throughout the crate.
pub type StreamRng = ChaCha12Rng;

/// Named consumers of randomness inside a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Train = 3,
    Eval = 4,
    Data = 5,
    Split = 6,
    Audit = 7,
}

/// Independent stream `stream` of the master `seed`.
pub fn stream(seed: u64, stream: Stream) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Uniform draw on the open interval (0, 1).
#[inline]
pub fn open_unit<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return T::of(u);
        }
    }
}

/// Standard normal draw (Box-Muller, one value per call).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = open_unit(rng);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
