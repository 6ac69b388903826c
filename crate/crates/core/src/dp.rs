//! Gradient clipping and Gaussian noise.
//!
//! Noise comes from addressed streams: every draw is identified by a seed and
//! a [`StreamAddress`], and the ChaCha block counter makes the coordinate
//! sequence inside a stream reproducible no matter which thread asks for it or
//! in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Noise multiplier.
    pub sigma: f64,
    /// L2 clipping bound.
    pub clip_bound: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, clip_bound: f64, seed: u64) -> Result<Self> {
        let cfg = NoiseConfig {
            sigma,
            clip_bound,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("noise scale must be >= 0, got {}", self.sigma)));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(Error::config(format!(
                "clipping bound must be > 0, got {}",
                self.clip_bound
            )));
        }
        Ok(())
    }

    /// Per-coordinate standard deviation `sigma * clip_bound`.
    pub fn noise_std(&self) -> f64 {
        self.sigma * self.clip_bound
    }
}

/// Identifies one independent noise stream.
///
/// `slot` distinguishes the purposes that share a (task, iteration) pair:
/// the task gradient, each reference block, batch sampling, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct StreamAddress {
    pub task: u16,
    pub slot: u16,
    pub iteration: u32,
}

impl StreamAddress {
    pub fn new(task: usize, iteration: usize, slot: u16) -> Self {
        StreamAddress {
            task: task as u16,
            slot,
            iteration: iteration as u32,
        }
    }

    fn stream_id(self) -> u64 {
        (u64::from(self.task) << 48) | (u64::from(self.slot) << 32) | u64::from(self.iteration)
    }
}

/// Seeded source of addressed random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    /// Generator positioned at the start of the addressed stream.
    pub fn rng(&self, addr: StreamAddress) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(addr.stream_id());
        rng
    }

    /// `len` i.i.d. draws from `N(0, std^2)`.
    pub fn gaussian(&self, addr: StreamAddress, len: usize, std: f64) -> Vec<f64> {
        let mut rng = self.rng(addr);
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect()
    }
}

fn ensure_finite(g: &ParamVector) -> Result<()> {
    if g.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("gradient contains NaN"));
    }
    if !g.is_finite() {
        return Err(Error::numeric("gradient contains an infinite value"));
    }
    Ok(())
}

/// `g * min(1, beta / ||g||)`.
///
/// Vectors already inside the ball are returned bit-for-bit unchanged, which
/// makes clipping idempotent.
pub fn clip_grad(g: &ParamVector, beta: f64) -> Result<ParamVector> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config(format!("clipping bound must be > 0, got {beta}")));
    }
    ensure_finite(g)?;
    let norm = g.norm();
    if norm <= beta {
        return Ok(g.clone());
    }
    let mut out = g.scaled(beta / norm);
    // rounding can leave the norm a few ulps above beta
    while out.norm() > beta {
        out.scale(1.0 - f64::EPSILON);
    }
    Ok(out)
}

/// `g + N(0, sigma^2 beta^2 I)` drawn from the stream at `addr`.
pub fn add_noise_at(g: &ParamVector, cfg: &NoiseConfig, addr: StreamAddress) -> Result<ParamVector> {
    cfg.validate()?;
    ensure_finite(g)?;
    if cfg.sigma == 0.0 {
        return Ok(g.clone());
    }
    let z = NoiseStream::new(cfg.seed).gaussian(addr, g.len(), cfg.noise_std());
    Ok(ParamVector::from_vec(
        g.iter().zip(z).map(|(a, b)| a + b).collect(),
    ))
}

/// [`add_noise_at`] on the default stream of `cfg.seed`.
pub fn add_noise(g: &ParamVector, cfg: &NoiseConfig) -> Result<ParamVector> {
    add_noise_at(g, cfg, StreamAddress::default())
}
