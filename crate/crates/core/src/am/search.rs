use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{synthesize, AMConfig, Synth};
use crate::error::{Error, Result};

/// Closed interval, sampled log-uniformly when `log` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
    pub log: bool,
}

impl Range {
    pub fn linear(lo: f32, hi: f32) -> Self {
        Range { lo, hi, log: false }
    }

    pub fn log(lo: f32, hi: f32) -> Self {
        Range { lo, hi, log: true }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) || (self.log && self.lo <= 0.0) {
            return Err(Error::input(format!("empty or unbounded {what} range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f32 {
        let u: f32 = rng.random();
        if self.log {
            (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp().clamp(self.lo, self.hi)
        } else {
            self.lo + u * (self.hi - self.lo)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpace {
    pub lambda: Range,
    pub learning_rate: Range,
    /// Inclusive.
    pub iterations: (usize, usize),
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        self.lambda.validate("lambda")?;
        if self.lambda.lo < 0.0 {
            return Err(Error::input("lambda range must be non-negative"));
        }
        self.learning_rate.validate("learning rate")?;
        if self.learning_rate.lo <= 0.0 {
            return Err(Error::input("learning rate range must be positive"));
        }
        let (a, b) = self.iterations;
        if a == 0 || a > b {
            return Err(Error::input(format!("empty iteration range [{a}, {b}]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Position in the sampling stream.
    pub trial: usize,
    pub config: AMConfig,
    pub best_activation: f32,
}

/// Sample `trials` configurations from one seeded stream (trial `k` is the
/// same whatever `trials` is), run each, and rank by best activation,
/// ties broken by trial order. Fields not in `space` come from `base`.
pub fn random_search(synth: &Synth<'_>, unit: usize, base: &AMConfig, space: &SearchSpace, trials: usize, seed: u64) -> Result<Vec<SearchResult>> {
    space.validate()?;
    if trials == 0 {
        return Err(Error::input("random search needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials {
        let config = AMConfig {
            lambda: space.lambda.sample(&mut rng),
            learning_rate: space.learning_rate.sample(&mut rng),
            iterations: rng.random_range(space.iterations.0..=space.iterations.1),
            seed: rng.random(),
            ..base.clone()
        };
        let r = synthesize(synth, unit, &config)?;
        results.push(SearchResult { trial, best_activation: r.best_activation(), config });
    }
    results.sort_by(|a, b| b.best_activation.total_cmp(&a.best_activation).then(a.trial.cmp(&b.trial)));
    Ok(results)
}
