use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::optim::{Adam, AdamHyper, Optimizer, Sgd};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f32, beta2: f32 },
    Sgd { momentum: f32 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        let h = AdamHyper::default();
        OptimizerKind::Adam { beta1: h.beta1, beta2: h.beta2 }
    }
}

impl OptimizerKind {
    pub fn build(&self, lr: f32) -> Box<dyn Optimizer> {
        match *self {
            OptimizerKind::Adam { beta1, beta2 } => {
                Box::new(Adam::new(AdamHyper { lr, beta1, beta2, ..AdamHyper::default() }))
            }
            OptimizerKind::Sgd { momentum } => Box::new(Sgd::new(lr, momentum)),
        }
    }
}

/// Learning rate as a function of the (0-based) iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` every `every` iterations.
    Step { every: usize, gamma: f32 },
}

impl Schedule {
    pub fn rate(&self, base: f32, iteration: usize) -> f32 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { every, gamma } => base * gamma.powi((iteration / every.max(1)) as i32),
        }
    }
}

/// Generator objective weights for the image, feature and adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub img: f32,
    pub feat: f32,
    pub adv: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { img: 1.0, feat: 1.0, adv: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Snapshot and evaluate every this many iterations (and at the end).
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    /// Mini-batch size used for evaluation passes.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            schedule: Schedule::Constant,
            optimizer: OptimizerKind::default(),
            seed: 0,
            checkpoint_every: 250,
            weights: LossWeights::default(),
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_batch", self.eval_batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::input(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let w = self.weights;
        if [w.img, w.feat, w.adv].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::input(format!("loss weights must be non-negative, got {w:?}")));
        }
        if w.img + w.feat + w.adv <= 0.0 {
            return Err(Error::input("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// One row of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub const LOG_HEADER: &str = "iteration,split,metric,value";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.split, r.metric, r.value);
    }
    out
}

pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parse a log written by [`log_to_csv`] into `(iteration, split, metric, value)`.
pub fn parse_log(text: &str) -> Result<Vec<(usize, String, String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format(format!("log must start with `{LOG_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("log line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [it, split, metric, value] = f.as_slice() else { return Err(bad()) };
            Ok((it.parse().map_err(|_| bad())?, split.to_string(), metric.to_string(), value.parse().map_err(|_| bad())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(zero.validate(), Err(Error::Input(_))));
        let none = TrainConfig { weights: LossWeights { img: 0.0, feat: 0.0, adv: 0.0 }, ..Default::default() };
        assert!(none.validate().is_err());
        let neg = TrainConfig { weights: LossWeights { img: -1.0, feat: 1.0, adv: 0.0 }, ..Default::default() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn step_schedule() {
        let s = Schedule::Step { every: 10, gamma: 0.5 };
        assert_eq!(s.rate(1.0, 9), 1.0);
        assert_eq!(s.rate(1.0, 10), 0.5);
        assert_eq!(s.rate(1.0, 25), 0.25);
    }

    #[test]
    fn log_round_trip() {
        let rows = vec![LogRow { iteration: 3, split: "validation", metric: "accuracy", value: 0.75 }];
        let csv = log_to_csv(&rows);
        assert!(csv.starts_with("iteration,split,metric,value\n"));
        assert_eq!(parse_log(&csv).unwrap(), vec![(3, "validation".into(), "accuracy".into(), 0.75)]);
    }
}
