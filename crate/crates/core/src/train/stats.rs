use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Container, NetworkInstance};
use crate::tensor::Tensor;

/// Per-unit mean and population standard deviation of one code layer,
/// over every element of the layer's activation.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStats {
    pub layer: String,
    pub mean: Tensor,
    pub std: Tensor,
    pub samples: usize,
}

/// Welford accumulator in `f64`.
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(width: usize) -> Self {
        Moments { n: 0, mean: vec![0.0; width], m2: vec![0.0; width] }
    }

    fn push(&mut self, row: &[f32]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(row) {
            let x = x as f64;
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }
}

impl CodeStats {
    /// Statistics of rows `[N, ...]`, each row one code.
    pub fn from_codes(layer: &str, codes: &Tensor) -> Result<CodeStats> {
        let n = *codes.shape().first().ok_or_else(|| Error::input("codes must have a batch axis"))?;
        if n < 2 {
            return Err(Error::input(format!("code statistics need at least 2 samples, got {n}")));
        }
        let shape = codes.shape()[1..].to_vec();
        let width = codes.len() / n;
        let mut acc = Moments::new(width);
        for row in codes.data().chunks(width) {
            acc.push(row);
        }
        let mean = acc.mean.iter().map(|&m| m as f32).collect();
        let std = acc.m2.iter().map(|&s| (s / n as f64).max(0.0).sqrt() as f32).collect();
        Ok(CodeStats { layer: layer.to_string(), mean: Tensor::new(shape.clone(), mean)?, std: Tensor::new(shape, std)?, samples: n })
    }

    pub fn to_container(&self) -> Container {
        Container {
            text: format!("codestats layer={} samples={}\n", self.layer, self.samples),
            tensors: vec![("mean".into(), self.mean.clone()), ("std".into(), self.std.clone())],
        }
    }

    pub fn from_container(c: &Container) -> Result<CodeStats> {
        let line = c.text.lines().next().unwrap_or_default();
        let bad = || Error::Format(format!("not a code-statistics header: `{line}`"));
        let rest = line.strip_prefix("codestats ").ok_or_else(bad)?;
        let (mut layer, mut samples) = (None, None);
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("layer", v)) => layer = Some(v.to_string()),
                Some(("samples", v)) => samples = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let stats = CodeStats {
            layer: layer.ok_or_else(bad)?,
            mean: c.tensor("mean")?.clone(),
            std: c.tensor("std")?.clone(),
            samples: samples.ok_or_else(bad)?,
        };
        if stats.mean.shape() != stats.std.shape() || stats.std.data().iter().any(|s| !(*s >= 0.0)) || stats.samples < 2 {
            return Err(Error::Format("inconsistent code statistics".into()));
        }
        Ok(stats)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_container().encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CodeStats> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CodeStats::from_container(&Container::decode(&bytes)?)
    }
}

pub fn compute_code_stats(encoder: &NetworkInstance, layer: &str, val: &Dataset, batch: usize) -> Result<CodeStats> {
    if val.len() < 2 {
        return Err(Error::input(format!("code statistics need at least 2 images, got {}", val.len())));
    }
    let codes = encoder.forward_batched(&val.images, batch, Some(layer))?;
    CodeStats::from_codes(layer, &codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn population_std_example() {
        let codes = Tensor::new(vec![2, 2], vec![0.0, 2.0, 0.0, 4.0]).unwrap();
        let s = CodeStats::from_codes("fc", &codes).unwrap();
        assert_eq!(s.mean.data(), &[0.0, 3.0]);
        assert_eq!(s.std.data(), &[0.0, 1.0]);
        let flat = CodeStats::from_codes("fc", &Tensor::full(&[5, 3], 1.25)).unwrap();
        assert!(flat.std.data().iter().all(|&v| v == 0.0));
        assert!(matches!(CodeStats::from_codes("fc", &Tensor::zeros(&[1, 3])), Err(Error::Input(_))));
    }

    #[test]
    fn container_round_trip() {
        let codes = Tensor::new(vec![3, 1, 2, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 8.0]).unwrap();
        let s = CodeStats::from_codes("conv_mid", &codes).unwrap();
        assert_eq!(s.mean.shape(), &[1, 2, 1]);
        let back = CodeStats::from_container(&Container::decode(&s.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn matches_two_pass(values in proptest::collection::vec(-50.0f32..50.0, 8..80)) {
            let n = values.len() / 4;
            let codes = Tensor::new(vec![n, 4], values[..n * 4].to_vec()).unwrap();
            prop_assume!(n >= 2);
            let s = CodeStats::from_codes("fc", &codes).unwrap();
            for u in 0..4 {
                let col: Vec<f64> = (0..n).map(|i| codes.data()[i * 4 + u] as f64).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                prop_assert!((s.mean.data()[u] as f64 - mean).abs() < 1e-6 * mean.abs().max(1.0) * 10.0);
                prop_assert!((s.std.data()[u] as f64 - var.sqrt()).abs() < 1e-6 * var.sqrt().max(1.0) * 10.0);
            }
        }
    }
}
