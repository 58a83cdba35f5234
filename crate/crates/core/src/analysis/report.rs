use std::fmt::Write as _;

use crate::am::{synthesize, AMConfig, AMResult, Synth};
use crate::data::{montage, Dataset};
use crate::error::{Error, Result};
use crate::nn::NetworkInstance;
use crate::tensor::Tensor;
use crate::train::{argmax, CodeStats};

/// `100 * #{v < a} / n`; `None` when the sample is empty or constant.
pub fn percentile_of(a: f32, sample: &[f32]) -> Option<f64> {
    let first = *sample.first()?;
    if sample.iter().all(|&v| v == first) {
        return None;
    }
    Some(100.0 * sample.iter().filter(|&&v| v < a).count() as f64 / sample.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitScore {
    pub unit: usize,
    pub activation: f32,
    /// Within the unit's validation activations.
    pub percentile: Option<f64>,
    /// Arg-max of the target's final layer on the synthesis.
    pub top1: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizationReport {
    pub scores: Vec<UnitScore>,
    pub syntheses: Vec<AMResult>,
}

impl GeneralizationReport {
    pub const CSV_HEADER: &'static str = "unit,activation,percentile,top1";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.scores {
            let p = r.percentile.map_or_else(|| "undefined".to_string(), |p| p.to_string());
            let _ = writeln!(s, "{},{},{},{}", r.unit, r.activation, p, r.top1);
        }
        s
    }

    /// Median over units with a defined percentile.
    pub fn median_percentile(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.scores.iter().filter_map(|s| s.percentile).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn mean_percentile(&self) -> Option<f64> {
        let v: Vec<f64> = self.scores.iter().filter_map(|s| s.percentile).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Synthesize each unit of `synth.phi` at `synth.layer` with the given
/// generator and rank the synthesized activation within the unit's
/// activations over `val`.
pub fn generalization_score(synth: &Synth<'_>, units: &[usize], cfg: &AMConfig, val: &Dataset, batch: usize, jobs: usize) -> Result<GeneralizationReport> {
    let out = synth.generator.spec.output_shape()?;
    if out != synth.phi.spec.input {
        return Err(Error::dim("generalization_score", format!("generator emits {out:?} but target expects {:?}", synth.phi.spec.input)));
    }
    let val_acts = synth.phi.unit_activations(synth.layer, &val.images, batch)?;
    let syntheses = crate::am::synthesize_units(synth, units, cfg, jobs)?;
    let mut scores = Vec::with_capacity(units.len());
    for (&unit, r) in units.iter().zip(&syntheses) {
        let column: Vec<f32> = val_acts.iter().map(|row| row[unit]).collect();
        let mut shape = vec![1];
        shape.extend_from_slice(r.image.shape());
        let logits = synth.phi.forward(&r.image.reshape(&shape)?)?;
        scores.push(UnitScore { unit, activation: r.best_activation(), percentile: percentile_of(r.best_activation(), &column), top1: argmax(logits.data()) });
    }
    Ok(GeneralizationReport { scores, syntheses })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotRow {
    pub iteration: usize,
    pub unit: usize,
    pub activation: f32,
    pub val_accuracy: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotReport {
    pub rows: Vec<SnapshotRow>,
    /// One montage per checkpoint, units left to right.
    pub montages: Vec<Tensor>,
}

impl SnapshotReport {
    pub const CSV_HEADER: &'static str = "iteration,unit,activation,val_accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let acc = r.val_accuracy.map_or_else(String::new, |a| a.to_string());
            let _ = writeln!(s, "{},{},{},{}", r.iteration, r.unit, r.activation, acc);
        }
        s
    }

    /// Mean synthesized activation per checkpoint, in series order.
    pub fn mean_activation_per_checkpoint(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.iteration => {
                    last.1 += r.activation as f64;
                    last.2 += 1;
                }
                _ => out.push((r.iteration, r.activation as f64, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

/// Synthesize `units` for every checkpoint of one training run with the
/// same seed, so rows differ only through the checkpoint.
pub fn snapshot_report(
    checkpoints: &[NetworkInstance],
    layer: &str,
    units: &[usize],
    generator: &NetworkInstance,
    stats: Option<&CodeStats>,
    cfg: &AMConfig,
) -> Result<SnapshotReport> {
    if checkpoints.len() < 2 {
        return Err(Error::input(format!("a snapshot series needs at least 2 checkpoints, got {}", checkpoints.len())));
    }
    let mut report = SnapshotReport { rows: Vec::new(), montages: Vec::new() };
    for ckpt in checkpoints {
        let synth = Synth { phi: ckpt, layer, generator, stats };
        let mut images = Vec::with_capacity(units.len());
        for &unit in units {
            let r = synthesize(&synth, unit, cfg)?;
            report.rows.push(SnapshotRow { iteration: ckpt.meta.iteration, unit, activation: r.best_activation(), val_accuracy: ckpt.meta.val_accuracy });
            images.push(r.image);
        }
        report.montages.push(montage(&images, units.len().max(1))?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::toy_pair;
    use crate::nn::NetworkSpec;
    use proptest::prelude::*;

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile_of(5.0, &[1.0, 2.0, 3.0, 10.0]), Some(75.0));
        assert_eq!(percentile_of(0.0, &[1.0, 2.0]), Some(0.0));
        assert_eq!(percentile_of(3.0, &[2.0, 2.0, 2.0]), None);
        assert_eq!(percentile_of(3.0, &[]), None);
    }

    proptest! {
        #[test]
        fn percentile_matches_sorted_rank(sample in proptest::collection::vec(-5.0f32..5.0, 2..60), a in -6.0f32..6.0, b in -6.0f32..6.0) {
            let mut sorted = sample.clone();
            sorted.sort_by(f32::total_cmp);
            let rank = sorted.partition_point(|&v| v < a);
            if let Some(p) = percentile_of(a, &sample) {
                prop_assert_eq!(p, 100.0 * rank as f64 / sample.len() as f64);
                prop_assert!((0.0..=100.0).contains(&p));
                let q = percentile_of(b, &sample).unwrap();
                prop_assert!((a <= b) == (p <= q) || p == q);
            }
        }
    }

    fn toys() -> (NetworkInstance, NetworkInstance, CodeStats, Dataset) {
        let (e, g) = toy_pair();
        let enc = NetworkInstance::init(e, 1).unwrap();
        let gen = NetworkInstance::init(g, 2).unwrap();
        let stats = CodeStats { layer: "code".into(), mean: Tensor::full(&[6], 0.5), std: Tensor::full(&[6], 0.5), samples: 10 };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let val = Dataset::new(Tensor::uniform(&[30, 1, 8, 8], 0.0, 1.0, &mut rng), vec![0; 30], vec!["x".into()], crate::data::Split::Validation).unwrap();
        (enc, gen, stats, val)
    }

    #[test]
    fn generalization_shapes_and_degenerate_transfer() {
        let (enc, gen, stats, val) = toys();
        let synth = Synth { phi: &enc, layer: "logits", generator: &gen, stats: Some(&stats) };
        let cfg = AMConfig { iterations: 10, ..Default::default() };
        let r = generalization_score(&synth, &[0, 1, 2, 3], &cfg, &val, 16, 1).unwrap();
        assert_eq!(r.scores.len(), 4);
        let again = generalization_score(&synth, &[0, 1, 2, 3], &cfg, &val, 16, 2).unwrap();
        assert_eq!(r, again);
        for (s, res) in r.scores.iter().zip(&r.syntheses) {
            assert_eq!(s.activation, synthesize(&synth, s.unit, &AMConfig { seed: s.unit as u64, ..cfg.clone() }).unwrap().best_activation());
            assert_eq!(res.units, vec![s.unit]);
        }
        assert!(r.to_csv().starts_with("unit,activation,percentile,top1\n"));
        let wide = NetworkInstance::init(NetworkSpec { input: vec![1, 16, 16], ..toy_pair().0 }, 1).unwrap();
        let bad = Synth { phi: &wide, layer: "logits", generator: &gen, stats: Some(&stats) };
        assert!(matches!(generalization_score(&bad, &[0], &cfg, &val, 16, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn constant_unit_has_undefined_percentile() {
        let (mut enc, gen, stats, val) = toys();
        enc.params.get_mut("logits.weight").unwrap().data_mut()[..6].fill(0.0);
        let synth = Synth { phi: &enc, layer: "logits", generator: &gen, stats: Some(&stats) };
        let r = generalization_score(&synth, &[0], &AMConfig { iterations: 3, ..Default::default() }, &val, 16, 1).unwrap();
        assert_eq!(r.scores[0].percentile, None);
        assert!(r.to_csv().contains(",undefined,"));
    }

    #[test]
    fn snapshot_table_and_montages() {
        let (mut enc, gen, stats, _) = toys();
        enc.meta.iteration = 10;
        enc.meta.val_accuracy = Some(0.5);
        let mut later = enc.clone();
        later.meta.iteration = 20;
        let cfg = AMConfig { iterations: 5, ..Default::default() };
        let r = snapshot_report(&[enc.clone(), later], "logits", &[1], &gen, Some(&stats), &cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.montages.len(), 2);
        assert_eq!(r.montages[0], r.montages[1]);
        assert_eq!(r.rows[0].val_accuracy, Some(0.5));
        assert_eq!(r.to_csv().lines().nth(1), Some("10,1,".to_string() + &r.rows[0].activation.to_string() + ",0.5").as_deref());
        assert_eq!(r.mean_activation_per_checkpoint().len(), 2);
        assert!(snapshot_report(&[enc], "logits", &[1], &gen, Some(&stats), &cfg).is_err());
    }
}
