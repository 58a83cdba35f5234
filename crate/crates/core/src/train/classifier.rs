use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LogRow, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{NetworkInstance, NetworkSpec, TrainingMeta};
use crate::tensor::{Tape, Tensor};

/// Epoch-wise shuffled mini-batches; every sample is visited once per epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = BatchSampler { order: (0..n).collect(), pos: n, batch: batch.min(n).max(1), rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

pub struct ClassifierRun {
    pub network: NetworkInstance,
    /// Snapshots at every checkpoint, the last one equal to `network`.
    pub checkpoints: Vec<NetworkInstance>,
    pub log: Vec<LogRow>,
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(net: &NetworkInstance, data: &Dataset, batch: usize) -> Result<f64> {
    let logits = net.forward_batched(&data.images, batch, None)?;
    let k = logits.shape()[1];
    let hits = logits.data().chunks(k).zip(&data.labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// First index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

pub fn train_classifier(
    spec: NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    dataset_tag: &str,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    let classes = spec.output_shape()?;
    if classes != [train.num_classes()] {
        return Err(Error::dim("train_classifier", format!("network outputs {classes:?} but data has {} classes", train.num_classes())));
    }
    if spec.input != train.image_shape() || val.image_shape() != train.image_shape() {
        return Err(Error::dim("train_classifier", format!("network input {:?} vs images {:?}", spec.input, train.image_shape())));
    }
    let mut net = NetworkInstance::init(spec, cfg.seed)?;
    net.meta = TrainingMeta { dataset: dataset_tag.to_string(), iteration: 0, seed: cfg.seed, val_accuracy: None };
    let mut opt = cfg.optimizer.build(cfg.learning_rate);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed.wrapping_add(1));
    let mut run = ClassifierRun { network: net.clone(), checkpoints: Vec::new(), log: Vec::new() };
    let (mut loss_sum, mut hits, mut seen, mut steps) = (0.0f64, 0usize, 0usize, 0usize);
    for it in 0..cfg.iterations {
        opt.set_learning_rate(cfg.schedule.rate(cfg.learning_rate, it));
        let (x, labels) = train.batch(&sampler.next_batch())?;
        let tape = Tape::new();
        let params = net.bind(&tape, true);
        let logits = net.forward_var(&params, tape.leaf(x))?;
        let loss = logits.softmax_cross_entropy(&labels)?;
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::Training { iteration: it, detail: format!("cross-entropy is {lv}") });
        }
        let row_hits = batch_hits(&logits.value(), &labels);
        let mut grads = tape.backward(loss)?;
        let g = params.gradients(&mut grads);
        drop(params);
        opt.step(&mut net.params, &g)?;
        loss_sum += lv as f64;
        steps += 1;
        hits += row_hits;
        seen += labels.len();

        let done = it + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
            let val_acc = accuracy(&net, val, cfg.eval_batch)?;
            net.meta.iteration = done;
            net.meta.val_accuracy = Some(val_acc as f32);
            run.log.push(LogRow { iteration: done, split: "train", metric: "loss", value: loss_sum / steps as f64 });
            run.log.push(LogRow { iteration: done, split: "train", metric: "accuracy", value: hits as f64 / seen as f64 });
            run.log.push(LogRow { iteration: done, split: "validation", metric: "accuracy", value: val_acc });
            run.checkpoints.push(net.clone());
            (loss_sum, hits, seen, steps) = (0.0, 0, 0, 0);
        }
    }
    run.network = net;
    Ok(run)
}

fn batch_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::{LayerKind, LayerSpec};

    fn tiny_spec(classes: usize) -> NetworkSpec {
        NetworkSpec {
            name: "tiny".into(),
            input: vec![1, 4, 4],
            layers: vec![
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new("fc", LayerKind::Dense { out: 8 }),
                LayerSpec::new("fc_act", LayerKind::Activation(crate::nn::Activation::Relu)),
                LayerSpec::new("logits", LayerKind::Dense { out: classes }),
            ],
            code_layers: vec!["fc_act".into()],
        }
    }

    /// Two classes split by the mean of the top half versus the bottom half.
    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Tensor::uniform(&[n, 1, 4, 4], 0.0, 0.5, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, img) in images.data_mut().chunks_mut(16).enumerate() {
            let half = if labels[i] == 0 { &mut img[..8] } else { &mut img[8..] };
            half.iter_mut().for_each(|v| *v += 0.5);
        }
        Dataset::new(images, labels, vec!["top".into(), "bottom".into()], Split::Full).unwrap()
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn single_class_is_trivially_perfect() {
        let d = Dataset::new(Tensor::full(&[6, 1, 4, 4], 0.5), vec![0; 6], vec!["only".into()], Split::Full).unwrap();
        let cfg = TrainConfig { iterations: 2, batch_size: 6, checkpoint_every: 2, ..Default::default() };
        let run = train_classifier(tiny_spec(1), &d, &d, &cfg, "one").unwrap();
        assert_eq!(accuracy(&run.network, &d, 4).unwrap(), 1.0);
    }

    #[test]
    fn separable_data_is_learned_deterministically() {
        let train = separable(200, 1);
        let val = separable(100, 2);
        let cfg = TrainConfig { iterations: 150, batch_size: 20, learning_rate: 1e-2, checkpoint_every: 50, seed: 9, ..Default::default() };
        let a = train_classifier(tiny_spec(2), &train, &val, &cfg, "toy").unwrap();
        assert!(accuracy(&a.network, &val, 64).unwrap() > 0.95);
        assert_eq!(a.checkpoints.len(), 3);
        assert_eq!(a.log.len(), 9);
        let b = train_classifier(tiny_spec(2), &train, &val, &cfg, "toy").unwrap();
        assert_eq!(a.network.to_bytes(), b.network.to_bytes());
        assert_eq!(a.network.meta.iteration, 150);
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let d = separable(10, 1);
        let cfg = TrainConfig { iterations: 1, ..Default::default() };
        assert!(matches!(train_classifier(tiny_spec(3), &d, &d, &cfg, "x"), Err(Error::Dimension { .. })));
    }

    #[test]
    fn divergence_names_iteration() {
        let d = separable(10, 1);
        let cfg = TrainConfig { iterations: 50, learning_rate: 1e30, optimizer: super::super::OptimizerKind::Sgd { momentum: 0.0 }, ..Default::default() };
        match train_classifier(tiny_spec(2), &d, &d, &cfg, "x") {
            Err(Error::Training { iteration, .. }) => assert!(iteration > 0 && iteration < 50),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.network.meta)),
        }
    }
}
