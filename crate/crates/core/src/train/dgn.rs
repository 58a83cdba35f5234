use super::classifier::BatchSampler;
use super::config::{LogRow, LossWeights, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BoundParams, NetworkInstance};
use crate::tensor::{Tape, Tensor, Var};

/// D updates pause once its loss has stayed below this floor ...
pub const D_LOSS_FLOOR: f32 = 0.1;
/// ... for this many consecutive iterations, and resume when it rises again.
pub const D_PATIENCE: usize = 200;

/// The fixed networks a generator is trained against.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub encoder: &'a NetworkInstance,
    pub layer: &'a str,
    pub comparator: &'a NetworkInstance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DgnParts {
    pub loss_g: f32,
    pub loss_d: f32,
    pub img: f32,
    pub feat: f32,
    pub adv: f32,
}

/// Discriminator pause/resume state.
#[derive(Clone, Copy, Debug, Default)]
struct Balance {
    low_streak: usize,
    paused: bool,
}

impl Balance {
    fn observe(&mut self, loss_d: f32) {
        if loss_d < D_LOSS_FLOOR {
            self.low_streak += 1;
            if self.low_streak >= D_PATIENCE {
                self.paused = true;
            }
        } else {
            self.low_streak = 0;
            self.paused = false;
        }
    }
}

fn targets(n: usize, value: f32) -> Tensor {
    Tensor::full(&[n, 1], value)
}

/// Weighted generator objective; returns the loss and `(L_img, L_feat, L_adv)`.
/// The adversarial term is skipped (reported as 0) when `disc` is `None`.
#[allow(clippy::too_many_arguments)]
fn generator_objective<'t>(
    tape: &'t Tape,
    g: &NetworkInstance,
    gp: &BoundParams<'t>,
    disc: Option<(&NetworkInstance, &BoundParams<'t>)>,
    comparator: (&NetworkInstance, &BoundParams<'t>),
    codes: &Tensor,
    x: &Tensor,
    comp_x: &Tensor,
    w: LossWeights,
) -> Result<(Var<'t>, [f32; 3])> {
    let img = g.forward_var(gp, tape.leaf(codes.clone()))?;
    if img.shape() != x.shape() {
        return Err(Error::dim("dgn_losses", format!("generator output {:?} vs images {:?}", img.shape(), x.shape())));
    }
    let l_img = img.mse(tape.leaf(x.clone()))?;
    let (c, cp) = comparator;
    let l_feat = c.forward_var(cp, img)?.mse(tape.leaf(comp_x.clone()))?;
    let mut loss = l_img.scale(w.img).add(l_feat.scale(w.feat))?;
    let mut adv = 0.0;
    if let Some((d, dp)) = disc {
        let l_adv = d.forward_var(dp, img)?.bce_logits(&targets(x.shape()[0], 1.0))?;
        adv = l_adv.item();
        loss = loss.add(l_adv.scale(w.adv))?;
    }
    Ok((loss, [l_img.item(), l_feat.item(), adv]))
}

fn discriminator_objective<'t>(tape: &'t Tape, d: &NetworkInstance, dp: &BoundParams<'t>, x: &Tensor, fake: &Tensor) -> Result<Var<'t>> {
    let n = x.shape()[0];
    let real = d.forward_var(dp, tape.leaf(x.clone()))?.bce_logits(&targets(n, 1.0))?;
    let fake = d.forward_var(dp, tape.leaf(fake.clone()))?.bce_logits(&targets(n, 0.0))?;
    real.add(fake)
}

/// Every loss for one batch of images, without updating anything.
pub fn dgn_losses(g: &NetworkInstance, d: &NetworkInstance, frozen: Frozen<'_>, x: &Tensor, w: LossWeights) -> Result<DgnParts> {
    let codes = frozen.encoder.forward_to_layer(frozen.layer, x)?.values;
    let comp_x = frozen.comparator.forward(x)?;
    let tape = Tape::new();
    let (gp, dp, cp) = (g.bind(&tape, false), d.bind(&tape, false), frozen.comparator.bind(&tape, false));
    let (loss_g, [img, feat, adv]) =
        generator_objective(&tape, g, &gp, Some((d, &dp)), (frozen.comparator, &cp), &codes, x, &comp_x, w)?;
    let fake = g.forward(&codes)?;
    let loss_d = discriminator_objective(&tape, d, &dp, x, &fake)?;
    Ok(DgnParts { loss_g: loss_g.item(), loss_d: loss_d.item(), img, feat, adv })
}

pub struct DgnRun {
    pub generator: NetworkInstance,
    pub discriminator: NetworkInstance,
    /// Generator snapshots at every checkpoint.
    pub checkpoints: Vec<NetworkInstance>,
    /// Per-iteration losses.
    pub curve: Vec<DgnParts>,
    pub log: Vec<LogRow>,
    /// Iterations on which the balancing rule withheld the D update.
    pub d_skipped: usize,
}

/// Mean squared reconstruction error `G(E_l(x))` vs `x` over a dataset.
pub fn reconstruction_mse(g: &NetworkInstance, frozen: Frozen<'_>, data: &Dataset, batch: usize) -> Result<f64> {
    let codes = frozen.encoder.forward_batched(&data.images, batch, Some(frozen.layer))?;
    let recon = g.forward_batched(&codes, batch, None)?;
    Ok(recon.data().iter().zip(data.images.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / recon.len() as f64)
}

/// Alternating D/G training. With `w.adv == 0` the discriminator is
/// neither consulted nor updated.
pub fn train_dgn(
    mut g: NetworkInstance,
    mut d: NetworkInstance,
    frozen: Frozen<'_>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<DgnRun> {
    cfg.validate()?;
    let code_shape = frozen.encoder.spec.layer_shape(frozen.layer)?;
    if g.spec.input != code_shape || g.spec.output_shape()? != frozen.encoder.spec.input {
        return Err(Error::dim(
            "train_dgn",
            format!("generator maps {:?} -> {:?}, encoder needs {:?} -> {:?}", g.spec.input, g.spec.output_shape()?, code_shape, frozen.encoder.spec.input),
        ));
    }
    let w = cfg.weights;
    let adversarial = w.adv > 0.0;
    let mut opt_g = cfg.optimizer.build(cfg.learning_rate);
    let mut opt_d = cfg.optimizer.build(cfg.learning_rate);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed.wrapping_add(2));
    let mut run = DgnRun {
        generator: g.clone(),
        discriminator: d.clone(),
        checkpoints: Vec::new(),
        curve: Vec::with_capacity(cfg.iterations),
        log: Vec::new(),
        d_skipped: 0,
    };
    let mut balance = Balance::default();
    let mut window = (DgnParts::default(), 0usize);
    for it in 0..cfg.iterations {
        let lr = cfg.schedule.rate(cfg.learning_rate, it);
        opt_g.set_learning_rate(lr);
        opt_d.set_learning_rate(lr);
        let (x, _) = train.batch(&sampler.next_batch())?;
        let codes = frozen.encoder.forward_to_layer(frozen.layer, &x)?.values;
        let comp_x = frozen.comparator.forward(&x)?;

        let mut loss_d = 0.0;
        if adversarial {
            let fake = g.forward(&codes)?;
            let tape = Tape::new();
            let dp = d.bind(&tape, !balance.paused);
            let loss = discriminator_objective(&tape, &d, &dp, &x, &fake)?;
            loss_d = loss.item();
            if !loss_d.is_finite() {
                return Err(Error::Training { iteration: it, detail: format!("discriminator loss is {loss_d}") });
            }
            if balance.paused {
                run.d_skipped += 1;
            } else {
                let mut grads = tape.backward(loss)?;
                let gd = dp.gradients(&mut grads);
                drop(dp);
                opt_d.step(&mut d.params, &gd)?;
            }
            balance.observe(loss_d);
        }

        let tape = Tape::new();
        let gp = g.bind(&tape, true);
        let dp = d.bind(&tape, false);
        let cp = frozen.comparator.bind(&tape, false);
        let disc = adversarial.then_some((&d, &dp));
        let (loss, [img, feat, adv]) =
            generator_objective(&tape, &g, &gp, disc, (frozen.comparator, &cp), &codes, &x, &comp_x, w)?;
        let loss_g = loss.item();
        if !loss_g.is_finite() {
            return Err(Error::Training { iteration: it, detail: format!("generator loss is {loss_g}") });
        }
        let mut grads = tape.backward(loss)?;
        let gg = gp.gradients(&mut grads);
        drop((gp, dp, cp));
        opt_g.step(&mut g.params, &gg)?;

        let parts = DgnParts { loss_g, loss_d, img, feat, adv };
        run.curve.push(parts);
        let acc = &mut window.0;
        acc.loss_g += loss_g;
        acc.loss_d += loss_d;
        acc.img += img;
        acc.feat += feat;
        acc.adv += adv;
        window.1 += 1;

        let done = it + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
            let n = window.1 as f64;
            let a = window.0;
            for (metric, v) in [("loss_g", a.loss_g), ("loss_d", a.loss_d), ("l_img", a.img), ("l_feat", a.feat), ("l_adv", a.adv)] {
                run.log.push(LogRow { iteration: done, split: "train", metric, value: v as f64 / n });
            }
            run.log.push(LogRow { iteration: done, split: "train", metric: "d_skipped", value: run.d_skipped as f64 });
            if let Some(v) = val {
                let mse = reconstruction_mse(&g, frozen, v, cfg.eval_batch)?;
                run.log.push(LogRow { iteration: done, split: "validation", metric: "reconstruction_mse", value: mse });
            }
            g.meta.iteration = done;
            g.meta.seed = cfg.seed;
            d.meta.iteration = done;
            run.checkpoints.push(g.clone());
            window = (DgnParts::default(), 0);
        }
    }
    run.generator = g;
    run.discriminator = d;
    Ok(run)
}
