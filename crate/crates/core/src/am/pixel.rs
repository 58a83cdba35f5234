use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AMConfig, AMResult, Init, TraceRow};
use crate::data::gaussian_blur;
use crate::error::{Error, Result};
use crate::nn::{Code, NetworkInstance};
use crate::tensor::{Tape, Tensor};

/// Hand-designed image priors for pixel-space ascent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PixelPrior {
    None,
    /// `x <- (1 - rate) x` after every step.
    L2Decay { rate: f32 },
    /// Gaussian blur after every `every`-th step.
    BlurEvery { every: usize, radius: f32 },
    /// Each gradient is taken on a copy circularly shifted by up to
    /// `max_shift` pixels per axis, then shifted back.
    Jitter { max_shift: usize },
}

impl PixelPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PixelPrior::None => Ok(()),
            PixelPrior::L2Decay { rate } if rate > 0.0 && rate < 1.0 => Ok(()),
            PixelPrior::BlurEvery { every, radius } if every >= 1 && radius > 0.0 && radius.is_finite() => Ok(()),
            PixelPrior::Jitter { .. } => Ok(()),
            p => Err(Error::input(format!("invalid pixel prior {p:?}"))),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            PixelPrior::None => "none".into(),
            PixelPrior::L2Decay { rate } => format!("l2_decay(rate={rate})"),
            PixelPrior::BlurEvery { every, radius } => format!("blur(every={every},radius={radius})"),
            PixelPrior::Jitter { max_shift } => format!("jitter(max_shift={max_shift})"),
        }
    }
}

/// Circular shift of every `[C, H, W]` plane by `(dy, dx)`.
fn roll(x: &Tensor, dy: isize, dx: isize) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(x.data().chunks(h * w)) {
        for i in 0..h {
            let ti = (i as isize + dy).rem_euclid(h as isize) as usize;
            for j in 0..w {
                let tj = (j as isize + dx).rem_euclid(w as isize) as usize;
                dst[ti * w + tj] = src[i * w + j];
            }
        }
    }
    out
}

pub(super) fn initial_image(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::UniformBox => (0..n).map(|_| rng.random::<f32>()).collect(),
        Init::GaussianFromStats => {
            let noise = Normal::new(0.5f32, 0.1).expect("fixed parameters");
            (0..n).map(|_| noise.sample(rng).clamp(0.0, 1.0)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data)
}

/// Gradient ascent on the pixels of a batch-1 image. The recorded objective
/// is the raw activation: regularization comes only from `prior`, and
/// `cfg.lambda`, `cfg.clip` and `cfg.gamma` are ignored. Init `zeros` starts
/// from black, `uniform_box` from `U[0, 1]` noise and `gaussian_from_stats`
/// from mid-gray plus `N(0, 0.1)` noise.
pub fn pixel_am(phi: &NetworkInstance, layer: &str, unit: usize, prior: PixelPrior, cfg: &AMConfig) -> Result<AMResult> {
    pixel_observed(phi, layer, unit, prior, cfg, &mut |_, _, _| {})
}

/// As [`pixel_am`], handing `observe` the image before and after the prior
/// of every iteration.
pub(super) fn pixel_observed(
    phi: &NetworkInstance,
    layer: &str,
    unit: usize,
    prior: PixelPrior,
    cfg: &AMConfig,
    observe: &mut dyn FnMut(usize, &Tensor, &Tensor),
) -> Result<AMResult> {
    cfg.validate()?;
    prior.validate()?;
    if phi.spec.input.len() != 3 {
        return Err(Error::dim("pixel_am", format!("target input {:?} is not an image", phi.spec.input)));
    }
    let offset = phi.unit_offset(layer, unit)?;
    let mut shape = vec![1];
    shape.extend_from_slice(&phi.spec.input);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = initial_image(&shape, cfg.init, &mut rng)?;
    let mut velocity = vec![0.0f32; x.len()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let (mut best, mut best_objective, mut best_image) = (0usize, f32::NEG_INFINITY, x.clone());
    for it in 0..cfg.iterations {
        let (dy, dx) = match prior {
            PixelPrior::Jitter { max_shift } if max_shift > 0 => {
                let m = max_shift as i64;
                (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize)
            }
            _ => (0, 0),
        };
        let tape = Tape::new();
        let params = phi.bind(&tape, false);
        let input = tape.param(if (dy, dx) == (0, 0) { x.clone() } else { roll(&x, dy, dx) });
        let act = phi.forward_to_layer_var(&params, layer, input)?.index(offset)?;
        let av = act.item();
        if !av.is_finite() {
            return Err(Error::Synthesis { iteration: it, detail: format!("activation is {av}") });
        }
        if av > best_objective {
            (best, best_objective, best_image) = (it, av, x.clone());
        }
        trace.push(TraceRow { iteration: it, objective: av, activations: vec![av] });
        let grads = tape.backward(act)?;
        let g = roll(grads.wrt(input), -dy, -dx);
        for ((xv, v), gv) in x.data_mut().iter_mut().zip(&mut velocity).zip(g.data()) {
            *v = cfg.momentum * *v + gv;
            *xv += cfg.learning_rate * *v;
        }
        let stepped = x.clone();
        match prior {
            PixelPrior::L2Decay { rate } => x.data_mut().iter_mut().for_each(|v| *v *= 1.0 - rate),
            PixelPrior::BlurEvery { every, radius } if (it + 1) % every == 0 => {
                x = gaussian_blur(&x.into_reshaped(&phi.spec.input)?, radius)?.into_reshaped(&shape)?;
            }
            _ => {}
        }
        x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        observe(it, &stepped, &x);
    }
    Ok(AMResult {
        units: vec![unit],
        code: Code { layer: "pixels".into(), values: best_image.clone() },
        image: best_image.into_reshaped(&phi.spec.input)?,
        trace,
        best_iteration: best,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_inverts() {
        let x = Tensor::new(vec![1, 2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let y = roll(&x, 1, -2);
        assert_eq!(y.data()[6], x.data()[0]);
        assert_eq!(roll(&y, -1, 2), x);
    }
}
