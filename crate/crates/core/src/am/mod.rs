//! Activation maximization in a generator's code space, its two-unit
//! variant, pixel-space baselines and hyperparameter search.

mod pixel;
#[cfg(test)]
use pixel::{initial_image, pixel_observed};
mod search;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::nn::{BoundParams, Code, NetworkInstance};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::CodeStats;

pub use pixel::{pixel_am, PixelPrior};
pub use search::{random_search, Range, SearchResult, SearchSpace};

/// L2 weight that the reference experiments found to work best.
pub const DEFAULT_LAMBDA: f32 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// Per-unit `N(mean, std)`, then clipped into the box.
    GaussianFromStats,
    /// Per-unit uniform over the clip box.
    UniformBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// `R(y) = |y|^2`.
    Squared,
    /// `R(y) = |y|`.
    Plain,
}

/// Upper edge of the per-unit clip box; the lower edge is always 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipBound {
    ThreeSigma,
    MeanPlusThreeSigma,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AMConfig {
    pub lambda: f32,
    pub learning_rate: f32,
    pub iterations: usize,
    pub init: Init,
    pub seed: u64,
    pub clip: bool,
    pub clip_bound: ClipBound,
    pub norm_mode: NormMode,
    /// Weight of `|a1 - a2|` in the two-unit objective.
    pub gamma: f32,
    pub momentum: f32,
}

impl Default for AMConfig {
    fn default() -> Self {
        AMConfig {
            lambda: DEFAULT_LAMBDA,
            learning_rate: 1.0,
            iterations: 200,
            init: Init::GaussianFromStats,
            seed: 0,
            clip: true,
            clip_bound: ClipBound::ThreeSigma,
            norm_mode: NormMode::Squared,
            gamma: 0.0,
            momentum: 0.0,
        }
    }
}

impl AMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::input(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::input(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::input("iterations must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// `key=value` lines echoing every field.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "init={}", match self.init {
            Init::Zeros => "zeros",
            Init::GaussianFromStats => "gaussian_from_stats",
            Init::UniformBox => "uniform_box",
        });
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "clip={}", self.clip);
        let _ = writeln!(s, "clip_bound={}", match self.clip_bound {
            ClipBound::ThreeSigma => "3sigma",
            ClipBound::MeanPlusThreeSigma => "mean+3sigma",
        });
        let _ = writeln!(s, "norm_mode={}", match self.norm_mode {
            NormMode::Squared => "squared",
            NormMode::Plain => "plain",
        });
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "momentum={}", self.momentum);
        s
    }
}

/// Per-unit upper clip edges, shaped like one code.
pub fn clip_upper(stats: &CodeStats, bound: ClipBound) -> Tensor {
    match bound {
        ClipBound::ThreeSigma => stats.std.map(|s| 3.0 * s),
        ClipBound::MeanPlusThreeSigma => stats.mean.zip_map(&stats.std, |m, s| (m + 3.0 * s).max(0.0)).expect("stats shapes agree"),
    }
}

/// `min(max(y, 0), upper)` per unit of every code in the batch.
pub fn clip_code(code: &Code, stats: &CodeStats, bound: ClipBound) -> Result<Code> {
    if code.layer != stats.layer {
        return Err(Error::dim("clip_code", format!("code from `{}` but statistics for `{}`", code.layer, stats.layer)));
    }
    let upper = clip_upper(stats, bound);
    Ok(Code { layer: code.layer.clone(), values: clip_values(&code.values, &upper)? })
}

fn clip_values(values: &Tensor, upper: &Tensor) -> Result<Tensor> {
    if values.shape().get(1..) != Some(upper.shape()) {
        return Err(Error::dim("clip_code", format!("code {:?} vs statistics {:?}", values.shape(), upper.shape())));
    }
    let ub = upper.data();
    let mut out = values.clone();
    for row in out.data_mut().chunks_mut(ub.len()) {
        for (v, &u) in row.iter_mut().zip(ub) {
            *v = v.max(0.0).min(u);
        }
    }
    Ok(out)
}

/// The networks a synthesis runs through: `phi` is visualized at `layer`
/// through images produced by `generator` from codes of `stats.layer`.
#[derive(Clone, Copy)]
pub struct Synth<'a> {
    pub phi: &'a NetworkInstance,
    pub layer: &'a str,
    pub generator: &'a NetworkInstance,
    pub stats: Option<&'a CodeStats>,
}

/// One evaluated iterate, taken before the step that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f32,
    /// Raw activation of each target unit.
    pub activations: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AMResult {
    pub units: Vec<usize>,
    /// Code (or image, for pixel-space runs) at the best iterate.
    pub code: Code,
    pub image: Tensor,
    pub trace: Vec<TraceRow>,
    pub best_iteration: usize,
    pub config: AMConfig,
}

impl AMResult {
    pub fn best(&self) -> &TraceRow {
        &self.trace[self.best_iteration]
    }

    /// Activation of the (first) target unit at the best iterate.
    pub fn best_activation(&self) -> f32 {
        self.best().activations[0]
    }

    /// `iteration,objective,activation` (plus `activation_2` for pairs).
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,objective,activation");
        for k in 2..=self.units.len() {
            let _ = write!(s, ",activation_{k}");
        }
        s.push('\n');
        for r in &self.trace {
            let _ = write!(s, "{},{}", r.iteration, r.objective);
            for a in &r.activations {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        s
    }
}

fn regularizer<'t>(code: Var<'t>, mode: NormMode) -> Var<'t> {
    match mode {
        NormMode::Squared => code.sq_norm(),
        NormMode::Plain => code.norm(),
    }
}

struct Bound<'t> {
    phi: BoundParams<'t>,
    gen: BoundParams<'t>,
}

impl<'a> Synth<'a> {
    fn code_shape(&self) -> Vec<usize> {
        let mut s = vec![1];
        s.extend_from_slice(&self.generator.spec.input);
        s
    }

    fn check(&self) -> Result<()> {
        let out = self.generator.spec.output_shape()?;
        if out != self.phi.spec.input {
            return Err(Error::dim("synthesize", format!("generator emits {out:?} but target expects {:?}", self.phi.spec.input)));
        }
        if let Some(s) = self.stats {
            if s.mean.shape() != self.generator.spec.input.as_slice() {
                return Err(Error::dim("synthesize", format!("statistics {:?} vs generator input {:?}", s.mean.shape(), self.generator.spec.input)));
            }
        }
        Ok(())
    }

    fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { phi: self.phi.bind(tape, false), gen: self.generator.bind(tape, false) }
    }

    /// Image and per-unit activations for a code on the tape.
    fn activations<'t>(&self, b: &Bound<'t>, code: Var<'t>, units: &[usize]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let image = self.generator.forward_var(&b.gen, code)?;
        let feats = self.phi.forward_to_layer_var(&b.phi, self.layer, image)?;
        let acts = units
            .iter()
            .map(|&u| self.phi.unit_offset(self.layer, u).and_then(|o| feats.index(o)))
            .collect::<Result<Vec<_>>>()?;
        Ok((image, acts))
    }
}

/// `Phi_h(G(y)) - lambda R(y)` on the tape, plus the raw activation.
pub fn am_objective<'t>(synth: &Synth<'_>, tape: &'t Tape, unit: usize, code: Var<'t>, cfg: &AMConfig) -> Result<(Var<'t>, f32)> {
    let b = synth.bind(tape);
    let (_, acts) = synth.activations(&b, code, &[unit])?;
    let reg = regularizer(code, cfg.norm_mode).scale(cfg.lambda);
    Ok((acts[0].sub(reg)?, acts[0].item()))
}

/// Two-unit objective `a1 + a2 - lambda R(y) - gamma |a1 - a2|`.
pub fn pair_objective<'t>(synth: &Synth<'_>, tape: &'t Tape, units: [usize; 2], code: Var<'t>, cfg: &AMConfig) -> Result<(Var<'t>, [f32; 2])> {
    let b = synth.bind(tape);
    let (_, acts) = synth.activations(&b, code, &units)?;
    let objective = pair_combine(acts[0], acts[1], regularizer(code, cfg.norm_mode), cfg)?;
    Ok((objective, [acts[0].item(), acts[1].item()]))
}

fn pair_combine<'t>(a1: Var<'t>, a2: Var<'t>, reg: Var<'t>, cfg: &AMConfig) -> Result<Var<'t>> {
    let gap = a1.sub(a2)?.abs().scale(cfg.gamma);
    a1.add(a2)?.sub(reg.scale(cfg.lambda))?.sub(gap)
}

fn initial_code(shape: &[usize], stats: Option<&CodeStats>, upper: Option<&Tensor>, cfg: &AMConfig) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let need = || Error::input(format!("{:?} initialization needs code statistics", cfg.init));
    let data: Vec<f32> = match cfg.init {
        Init::Zeros => return Ok(Tensor::zeros(shape)),
        Init::GaussianFromStats => {
            let s = stats.ok_or_else(need)?;
            s.mean
                .data()
                .iter()
                .zip(s.std.data())
                .map(|(&m, &sd)| if sd > 0.0 { Normal::new(m, sd).expect("finite std").sample(&mut rng) } else { m })
                .collect()
        }
        Init::UniformBox => {
            let s = stats.ok_or_else(need)?;
            let ub = upper.cloned().unwrap_or_else(|| clip_upper(s, cfg.clip_bound));
            ub.data().iter().map(|&u| if u > 0.0 { Uniform::new(0.0, u).expect("positive edge").sample(&mut rng) } else { 0.0 }).collect()
        }
    };
    Tensor::new(shape.to_vec(), data)
}

/// Shared ascent loop: `eval` maps a code to (objective var, activations)
/// on a fresh tape; the code is clipped after every step when `upper` is
/// given.
fn ascend(
    synth: &Synth<'_>,
    units: &[usize],
    cfg: &AMConfig,
    eval: &dyn for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<(Var<'t>, Var<'t>, Vec<f32>)>,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<AMResult> {
    cfg.validate()?;
    synth.check()?;
    if cfg.clip && synth.stats.is_none() {
        return Err(Error::input("clipping needs code statistics"));
    }
    let upper = synth.stats.filter(|_| cfg.clip).map(|s| clip_upper(s, cfg.clip_bound));
    let shape = synth.code_shape();
    let mut y = initial_code(&shape, synth.stats, upper.as_ref(), cfg)?;
    if let Some(u) = &upper {
        y = clip_values(&y, u)?;
    }
    let mut velocity = vec![0.0f32; y.len()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let (mut best, mut best_objective, mut best_code, mut best_image) = (0usize, f32::NEG_INFINITY, y.clone(), None);
    for it in 0..cfg.iterations {
        let tape = Tape::new();
        let b = synth.bind(&tape);
        let code = tape.param(y.clone());
        let (objective, image, acts) = eval(&b, code)?;
        let ov = objective.item();
        if !ov.is_finite() {
            return Err(Error::Synthesis { iteration: it, detail: format!("objective is {ov}") });
        }
        if ov > best_objective {
            best = it;
            best_objective = ov;
            best_code = y.clone();
            best_image = Some((*image.value()).clone());
        }
        trace.push(TraceRow { iteration: it, objective: ov, activations: acts });
        let grads = tape.backward(objective)?;
        let g = grads.wrt(code);
        for ((yv, v), gv) in y.data_mut().iter_mut().zip(&mut velocity).zip(g.data()) {
            *v = cfg.momentum * *v + gv;
            *yv += cfg.learning_rate * *v;
        }
        if let Some(u) = &upper {
            y = clip_values(&y, u)?;
        }
        observe(it, &y);
    }
    let layer = synth.stats.map_or_else(|| "code".to_string(), |s| s.layer.clone());
    let image = best_image.expect("at least one iteration").into_reshaped(&synth.phi.spec.input)?;
    Ok(AMResult {
        units: units.to_vec(),
        code: Code { layer, values: best_code },
        image,
        trace,
        best_iteration: best,
        config: cfg.clone(),
    })
}

/// Maximize one unit of `synth.phi` over the generator's code space.
pub fn synthesize(synth: &Synth<'_>, unit: usize, cfg: &AMConfig) -> Result<AMResult> {
    synthesize_observed(synth, unit, cfg, &mut |_, _| {})
}

/// As [`synthesize`], handing `(iteration, code)` to `observe` after every
/// step (post-clip when clipping is enabled).
pub fn synthesize_observed(synth: &Synth<'_>, unit: usize, cfg: &AMConfig, observe: &mut dyn FnMut(usize, &Tensor)) -> Result<AMResult> {
    synth.phi.unit_offset(synth.layer, unit)?;
    ascend(synth, &[unit], cfg, &|b, code| {
        let (image, acts) = synth.activations(b, code, &[unit])?;
        let objective = acts[0].sub(regularizer(code, cfg.norm_mode).scale(cfg.lambda))?;
        Ok((objective, image, vec![acts[0].item()]))
    }, observe)
}

/// Jointly excite two distinct units.
pub fn synthesize_pair(synth: &Synth<'_>, units: [usize; 2], cfg: &AMConfig) -> Result<AMResult> {
    if units[0] == units[1] {
        return Err(Error::input(format!("pair synthesis needs two distinct units, got {} twice", units[0])));
    }
    for u in units {
        synth.phi.unit_offset(synth.layer, u)?;
    }
    ascend(synth, &units, cfg, &|b, code| {
        let (image, acts) = synth.activations(b, code, &units)?;
        let objective = pair_combine(acts[0], acts[1], regularizer(code, cfg.norm_mode), cfg)?;
        Ok((objective, image, vec![acts[0].item(), acts[1].item()]))
    }, &mut |_, _| {})
}

/// Per-unit synthesis over a list of units on up to `jobs` threads. Unit
/// `u` runs with seed `cfg.seed + u`; results come back in `units` order.
pub fn synthesize_units(synth: &Synth<'_>, units: &[usize], cfg: &AMConfig, jobs: usize) -> Result<Vec<AMResult>> {
    let run = |u: usize| synthesize(synth, u, &AMConfig { seed: cfg.seed.wrapping_add(u as u64), ..cfg.clone() });
    if jobs <= 1 || units.len() <= 1 {
        return units.iter().map(|&u| run(u)).collect();
    }
    let chunk = units.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = units
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&u| run(u)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(units.len());
        for h in handles {
            out.extend(h.join().expect("synthesis thread panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests;
