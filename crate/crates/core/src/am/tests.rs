use super::*;
use crate::data::laplacian_energy;
use crate::gradcheck::{max_relative_error, pattern_safe_difference, toy_pair, Arr, RefNet, DEFAULT_STEP};
use crate::nn::{LayerKind, LayerSpec, NetworkSpec};
use proptest::prelude::*;

fn dense_net(name: &str, input: usize, out: usize, weight: Vec<f32>) -> NetworkInstance {
    let spec = NetworkSpec {
        name: name.into(),
        input: vec![input],
        layers: vec![LayerSpec::new("out", LayerKind::Dense { out })],
        code_layers: Vec::new(),
    };
    let mut net = NetworkInstance::zeros(spec).unwrap();
    net.params.insert("out.weight".into(), Tensor::new(vec![out, input], weight).unwrap());
    net
}

fn identity(d: usize) -> Vec<f32> {
    (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
}

fn stats(layer: &str, d: usize, mean: f32, std: f32) -> CodeStats {
    CodeStats { layer: layer.into(), mean: Tensor::full(&[d], mean), std: Tensor::full(&[d], std), samples: 100 }
}

fn toys(seed: u64) -> (NetworkInstance, NetworkInstance) {
    let (e, g) = toy_pair();
    (NetworkInstance::init(e, seed).unwrap(), NetworkInstance::init(g, seed + 1000).unwrap())
}

#[test]
fn objective_arithmetic() {
    let g = dense_net("g", 2, 2, identity(2));
    let phi = dense_net("phi", 2, 1, vec![2.5, 0.0]);
    let synth = Synth { phi: &phi, layer: "out", generator: &g, stats: None };
    let tape = Tape::new();
    let y = tape.param(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
    let (obj, act) = am_objective(&synth, &tape, 0, y, &AMConfig::default()).unwrap();
    assert_eq!(act, 5.0);
    assert!((obj.item() - 4.98).abs() < 1e-6);
    let (obj, _) = am_objective(&synth, &tape, 0, y, &AMConfig { lambda: 0.0, ..Default::default() }).unwrap();
    assert_eq!(obj.item(), 5.0);
    let (obj, _) = am_objective(&synth, &tape, 0, y, &AMConfig { norm_mode: NormMode::Plain, ..Default::default() }).unwrap();
    assert!((obj.item() - 4.99).abs() < 1e-6);
}

#[test]
fn objective_shape_mismatch() {
    let g = dense_net("g", 2, 2, identity(2));
    let phi = dense_net("phi", 3, 1, vec![1.0; 3]);
    let synth = Synth { phi: &phi, layer: "out", generator: &g, stats: None };
    let tape = Tape::new();
    let y = tape.param(Tensor::zeros(&[1, 2]));
    assert!(matches!(am_objective(&synth, &tape, 0, y, &AMConfig::default()), Err(Error::Dimension { .. })));
    let cfg = AMConfig { clip: false, init: Init::Zeros, ..Default::default() };
    assert!(matches!(synthesize(&synth, 0, &cfg), Err(Error::Dimension { .. })));
}

#[test]
fn code_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (phi, g) = toys(seed);
        let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: None };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Tensor::uniform(&[1, 6], 0.0, 1.0, &mut rng);
        let cfg = AMConfig { lambda: 0.05, norm_mode: if seed % 2 == 0 { NormMode::Squared } else { NormMode::Plain }, ..Default::default() };
        let unit = (seed % 4) as usize;
        let tape = Tape::new();
        let yv = tape.param(y.clone());
        let (obj, _) = am_objective(&synth, &tape, unit, yv, &cfg).unwrap();
        let grads = tape.backward(obj).unwrap();
        let (rp, rg) = (RefNet::new(&phi), RefNet::new(&g));
        let mut f = |x: &[f64]| {
            let (img, mut p) = rg.forward(&Arr { shape: vec![1, 6], data: x.to_vec() }, None).unwrap();
            let (out, pe) = rp.forward(&img, None).unwrap();
            p.extend(pe);
            let sq: f64 = x.iter().map(|v| v * v).sum();
            let reg = if cfg.norm_mode == NormMode::Squared { sq } else { sq.sqrt() };
            (out.data[unit] - cfg.lambda as f64 * reg, p)
        };
        let base = Arr::from(&y).data;
        let usable = pattern_safe_difference(&mut f, &base, DEFAULT_STEP, &(0..6).collect::<Vec<_>>());
        let analytic: Vec<f64> = usable.iter().map(|&(c, _)| grads.wrt(yv).data()[c] as f64).collect();
        let numeric: Vec<f64> = usable.iter().map(|&(_, v)| v).collect();
        if !analytic.is_empty() {
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn clip_examples() {
    let s = CodeStats { layer: "fc".into(), mean: Tensor::zeros(&[2]), std: Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), samples: 10 };
    let code = Code { layer: "fc".into(), values: Tensor::new(vec![1, 2], vec![5.0, -1.0]).unwrap() };
    assert_eq!(clip_code(&code, &s, ClipBound::ThreeSigma).unwrap().values.data(), &[3.0, 0.0]);
    let inside = Code { layer: "fc".into(), values: Tensor::new(vec![1, 2], vec![2.0, 5.5]).unwrap() };
    assert_eq!(clip_code(&inside, &s, ClipBound::ThreeSigma).unwrap(), inside);
    let shifted = CodeStats { mean: Tensor::full(&[2], 1.0), ..s.clone() };
    assert_eq!(clip_code(&code, &shifted, ClipBound::MeanPlusThreeSigma).unwrap().values.data(), &[4.0, 0.0]);
    let wrong_len = Code { layer: "fc".into(), values: Tensor::zeros(&[1, 3]) };
    assert!(matches!(clip_code(&wrong_len, &s, ClipBound::ThreeSigma), Err(Error::Dimension { .. })));
    let wrong_layer = Code { layer: "conv".into(), ..code };
    assert!(clip_code(&wrong_layer, &s, ClipBound::ThreeSigma).is_err());
}

proptest! {
    #[test]
    fn clip_is_idempotent_and_contained(values in proptest::collection::vec(-10.0f32..10.0, 8), stds in proptest::collection::vec(0.0f32..3.0, 4)) {
        let s = CodeStats { layer: "fc".into(), mean: Tensor::full(&[4], 0.5), std: Tensor::new(vec![4], stds.clone()).unwrap(), samples: 10 };
        let code = Code { layer: "fc".into(), values: Tensor::new(vec![2, 4], values).unwrap() };
        for bound in [ClipBound::ThreeSigma, ClipBound::MeanPlusThreeSigma] {
            let once = clip_code(&code, &s, bound).unwrap();
            prop_assert_eq!(&clip_code(&once, &s, bound).unwrap(), &once);
            let ub = clip_upper(&s, bound);
            for (i, v) in once.values.data().iter().enumerate() {
                prop_assert!(*v >= 0.0 && *v <= ub.data()[i % 4]);
            }
        }
    }
}

#[test]
fn penalty_only_dynamics_shrink_the_code() {
    let g = dense_net("g", 3, 3, identity(3));
    let phi = dense_net("phi", 3, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let s = stats("code", 3, 1.0, 0.5);
    let synth = Synth { phi: &phi, layer: "out", generator: &g, stats: Some(&s) };
    let cfg = AMConfig { lambda: 0.1, learning_rate: 0.5, iterations: 30, clip: false, ..Default::default() };
    let mut norms = Vec::new();
    synthesize_observed(&synth, 0, &cfg, &mut |_, y| norms.push(y.sq_norm())).unwrap();
    let init = initial_code(&[1, 3], Some(&s), None, &cfg).unwrap().sq_norm();
    assert!(init > 0.0);
    for w in std::iter::once(init).chain(norms.iter().copied()).collect::<Vec<_>>().windows(2) {
        assert!(w[1] < w[0], "norm did not decrease: {w:?}");
    }
}

#[test]
fn linear_objective_aligns_with_weights() {
    let w = vec![0.3, -1.2, 0.7, 2.0];
    let g = dense_net("g", 4, 4, identity(4));
    let phi = dense_net("phi", 4, 1, w.clone());
    let synth = Synth { phi: &phi, layer: "out", generator: &g, stats: None };
    let lambda = 0.5;
    let cfg = AMConfig { lambda, learning_rate: 0.2, iterations: 300, init: Init::Zeros, clip: false, ..Default::default() };
    let r = synthesize(&synth, 0, &cfg).unwrap();
    let y = r.code.values.data();
    let dot: f32 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
    let cos = dot / (y.iter().map(|v| v * v).sum::<f32>().sqrt() * w.iter().map(|v| v * v).sum::<f32>().sqrt());
    assert!(cos > 0.99, "cosine {cos}");
    for (a, b) in y.iter().zip(&w) {
        assert!((a - b / (2.0 * lambda)).abs() < 1e-3, "{a} vs closed form {}", b / (2.0 * lambda));
    }
}

#[test]
fn trace_contract_over_seeds() {
    let (phi, g) = toys(3);
    let s = stats("code", 6, 0.5, 0.5);
    let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: Some(&s) };
    let upper = clip_upper(&s, ClipBound::ThreeSigma);
    for seed in 0..100 {
        let init = [Init::Zeros, Init::GaussianFromStats, Init::UniformBox][seed as usize % 3];
        let cfg = AMConfig { seed, init, iterations: 12, learning_rate: 0.5, ..Default::default() };
        let mut contained = true;
        let r = synthesize_observed(&synth, (seed % 4) as usize, &cfg, &mut |_, y| {
            contained &= y.data().iter().zip(upper.data()).all(|(v, u)| *v >= 0.0 && v <= u);
        })
        .unwrap();
        assert!(contained);
        assert_eq!(r.trace.len(), 12);
        let best = r.best().objective;
        assert!(best >= r.trace[0].objective);
        assert_eq!(best, r.trace.iter().map(|t| t.objective).fold(f32::NEG_INFINITY, f32::max));
        assert!(r.code.values.data().iter().zip(upper.data()).all(|(v, u)| *v >= 0.0 && v <= u));
        assert_eq!(r.image.shape(), &[1, 8, 8]);
    }
}

#[test]
fn parameters_are_frozen_and_runs_repeat() {
    let (phi, g) = toys(5);
    let (pb, gb) = (phi.to_bytes(), g.to_bytes());
    let s = stats("code", 6, 0.5, 0.5);
    let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: Some(&s) };
    let cfg = AMConfig { iterations: 20, seed: 7, ..Default::default() };
    let a = synthesize(&synth, 2, &cfg).unwrap();
    let b = synthesize(&synth, 2, &cfg).unwrap();
    let pair = synthesize_pair(&synth, [0, 1], &AMConfig { gamma: 1.0, ..cfg.clone() }).unwrap();
    let px = pixel_am(&phi, "logits", 1, PixelPrior::Jitter { max_shift: 1 }, &cfg).unwrap();
    assert_eq!(phi.to_bytes(), pb);
    assert_eq!(g.to_bytes(), gb);
    assert_eq!(a, b);
    assert!(a.image.bit_eq(&b.image));
    assert_eq!(pair.trace[0].activations.len(), 2);
    assert!(px.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.trace_csv().lines().next(), Some("iteration,objective,activation"));
    assert_eq!(pair.trace_csv().lines().next(), Some("iteration,objective,activation,activation_2"));
    assert_eq!(a.trace_csv().lines().count(), 21);
    assert!(a.config.echo().contains("lambda=0.005\n"));
}

#[test]
fn parallel_driver_matches_serial() {
    let (phi, g) = toys(8);
    let s = stats("code", 6, 0.5, 0.5);
    let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: Some(&s) };
    let cfg = AMConfig { iterations: 8, ..Default::default() };
    let serial = synthesize_units(&synth, &[0, 1, 2, 3], &cfg, 1).unwrap();
    let parallel = synthesize_units(&synth, &[0, 1, 2, 3], &cfg, 3).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial[2].config.seed, 2);
}

#[test]
fn precondition_errors() {
    let (mut phi, g) = toys(1);
    let s = stats("code", 6, 0.5, 0.5);
    let cfg = AMConfig::default();
    {
        let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: Some(&s) };
        assert!(matches!(synthesize_pair(&synth, [1, 1], &cfg), Err(Error::Input(_))));
        assert!(synthesize(&synth, 4, &cfg).is_err());
        assert!(synthesize(&synth, 0, &AMConfig { iterations: 0, ..cfg.clone() }).is_err());
        assert!(synthesize(&synth, 0, &AMConfig { lambda: -1.0, ..cfg.clone() }).is_err());
        let no_stats = Synth { stats: None, ..synth };
        assert!(matches!(synthesize(&no_stats, 0, &cfg), Err(Error::Input(_))));
    }
    phi.params.get_mut("logits.weight").unwrap().data_mut().fill(f32::NAN);
    let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: Some(&s) };
    assert!(matches!(synthesize(&synth, 0, &cfg), Err(Error::Synthesis { iteration: 0, .. })));
    assert!(matches!(pixel_am(&phi, "logits", 0, PixelPrior::None, &cfg), Err(Error::Synthesis { iteration: 0, .. })));
}

#[test]
fn pair_reduces_to_singles_at_zero_gamma() {
    let (phi, g) = toys(2);
    let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: None };
    let cfg = AMConfig { lambda: 0.05, gamma: 0.0, ..Default::default() };
    let y = Tensor::full(&[1, 6], 0.4);
    let tape = Tape::new();
    let v = tape.param(y);
    let (pair, acts) = pair_objective(&synth, &tape, [0, 3], v, &cfg).unwrap();
    let (s0, _) = am_objective(&synth, &tape, 0, v, &cfg).unwrap();
    let (s3, _) = am_objective(&synth, &tape, 3, v, &cfg).unwrap();
    let shared = cfg.lambda * 6.0 * 0.16;
    assert!((pair.item() - (s0.item() + s3.item() + shared)).abs() < 1e-5);
    let (gapped, _) = pair_objective(&synth, &tape, [0, 3], v, &AMConfig { gamma: 2.0, ..cfg }).unwrap();
    assert!((pair.item() - gapped.item() - 2.0 * (acts[0] - acts[1]).abs()).abs() < 1e-5);
}

#[test]
fn gamma_sweep_narrows_the_gap() {
    let s = stats("code", 6, 0.5, 0.5);
    let (mut ok, mut total) = (0, 0);
    for seed in 0..10 {
        let (phi, g) = toys(100 + seed);
        let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: Some(&s) };
        for units in [[0, 1], [2, 3]] {
            let gaps: Vec<f32> = [0.0, 0.1, 1.0, 10.0]
                .iter()
                .map(|&gamma| {
                    let cfg = AMConfig { gamma, seed, iterations: 200, learning_rate: 0.05, ..Default::default() };
                    let r = synthesize_pair(&synth, units, &cfg).unwrap();
                    let a = &r.best().activations;
                    (a[0] - a[1]).abs()
                })
                .collect();
            total += 1;
            if gaps.windows(2).all(|w| w[1] <= w[0] + 1e-4) {
                ok += 1;
            }
        }
    }
    assert!(ok * 10 >= total * 9, "{ok}/{total} sweeps monotone");
}

fn zero_unit(seed: u64) -> NetworkInstance {
    let (mut phi, _) = toys(seed);
    phi.params.get_mut("logits.weight").unwrap().data_mut()[..6].fill(0.0);
    phi
}

#[test]
fn pixel_zero_gradient_keeps_initialization() {
    let phi = zero_unit(4);
    let cfg = AMConfig { init: Init::UniformBox, iterations: 10, seed: 3, ..Default::default() };
    let first = pixel_am(&phi, "logits", 0, PixelPrior::None, &AMConfig { iterations: 1, ..cfg.clone() }).unwrap();
    let mut all_same = true;
    pixel_observed(&phi, "logits", 0, PixelPrior::None, &cfg, &mut |_, _, x| all_same &= x.data() == first.code.values.data()).unwrap();
    assert!(all_same);
}

#[test]
fn pixel_decay_shrinks_the_image() {
    let phi = zero_unit(4);
    let cfg = AMConfig { init: Init::UniformBox, iterations: 10, ..Default::default() };
    let mut norms = vec![initial_image(&[1, 1, 8, 8], Init::UniformBox, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().sq_norm()];
    pixel_observed(&phi, "logits", 0, PixelPrior::L2Decay { rate: 0.1 }, &cfg, &mut |_, _, x| norms.push(x.sq_norm())).unwrap();
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
}

#[test]
fn pixel_blur_steps_smooth() {
    let (phi, _) = toys(6);
    let cfg = AMConfig { init: Init::UniformBox, iterations: 12, learning_rate: 0.1, ..Default::default() };
    let mut blur_steps = 0;
    pixel_observed(&phi, "logits", 1, PixelPrior::BlurEvery { every: 3, radius: 1.0 }, &cfg, &mut |it, before, after| {
        if (it + 1) % 3 == 0 {
            blur_steps += 1;
            let e0 = laplacian_energy(&before.reshape(&[1, 8, 8]).unwrap()).unwrap();
            let e1 = laplacian_energy(&after.reshape(&[1, 8, 8]).unwrap()).unwrap();
            assert!(e1 < e0, "iteration {it}: {e1} vs {e0}");
        }
    })
    .unwrap();
    assert_eq!(blur_steps, 4);
}

fn space() -> SearchSpace {
    SearchSpace { lambda: Range::log(1e-4, 1e-1), learning_rate: Range::log(0.05, 2.0), iterations: (5, 15) }
}

#[test]
fn random_search_contract() {
    let (phi, g) = toys(9);
    let s = stats("code", 6, 0.5, 0.5);
    let synth = Synth { phi: &phi, layer: "logits", generator: &g, stats: Some(&s) };
    let base = AMConfig::default();
    let one = random_search(&synth, 2, &base, &space(), 1, 42).unwrap();
    assert_eq!(one.len(), 1);
    let direct = synthesize(&synth, 2, &one[0].config).unwrap();
    assert_eq!(direct.best_activation(), one[0].best_activation);
    let twenty = random_search(&synth, 2, &base, &space(), 20, 42).unwrap();
    let mut trials: Vec<usize> = twenty.iter().map(|r| r.trial).collect();
    trials.sort_unstable();
    assert_eq!(trials, (0..20).collect::<Vec<_>>());
    assert!(twenty.windows(2).all(|w| w[0].best_activation >= w[1].best_activation));
    assert!(twenty[0].best_activation >= one[0].best_activation);
    assert_eq!(twenty.iter().find(|r| r.trial == 0).unwrap().config, one[0].config);
    assert_eq!(random_search(&synth, 2, &base, &space(), 20, 42).unwrap(), twenty);
    let empty = SearchSpace { iterations: (5, 4), ..space() };
    assert!(matches!(random_search(&synth, 2, &base, &empty, 3, 0), Err(Error::Input(_))));
    let inverted = SearchSpace { lambda: Range::linear(0.1, 0.0), ..space() };
    assert!(matches!(random_search(&synth, 2, &base, &inverted, 3, 0), Err(Error::Input(_))));
}
