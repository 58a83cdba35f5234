//! Randomized gradient and adjoint checks over every differentiable op.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    max_relative_error, pattern_safe_difference, ref_activation, ref_conv2d, ref_conv_transpose2d, ref_dense,
    ref_max_pool, Arr, RefNet, DEFAULT_STEP,
};
use crate::error::Result;
use crate::nn::{Activation, LayerKind, LayerSpec, NetworkInstance, NetworkSpec};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Coordinates probed per differentiable input per case.
const MAX_COORDS: usize = 12;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    /// Cases with at least one usable coordinate.
    pub cases: usize,
    pub coordinates: usize,
    /// Coordinates dropped because a probe crossed a kink.
    pub skipped: usize,
    pub max_error: f64,
    /// Cases whose error exceeded the tolerance.
    pub failures: usize,
}

impl OpReport {
    pub fn passed(&self, min_cases: usize) -> bool {
        self.failures == 0 && self.cases >= min_cases
    }
}

type TapeFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;
type RefFn = Box<dyn Fn(&[Arr]) -> (f64, Vec<u32>)>;

struct Case {
    inputs: Vec<Tensor>,
    wrt: Vec<usize>,
    tape_fn: TapeFn,
    ref_fn: RefFn,
}

struct Outcome {
    error: Option<f64>,
    coordinates: usize,
    skipped: usize,
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if case.wrt.contains(&i) { tape.param(t.clone()) } else { tape.leaf(t.clone()) })
        .collect();
    let loss = (case.tape_fn)(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let arrs: Vec<Arr> = case.inputs.iter().map(Arr::from).collect();
    let (mut analytic, mut numeric, mut skipped) = (Vec::new(), Vec::new(), 0);
    for &i in &case.wrt {
        let g = grads.wrt(vars[i]);
        let n = arrs[i].data.len();
        let coords = sample(rng, n, n.min(MAX_COORDS)).into_vec();
        let base = arrs[i].data.clone();
        let mut f = |x: &[f64]| {
            let mut a = arrs.clone();
            a[i].data.copy_from_slice(x);
            (case.ref_fn)(&a)
        };
        let usable = pattern_safe_difference(&mut f, &base, DEFAULT_STEP, &coords);
        skipped += coords.len() - usable.len();
        for (c, v) in usable {
            analytic.push(g.data()[c] as f64);
            numeric.push(v);
        }
    }
    let error = (!analytic.is_empty()).then(|| max_relative_error(&analytic, &numeric));
    Ok(Outcome { error, coordinates: analytic.len(), skipped })
}

fn report(op: &'static str, cases: usize, tolerance: f64, rng: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng) -> Case) -> Result<OpReport> {
    let mut r = OpReport { op, cases: 0, coordinates: 0, skipped: 0, max_error: 0.0, failures: 0 };
    let mut attempts = 0;
    while r.cases < cases && attempts < 2 * cases {
        attempts += 1;
        let case = make(rng);
        let o = run_case(&case, rng)?;
        r.coordinates += o.coordinates;
        r.skipped += o.skipped;
        if let Some(e) = o.error {
            r.cases += 1;
            r.max_error = r.max_error.max(e);
            if e > tolerance {
                r.failures += 1;
            }
        }
    }
    Ok(r)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// `sum(out * r)` on the tape for a fixed random `r` (last input).
fn project<'t>(out: Var<'t>, r: Var<'t>) -> Result<Var<'t>> {
    Ok(out.mul(r)?.sum())
}

fn dot(out: &Arr, r: &Arr) -> f64 {
    out.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

fn elementwise(
    rng: &mut ChaCha8Rng,
    tape_op: fn(Var<'_>) -> Var<'_>,
    ref_op: fn(&Arr, &mut Vec<u32>) -> Arr,
) -> Case {
    let shape = [rng.random_range(1..4), rng.random_range(1..7)];
    Case {
        inputs: vec![uniform(rng, &shape), uniform(rng, &shape)],
        wrt: vec![0],
        tape_fn: Box::new(move |_, v| project(tape_op(v[0]), v[1])),
        ref_fn: Box::new(move |a| {
            let mut p = Vec::new();
            let y = ref_op(&a[0], &mut p);
            (dot(&y, &a[1]), p)
        }),
    }
}

fn map_arr(x: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

fn conv_case(rng: &mut ChaCha8Rng, first: bool) -> Case {
    let (n, c, h, w, k, kh, stride, pad) = if first {
        (2, 3, 8, 8, 4, 3, 1, 1)
    } else {
        let kh = rng.random_range(1..4);
        (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(kh..8), rng.random_range(kh..8), rng.random_range(1..4), kh, rng.random_range(1..3), rng.random_range(0..2))
    };
    let x = uniform(rng, &[n, c, h, w]);
    let wt = uniform(rng, &[k, c, kh, kh]);
    let b = uniform(rng, &[k]);
    let out = kernels::conv2d(&x, &wt, &b, stride, pad).expect("valid geometry");
    let r = uniform(rng, out.shape());
    Case {
        inputs: vec![x, wt, b, r],
        wrt: vec![0, 1, 2],
        tape_fn: Box::new(move |_, v| project(v[0].conv2d(v[1], v[2], stride, pad)?, v[3])),
        ref_fn: Box::new(move |a| (dot(&ref_conv2d(&a[0], &a[1], &a[2], stride, pad), &a[3]), Vec::new())),
    }
}

fn conv_transpose_case(rng: &mut ChaCha8Rng, first: bool) -> Case {
    let (n, k, h, w, c, kh, stride, pad) = if first {
        (2, 3, 4, 4, 2, 4, 2, 1)
    } else {
        let kh = rng.random_range(1..5);
        let pad = rng.random_range(0..2).min((kh - 1) / 2);
        (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4), kh, rng.random_range(1..3), pad)
    };
    let x = uniform(rng, &[n, k, h, w]);
    let wt = uniform(rng, &[k, c, kh, kh]);
    let b = uniform(rng, &[c]);
    let out = kernels::conv_transpose2d(&x, &wt, &b, stride, pad).expect("valid geometry");
    let r = uniform(rng, out.shape());
    Case {
        inputs: vec![x, wt, b, r],
        wrt: vec![0, 1, 2],
        tape_fn: Box::new(move |_, v| project(v[0].conv_transpose2d(v[1], v[2], stride, pad)?, v[3])),
        ref_fn: Box::new(move |a| (dot(&ref_conv_transpose2d(&a[0], &a[1], &a[2], stride, pad), &a[3]), Vec::new())),
    }
}

fn dense_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, din, dout) = (rng.random_range(1..4), rng.random_range(1..8), rng.random_range(1..6));
    let x = uniform(rng, &[n, din]);
    let w = uniform(rng, &[dout, din]);
    let b = uniform(rng, &[dout]);
    let r = uniform(rng, &[n, dout]);
    Case {
        inputs: vec![x, w, b, r],
        wrt: vec![0, 1, 2],
        tape_fn: Box::new(|_, v| project(v[0].dense(v[1], v[2])?, v[3])),
        ref_fn: Box::new(|a| (dot(&ref_dense(&a[0], &a[1], &a[2]), &a[3]), Vec::new())),
    }
}

fn pool_case(rng: &mut ChaCha8Rng) -> Case {
    let (kernel, stride) = [(2, 2), (2, 1), (3, 2)][rng.random_range(0..3)];
    let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(kernel..7), rng.random_range(kernel..7)];
    let x = uniform(rng, &shape);
    let (out, _) = kernels::max_pool2d(&x, kernel, stride).expect("valid window");
    let r = uniform(rng, out.shape());
    Case {
        inputs: vec![x, r],
        wrt: vec![0],
        tape_fn: Box::new(move |_, v| project(v[0].max_pool2d(kernel, stride)?, v[1])),
        ref_fn: Box::new(move |a| {
            let (y, p) = ref_max_pool(&a[0], kernel, stride);
            (dot(&y, &a[1]), p)
        }),
    }
}

fn binary_case(rng: &mut ChaCha8Rng, tape_op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>, ref_op: fn(f64, f64) -> f64) -> Case {
    let shape = [rng.random_range(1..4), rng.random_range(1..6)];
    Case {
        inputs: vec![uniform(rng, &shape), uniform(rng, &shape), uniform(rng, &shape)],
        wrt: vec![0, 1],
        tape_fn: Box::new(move |_, v| project(tape_op(v[0], v[1])?, v[2])),
        ref_fn: Box::new(move |a| {
            let y: f64 = a[0].data.iter().zip(&a[1].data).zip(&a[2].data).map(|((x, y), r)| ref_op(*x, *y) * r).sum();
            (y, Vec::new())
        }),
    }
}

fn reduction_case(rng: &mut ChaCha8Rng, tape_op: fn(Var<'_>) -> Result<Var<'_>>, ref_op: fn(&[f64]) -> f64) -> Case {
    let shape = [rng.random_range(1..4), rng.random_range(1..6)];
    Case {
        inputs: vec![uniform(rng, &shape)],
        wrt: vec![0],
        tape_fn: Box::new(move |_, v| tape_op(v[0])),
        ref_fn: Box::new(move |a| (ref_op(&a[0].data), Vec::new())),
    }
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, k) = (rng.random_range(1..5), rng.random_range(2..7));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let logits = Tensor::uniform(&[n, k], -3.0, 3.0, rng);
    let l2 = labels.clone();
    Case {
        inputs: vec![logits],
        wrt: vec![0],
        tape_fn: Box::new(move |_, v| v[0].softmax_cross_entropy(&labels)),
        ref_fn: Box::new(move |a| {
            let loss: f64 = a[0]
                .data
                .chunks(k)
                .zip(&l2)
                .map(|(row, &l)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l])
                .sum();
            (loss / n as f64, Vec::new())
        }),
    }
}

fn bce_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let logits = Tensor::uniform(&shape, -4.0, 4.0, rng);
    let targets = Tensor::uniform(&shape, 0.0, 1.0, rng);
    let t2 = Arr::from(&targets);
    Case {
        inputs: vec![logits],
        wrt: vec![0],
        tape_fn: Box::new(move |_, v| v[0].bce_logits(&targets)),
        ref_fn: Box::new(move |a| {
            let n = a[0].data.len() as f64;
            let loss: f64 = a[0].data.iter().zip(&t2.data).map(|(z, t)| (1.0 + z.exp()).ln() - t * z).sum();
            (loss / n, Vec::new())
        }),
    }
}

/// Gradient check of every differentiable op; `cases` checked cases each.
pub fn op_suite(cases: usize, tolerance: f64, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let first = std::cell::Cell::new(true);
    out.push(report("conv2d", cases, tolerance, rng, &|r| conv_case(r, first.replace(false)))?);
    first.set(true);
    out.push(report("conv_transpose2d", cases, tolerance, rng, &|r| conv_transpose_case(r, first.replace(false)))?);
    out.push(report("dense", cases, tolerance, rng, &dense_case)?);
    out.push(report("max_pool2d", cases, tolerance, rng, &pool_case)?);
    out.push(report("relu", cases, tolerance, rng, &|r| {
        elementwise(r, |v| v.relu(), |x, p| ref_activation(x, Activation::Relu, p))
    })?);
    out.push(report("leaky_relu", cases, tolerance, rng, &|r| {
        elementwise(r, |v| v.leaky_relu(0.2), |x, p| ref_activation(x, Activation::LeakyRelu(0.2), p))
    })?);
    out.push(report("tanh", cases, tolerance, rng, &|r| elementwise(r, |v| v.tanh(), |x, _| map_arr(x, f64::tanh)))?);
    out.push(report("sigmoid", cases, tolerance, rng, &|r| {
        elementwise(r, |v| v.sigmoid(), |x, _| map_arr(x, |v| 1.0 / (1.0 + (-v).exp())))
    })?);
    out.push(report("abs", cases, tolerance, rng, &|r| {
        elementwise(r, |v| v.abs(), |x, p| {
            p.extend(x.data.iter().map(|&v| (v > 0.0) as u32));
            map_arr(x, f64::abs)
        })
    })?);
    out.push(report("scale", cases, tolerance, rng, &|r| elementwise(r, |v| v.scale(-1.7), |x, _| map_arr(x, |v| -1.7 * v)))?);
    out.push(report("reshape", cases, tolerance, rng, &|r| {
        elementwise(r, |v| v.reshape(&[v.value().len()]).and_then(|f| f.reshape(&v.shape())).expect("same size"), |x, _| x.clone())
    })?);
    out.push(report("add", cases, tolerance, rng, &|r| binary_case(r, |a, b| a.add(b), |x, y| x + y))?);
    out.push(report("sub", cases, tolerance, rng, &|r| binary_case(r, |a, b| a.sub(b), |x, y| x - y))?);
    out.push(report("mul", cases, tolerance, rng, &|r| binary_case(r, |a, b| a.mul(b), |x, y| x * y))?);
    out.push(report("sum", cases, tolerance, rng, &|r| reduction_case(r, |v| Ok(v.sum()), |x| x.iter().sum()))?);
    out.push(report("mean", cases, tolerance, rng, &|r| {
        reduction_case(r, |v| Ok(v.mean()), |x| x.iter().sum::<f64>() / x.len() as f64)
    })?);
    out.push(report("sq_norm", cases, tolerance, rng, &|r| reduction_case(r, |v| Ok(v.sq_norm()), |x| x.iter().map(|v| v * v).sum()))?);
    out.push(report("norm", cases, tolerance, rng, &|r| {
        reduction_case(r, |v| Ok(v.norm()), |x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
    })?);
    out.push(report("index", cases, tolerance, rng, &|r| {
        reduction_case(r, |v| v.index(v.value().len() - 1), |x| x[x.len() - 1])
    })?);
    out.push(report("softmax_cross_entropy", cases, tolerance, rng, &cross_entropy_case)?);
    out.push(report("mse", cases, tolerance, rng, &|r| {
        let shape = [r.random_range(1..4), r.random_range(1..6)];
        Case {
            inputs: vec![uniform(r, &shape), uniform(r, &shape)],
            wrt: vec![0, 1],
            tape_fn: Box::new(|_, v| v[0].mse(v[1])),
            ref_fn: Box::new(|a| {
                let n = a[0].data.len() as f64;
                (a[0].data.iter().zip(&a[1].data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n, Vec::new())
            }),
        }
    })?);
    out.push(report("bce_logits", cases, tolerance, rng, &bce_case)?);
    Ok(out)
}

fn layer(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec::new(name, kind)
}

/// Toy classifier over `[1, 8, 8]` images and a toy generator producing
/// them from 6-d codes.
pub fn toy_pair() -> (NetworkSpec, NetworkSpec) {
    let enc = NetworkSpec {
        name: "toy_encoder".into(),
        input: vec![1, 8, 8],
        layers: vec![
            layer("conv1", LayerKind::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 }),
            layer("relu1", LayerKind::Activation(Activation::Relu)),
            layer("pool1", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            layer("flatten", LayerKind::Flatten),
            layer("fc", LayerKind::Dense { out: 6 }),
            layer("code", LayerKind::Activation(Activation::Relu)),
            layer("logits", LayerKind::Dense { out: 4 }),
        ],
        code_layers: vec!["code".into()],
    };
    let leaky = LayerKind::Activation(Activation::LeakyRelu(0.2));
    let gen = NetworkSpec {
        name: "toy_generator".into(),
        input: vec![6],
        layers: vec![
            layer("fc1", LayerKind::Dense { out: 16 }),
            layer("fc1_act", leaky.clone()),
            layer("reshape", LayerKind::Reshape(vec![4, 2, 2])),
            layer("up1", LayerKind::ConvTranspose { out_channels: 3, kernel: 4, stride: 2, pad: 1 }),
            layer("up1_act", leaky.clone()),
            layer("up2", LayerKind::ConvTranspose { out_channels: 2, kernel: 4, stride: 2, pad: 1 }),
            layer("up2_act", LayerKind::Activation(Activation::Tanh)),
            layer("to_image", LayerKind::Conv { out_channels: 1, kernel: 3, stride: 1, pad: 1 }),
            layer("image", LayerKind::Activation(Activation::Sigmoid)),
        ],
        code_layers: Vec::new(),
    };
    (enc, gen)
}

/// Gradient of `Phi_h(G(y)) - lambda R(y)` with respect to the code, the
/// generator parameters and the encoder parameters, on freshly
/// initialized toy networks. `R` alternates between `|y|^2` and `|y|`.
pub fn composite_suite(cases: usize, tolerance: f64, seed: u64) -> Result<OpReport> {
    let (enc_spec, gen_spec) = toy_pair();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = OpReport { op: "phi_of_g", cases: 0, coordinates: 0, skipped: 0, max_error: 0.0, failures: 0 };
    for case in 0..cases {
        let enc = NetworkInstance::init(enc_spec.clone(), rng.random())?;
        let gen = NetworkInstance::init(gen_spec.clone(), rng.random())?;
        let unit = rng.random_range(0..4);
        let lambda = rng.random_range(0.0..0.1f32);
        let squared = case % 2 == 0;
        let y = Tensor::uniform(&[1, 6], 0.0, 1.0, &mut rng);

        let tape = Tape::new();
        let yv = tape.param(y.clone());
        let gp = gen.bind(&tape, true);
        let ep = enc.bind(&tape, true);
        let img = gen.forward_var(&gp, yv)?;
        let act = enc.forward_var(&ep, img)?.index(unit)?;
        let reg = if squared { yv.sq_norm() } else { yv.norm() };
        let grads = tape.backward(act.sub(reg.scale(lambda))?)?;

        let ref_enc = RefNet::new(&enc);
        let ref_gen = RefNet::new(&gen);
        let objective = |y: &Arr, g: &RefNet, e: &RefNet| -> (f64, Vec<u32>) {
            let (img, mut p) = g.forward(y, None).expect("toy generator");
            let (out, pe) = e.forward(&img, None).expect("toy encoder");
            p.extend(pe);
            let sq: f64 = y.data.iter().map(|v| v * v).sum();
            let reg = if squared { sq } else { sq.sqrt() };
            (out.data[unit] - lambda as f64 * reg, p)
        };
        let y_arr = Arr::from(&y);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let mut skipped = 0;

        let coords = sample(&mut rng, 6, 6).into_vec();
        let mut f = |x: &[f64]| objective(&Arr { shape: vec![1, 6], data: x.to_vec() }, &ref_gen, &ref_enc);
        let usable = pattern_safe_difference(&mut f, &y_arr.data, DEFAULT_STEP, &coords);
        skipped += coords.len() - usable.len();
        for (c, v) in usable {
            analytic.push(grads.wrt(yv).data()[c] as f64);
            numeric.push(v);
        }
        for (net, bound, is_gen) in [(&gen, &gp, true), (&enc, &ep, false)] {
            for name in net.params.keys() {
                let g = grads.wrt(bound.get(name)?);
                let base = ref_gen.params.get(name).filter(|_| is_gen).or_else(|| ref_enc.params.get(name)).expect("param").data.clone();
                let coords = sample(&mut rng, base.len(), base.len().min(3)).into_vec();
                let mut f = |x: &[f64]| {
                    let mut rg = RefNet { spec: ref_gen.spec, params: ref_gen.params.clone() };
                    let mut re = RefNet { spec: ref_enc.spec, params: ref_enc.params.clone() };
                    let target = if is_gen { &mut rg } else { &mut re };
                    target.params.get_mut(name).expect("param").data.copy_from_slice(x);
                    objective(&y_arr, &rg, &re)
                };
                let usable = pattern_safe_difference(&mut f, &base, DEFAULT_STEP, &coords);
                skipped += coords.len() - usable.len();
                for (c, v) in usable {
                    analytic.push(g.data()[c] as f64);
                    numeric.push(v);
                }
            }
        }
        r.coordinates += analytic.len();
        r.skipped += skipped;
        if !analytic.is_empty() {
            let e = max_relative_error(&analytic, &numeric);
            r.cases += 1;
            r.max_error = r.max_error.max(e);
            if e > tolerance {
                r.failures += 1;
            }
        }
    }
    Ok(r)
}

#[derive(Clone, Debug)]
pub struct AdjointReport {
    pub cases: usize,
    pub max_error: f64,
    pub failures: usize,
}

/// `<conv2d(x, w), y> == <x, conv_transpose2d(y, w)>` on random geometries,
/// relative to `max(1, |lhs|)`.
pub fn adjoint_suite(cases: usize, tolerance: f64, seed: u64) -> Result<AdjointReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = AdjointReport { cases, max_error: 0.0, failures: 0 };
    for _ in 0..cases {
        let kh: usize = rng.random_range(1..5);
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..kh.div_ceil(2));
        let (oh, ow) = (rng.random_range(1..6), rng.random_range(1..6));
        let (h, w) = ((oh - 1) * stride + kh - 2 * pad, (ow - 1) * stride + kh - 2 * pad);
        let (n, c, k) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let x = uniform(&mut rng, &[n, c, h, w]);
        let wt = uniform(&mut rng, &[k, c, kh, kh]);
        let y = uniform(&mut rng, &[n, k, oh, ow]);
        let fwd = kernels::conv2d(&x, &wt, &Tensor::zeros(&[k]), stride, pad)?;
        let adj = kernels::conv_transpose2d(&y, &wt, &Tensor::zeros(&[c]), stride, pad)?;
        let lhs: f64 = fwd.data().iter().zip(y.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data().iter().zip(adj.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let e = (lhs - rhs).abs() / lhs.abs().max(1.0);
        out.max_error = out.max_error.max(e);
        if e > tolerance {
            out.failures += 1;
        }
    }
    Ok(out)
}
