use std::cell::RefCell;
use std::rc::Rc;

use super::{check_same_shape, kernels, Tensor};
use crate::error::{Error, Result};

/// Maps the output gradient to one optional gradient per parent; the mask
/// says which parents need one.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    leaf: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Append-only record of executed operations. Node ids are assigned in
/// execution order, so the vector is already topologically sorted.
///
/// A tape lives on one thread; build a fresh one per training step or
/// synthesis iteration.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value().shape()).finish()
    }
}

/// Result of one backward pass: gradients for every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, panicking when the leaf was not differentiable.
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        self.get(var).expect("gradient requested for a leaf without requires_grad")
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input; no gradient is tracked for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient `backward` reports.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, leaf: true, parents: Vec::new(), backward: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn record(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            leaf: false,
            parents: parents.iter().map(|p| p.id).collect(),
            // constant subgraphs keep no backward state
            backward: requires_grad.then_some(backward),
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar `loss`. Every call starts from zeroed
    /// gradients; nothing accumulates across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if node.leaf {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &mask)?;
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    None => grads[p] = Some(pg),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.leaf || !node.requires_grad {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros_like(&node.value));
            }
        }
        Ok(Gradients { grads })
    }
}

fn unary_grad(g: &Tensor, x: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    g.zip_map(x, f).expect("gradient shape matches value")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary_same_shape(self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        check_same_shape(op, &a, &b)?;
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same_shape(other, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.tape.record(out, &[self, other], Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())]))))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same_shape(other, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.tape.record(out, &[self, other], Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.map(|v| -v))]))))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same_shape(other, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                Ok(vec![
                    mask[0].then(|| unary_grad(g, &b, |g, y| g * y)),
                    mask[1].then(|| unary_grad(g, &a, |g, x| g * x)),
                ])
            }),
        ))
    }

    pub fn scale(self, factor: f32) -> Var<'t> {
        let out = self.value().map(|v| v * factor);
        self.tape.record(out, &[self], Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * factor))])))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item()))])),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Sum of squares.
    pub fn sq_norm(self) -> Var<'t> {
        let x = self.value();
        self.tape.record(
            Tensor::scalar(x.sq_norm()),
            &[self],
            Box::new(move |g, _| {
                let s = 2.0 * g.item();
                Ok(vec![Some(x.map(|v| s * v))])
            }),
        )
    }

    /// Euclidean norm; the gradient at the origin is taken as zero.
    pub fn norm(self) -> Var<'t> {
        let x = self.value();
        let n = x.sq_norm().sqrt();
        self.tape.record(
            Tensor::scalar(n),
            &[self],
            Box::new(move |g, _| {
                let s = if n > 0.0 { g.item() / n } else { 0.0 };
                Ok(vec![Some(x.map(|v| s * v))])
            }),
        )
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f32::abs);
        self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| {
                Ok(vec![Some(unary_grad(g, &x, |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))])
            }),
        )
    }

    /// Scalar at a flat (row-major) position.
    pub fn index(self, flat: usize) -> Result<Var<'t>> {
        let x = self.value();
        if flat >= x.len() {
            return Err(Error::dim("index", format!("flat index {flat} outside {} elements", x.len())));
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            Tensor::scalar(x.data()[flat]),
            &[self],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[flat] = g.item();
                Ok(vec![Some(d)])
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let back = x.shape().to_vec();
        Ok(self.tape.record(out, &[self], Box::new(move |g, _| Ok(vec![Some(g.reshape(&back)?)]))))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| Ok(vec![Some(unary_grad(g, &x, |g, v| if v > 0.0 { g } else { 0.0 }))])),
        )
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| Ok(vec![Some(unary_grad(g, &x, |g, v| if v > 0.0 { g } else { slope * g }))])),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        let y = Rc::new(self.value().map(f32::tanh));
        let saved = y.clone();
        self.tape.record(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| Ok(vec![Some(unary_grad(g, &saved, |g, t| g * (1.0 - t * t)))])),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let saved = y.clone();
        self.tape.record(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| Ok(vec![Some(unary_grad(g, &saved, |g, s| g * s * (1.0 - s)))])),
        )
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let out = kernels::conv2d(&x, &w, &b, stride, pad)?;
        Ok(self.tape.record(
            out,
            &[self, weight, bias],
            Box::new(move |g, mask| {
                let [dx, dw, db] = kernels::conv2d_backward(&x, &w, g, stride, pad, [mask[0], mask[1], mask[2]])?;
                Ok(vec![dx, dw, db])
            }),
        ))
    }

    pub fn conv_transpose2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let out = kernels::conv_transpose2d(&x, &w, &b, stride, pad)?;
        Ok(self.tape.record(
            out,
            &[self, weight, bias],
            Box::new(move |g, mask| {
                let [dx, dw, db] =
                    kernels::conv_transpose2d_backward(&x, &w, &b, g, stride, pad, [mask[0], mask[1], mask[2]])?;
                Ok(vec![dx, dw, db])
            }),
        ))
    }

    pub fn dense(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let out = kernels::dense(&x, &w, &b)?;
        Ok(self.tape.record(
            out,
            &[self, weight, bias],
            Box::new(move |g, mask| {
                let [dx, dw, db] = kernels::dense_backward(&x, &w, g, [mask[0], mask[1], mask[2]])?;
                Ok(vec![dx, dw, db])
            }),
        ))
    }

    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (out, arg) = kernels::max_pool2d(&x, kernel, stride)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&shape);
                let dd = d.data_mut();
                for (&src, gv) in arg.iter().zip(g.data()) {
                    dd[src] += gv;
                }
                Ok(vec![Some(d)])
            }),
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let z = self.value();
        let (n, k) = match *z.shape() {
            [n, k] => (n, k),
            ref s => return Err(Error::dim("softmax_cross_entropy", format!("logits must be 2-D, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::dim("softmax_cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (i, row) in z.data().chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = row.iter().map(|v| (v - m).exp()).sum();
            let log_s = s.ln();
            for (j, v) in row.iter().enumerate() {
                probs[i * k + j] = (v - m - log_s).exp();
            }
            loss -= (row[labels[i]] - m - log_s) as f64;
        }
        let labels = labels.to_vec();
        Ok(self.tape.record(
            Tensor::scalar((loss / n as f64) as f32),
            &[self],
            Box::new(move |g, _| {
                let s = g.item() / n as f32;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                Ok(vec![Some(Tensor::new(vec![n, k], d)?)])
            }),
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        let diff = self.sub(target)?;
        Ok(diff.sq_norm().scale(1.0 / diff.value().len() as f32))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `targets` in [0, 1].
    pub fn bce_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let z = self.value();
        check_same_shape("bce_logits", &z, targets)?;
        let n = z.len() as f32;
        // log(1 + e^z) - t z, evaluated stably
        let loss: f32 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&v, &t)| v.max(0.0) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        let t = targets.clone();
        Ok(self.tape.record(
            Tensor::scalar(loss / n),
            &[self],
            Box::new(move |g, _| {
                let s = g.item() / n;
                Ok(vec![Some(z.zip_map(&t, |v, t| s * (sigmoid(v) - t))?)])
            }),
        ))
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 3.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_mse_grad_matches_closed_form() {
        // loss = mean((w x - y)^2) over N samples, dloss/dw = 2 (w x - y) x / N
        let xs = [0.5f32, -1.0, 2.0];
        let ys = [1.0f32, 0.0, -1.0];
        let w0 = 0.7f32;
        let tape = Tape::new();
        let w = tape.param(t(&[1, 1], &[w0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let x = tape.leaf(t(&[3, 1], &xs));
        let y = tape.leaf(t(&[3, 1], &ys));
        let loss = x.dense(w, b).unwrap().mse(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let closed: f32 = xs.iter().zip(&ys).map(|(x, y)| 2.0 * (w0 * x - y) * x / 3.0).sum();
        assert!((g.wrt(w).item() - closed).abs() < 1e-6);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x.relu()), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.sq_norm();
        let a = tape.backward(loss).unwrap();
        let b = tape.backward(loss).unwrap();
        assert_eq!(a.wrt(x).data(), &[2.0, 4.0]);
        assert_eq!(b.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[1], &[5.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.0]);
    }

    #[test]
    fn reused_var_accumulates_within_a_pass() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let loss = x.mul(x).unwrap().sum();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn activations_elementwise() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let y = tape.leaf(t(&[1], &[-2.0]));
        assert!((y.leaky_relu(0.2).item() + 0.4).abs() < 1e-7);
        let z = tape.param(t(&[1], &[0.0]));
        let g = tape.backward(z.relu().sum()).unwrap();
        assert_eq!(g.wrt(z).item(), 0.0);
    }

    #[test]
    fn loss_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, -0.1, 2.0, 4.0]));
        assert_eq!(x.mse(x).unwrap().item(), 0.0);
        let k = 7;
        let z = tape.leaf(Tensor::full(&[2, k], 0.25));
        let ce = z.softmax_cross_entropy(&[0, 6]).unwrap().item();
        assert!((ce - (k as f32).ln()).abs() < 1e-6);
        assert!(matches!(z.softmax_cross_entropy(&[0, 7]), Err(Error::Input(_))));
        let logit0 = tape.leaf(Tensor::zeros(&[4, 1]));
        let bce = logit0.bce_logits(&Tensor::ones(&[4, 1])).unwrap().item();
        assert!((bce - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn dense_arithmetic() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        let b = tape.leaf(t(&[1], &[5.0]));
        assert_eq!(x.dense(w, b).unwrap().value().data(), &[16.0]);
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.leaf(Tensor::zeros(&[2]));
        assert_eq!(x.dense(eye, zero).unwrap().value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_small_cases() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = x.conv2d(w, b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);

        let v = tape.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let w2 = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
        let up = v.conv_transpose2d(w2, b, 1, 0).unwrap();
        assert_eq!(up.shape(), vec![1, 1, 2, 2]);
        assert!(up.value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let tape = Tape::new();
        let img = Tensor::uniform(&[2, 1, 5, 4], -1.0, 1.0, &mut rng);
        let x = tape.leaf(img.clone());
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(x.conv2d(w, b, 1, 0).unwrap().value().bit_eq(&img));
    }
}
