use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Container;
use super::spec::{Activation, LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::optim::ParamSet;
use crate::tensor::{numel, Gradients, Tape, Tensor, Var};

/// Provenance recorded alongside trained parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub dataset: String,
    pub iteration: usize,
    pub seed: u64,
    pub val_accuracy: Option<f32>,
}

/// Activations of one code layer; the leading axis is the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Code {
    pub layer: String,
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInstance {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub meta: TrainingMeta,
}

/// Parameters placed on a tape, either as differentiable leaves or constants.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| Error::lookup("parameter", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }

    /// Move this network's parameter gradients out of a backward result.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamSet {
        self.vars.iter().filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g))).collect()
    }
}

impl NetworkInstance {
    /// He-normal weights, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in spec.param_shapes()? {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // conv weight [K, C, kh, kw] and dense [out, in] both have fan-in
                // as the trailing product; conv_transpose [K, C, kh, kw] spreads
                // each input over kh*kw / stride^2 outputs, close enough to K*kh*kw/4.
                let fan_in = if shape.len() == 4 && is_transpose(&spec, &name) {
                    (shape[0] * shape[2] * shape[3] / 4).max(1)
                } else {
                    numel(&shape[1..])
                };
                Tensor::randn(&shape, (2.0 / fan_in as f32).sqrt(), &mut rng)
            };
            params.insert(name, t);
        }
        Ok(NetworkInstance { spec, params, meta: TrainingMeta { seed, ..Default::default() } })
    }

    /// All parameters zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let params = spec.param_shapes()?.into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        Ok(NetworkInstance { spec, params, meta: TrainingMeta::default() })
    }

    /// Check every parameter has the spec-implied shape.
    pub fn validate(&self) -> Result<()> {
        let expected = self.spec.param_shapes()?;
        if expected.len() != self.params.len() {
            return Err(Error::Format(format!(
                "network `{}` expects {} parameter tensors, found {}",
                self.spec.name,
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.params.get(&name).ok_or_else(|| Error::lookup("parameter", &name))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("network", format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) }))
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, shape: &[usize], expected: &[usize]) -> Result<()> {
        if shape.len() != expected.len() + 1 || &shape[1..] != expected {
            return Err(Error::dim(
                "forward",
                format!("network `{}` expects [N, {expected:?}], got {shape:?}", self.spec.name),
            ));
        }
        Ok(())
    }

    /// Run layers `start..end` (layer indices) on a batch already on the tape.
    pub fn run_layers<'t>(&self, params: &BoundParams<'t>, mut x: Var<'t>, start: usize, end: usize) -> Result<Var<'t>> {
        for layer in &self.spec.layers[start..end] {
            let w = |suffix: &str| params.get(&format!("{}.{suffix}", layer.name));
            x = match &layer.kind {
                LayerKind::Conv { stride, pad, .. } => x.conv2d(w("weight")?, w("bias")?, *stride, *pad)?,
                LayerKind::ConvTranspose { stride, pad, .. } => x.conv_transpose2d(w("weight")?, w("bias")?, *stride, *pad)?,
                LayerKind::Dense { .. } => x.dense(w("weight")?, w("bias")?)?,
                LayerKind::Activation(Activation::Relu) => x.relu(),
                LayerKind::Activation(Activation::LeakyRelu(s)) => x.leaky_relu(*s),
                LayerKind::Activation(Activation::Tanh) => x.tanh(),
                LayerKind::Activation(Activation::Sigmoid) => x.sigmoid(),
                LayerKind::MaxPool { kernel, stride } => x.max_pool2d(*kernel, *stride)?,
                LayerKind::Flatten => {
                    let shape = x.shape();
                    x.reshape(&[shape[0], numel(&shape[1..])])?
                }
                LayerKind::Reshape(dims) => {
                    let mut shape = vec![x.shape()[0]];
                    shape.extend_from_slice(dims);
                    x.reshape(&shape)?
                }
            };
        }
        Ok(x)
    }

    /// Full forward pass on the tape.
    pub fn forward_var<'t>(&self, params: &BoundParams<'t>, input: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&input.shape(), &self.spec.input)?;
        self.run_layers(params, input, 0, self.spec.layers.len())
    }

    /// Forward pass through `layer` inclusive, on the tape.
    pub fn forward_to_layer_var<'t>(&self, params: &BoundParams<'t>, layer: &str, input: Var<'t>) -> Result<Var<'t>> {
        let idx = self.spec.layer_index(layer)?;
        self.check_input(&input.shape(), &self.spec.input)?;
        self.run_layers(params, input, 0, idx + 1)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.forward_var(&params, tape.leaf(input.clone()))?;
        let value = out.value();
        Ok((*value).clone())
    }

    /// Batched inference in chunks of `batch`, concatenated.
    pub fn forward_batched(&self, input: &Tensor, batch: usize, layer: Option<&str>) -> Result<Tensor> {
        let n = *input.shape().first().ok_or_else(|| Error::dim("forward", "scalar input"))?;
        let mut outs = Vec::new();
        for start in (0..n).step_by(batch.max(1)) {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            let chunk = input.select_batch(&idx)?;
            outs.push(match layer {
                Some(l) => self.forward_to_layer(l, &chunk)?.values,
                None => self.forward(&chunk)?,
            });
        }
        Tensor::stack_batch(&outs)
    }

    /// Activations at a declared code layer (or the final layer).
    pub fn forward_to_layer(&self, layer: &str, input: &Tensor) -> Result<Code> {
        if !self.spec.is_code_layer(layer) && self.spec.last_layer() != Some(layer) {
            return Err(Error::lookup("code layer", layer));
        }
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.forward_to_layer_var(&params, layer, tape.leaf(input.clone()))?;
        let values = (*out.value()).clone();
        Ok(Code { layer: layer.to_string(), values })
    }

    /// Resume the forward pass from activations produced at `code.layer`.
    pub fn forward_from(&self, code: &Code) -> Result<Tensor> {
        let idx = self.spec.layer_index(&code.layer)?;
        let expected = self.spec.layer_shape(&code.layer)?;
        self.check_input(code.values.shape(), &expected)?;
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.run_layers(&params, tape.leaf(code.values.clone()), idx + 1, self.spec.layers.len())?;
        let value = out.value();
        Ok((*value).clone())
    }

    /// Flat per-sample offset of a unit: the unit itself for flat layers, the
    /// center position of channel `unit` for spatial ones.
    pub fn unit_offset(&self, layer: &str, unit: usize) -> Result<usize> {
        let shape = self.spec.layer_shape(layer)?;
        let width = shape[0];
        if unit >= width {
            return Err(Error::input(format!("unit {unit} out of range for layer `{layer}` of width {width}")));
        }
        Ok(match shape.as_slice() {
            [_, h, w] => unit * h * w + (h / 2) * w + w / 2,
            _ => unit,
        })
    }

    pub fn layer_width(&self, layer: &str) -> Result<usize> {
        Ok(self.spec.layer_shape(layer)?[0])
    }

    /// Differentiable activation of one unit for a batch-1 input on the tape.
    pub fn unit_activation_var<'t>(&self, params: &BoundParams<'t>, layer: &str, unit: usize, input: Var<'t>) -> Result<Var<'t>> {
        let offset = self.unit_offset(layer, unit)?;
        if input.shape().first() != Some(&1) {
            return Err(Error::dim("unit_activation", format!("expected batch 1, got {:?}", input.shape())));
        }
        self.forward_to_layer_var(params, layer, input)?.index(offset)
    }

    pub fn unit_activation(&self, layer: &str, unit: usize, input: &Tensor) -> Result<f32> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        Ok(self.unit_activation_var(&params, layer, unit, tape.leaf(input.clone()))?.item())
    }

    /// Activations of every unit of `layer` for each sample of a batch:
    /// `[N][width]`.
    pub fn unit_activations(&self, layer: &str, input: &Tensor, batch: usize) -> Result<Vec<Vec<f32>>> {
        let width = self.layer_width(layer)?;
        let offsets: Vec<usize> = (0..width).map(|u| self.unit_offset(layer, u)).collect::<Result<_>>()?;
        let values = self.forward_batched(input, batch, Some(layer))?;
        let per = values.len() / values.shape()[0];
        Ok(values.data().chunks(per).map(|row| offsets.iter().map(|&o| row[o]).collect()).collect())
    }

    /// Prefix network ending at `layer` with the matching parameters.
    pub fn truncated(&self, layer: &str, name: &str) -> Result<NetworkInstance> {
        let spec = self.spec.truncated(layer, name)?;
        let keep: Vec<String> = spec.param_shapes()?.into_iter().map(|(n, _)| n).collect();
        let params = keep
            .into_iter()
            .map(|n| {
                let t = self.params.get(&n).cloned().ok_or_else(|| Error::lookup("parameter", &n))?;
                Ok((n, t))
            })
            .collect::<Result<_>>()?;
        Ok(NetworkInstance { spec, params, meta: self.meta.clone() })
    }

    pub fn to_container(&self) -> Container {
        let mut text = self.spec.to_text();
        let _ = writeln!(text, "meta dataset={}", self.meta.dataset);
        let _ = writeln!(text, "meta iteration={}", self.meta.iteration);
        let _ = writeln!(text, "meta seed={}", self.meta.seed);
        if let Some(acc) = self.meta.val_accuracy {
            let _ = writeln!(text, "meta val_accuracy={acc}");
        }
        Container { text, tensors: self.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect() }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let spec = NetworkSpec::parse(&c.text)?;
        let mut meta = TrainingMeta::default();
        for line in c.text.lines() {
            let Some(rest) = line.trim().strip_prefix("meta ") else { continue };
            let (key, value) = rest.split_once('=').ok_or_else(|| Error::Format(format!("bad meta line `{line}`")))?;
            let bad = || Error::Format(format!("bad meta value `{line}`"));
            match key {
                "dataset" => meta.dataset = value.to_string(),
                "iteration" => meta.iteration = value.parse().map_err(|_| bad())?,
                "seed" => meta.seed = value.parse().map_err(|_| bad())?,
                "val_accuracy" => meta.val_accuracy = Some(value.parse().map_err(|_| bad())?),
                _ => return Err(Error::Format(format!("unknown meta key `{key}`"))),
            }
        }
        let net = NetworkInstance { spec, params: c.tensors.into_iter().collect(), meta };
        net.validate()?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::decode(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn is_transpose(spec: &NetworkSpec, param: &str) -> bool {
    let layer = param.rsplit_once('.').map(|(l, _)| l).unwrap_or(param);
    spec.layers.iter().any(|l| l.name == layer && matches!(l.kind, LayerKind::ConvTranspose { .. }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn small() -> NetworkSpec {
        NetworkSpec {
            name: "small".into(),
            input: vec![1, 6, 6],
            layers: vec![
                LayerSpec::new("c1", LayerKind::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 }),
                LayerSpec::new("r1", LayerKind::Activation(Activation::Relu)),
                LayerSpec::new("p1", LayerKind::MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("f", LayerKind::Flatten),
                LayerSpec::new("d1", LayerKind::Dense { out: 5 }),
                LayerSpec::new("r2", LayerKind::Activation(Activation::Relu)),
                LayerSpec::new("d2", LayerKind::Dense { out: 4 }),
            ],
            code_layers: vec!["r1".into(), "r2".into()],
        }
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, 1, 6, 6], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_params_give_zeros() {
        let net = NetworkInstance::zeros(small()).unwrap();
        let out = net.forward(&batch(3, 1)).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_network_returns_input() {
        let spec = NetworkSpec {
            name: "id".into(),
            input: vec![2],
            layers: vec![LayerSpec::new("id", LayerKind::Dense { out: 2 })],
            code_layers: vec!["id".into()],
        };
        let mut net = NetworkInstance::zeros(spec).unwrap();
        net.params.insert("id.weight".into(), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = Tensor::new(vec![1, 2], vec![0.25, -3.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
        assert_eq!(net.forward_to_layer("id", &x).unwrap().values, x);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let a = NetworkInstance::init(small(), 9).unwrap();
        let b = NetworkInstance::init(small(), 9).unwrap();
        let x = batch(4, 2);
        assert!(a.forward(&x).unwrap().bit_eq(&b.forward(&x).unwrap()));
    }

    #[test]
    fn truncation_composes_exactly() {
        let net = NetworkInstance::init(small(), 4).unwrap();
        let x = batch(3, 5);
        let full = net.forward(&x).unwrap();
        for layer in ["r1", "r2"] {
            let code = net.forward_to_layer(layer, &x).unwrap();
            assert!(code.values.data().iter().all(|&v| v >= 0.0));
            assert!(net.forward_from(&code).unwrap().bit_eq(&full));
        }
        assert!(net.forward_to_layer("d2", &x).unwrap().values.bit_eq(&full));
        assert!(matches!(net.forward_to_layer("c1", &x), Err(Error::Lookup { .. })));
    }

    #[test]
    fn unit_activation_matches_slice() {
        let net = NetworkInstance::init(small(), 4).unwrap();
        let x = batch(1, 6);
        let logits = net.forward(&x).unwrap();
        for u in 0..4 {
            assert_eq!(net.unit_activation("d2", u, &x).unwrap(), logits.data()[u]);
        }
        // spatial layer: center of the channel map
        let code = net.forward_to_layer("r1", &x).unwrap().values;
        assert_eq!(net.unit_activation("r1", 2, &x).unwrap(), code.data()[2 * 36 + 3 * 6 + 3]);
        assert!(net.unit_activation("d2", 4, &x).is_err());
    }

    #[test]
    fn zero_incoming_weights_give_zero_activation() {
        let mut net = NetworkInstance::init(small(), 4).unwrap();
        let w = net.params.get_mut("d2.weight").unwrap();
        let din = w.shape()[1];
        w.data_mut()[din..2 * din].fill(0.0);
        for seed in 0..3 {
            assert_eq!(net.unit_activation("d2", 1, &batch(1, seed)).unwrap(), 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let net = NetworkInstance::init(small(), 4).unwrap();
        let bad = Tensor::zeros(&[1, 1, 5, 6]);
        assert!(matches!(net.forward(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = NetworkInstance::init(small(), 11).unwrap();
        net.meta = TrainingMeta { dataset: "toy".into(), iteration: 40, seed: 11, val_accuracy: Some(0.75) };
        let bytes = net.to_bytes();
        let back = NetworkInstance::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);
        let x = batch(2, 3);
        assert!(back.forward(&x).unwrap().bit_eq(&net.forward(&x).unwrap()));
    }
}
