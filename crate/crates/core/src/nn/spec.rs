//! Declarative layer graphs and their canonical text form.
//!
//! ```text
//! network encoder_a
//! input 1 28 28
//! layer conv1 conv out=16 kernel=3 stride=1 pad=1
//! layer relu1 relu
//! layer pool1 maxpool kernel=2 stride=2
//! layer flat flatten
//! layer fc6 dense out=128
//! code fc6
//! ```
//! Shapes are per sample; the batch axis is implicit.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::numel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    ConvTranspose { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Dense { out: usize },
    Activation(Activation),
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Reshape(Vec<usize>),
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::Dense { .. })
    }

    fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::ConvTranspose { .. } => "conv_transpose",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Activation(Activation::Relu) => "relu",
            LayerKind::Activation(Activation::LeakyRelu(_)) => "leaky_relu",
            LayerKind::Activation(Activation::Tanh) => "tanh",
            LayerKind::Activation(Activation::Sigmoid) => "sigmoid",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape, `[C, H, W]` or `[D]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Layers whose outputs may serve as codes.
    pub code_layers: Vec<String>,
}

/// Output shape of one layer given its input shape.
pub fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let fail = |detail: String| {
        Err(Error::Dimension { op: "network spec", detail: format!("layer `{}`: {detail}", layer.name) })
    };
    match &layer.kind {
        LayerKind::Conv { out_channels, kernel, stride, pad } => {
            let &[_, h, w] = input else { return fail(format!("expects [C, H, W] input, got {input:?}")) };
            match window_extent((h, w), *kernel, *stride, *pad) {
                Ok((oh, ow)) => Ok(vec![*out_channels, oh, ow]),
                Err(detail) => fail(detail),
            }
        }
        LayerKind::MaxPool { kernel, stride } => {
            let &[c, h, w] = input else { return fail(format!("expects [C, H, W] input, got {input:?}")) };
            match window_extent((h, w), *kernel, *stride, 0) {
                Ok((oh, ow)) => Ok(vec![c, oh, ow]),
                Err(detail) => fail(detail),
            }
        }
        LayerKind::ConvTranspose { out_channels, kernel, stride, pad } => {
            let &[_, h, w] = input else { return fail(format!("expects [C, H, W] input, got {input:?}")) };
            if *stride == 0 || *kernel == 0 {
                return fail("kernel and stride must be positive".into());
            }
            let oh = ((h - 1) * stride + kernel) as isize - 2 * *pad as isize;
            let ow = ((w - 1) * stride + kernel) as isize - 2 * *pad as isize;
            if oh <= 0 || ow <= 0 {
                return fail(format!("padding {pad} leaves no output"));
            }
            Ok(vec![*out_channels, oh as usize, ow as usize])
        }
        LayerKind::Dense { out } => {
            if input.len() != 1 {
                return fail(format!("expects flat input, got {input:?}"));
            }
            Ok(vec![*out])
        }
        LayerKind::Activation(_) => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![numel(input)]),
        LayerKind::Reshape(shape) => {
            if numel(shape) != numel(input) || shape.iter().any(|&d| d == 0) {
                return fail(format!("cannot reshape {input:?} into {shape:?}"));
            }
            Ok(shape.clone())
        }
    }
}

fn window_extent((h, w): (usize, usize), kernel: usize, stride: usize, pad: usize) -> std::result::Result<(usize, usize), String> {
    if stride == 0 || kernel == 0 {
        return Err("kernel and stride must be positive".into());
    }
    if kernel > h + 2 * pad || kernel > w + 2 * pad {
        return Err(format!("kernel {kernel} larger than padded input {h}x{w}"));
    }
    Ok(((h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1))
}

impl NetworkSpec {
    /// Check names and shape compatibility; returns each layer's output shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.iter().any(|&d| d == 0) {
            return Err(Error::dim("network spec", format!("invalid input shape {:?}", self.input)));
        }
        let mut seen = HashSet::new();
        let mut shape = self.input.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::input(format!("duplicate layer name `{}`", layer.name)));
            }
            shape = layer_output_shape(layer, &shape)?;
            shapes.push(shape.clone());
        }
        for code in &self.code_layers {
            if !seen.contains(code.as_str()) {
                return Err(Error::lookup("code layer", code));
            }
        }
        Ok(shapes)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| Error::lookup("layer", name))
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.validate()?.pop().unwrap_or_else(|| self.input.clone()))
    }

    pub fn layer_shape(&self, name: &str) -> Result<Vec<usize>> {
        let idx = self.layer_index(name)?;
        Ok(self.validate()?.swap_remove(idx))
    }

    pub fn last_layer(&self) -> Option<&str> {
        self.layers.last().map(|l| l.name.as_str())
    }

    pub fn is_code_layer(&self, name: &str) -> bool {
        self.code_layers.iter().any(|c| c == name)
    }

    /// Shapes of every parameter tensor in layer order, named `<layer>.weight`
    /// and `<layer>.bias`.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.validate()?;
        let mut out = Vec::new();
        let mut input = self.input.clone();
        for (layer, shape) in self.layers.iter().zip(shapes) {
            match layer.kind {
                LayerKind::Conv { out_channels, kernel, .. } => {
                    out.push((format!("{}.weight", layer.name), vec![out_channels, input[0], kernel, kernel]));
                    out.push((format!("{}.bias", layer.name), vec![out_channels]));
                }
                LayerKind::ConvTranspose { out_channels, kernel, .. } => {
                    out.push((format!("{}.weight", layer.name), vec![input[0], out_channels, kernel, kernel]));
                    out.push((format!("{}.bias", layer.name), vec![out_channels]));
                }
                LayerKind::Dense { out: o } => {
                    out.push((format!("{}.weight", layer.name), vec![o, input[0]]));
                    out.push((format!("{}.bias", layer.name), vec![o]));
                }
                _ => {}
            }
            input = shape;
        }
        Ok(out)
    }

    /// The prefix of this network ending at `layer`, keeping code layers
    /// that survive the cut.
    pub fn truncated(&self, layer: &str, name: impl Into<String>) -> Result<NetworkSpec> {
        let idx = self.layer_index(layer)?;
        let layers = self.layers[..=idx].to_vec();
        let code_layers = self
            .code_layers
            .iter()
            .filter(|c| layers.iter().any(|l| &l.name == *c))
            .cloned()
            .collect();
        Ok(NetworkSpec { name: name.into(), input: self.input.clone(), layers, code_layers })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "network {}", self.name);
        let _ = writeln!(s, "input {}", join(&self.input));
        for layer in &self.layers {
            let _ = write!(s, "layer {} {}", layer.name, layer.kind.tag());
            match &layer.kind {
                LayerKind::Conv { out_channels, kernel, stride, pad }
                | LayerKind::ConvTranspose { out_channels, kernel, stride, pad } => {
                    let _ = write!(s, " out={out_channels} kernel={kernel} stride={stride} pad={pad}");
                }
                LayerKind::Dense { out } => {
                    let _ = write!(s, " out={out}");
                }
                LayerKind::Activation(Activation::LeakyRelu(slope)) => {
                    let _ = write!(s, " slope={slope}");
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let _ = write!(s, " kernel={kernel} stride={stride}");
                }
                LayerKind::Reshape(shape) => {
                    let _ = write!(s, " {}", join(shape));
                }
                _ => {}
            }
            s.push('\n');
        }
        for code in &self.code_layers {
            let _ = writeln!(s, "code {code}");
        }
        s
    }

    /// Parse the canonical text form. Lines that start with `meta` are
    /// ignored here; they belong to the enclosing checkpoint.
    pub fn parse(text: &str) -> Result<NetworkSpec> {
        let mut name = None;
        let mut input = None;
        let mut layers = Vec::new();
        let mut code_layers = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {}: {what}: `{line}`", lineno + 1));
            let mut words = line.split_whitespace();
            match words.next() {
                Some("network") => name = Some(words.next().ok_or_else(|| bad("missing name"))?.to_string()),
                Some("input") => input = Some(parse_dims(words).map_err(|_| bad("bad input shape"))?),
                Some("code") => code_layers.push(words.next().ok_or_else(|| bad("missing code layer"))?.to_string()),
                Some("meta") => {}
                Some("layer") => {
                    let lname = words.next().ok_or_else(|| bad("missing layer name"))?;
                    let tag = words.next().ok_or_else(|| bad("missing layer kind"))?;
                    let rest: Vec<&str> = words.collect();
                    let kind = parse_kind(tag, &rest).map_err(|detail| bad(&detail))?;
                    layers.push(LayerSpec::new(lname, kind));
                }
                _ => return Err(bad("unrecognized directive")),
            }
        }
        let spec = NetworkSpec {
            name: name.ok_or_else(|| Error::Format("missing `network` line".into()))?,
            input: input.ok_or_else(|| Error::Format("missing `input` line".into()))?,
            layers,
            code_layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn join(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_dims<'a>(words: impl Iterator<Item = &'a str>) -> std::result::Result<Vec<usize>, ()> {
    let dims: Vec<usize> = words.map(|w| w.parse().map_err(|_| ())).collect::<std::result::Result<_, _>>()?;
    if dims.is_empty() {
        return Err(());
    }
    Ok(dims)
}

fn parse_kind(tag: &str, args: &[&str]) -> std::result::Result<LayerKind, String> {
    let get = |key: &str| -> std::result::Result<&str, String> {
        args.iter()
            .find_map(|a| a.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| format!("missing `{key}`"))
    };
    let num = |key: &str| -> std::result::Result<usize, String> {
        get(key)?.parse().map_err(|_| format!("`{key}` is not a count"))
    };
    Ok(match tag {
        "conv" => LayerKind::Conv { out_channels: num("out")?, kernel: num("kernel")?, stride: num("stride")?, pad: num("pad")? },
        "conv_transpose" => LayerKind::ConvTranspose {
            out_channels: num("out")?,
            kernel: num("kernel")?,
            stride: num("stride")?,
            pad: num("pad")?,
        },
        "dense" => LayerKind::Dense { out: num("out")? },
        "relu" => LayerKind::Activation(Activation::Relu),
        "leaky_relu" => {
            LayerKind::Activation(Activation::LeakyRelu(get("slope")?.parse().map_err(|_| "bad slope".to_string())?))
        }
        "tanh" => LayerKind::Activation(Activation::Tanh),
        "sigmoid" => LayerKind::Activation(Activation::Sigmoid),
        "maxpool" => LayerKind::MaxPool { kernel: num("kernel")?, stride: num("stride")? },
        "flatten" => LayerKind::Flatten,
        "reshape" => LayerKind::Reshape(parse_dims(args.iter().copied()).map_err(|_| "bad reshape dims".to_string())?),
        other => return Err(format!("unknown layer kind `{other}`")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            name: "tiny".into(),
            input: vec![1, 8, 8],
            layers: vec![
                LayerSpec::new("c1", LayerKind::Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 }),
                LayerSpec::new("a1", LayerKind::Activation(Activation::LeakyRelu(0.2))),
                LayerSpec::new("p1", LayerKind::MaxPool { kernel: 2, stride: 2 }),
                LayerSpec::new("f", LayerKind::Flatten),
                LayerSpec::new("d", LayerKind::Dense { out: 3 }),
                LayerSpec::new("r", LayerKind::Reshape(vec![3, 1, 1])),
                LayerSpec::new("up", LayerKind::ConvTranspose { out_channels: 2, kernel: 4, stride: 2, pad: 1 }),
                LayerSpec::new("s", LayerKind::Activation(Activation::Sigmoid)),
            ],
            code_layers: vec!["a1".into(), "d".into()],
        }
    }

    #[test]
    fn shapes_propagate() {
        let shapes = tiny().validate().unwrap();
        assert_eq!(shapes[2], vec![4, 4, 4]);
        assert_eq!(shapes[4], vec![3]);
        assert_eq!(shapes[6], vec![2, 2, 2]);
    }

    #[test]
    fn text_round_trip() {
        let spec = tiny();
        let text = spec.to_text();
        let back = NetworkSpec::parse(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn incompatible_layer_is_named() {
        let mut spec = tiny();
        spec.layers.insert(4, LayerSpec::new("bad_conv", LayerKind::Conv { out_channels: 1, kernel: 3, stride: 1, pad: 0 }));
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("bad_conv"), "{err}");
    }

    #[test]
    fn duplicate_names_and_missing_codes_rejected() {
        let mut spec = tiny();
        spec.layers[1].name = "c1".into();
        assert!(spec.validate().is_err());
        let mut spec = tiny();
        spec.code_layers.push("nope".into());
        assert!(matches!(spec.validate(), Err(Error::Lookup { .. })));
    }

    #[test]
    fn params_follow_layers() {
        let names: Vec<_> = tiny().param_shapes().unwrap();
        assert_eq!(names[0], ("c1.weight".to_string(), vec![4, 1, 3, 3]));
        assert_eq!(names[2], ("d.weight".to_string(), vec![3, 64]));
        assert_eq!(names[4], ("up.weight".to_string(), vec![3, 2, 4, 4]));
    }
}
