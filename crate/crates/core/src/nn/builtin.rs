//! The shipped network roster: two classifier architectures, generators that
//! invert classifier codes, a discriminator, and the comparator.

use super::spec::{Activation, LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

/// Post-ReLU output of the middle convolution block.
pub const CONV_MID: &str = "conv_mid";
/// Post-ReLU output of the first fully connected layer.
pub const FC_PRE: &str = "fc_pre";
/// Post-ReLU output of the second fully connected layer.
pub const FC_FINAL: &str = "fc_final";
/// Class scores.
pub const LOGITS: &str = "logits";

const LEAK: f32 = 0.2;

fn conv(name: &str, out: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Conv { out_channels: out, kernel, stride, pad })
}

fn up(name: &str, out: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::ConvTranspose { out_channels: out, kernel: 4, stride: 2, pad: 1 })
}

fn dense(name: &str, out: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Dense { out })
}

fn act(name: &str, a: Activation) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Activation(a))
}

fn pool(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::MaxPool { kernel: 2, stride: 2 })
}

fn check_image(input: [usize; 3]) -> Result<()> {
    let [c, h, w] = input;
    if c == 0 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::dim("builtin roster", format!("image extents must be multiples of 4, got {input:?}")));
    }
    Ok(())
}

/// Three conv blocks and three dense layers. Codes are exposed after the
/// middle conv block and after each hidden dense layer.
pub fn encoder_a(input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
    check_image(input)?;
    let spec = NetworkSpec {
        name: "encoder_a".into(),
        input: input.to_vec(),
        layers: vec![
            conv("conv1", 16, 3, 1, 1),
            act("relu1", Activation::Relu),
            pool("pool1"),
            conv("conv2", 32, 3, 1, 1),
            act(CONV_MID, Activation::Relu),
            pool("pool2"),
            conv("conv3", 32, 3, 1, 1),
            act("relu3", Activation::Relu),
            LayerSpec::new("flatten", LayerKind::Flatten),
            dense("fc6", 128),
            act(FC_PRE, Activation::Relu),
            dense("fc7", 64),
            act(FC_FINAL, Activation::Relu),
            dense(LOGITS, classes),
        ],
        code_layers: vec![CONV_MID.into(), FC_PRE.into(), FC_FINAL.into()],
    };
    spec.validate()?;
    Ok(spec)
}

/// A shallower, wider-kernel classifier with the same input and output
/// sizes as [`encoder_a`].
pub fn encoder_b(input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
    check_image(input)?;
    let spec = NetworkSpec {
        name: "encoder_b".into(),
        input: input.to_vec(),
        layers: vec![
            conv("conv1", 12, 5, 1, 2),
            act("relu1", Activation::Relu),
            pool("pool1"),
            conv("conv2", 24, 5, 2, 2),
            act(CONV_MID, Activation::Relu),
            LayerSpec::new("flatten", LayerKind::Flatten),
            dense("fc", 96),
            act(FC_PRE, Activation::Relu),
            dense(LOGITS, classes),
        ],
        code_layers: vec![CONV_MID.into(), FC_PRE.into()],
    };
    spec.validate()?;
    Ok(spec)
}

/// Upconvolutional generator mapping codes of `encoder` at `layer` back to
/// images of the encoder's input size.
pub fn generator_for(encoder: &NetworkSpec, layer: &str) -> Result<NetworkSpec> {
    if !encoder.is_code_layer(layer) {
        return Err(Error::lookup("code layer", layer));
    }
    let code = encoder.layer_shape(layer)?;
    let &[c, h, w] = encoder.input.as_slice() else {
        return Err(Error::dim("generator_for", format!("encoder input {:?} is not an image", encoder.input)));
    };
    let leaky = Activation::LeakyRelu(LEAK);
    let mut layers = Vec::new();
    let mut ups = 0;
    let (mut ch, mut gh, mut gw) = match code.as_slice() {
        &[_] => {
            let (bh, bw) = (h / 4, w / 4);
            layers.push(dense("fc1", 256));
            layers.push(act("fc1_act", leaky));
            layers.push(dense("fc2", 32 * bh * bw));
            layers.push(act("fc2_act", leaky));
            layers.push(LayerSpec::new("reshape", LayerKind::Reshape(vec![32, bh, bw])));
            (32, bh, bw)
        }
        &[_, ch, cw] => {
            layers.push(conv("conv0", 32, 3, 1, 1));
            layers.push(act("conv0_act", leaky));
            (32, ch, cw)
        }
        other => return Err(Error::dim("generator_for", format!("unsupported code shape {other:?}"))),
    };
    while gh < h {
        if gh * 2 > h || gw * 2 > w {
            return Err(Error::dim("generator_for", format!("code grid {gh}x{gw} does not double up to {h}x{w}")));
        }
        ups += 1;
        ch = (ch / 2).max(16);
        layers.push(up(&format!("up{ups}"), ch));
        layers.push(act(&format!("up{ups}_act"), leaky));
        gh *= 2;
        gw *= 2;
    }
    if gh != h || gw != w {
        return Err(Error::dim("generator_for", format!("code grid {gh}x{gw} does not match image {h}x{w}")));
    }
    layers.push(conv("to_image", c, 3, 1, 1));
    layers.push(act("image", Activation::Sigmoid));
    let spec = NetworkSpec { name: format!("generator_{layer}"), input: code, layers, code_layers: Vec::new() };
    spec.validate()?;
    Ok(spec)
}

/// Three strided conv layers and two dense layers ending in one real/fake logit.
pub fn discriminator(input: [usize; 3]) -> Result<NetworkSpec> {
    check_image(input)?;
    let leaky = Activation::LeakyRelu(LEAK);
    let spec = NetworkSpec {
        name: "discriminator".into(),
        input: input.to_vec(),
        layers: vec![
            conv("conv1", 16, 4, 2, 1),
            act("act1", leaky),
            conv("conv2", 32, 4, 2, 1),
            act("act2", leaky),
            conv("conv3", 32, 3, 1, 1),
            act("act3", leaky),
            LayerSpec::new("flatten", LayerKind::Flatten),
            dense("fc1", 64),
            act("fc1_act", leaky),
            dense("logit", 1),
        ],
        code_layers: Vec::new(),
    };
    spec.validate()?;
    Ok(spec)
}

/// The encoder truncated at its middle convolution block.
pub fn comparator(encoder: &NetworkSpec) -> Result<NetworkSpec> {
    encoder.truncated(CONV_MID, "comparator")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkInstance;
    use crate::tensor::Tensor;

    fn kinds(spec: &NetworkSpec) -> Vec<&'static str> {
        spec.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv { .. } => "conv",
                LayerKind::ConvTranspose { .. } => "up",
                LayerKind::Dense { .. } => "dense",
                LayerKind::Activation(_) => "act",
                LayerKind::MaxPool { .. } => "pool",
                LayerKind::Flatten => "flat",
                LayerKind::Reshape(_) => "reshape",
            })
            .collect()
    }

    #[test]
    fn generators_reproduce_encoder_input_shape() {
        for input in [[1, 28, 28], [3, 32, 32], [3, 28, 28]] {
            let enc = encoder_a(input, 10).unwrap();
            for layer in [CONV_MID, FC_PRE, FC_FINAL] {
                let g = generator_for(&enc, layer).unwrap();
                assert_eq!(g.output_shape().unwrap(), input.to_vec(), "{layer}");
                assert_eq!(g.input, enc.layer_shape(layer).unwrap());
            }
        }
        let enc = encoder_a([1, 28, 28], 10).unwrap();
        assert!(matches!(generator_for(&enc, "conv1"), Err(Error::Lookup { .. })));
        assert!(matches!(generator_for(&enc, "nope"), Err(Error::Lookup { .. })));
    }

    #[test]
    fn encoder_shapes_and_roster() {
        let a = encoder_a([1, 28, 28], 10).unwrap();
        let b = encoder_b([1, 28, 28], 10).unwrap();
        assert_eq!(a.output_shape().unwrap(), vec![10]);
        assert_eq!(b.output_shape().unwrap(), vec![10]);
        assert_ne!(kinds(&a), kinds(&b));
        let convs = |s: &NetworkSpec| s.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv { .. })).count();
        let denses = |s: &NetworkSpec| s.layers.iter().filter(|l| matches!(l.kind, LayerKind::Dense { .. })).count();
        assert!(convs(&a) >= 3 && denses(&a) >= 2);
        assert_ne!(convs(&a), convs(&b));
        assert_eq!(discriminator([1, 28, 28]).unwrap().output_shape().unwrap(), vec![1]);
    }

    #[test]
    fn comparator_is_truncated_encoder() {
        let enc = NetworkInstance::init(encoder_a([1, 28, 28], 10).unwrap(), 3).unwrap();
        let comp = enc.truncated(CONV_MID, "comparator").unwrap();
        assert_eq!(comp.spec, comparator(&enc.spec).unwrap());
        let x = Tensor::full(&[2, 1, 28, 28], 0.3);
        let direct = enc.forward_to_layer(CONV_MID, &x).unwrap().values;
        assert!(comp.forward(&x).unwrap().bit_eq(&direct));
    }
}
