use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Arch, Layer, Network, FINAL_TAP};

const WIDTHS: [usize; 3] = [16, 32, 64];

fn blocks_per_stage(depth: usize) -> Result<usize> {
    if depth < 8 || depth % 6 != 2 {
        return Err(Error::Parameter(format!(
            "ResNet depth must be 6n+2 with n >= 1 (8, 14, 20, 56, 110, ...), got {depth}"
        )));
    }
    Ok((depth - 2) / 6)
}

/// CIFAR-style ResNet: a 3x3 stem, three stages of basic blocks at widths
/// 16/32/64 with stride-2 transitions, global average pooling and an affine
/// classifier.
///
/// Stage outputs are tapped as `group1..group3`; `final` aliases `group3`.
/// Width changes use the parameter-free subsample-and-zero-pad shortcut.
pub fn build_resnet<S: Scalar>(depth: usize, num_classes: usize, seed: u64) -> Result<Network<S>> {
    let n = blocks_per_stage(depth)?;
    if num_classes == 0 {
        return Err(Error::Parameter("num_classes must be positive".into()));
    }
    let mut net = Network::empty(Arch::ResNet {
        depth,
        classes: num_classes,
    });
    let mut rng = Network::<S>::rng(seed);
    net.add_conv(&mut rng, "conv1", 3, WIDTHS[0], 1, false);
    net.add_bn("bn1", WIDTHS[0]);
    net.push_layer(Layer::Relu);
    let mut cin = WIDTHS[0];
    for (stage, &width) in WIDTHS.iter().enumerate() {
        for b in 0..n {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let name = format!("layer{}.{b}", stage + 1);
            net.add_conv(
                &mut rng,
                &format!("{name}.conv1"),
                cin,
                width,
                stride,
                false,
            );
            net.add_bn(&format!("{name}.bn1"), width);
            net.add_conv(&mut rng, &format!("{name}.conv2"), width, width, 1, false);
            net.add_bn(&format!("{name}.bn2"), width);
            // The conv/bn entries above only declare parameters; the block runs them.
            let tail = net.layers.len() - 4;
            net.layers.truncate(tail);
            net.push_layer(Layer::BasicBlock {
                name,
                stride,
                out_channels: width,
            });
            cin = width;
        }
        net.push_layer(Layer::Tap(format!("group{}", stage + 1)));
    }
    net.push_layer(Layer::Tap(FINAL_TAP.to_string()));
    net.push_layer(Layer::GlobalAvgPool);
    net.add_linear(&mut rng, "fc", WIDTHS[2], num_classes);
    Ok(net)
}

/// Trainable parameter count of [`build_resnet`], from the layer dimensions.
pub fn resnet_param_count(depth: usize, num_classes: usize) -> Result<usize> {
    let n = blocks_per_stage(depth)?;
    let bn = |c: usize| 2 * c;
    let conv = |cin: usize, cout: usize| cin * cout * 9;
    let mut total = conv(3, WIDTHS[0]) + bn(WIDTHS[0]);
    let mut cin = WIDTHS[0];
    for &w in &WIDTHS {
        for _ in 0..n {
            total += conv(cin, w) + bn(w) + conv(w, w) + bn(w);
            cin = w;
        }
    }
    Ok(total + WIDTHS[2] * num_classes + num_classes)
}
