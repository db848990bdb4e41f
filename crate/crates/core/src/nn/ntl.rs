use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Arch, Layer, Network, NtlStyle};

/// Nonlinear transformation layer: three channel-preserving 3x3 convolutions
/// (stride 1, padding 1, with bias). With [`NtlStyle::BnRelu`] the first two
/// are followed by batch norm and ReLU; the last one never is, so the output
/// range is unbounded.
pub fn build_ntl<S: Scalar>(channels: usize, style: NtlStyle, seed: u64) -> Result<Network<S>> {
    if channels == 0 {
        return Err(Error::Parameter("NTL needs at least one channel".into()));
    }
    let mut net = Network::empty(Arch::Ntl { channels, style });
    let mut rng = Network::<S>::rng(seed);
    for i in 1..=3 {
        net.add_conv(&mut rng, &format!("conv{i}"), channels, channels, 1, true);
        if i < 3 && style == NtlStyle::BnRelu {
            net.add_bn(&format!("bn{i}"), channels);
            net.push_layer(Layer::Relu);
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn closed_form_count() {
        for c in [1, 16, 64] {
            let net = build_ntl::<f32>(c, NtlStyle::BnRelu, 0).unwrap();
            assert_eq!(net.count_params(), 3 * (c * c * 9) + 3 * c + 2 * 2 * c);
            let plain = build_ntl::<f32>(c, NtlStyle::Plain, 0).unwrap();
            assert_eq!(plain.count_params(), 3 * (c * c * 9) + 3 * c);
        }
    }

    #[test]
    fn exactly_three_convolutions() {
        let net = build_ntl::<f32>(4, NtlStyle::BnRelu, 0).unwrap();
        let convs = net
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .count();
        assert_eq!(convs, 3);
        assert!(matches!(net.layers().last(), Some(Layer::Conv { .. })));
    }

    #[test]
    fn preserves_shape() {
        let net = build_ntl::<f32>(64, NtlStyle::BnRelu, 1).unwrap();
        let out = net.infer(&Tensor::full(&[1, 64, 8, 8], 0.5)).unwrap();
        assert_eq!(out.output.shape(), &[1, 64, 8, 8]);
    }

    #[test]
    fn seeds_differ() {
        let a = build_ntl::<f32>(8, NtlStyle::BnRelu, 1).unwrap();
        let b = build_ntl::<f32>(8, NtlStyle::BnRelu, 2).unwrap();
        assert!(a
            .params()
            .values()
            .zip(b.params().values())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn zero_channels_rejected() {
        assert!(build_ntl::<f32>(0, NtlStyle::BnRelu, 0).is_err());
    }
}
