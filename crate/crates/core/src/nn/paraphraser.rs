use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

use super::{Arch, Layer, Mode, Network};

/// Factor width `round(rate * channels)` for a compression rate in `(0, 1]`.
pub fn factor_channels(channels: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Parameter(format!(
            "paraphraser rate must lie in (0, 1], got {rate}"
        )));
    }
    let z = (rate * channels as f64).round() as usize;
    if z == 0 {
        return Err(Error::Parameter(format!(
            "rate {rate} on {channels} channels leaves an empty factor"
        )));
    }
    Ok(z)
}

fn conv_bn_relu<S: Scalar>(
    net: &mut Network<S>,
    rng: &mut rand_chacha::ChaCha8Rng,
    i: usize,
    cin: usize,
    cout: usize,
) {
    net.add_conv(rng, &format!("conv{i}"), cin, cout, 1, true);
    net.add_bn(&format!("bn{i}"), cout);
    net.push_layer(Layer::Relu);
}

pub(crate) fn build_encoder<S: Scalar>(
    channels: usize,
    factor: usize,
    seed: u64,
) -> Result<Network<S>> {
    if channels == 0 || factor == 0 {
        return Err(Error::Parameter(
            "encoder needs nonzero channel counts".into(),
        ));
    }
    let mut net = Network::empty(Arch::Encoder { channels, factor });
    let mut rng = Network::<S>::rng(seed);
    conv_bn_relu(&mut net, &mut rng, 1, channels, channels);
    conv_bn_relu(&mut net, &mut rng, 2, channels, factor);
    Ok(net)
}

pub(crate) fn build_decoder<S: Scalar>(
    factor: usize,
    channels: usize,
    seed: u64,
) -> Result<Network<S>> {
    if channels == 0 || factor == 0 {
        return Err(Error::Parameter(
            "decoder needs nonzero channel counts".into(),
        ));
    }
    let mut net = Network::empty(Arch::Decoder { factor, channels });
    let mut rng = Network::<S>::rng(seed);
    conv_bn_relu(&mut net, &mut rng, 1, factor, channels);
    net.add_conv(&mut rng, "conv2", channels, channels, 1, true);
    Ok(net)
}

/// Student-side adapter into a paraphraser's factor space; same layout as
/// the paraphraser encoder.
pub fn build_translator<S: Scalar>(
    channels: usize,
    factor: usize,
    seed: u64,
) -> Result<Network<S>> {
    if channels == 0 || factor == 0 {
        return Err(Error::Parameter(
            "translator needs nonzero channel counts".into(),
        ));
    }
    let mut net = Network::empty(Arch::Translator { channels, factor });
    let mut rng = Network::<S>::rng(seed);
    conv_bn_relu(&mut net, &mut rng, 1, channels, channels);
    conv_bn_relu(&mut net, &mut rng, 2, channels, factor);
    Ok(net)
}

/// Convolutional autoencoder over feature maps.
///
/// Encoder: two stride-1 3x3 conv+BN+ReLU layers, the second narrowing to
/// the factor width. Decoder: the mirror image, with a bare final conv so
/// reconstructions are unbounded.
#[derive(Clone, Debug)]
pub struct Paraphraser<S: Scalar> {
    pub encoder: Network<S>,
    pub decoder: Network<S>,
    rate: f64,
}

pub fn build_paraphraser<S: Scalar>(
    channels: usize,
    rate: f64,
    seed: u64,
) -> Result<Paraphraser<S>> {
    let z = factor_channels(channels, rate)?;
    Ok(Paraphraser {
        encoder: build_encoder(channels, z, seed)?,
        decoder: build_decoder(z, channels, seed.wrapping_add(1))?,
        rate,
    })
}

impl<S: Scalar> Paraphraser<S> {
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn channels(&self) -> usize {
        match self.encoder.arch() {
            Arch::Encoder { channels, .. } => *channels,
            _ => unreachable!("paraphraser encoder has an encoder arch"),
        }
    }

    pub fn factor_channels(&self) -> usize {
        match self.encoder.arch() {
            Arch::Encoder { factor, .. } => *factor,
            _ => unreachable!("paraphraser encoder has an encoder arch"),
        }
    }

    pub fn count_params(&self) -> usize {
        self.encoder.count_params() + self.decoder.count_params()
    }

    /// Returns `(factor, reconstruction)`.
    pub fn forward(&mut self, g: &mut Graph<S>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let z = self.encoder.forward(g, x, mode)?.output;
        let r = self.decoder.forward(g, z, mode)?.output;
        Ok((z, r))
    }

    pub fn collect_grads(&mut self, g: &Graph<S>) -> Result<()> {
        self.encoder.collect_grads(g)?;
        self.decoder.collect_grads(g)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.encoder.set_frozen(frozen);
        self.decoder.set_frozen(frozen);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn factor_widths() {
        assert_eq!(factor_channels(64, 0.5).unwrap(), 32);
        assert_eq!(factor_channels(64, 1.0).unwrap(), 64);
        assert_eq!(factor_channels(3, 0.5).unwrap(), 2);
        assert!(factor_channels(64, 0.0).is_err());
        assert!(factor_channels(64, 1.5).is_err());
        assert!(factor_channels(1, 0.25).is_err());
    }

    #[test]
    fn round_trip_shape() {
        let mut p = build_paraphraser::<f32>(64, 0.5, 0).unwrap();
        assert_eq!(p.factor_channels(), 32);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 64, 8, 8], 0.3));
        let (z, r) = p.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(z), &[2, 32, 8, 8]);
        assert_eq!(g.shape(r), &[2, 64, 8, 8]);
    }

    #[test]
    fn closed_form_count() {
        let (c, z) = (16, 4);
        let p = build_paraphraser::<f32>(c, 0.25, 0).unwrap();
        let conv = |i: usize, o: usize| i * o * 9 + o;
        let bn = |o: usize| 2 * o;
        let enc = conv(c, c) + bn(c) + conv(c, z) + bn(z);
        let dec = conv(z, c) + bn(c) + conv(c, c);
        assert_eq!(p.count_params(), enc + dec);
        let t = build_translator::<f32>(c, z, 0).unwrap();
        assert_eq!(t.count_params(), enc);
    }
}
