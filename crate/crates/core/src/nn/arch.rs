use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{build_ntl, build_resnet, build_translator, paraphraser, Network};

/// Whether an NTL normalizes and rectifies between its convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NtlStyle {
    /// Three bare convolutions.
    Plain,
    /// BN + ReLU after the first two convolutions.
    #[default]
    BnRelu,
}

impl fmt::Display for NtlStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NtlStyle::Plain => "plain",
            NtlStyle::BnRelu => "bn_relu",
        })
    }
}

impl FromStr for NtlStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(NtlStyle::Plain),
            "bn_relu" => Ok(NtlStyle::BnRelu),
            _ => Err(Error::Parameter(format!(
                "unknown NTL style {s:?} (plain|bn_relu)"
            ))),
        }
    }
}

/// Architecture descriptor; its string form is stored in configs and
/// checkpoints, e.g. `resnet56-c100`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// `resnet<depth>-c<classes>`
    ResNet { depth: usize, classes: usize },
    /// `ntl<channels>` or `ntl<channels>-plain`
    Ntl { channels: usize, style: NtlStyle },
    /// `encoder<channels>-z<factor>`
    Encoder { channels: usize, factor: usize },
    /// `decoder<factor>-c<channels>`
    Decoder { factor: usize, channels: usize },
    /// `translator<channels>-z<factor>`
    Translator { channels: usize, factor: usize },
    /// `linear<inputs>-o<outputs>`
    Linear { inputs: usize, outputs: usize },
}

impl Arch {
    pub fn build<S: Scalar>(&self, seed: u64) -> Result<Network<S>> {
        match *self {
            Arch::ResNet { depth, classes } => build_resnet(depth, classes, seed),
            Arch::Ntl { channels, style } => build_ntl(channels, style, seed),
            Arch::Encoder { channels, factor } => {
                paraphraser::build_encoder(channels, factor, seed)
            }
            Arch::Decoder { factor, channels } => {
                paraphraser::build_decoder(factor, channels, seed)
            }
            Arch::Translator { channels, factor } => build_translator(channels, factor, seed),
            Arch::Linear { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Parameter(
                        "linear layer needs nonzero extents".into(),
                    ));
                }
                let mut net = Network::empty(*self);
                let mut rng = Network::<S>::rng(seed);
                net.add_linear(&mut rng, "fc", inputs, outputs);
                Ok(net)
            }
        }
    }

    /// Channel count the network expects on an NCHW input, if image-like.
    pub fn input_channels(&self) -> Option<usize> {
        match *self {
            Arch::ResNet { .. } => Some(3),
            Arch::Ntl { channels, .. }
            | Arch::Encoder { channels, .. }
            | Arch::Translator { channels, .. } => Some(channels),
            Arch::Decoder { factor, .. } => Some(factor),
            Arch::Linear { .. } => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match *self {
            Arch::ResNet { classes, .. } => Some(classes),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Arch::ResNet { depth, classes } => write!(f, "resnet{depth}-c{classes}"),
            Arch::Ntl {
                channels,
                style: NtlStyle::BnRelu,
            } => write!(f, "ntl{channels}"),
            Arch::Ntl {
                channels,
                style: NtlStyle::Plain,
            } => write!(f, "ntl{channels}-plain"),
            Arch::Encoder { channels, factor } => write!(f, "encoder{channels}-z{factor}"),
            Arch::Decoder { factor, channels } => write!(f, "decoder{factor}-c{channels}"),
            Arch::Translator { channels, factor } => write!(f, "translator{channels}-z{factor}"),
            Arch::Linear { inputs, outputs } => write!(f, "linear{inputs}-o{outputs}"),
        }
    }
}

fn split_num<'a>(s: &'a str, prefix: &str) -> Option<(usize, &'a str)> {
    let rest = s.strip_prefix(prefix)?;
    let end = rest
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(rest.len());
    if end == 0 {
        return None;
    }
    Some((rest[..end].parse().ok()?, &rest[end..]))
}

fn pair(s: &str, head: &str, tail: &str) -> Option<(usize, usize)> {
    let (a, rest) = split_num(s, head)?;
    let (b, rest) = split_num(rest, tail)?;
    rest.is_empty().then_some((a, b))
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parsed = if let Some((depth, classes)) = pair(s, "resnet", "-c") {
            Some(Arch::ResNet { depth, classes })
        } else if let Some((channels, rest)) = split_num(s, "ntl") {
            match rest {
                "" => Some(Arch::Ntl {
                    channels,
                    style: NtlStyle::BnRelu,
                }),
                "-plain" => Some(Arch::Ntl {
                    channels,
                    style: NtlStyle::Plain,
                }),
                _ => None,
            }
        } else if let Some((channels, factor)) = pair(s, "encoder", "-z") {
            Some(Arch::Encoder { channels, factor })
        } else if let Some((factor, channels)) = pair(s, "decoder", "-c") {
            Some(Arch::Decoder { factor, channels })
        } else if let Some((channels, factor)) = pair(s, "translator", "-z") {
            Some(Arch::Translator { channels, factor })
        } else {
            pair(s, "linear", "-o").map(|(inputs, outputs)| Arch::Linear { inputs, outputs })
        };
        parsed.ok_or_else(|| Error::Parameter(format!("unknown architecture descriptor {s:?}")))
    }
}
