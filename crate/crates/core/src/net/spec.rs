use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a (possibly gated) skip tensor is combined with the decoder tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Concat,
    Sum,
    Mul,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
            Fusion::Mul => "mul",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "sum" => Ok(Fusion::Sum),
            "mul" => Ok(Fusion::Mul),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion `{other}` (expected concat, sum or mul)"
            ))),
        }
    }
}

pub const ENCODER_DEPTH: usize = 5;
pub const SKIP_COUNT: usize = 4;

/// Declarative description of a U-Net / GU-Net counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub encoder_channels: [usize; ENCODER_DEPTH],
    pub gated: bool,
    pub fusion: Fusion,
    pub leaky_slope: f64,
    pub patch_side: usize,
    /// Layers whose input side is at least this use 4×4 kernels, smaller
    /// ones 3×3.
    pub filter_size_threshold: usize,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            in_channels: 3,
            encoder_channels: [32, 64, 128, 256, 512],
            gated: true,
            fusion: Fusion::Concat,
            leaky_slope: 0.2,
            patch_side: 96,
            filter_size_threshold: 24,
            seed: 0,
        }
    }
}

impl NetworkSpec {
    /// The small configuration used for desk-scale experiments.
    pub fn narrow() -> Self {
        NetworkSpec {
            encoder_channels: [8, 16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::Build("channel counts must be ≥ 1".into()));
        }
        if self.patch_side == 0 || !self.patch_side.is_multiple_of(1 << ENCODER_DEPTH) {
            return Err(Error::Build(format!(
                "patch side {} must be a positive multiple of {}",
                self.patch_side,
                1 << ENCODER_DEPTH
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Build(format!(
                "leaky slope {} must lie in (0, 1)",
                self.leaky_slope
            )));
        }
        if self.fusion != Fusion::Concat {
            let dec = self.decoder_channels();
            for skip in 1..=SKIP_COUNT {
                let (decoder, source) = (dec[SKIP_COUNT - skip], self.encoder_channels[skip - 1]);
                if decoder != source {
                    return Err(Error::Build(format!(
                        "{} fusion needs matching channels at skip {skip}: decoder has {decoder}, encoder layer {skip} has {source}",
                        self.fusion
                    )));
                }
            }
        }
        Ok(())
    }

    /// Kernel side of each encoder layer, from its input side.
    pub fn encoder_kernels(&self) -> [usize; ENCODER_DEPTH] {
        std::array::from_fn(|k| {
            let input_side = self.patch_side >> k;
            if input_side >= self.filter_size_threshold {
                4
            } else {
                3
            }
        })
    }

    /// Output channels of the five decoder layers: the encoder widths in
    /// reverse, ending with half the first encoder width.
    pub fn decoder_channels(&self) -> [usize; ENCODER_DEPTH] {
        let e = self.encoder_channels;
        [e[3], e[2], e[1], e[0], (e[0] / 2).max(1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_rule_on_default_chain() {
        assert_eq!(NetworkSpec::default().encoder_kernels(), [4, 4, 4, 3, 3]);
    }

    #[test]
    fn rejects_indivisible_patch() {
        let spec = NetworkSpec {
            patch_side: 100,
            ..NetworkSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Build(_))));
    }

    #[test]
    fn fusion_parses() {
        assert_eq!("sum".parse::<Fusion>().unwrap(), Fusion::Sum);
        assert!("avg".parse::<Fusion>().is_err());
    }
}
