use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::{Network, ParamKind};
use crate::tensor::Element;

/// Draws every weight from N(0, std²) and zeroes every bias.
pub fn init_weights<T: Element, R: Rng>(net: &mut Network<T>, std: f64, rng: &mut R) -> Result<()> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("init std {std} must be positive")));
    }
    let normal = Normal::new(0.0, std).expect("valid normal parameters");
    for p in net.parameters_mut() {
        match p.kind {
            ParamKind::Weight => p
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::of(normal.sample(rng))),
            ParamKind::Bias => p.value.data_mut().fill(T::zero()),
        }
    }
    Ok(())
}
