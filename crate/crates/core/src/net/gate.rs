use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Element, Graph, NodeId, Padding, Shape4, Tensor4};

/// Learnable short-cut: `a = σ(conv(z))`, `z_gated = z ⊙ a`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateUnit<T> {
    pub conv: ConvParams<T>,
    pub(crate) last_activation_mean: Option<f64>,
}

impl<T: Element> GateUnit<T> {
    /// A gate over a `channels`-wide tensor, stride 1 with same padding.
    pub fn new(channels: usize, kernel: usize) -> Self {
        GateUnit {
            conv: ConvParams::zeros(
                Shape4::new(channels, channels, kernel, kernel),
                channels,
                (1, 1),
                Padding::Same,
            ),
            last_activation_mean: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.weight.shape().n
    }

    pub fn last_activation_mean(&self) -> Option<f64> {
        self.last_activation_mean
    }

    /// Value-level gate evaluation; records the mean activation.
    pub fn forward(&mut self, z: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let mut g = Graph::new();
        let zi = g.leaf(z.clone());
        let w = g.leaf(self.conv.weight.clone());
        let b = g.leaf(self.conv.bias.clone());
        let (a, gated) = gate_graph(&mut g, zi, w, b, self.channels())?;
        self.last_activation_mean = Some(g.value(a).sum() / g.value(a).shape().len() as f64);
        Ok((g.take_value(a), g.take_value(gated)))
    }
}

/// Records a gate on `g`; returns `(a, z ⊙ a)`.
pub(crate) fn gate_graph<T: Element>(
    g: &mut Graph<T>,
    z: NodeId,
    w: NodeId,
    b: NodeId,
    channels: usize,
) -> Result<(NodeId, NodeId)> {
    let zc = g.value(z).shape().c;
    if zc != channels {
        return Err(Error::shape(
            "gate",
            format!("gated tensor has {zc} channels, gate convolution expects {channels}"),
        ));
    }
    let pre = g.conv2d(z, w, Some(b), (1, 1), Padding::Same)?;
    let a = g.sigmoid(pre);
    let gated = g.mul(z, a)?;
    Ok((a, gated))
}
