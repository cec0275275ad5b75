//! The 11-layer U-Net / GU-Net density regressor.
//!
//! Five stride-2 convolutions encode the input, five stride-2 transpose
//! convolutions decode it, and a final stride-1 convolution with a single
//! filter emits the density map. Encoder outputs 1–4 are carried to the
//! decoder stage of equal spatial size, optionally through a [`GateUnit`],
//! and combined with the decoder tensor by the configured [`Fusion`].

mod gate;
mod spec;

pub use gate::GateUnit;
pub use spec::{Fusion, NetworkSpec, ENCODER_DEPTH, SKIP_COUNT};

use crate::error::{Error, Result};
use crate::optim::init_weights;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{ConvParams, Element, Graph, NodeId, Padding, Shape4, Tensor4};

/// Default initialization scale for freshly built networks.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Spatial sides fed to [`Network::forward`] must be multiples of this.
pub const SIDE_MULTIPLE: usize = 1 << ENCODER_DEPTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

pub struct Parameter<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a Tensor4<T>,
}

pub struct ParameterMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a mut Tensor4<T>,
}

/// Node handles of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub output: NodeId,
    /// Leaf for each parameter, in [`Network::parameters`] order.
    pub params: Vec<NodeId>,
    /// Gate activation tensors `a`, skip 1 first. Empty when ungated.
    pub gate_activations: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GateMode {
    Learned,
    /// Replace every gate by `a ≡ 1`.
    #[allow(dead_code)]
    ForcedOpen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    encoder: Vec<ConvParams<T>>,
    decoder: Vec<ConvParams<T>>,
    output: ConvParams<T>,
    gates: Vec<GateUnit<T>>,
}

impl<T: Element> Network<T> {
    /// Builds the architecture with all parameters zero.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let e = spec.encoder_channels;
        let kernels = spec.encoder_kernels();
        let dec = spec.decoder_channels();

        let mut encoder = Vec::with_capacity(ENCODER_DEPTH);
        let mut in_ch = spec.in_channels;
        for k in 0..ENCODER_DEPTH {
            let kk = kernels[k];
            encoder.push(ConvParams::zeros(
                Shape4::new(e[k], in_ch, kk, kk),
                e[k],
                (2, 2),
                Padding::Same,
            ));
            in_ch = e[k];
        }

        let mut decoder = Vec::with_capacity(ENCODER_DEPTH);
        for j in 0..ENCODER_DEPTH {
            let kk = kernels[ENCODER_DEPTH - 1 - j];
            let input = if j == 0 {
                e[ENCODER_DEPTH - 1]
            } else {
                let skip = e[ENCODER_DEPTH - 1 - j];
                dec[j - 1] + if spec.fusion == Fusion::Concat { skip } else { 0 }
            };
            decoder.push(ConvParams::zeros(
                Shape4::new(input, dec[j], kk, kk),
                dec[j],
                (2, 2),
                Padding::Same,
            ));
        }

        let output = ConvParams::zeros(Shape4::new(1, dec[ENCODER_DEPTH - 1], 4, 4), 1, (1, 1), Padding::Same);

        let gates = if spec.gated {
            (0..SKIP_COUNT).map(|k| GateUnit::new(e[k], kernels[k])).collect()
        } else {
            Vec::new()
        };

        Ok(Network {
            spec: spec.clone(),
            encoder,
            decoder,
            output,
            gates,
        })
    }

    /// Builds the architecture and draws weights from N(0, 0.02²) on the
    /// spec seed's init stream. Biases start at zero.
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        Self::build_with_std(spec, DEFAULT_INIT_STD)
    }

    pub fn build_with_std(spec: &NetworkSpec, std: f64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        init_weights(&mut net, std, &mut stream_rng(spec.seed, Stream::Init, 0))?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &[ConvParams<T>] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[ConvParams<T>] {
        &self.decoder
    }

    pub fn output_layer(&self) -> &ConvParams<T> {
        &self.output
    }

    pub fn gates(&self) -> &[GateUnit<T>] {
        &self.gates
    }

    pub fn gates_mut(&mut self) -> &mut [GateUnit<T>] {
        &mut self.gates
    }

    fn layers(&self) -> impl Iterator<Item = (String, &ConvParams<T>)> {
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("encoder.{}", i + 1), p));
        let dec = self
            .decoder
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("decoder.{}", i + 1), p));
        let out = std::iter::once(("output".to_string(), &self.output));
        let gates = self
            .gates
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("gate.{}", i + 1), &g.conv));
        enc.chain(dec).chain(out).chain(gates)
    }

    /// Every trainable array in a fixed order: encoder, decoder, output,
    /// gates; weight before bias within a layer.
    pub fn parameters(&self) -> Vec<Parameter<'_, T>> {
        self.layers()
            .flat_map(|(name, p)| {
                [
                    Parameter {
                        name: format!("{name}.weight"),
                        kind: ParamKind::Weight,
                        value: &p.weight,
                    },
                    Parameter {
                        name: format!("{name}.bias"),
                        kind: ParamKind::Bias,
                        value: &p.bias,
                    },
                ]
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<ParameterMut<'_, T>> {
        let enc = self
            .encoder
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (format!("encoder.{}", i + 1), p));
        let dec = self
            .decoder
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (format!("decoder.{}", i + 1), p));
        let out = std::iter::once(("output".to_string(), &mut self.output));
        let gates = self
            .gates
            .iter_mut()
            .enumerate()
            .map(|(i, g)| (format!("gate.{}", i + 1), &mut g.conv));
        enc.chain(dec)
            .chain(out)
            .chain(gates)
            .flat_map(|(name, p)| {
                [
                    ParameterMut {
                        name: format!("{name}.weight"),
                        kind: ParamKind::Weight,
                        value: &mut p.weight,
                    },
                    ParameterMut {
                        name: format!("{name}.bias"),
                        kind: ParamKind::Bias,
                        value: &mut p.bias,
                    },
                ]
            })
            .collect()
    }

    /// Total number of scalar weights and biases, gates included.
    pub fn count_parameters(&self) -> usize {
        self.layers().map(|(_, p)| p.parameter_count()).sum()
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape.c != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {} channels, network expects {}",
                    shape.c, self.spec.in_channels
                ),
            ));
        }
        if !shape.h.is_multiple_of(SIDE_MULTIPLE) || !shape.w.is_multiple_of(SIDE_MULTIPLE) {
            return Err(Error::shape(
                "forward",
                format!(
                    "input sides {}×{} must be multiples of {SIDE_MULTIPLE}; use forward_any_size to pad",
                    shape.h, shape.w
                ),
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `g` with every parameter as a leaf.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId) -> Result<ForwardNodes> {
        self.forward_graph_with(g, x, GateMode::Learned)
    }

    pub(crate) fn forward_graph_with(&self, g: &mut Graph<T>, x: NodeId, mode: GateMode) -> Result<ForwardNodes> {
        self.check_input(g.value(x).shape())?;
        let params: Vec<NodeId> = self.parameters().into_iter().map(|p| g.leaf(p.value.clone())).collect();
        // parameters() yields (weight, bias) pairs layer by layer
        let layer = |i: usize| (params[2 * i], params[2 * i + 1]);
        let gate_base = 2 * ENCODER_DEPTH + 1;
        let slope = T::of(self.spec.leaky_slope);

        let mut skips = Vec::with_capacity(ENCODER_DEPTH);
        let mut h = x;
        for (k, p) in self.encoder.iter().enumerate() {
            let (w, b) = layer(k);
            let pre = g.conv2d(h, w, Some(b), p.stride, p.padding)?;
            h = g.leaky_relu(pre, slope)?;
            skips.push(h);
        }

        let mut gate_activations = Vec::new();
        for (j, p) in self.decoder.iter().enumerate() {
            if j > 0 {
                let k = ENCODER_DEPTH - 1 - j;
                let z = skips[k];
                let z_gated = if self.spec.gated {
                    let (a, zg) = match mode {
                        GateMode::Learned => {
                            let (w, b) = layer(gate_base + k);
                            gate::gate_graph(g, z, w, b, self.gates[k].channels())?
                        }
                        GateMode::ForcedOpen => {
                            let a = g.leaf(Tensor4::ones(g.value(z).shape()));
                            (a, g.mul(z, a)?)
                        }
                    };
                    gate_activations.push((k, a));
                    zg
                } else {
                    z
                };
                h = fuse_graph(g, z_gated, h, self.spec.fusion)?;
            }
            let (w, b) = layer(ENCODER_DEPTH + j);
            let pre = g.transpose_conv2d(h, w, Some(b), p.stride, p.padding)?;
            h = g.leaky_relu(pre, slope)?;
        }

        let (w, b) = layer(2 * ENCODER_DEPTH);
        let output = g.conv2d(h, w, Some(b), self.output.stride, self.output.padding)?;
        gate_activations.sort_by_key(|&(k, _)| k);
        Ok(ForwardNodes {
            output,
            params,
            gate_activations: gate_activations.into_iter().map(|(_, a)| a).collect(),
        })
    }

    /// Stores per-skip mean activations of a recorded pass.
    pub fn record_gate_activations(&mut self, g: &Graph<T>, nodes: &ForwardNodes) {
        for (gate, &a) in self.gates.iter_mut().zip(&nodes.gate_activations) {
            let v = g.value(a);
            gate.last_activation_mean = Some(v.sum() / v.shape().len() as f64);
        }
    }

    /// Predicts density maps for a batch whose sides are multiples of 32.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward_with(x, GateMode::Learned)
    }

    pub(crate) fn forward_with(&mut self, x: &Tensor4<T>, mode: GateMode) -> Result<Tensor4<T>> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let nodes = self.forward_graph_with(&mut g, xi, mode)?;
        if mode == GateMode::Learned {
            self.record_gate_activations(&g, &nodes);
        }
        Ok(g.take_value(nodes.output))
    }

    /// Forward for arbitrary input sides: reflect-pads bottom/right up to
    /// the next multiple of 32 and crops the prediction back.
    pub fn forward_any_size(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        if s.h.is_multiple_of(SIDE_MULTIPLE) && s.w.is_multiple_of(SIDE_MULTIPLE) {
            return self.forward(x);
        }
        let padded = reflect_pad(
            x,
            s.h.next_multiple_of(SIDE_MULTIPLE),
            s.w.next_multiple_of(SIDE_MULTIPLE),
        );
        let y = self.forward(&padded)?;
        Ok(crop(&y, s.h, s.w))
    }

    /// Mean gate activation of the most recent forward pass, per skip.
    pub fn gate_activation_report(&self) -> Result<Vec<(usize, f64)>> {
        if self.gates.is_empty() {
            return Err(Error::Ungated);
        }
        self.gates
            .iter()
            .enumerate()
            .map(|(k, g)| {
                g.last_activation_mean
                    .map(|m| (k + 1, m))
                    .ok_or(Error::NoGateActivations)
            })
            .collect()
    }
}

/// Combines a skip tensor with the decoder tensor.
pub fn fuse_graph<T: Element>(g: &mut Graph<T>, z_gated: NodeId, z_prev: NodeId, mode: Fusion) -> Result<NodeId> {
    match mode {
        Fusion::Concat => g.concat_channels(z_gated, z_prev),
        Fusion::Sum => g.add(z_gated, z_prev),
        Fusion::Mul => g.mul(z_gated, z_prev),
    }
}

/// Value-level [`fuse_graph`].
pub fn fuse<T: Element>(z_gated: &Tensor4<T>, z_prev: &Tensor4<T>, mode: Fusion) -> Result<Tensor4<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.leaf(z_gated.clone()), g.leaf(z_prev.clone()));
    let y = fuse_graph(&mut g, a, b, mode)?;
    Ok(g.take_value(y))
}

/// Mean squared error over every element.
pub fn loss<T: Element>(pred: &Tensor4<T>, gt: &Tensor4<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "loss",
            format!("prediction {} vs target {}", pred.shape(), gt.shape()),
        ));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &t)| (p - t).f64().powi(2))
        .sum();
    Ok(total / pred.shape().len() as f64)
}

#[inline]
fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Extends `x` to `h × w` by mirror reflection at the bottom/right edges.
pub fn reflect_pad<T: Element>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let s = x.shape();
    assert!(h >= s.h && w >= s.w, "reflect_pad cannot shrink");
    Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, xx| {
        x.at(n, c, reflect_index(y, s.h), reflect_index(xx, s.w))
    })
}

/// Top-left `h × w` window of every plane.
pub fn crop<T: Element>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let s = x.shape();
    assert!(h <= s.h && w <= s.w, "crop window exceeds tensor");
    Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, xx| x.at(n, c, y, xx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(net: &mut Network<f64>, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.parameters_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    fn random_input(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn skip_topology_and_layer_shapes() {
        let net = Network::<f32>::zeros(&NetworkSpec::default()).unwrap();
        let kernels: Vec<_> = net.encoder().iter().map(|p| p.kernel().0).collect();
        assert_eq!(kernels, [4, 4, 4, 3, 3]);
        let dec_kernels: Vec<_> = net.decoder().iter().map(|p| p.kernel().0).collect();
        assert_eq!(dec_kernels, [3, 3, 4, 4, 4]);
        assert_eq!(net.gates().len(), 4);
        assert_eq!(net.output_layer().weight.shape(), Shape4::new(1, 16, 4, 4));
        assert_eq!(net.output_layer().stride, (1, 1));
        // concat widens decoder inputs by the skip width
        let inputs: Vec<_> = net.decoder().iter().map(|p| p.weight.shape().n).collect();
        assert_eq!(inputs, [512, 256 + 256, 128 + 128, 64 + 64, 32 + 32]);
    }

    #[test]
    fn ungated_has_no_gates_and_fewer_parameters() {
        let gated = Network::<f32>::zeros(&NetworkSpec::default()).unwrap();
        let plain = Network::<f32>::zeros(&NetworkSpec {
            gated: false,
            ..NetworkSpec::default()
        })
        .unwrap();
        assert!(plain.gates().is_empty());
        assert!(gated.count_parameters() > plain.count_parameters());
        assert!(matches!(plain.gate_activation_report(), Err(Error::Ungated)));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut net = Network::<f64>::build(&NetworkSpec::narrow()).unwrap();
        let y = net.forward(&Tensor4::zeros(Shape4::new(1, 3, 64, 96))).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 64, 96));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut net = Network::<f32>::build(&NetworkSpec::narrow()).unwrap();
        let err = net.forward(&Tensor4::zeros(Shape4::new(1, 3, 90, 96))).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let y = net
            .forward_any_size(&Tensor4::zeros(Shape4::new(1, 3, 90, 50)))
            .unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 90, 50));
    }

    #[test]
    fn forced_open_gates_reproduce_plain_unet() {
        for fusion in [Fusion::Concat, Fusion::Sum, Fusion::Mul] {
            let spec = NetworkSpec {
                fusion,
                seed: 5,
                ..NetworkSpec::narrow()
            };
            let mut gated = Network::<f64>::build(&spec).unwrap();
            let mut plain = Network::<f64>::build(&NetworkSpec { gated: false, ..spec }).unwrap();
            // gates are initialized last, so shared layers agree
            for (a, b) in plain.parameters().iter().zip(gated.parameters()) {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
            let x = random_input(Shape4::new(1, 3, 32, 64), 1);
            let y_plain = plain.forward(&x).unwrap();
            let y_open = gated.forward_with(&x, GateMode::ForcedOpen).unwrap();
            assert_eq!(
                y_plain.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y_open.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{fusion}"
            );
        }
    }

    #[test]
    fn zero_gates_report_half() {
        let mut net = Network::<f64>::zeros(&NetworkSpec::narrow()).unwrap();
        assert!(matches!(net.gate_activation_report(), Err(Error::NoGateActivations)));
        randomize(&mut net, 0.3, 2);
        for gate in net.gates_mut() {
            gate.conv.weight.data_mut().fill(0.0);
            gate.conv.bias.data_mut().fill(0.0);
        }
        net.forward(&random_input(Shape4::new(1, 3, 32, 32), 3)).unwrap();
        let report = net.gate_activation_report().unwrap();
        assert_eq!(report.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3, 4]);
        assert!(report.iter().all(|&(_, m)| m == 0.5));
        for gate in net.gates_mut() {
            gate.conv.bias.data_mut().fill(100.0);
        }
        net.forward(&random_input(Shape4::new(1, 3, 32, 32), 3)).unwrap();
        assert!(net
            .gate_activation_report()
            .unwrap()
            .iter()
            .all(|&(_, m)| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn reflect_pad_mirrors() {
        let x = Tensor4::new(Shape4::new(1, 1, 1, 3), vec![1.0f64, 2.0, 3.0]).unwrap();
        let p = reflect_pad(&x, 1, 8);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(crop(&p, 1, 3), x);
    }
}
