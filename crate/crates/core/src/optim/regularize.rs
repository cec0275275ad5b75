use crate::error::Result;
use crate::net::{Network, ParamKind};
use crate::tensor::{Element, Graph, NodeId};

/// `data_loss + l2_scale · Σ w²`. Biases count only when `include_biases`.
pub fn regularized_loss<T: Element>(data_loss: f64, net: &Network<T>, l2_scale: f64, include_biases: bool) -> f64 {
    let penalty: f64 = net
        .parameters()
        .iter()
        .filter(|p| include_biases || p.kind == ParamKind::Weight)
        .flat_map(|p| p.value.data().iter().map(|v| v.f64() * v.f64()))
        .sum();
    data_loss + l2_scale * penalty
}

/// Records `data_loss + l2_scale · Σ w²` on `g` over the given parameter
/// leaves, so the penalty contributes `2 · l2_scale · w` to each gradient.
pub fn regularized_loss_graph<T: Element>(
    g: &mut Graph<T>,
    data_loss: NodeId,
    params: &[(NodeId, ParamKind)],
    l2_scale: f64,
    include_biases: bool,
) -> Result<NodeId> {
    if l2_scale == 0.0 {
        return Ok(data_loss);
    }
    let mut total: Option<NodeId> = None;
    for &(id, kind) in params {
        if kind == ParamKind::Bias && !include_biases {
            continue;
        }
        let sq = g.sum_squares(id);
        total = Some(match total {
            None => sq,
            Some(acc) => g.add(acc, sq)?,
        });
    }
    match total {
        None => Ok(data_loss),
        Some(sum) => {
            let penalty = g.scale(sum, T::of(l2_scale));
            g.add(data_loss, penalty)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;
    use crate::tensor::gradcheck::{finite_diff_grad, relative_error};
    use crate::tensor::{Shape4, Tensor4};

    #[test]
    fn analytic_values() {
        let mut net = Network::<f64>::zeros(&NetworkSpec::narrow()).unwrap();
        assert_eq!(regularized_loss(0.7, &net, 2.5e-5, false), 0.7);
        assert_eq!(regularized_loss(0.7, &net, 0.0, false), 0.7);
        net.parameters_mut()[0].value.data_mut()[0] = 2.0;
        net.parameters_mut()[1].value.data_mut()[0] = 5.0; // bias, excluded
        let l = regularized_loss(0.7, &net, 2.5e-5, false);
        assert!((l - (0.7 + 1e-4)).abs() < 1e-15);
        let with_bias = regularized_loss(0.7, &net, 2.5e-5, true);
        assert!((with_bias - (0.7 + 1e-4 + 25.0 * 2.5e-5)).abs() < 1e-15);
    }

    #[test]
    fn penalty_gradient_is_two_scale_w() {
        let scale = 2.5e-5;
        let w = Tensor4::from_fn(Shape4::new(2, 1, 2, 2), |n, _, h, x| {
            0.3 * n as f64 - 0.2 * h as f64 + 0.1 * x as f64 + 0.05
        });
        let b = Tensor4::from_fn(Shape4::new(1, 2, 1, 1), |_, c, _, _| 1.0 + c as f64);
        let mut g = Graph::new();
        let zero = g.leaf(Tensor4::scalar(0.0));
        let (iw, ib) = (g.leaf(w.clone()), g.leaf(b.clone()));
        let loss = regularized_loss_graph(
            &mut g,
            zero,
            &[(iw, ParamKind::Weight), (ib, ParamKind::Bias)],
            scale,
            false,
        )
        .unwrap();
        g.backward(loss).unwrap();
        let gw = g.grad(iw).unwrap();
        for (gv, wv) in gw.data().iter().zip(w.data()) {
            assert!((gv - 2.0 * scale * wv).abs() < 1e-18);
        }
        assert!(g.grad(ib).unwrap().data().iter().all(|&v| v == 0.0));
        let numeric = finite_diff_grad(|p| scale * p.iter().map(|v| v * v).sum::<f64>(), w.data(), 1e-5, None);
        for (a, n) in gw.data().iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-12) < 1e-4);
        }
    }
}
