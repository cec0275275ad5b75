use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::{Element, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for a list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        AdamState { config, step: 0, m, v }
    }

    pub fn for_network(config: AdamConfig, net: &Network<T>) -> Self {
        Self::new(config, net.parameters().iter().map(|p| p.value.shape().len()))
    }

    /// One bias-corrected Adam update. Gradients are checked for NaN/Inf
    /// before anything is modified.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], names: &[&str]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} arrays, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "array {i}: moments {}, parameter {}, gradient {}",
                        self.m[i].len(),
                        p.len(),
                        g.len()
                    ),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                let name = names.get(i).map_or_else(|| format!("#{i}"), |n| n.to_string());
                return Err(Error::NonFiniteGradient(name));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.epsilon));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every network parameter.
pub fn adam_step<T: Element>(net: &mut Network<T>, grads: &[Tensor4<T>], state: &mut AdamState<T>) -> Result<()> {
    let mut params = net.parameters_mut();
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut slices: Vec<&mut [T]> = params.iter_mut().map(|p| p.value.data_mut()).collect();
    let grads: Vec<&[T]> = grads.iter().map(|g| g.data()).collect();
    state.update(&mut slices, &grads, &names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut state = AdamState::<f64>::new(AdamConfig::default(), [3]);
        let mut p = vec![1.0, 1.0, 1.0];
        let g = [0.5, -2.0, 1e-3];
        state.update(&mut [&mut p], &[&g], &["p"]).unwrap();
        for (pj, gj) in p.iter().zip(g) {
            let step = pj - 1.0;
            let expected = 1e-4 * gj.abs() / (gj.abs() + 1e-8);
            assert!((step.abs() - expected).abs() < 1e-15);
            assert_eq!(step.signum(), -gj.signum());
        }
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), [2]);
        let mut p = vec![0.3f32, -0.7];
        for _ in 0..50 {
            state.update(&mut [&mut p], &[&[0.0, 0.0]], &["p"]).unwrap();
        }
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut state = AdamState::<f64>::new(AdamConfig::default(), [1, 1]);
        let (mut a, mut b) = (vec![0.0], vec![0.0]);
        let err = state
            .update(&mut [&mut a, &mut b], &[&[1.0], &[f64::NAN]], &["enc", "dec"])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "dec"));
        assert_eq!(state.step, 0);
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn ten_step_scalar_quadratic_trace() {
        // f(x) = (x − 3)², reference recurrence written out independently
        let (lr, b1, b2, eps) = (1e-1, 0.9, 0.999, 1e-8);
        let (mut x_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut state = AdamState::<f64>::new(
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            [1],
        );
        let mut x = vec![0.0];
        for t in 1..=10 {
            let g = 2.0 * (x_ref - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x_ref -= lr * mh / (vh.sqrt() + eps);

            let gx = [2.0 * (x[0] - 3.0)];
            state.update(&mut [&mut x], &[&gx], &["x"]).unwrap();
            assert!((x[0] - x_ref).abs() <= 1e-12 * x_ref.abs().max(1.0), "step {t}");
        }
    }
}
