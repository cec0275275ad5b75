//! Central-difference gradient oracle.

/// `(f(p + eps·eᵢ) − f(p − eps·eᵢ)) / 2eps` for each coordinate `i`, or only
/// for the listed coordinates when `coords` is given (other entries are 0).
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], eps: f64, coords: Option<&[usize]>) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut point = p.to_vec();
    let mut grad = vec![0.0; p.len()];
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..p.len()).collect();
            &all
        }
    };
    for &i in coords {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point);
        point[i] = orig - eps;
        let minus = f(&point);
        point[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5, None);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5, None);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn sampled_subset() {
        let g = finite_diff_grad(
            |p| p.iter().map(|v| v * v * v).sum(),
            &[1.0, 2.0, 3.0],
            1e-5,
            Some(&[2]),
        );
        assert_eq!(g[0], 0.0);
        assert!((g[2] - 27.0).abs() < 1e-6);
    }
}
