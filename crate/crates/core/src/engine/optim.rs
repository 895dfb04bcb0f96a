//! Nesterov momentum in the rearranged form.
//!
//! The stored parameters are the look-ahead point, so the gradient passed in
//! is already evaluated there. With learning rate `lr` and momentum `mu`:
//!
//! ```text
//! v     <- mu * v - lr * g
//! theta <- theta + mu * v - lr * g      (using the updated v)
//! ```
//!
//! With `mu = 0` this is plain gradient descent, `theta <- theta - lr * g`.

use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonFiniteGradient;

pub fn nesterov_update<T: Real>(
    params: &mut [T],
    velocity: &mut [T],
    grads: &[T],
    lr: T,
    momentum: T,
) -> Result<(), NonFiniteGradient> {
    assert_eq!(params.len(), velocity.len());
    assert_eq!(params.len(), grads.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NonFiniteGradient);
    }
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let step = lr * g;
        *v = momentum * *v - step;
        *p = *p + momentum * *v - step;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = [1.5f64, -2.0];
        let mut v = [0.0; 2];
        nesterov_update(&mut p, &mut v, &[0.0, 0.0], 0.1, 0.9).unwrap();
        assert_eq!(p, [1.5, -2.0]);
        assert_eq!(v, [0.0, 0.0]);
    }

    #[test]
    fn no_momentum_is_gradient_descent() {
        let mut p = [1.0f64, 2.0, 3.0];
        let mut v = [0.0; 3];
        let g = [0.5, -1.0, 2.0];
        for _ in 0..3 {
            let before = p;
            nesterov_update(&mut p, &mut v, &g, 0.1, 0.0).unwrap();
            for i in 0..3 {
                assert_eq!(p[i], before[i] - 0.1 * g[i]);
            }
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Scalar simulation of f(x) = x^2 written out independently.
        let (lr, mu) = (0.1f64, 0.9f64);
        let (mut x, mut vel) = (1.0f64, 0.0f64);
        for _ in 0..200 {
            let grad = 2.0 * x;
            let new_vel = mu * vel - lr * grad;
            x = x + mu * new_vel - lr * grad;
            vel = new_vel;
        }
        let mut p = [1.0f64];
        let mut v = [0.0];
        for _ in 0..200 {
            let g = [2.0 * p[0]];
            nesterov_update(&mut p, &mut v, &g, lr, mu).unwrap();
        }
        assert_eq!(p[0], x);
        assert!(p[0].abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        assert_eq!(
            nesterov_update(&mut p, &mut v, &[f32::NAN], 0.1, 0.9),
            Err(NonFiniteGradient)
        );
        assert_eq!(p, [1.0]);
    }
}
