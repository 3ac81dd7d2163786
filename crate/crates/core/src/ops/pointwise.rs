use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Tanh,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Pointwise {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Pointwise::Relu => x.max(T::zero()),
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`. ReLU takes derivative 0 at the kink.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Pointwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Pointwise::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

pub fn pointwise<T: Real>(kind: Pointwise, input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| kind.apply(x))
}

pub fn pointwise_backward<T: Real>(
    kind: Pointwise,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| kind.derivative(x) * g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_values_and_derivatives() {
        assert_eq!(Pointwise::Relu.apply(-1.0f32), 0.0);
        assert_eq!(Pointwise::Relu.apply(2.0f32), 2.0);
        assert_eq!(Pointwise::Relu.derivative(-1.0f32), 0.0);
        assert_eq!(Pointwise::Sigmoid.apply(0.0f32), 0.5);
        assert_eq!(Pointwise::Sigmoid.derivative(0.0f32), 0.25);
        assert_eq!(Pointwise::Tanh.apply(0.0f32), 0.0);
        assert_eq!(Pointwise::Tanh.derivative(0.0f32), 1.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert!(sigmoid(-80.0f64) > 0.0);
    }
}
