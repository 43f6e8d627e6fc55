//! Scalar abstraction used by the model kernels.
//!
//! The ACTM step, rollout and stage cost are written once, generic over
//! [`Scalar`]. Plain `f64` gives the simulation path; [`Dual`] carries a
//! dense tangent vector and gives exact forward-mode derivatives of an MPC
//! objective with respect to its decision variables (one-sided at kinks of
//! the `min`/`max` operators, following whichever branch is active).

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(value: f64) -> Self;
    fn value(&self) -> f64;

    /// Smaller of the two by value. Ties keep `self`.
    fn min_of(self, other: Self) -> Self {
        if other.value() < self.value() {
            other
        } else {
            self
        }
    }

    /// Larger of the two by value. Ties keep `self`.
    fn max_of(self, other: Self) -> Self {
        if other.value() > self.value() {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(value: f64) -> Self {
        value
    }

    #[inline]
    fn value(&self) -> f64 {
        *self
    }
}

/// Forward-mode dual number with a dense gradient.
///
/// An empty `grad` stands for the zero vector so that constants never
/// allocate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub val: f64,
    pub grad: Vec<f64>,
}

impl Dual {
    /// The `index`-th of `dim` independent variables.
    pub fn variable(val: f64, index: usize, dim: usize) -> Self {
        let mut grad = vec![0.0; dim];
        grad[index] = 1.0;
        Dual { val, grad }
    }

    pub fn gradient(&self, dim: usize) -> Vec<f64> {
        if self.grad.is_empty() {
            vec![0.0; dim]
        } else {
            self.grad.clone()
        }
    }

    fn zip(a: Vec<f64>, b: &[f64], fa: f64, fb: f64) -> Vec<f64> {
        match (a.is_empty(), b.is_empty()) {
            (true, true) => a,
            (false, true) => {
                let mut a = a;
                if fa != 1.0 {
                    a.iter_mut().for_each(|x| *x *= fa);
                }
                a
            }
            (true, false) => b.iter().map(|x| x * fb).collect(),
            (false, false) => {
                let mut a = a;
                for (x, y) in a.iter_mut().zip(b) {
                    *x = fa * *x + fb * y;
                }
                a
            }
        }
    }

    fn scaled(mut self, factor: f64) -> Vec<f64> {
        self.grad.iter_mut().for_each(|x| *x *= factor);
        self.grad
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual {
            val: self.val + rhs.val,
            grad: Dual::zip(self.grad, &rhs.grad, 1.0, 1.0),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual {
            val: self.val - rhs.val,
            grad: Dual::zip(self.grad, &rhs.grad, 1.0, -1.0),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        let (a, b) = (self.val, rhs.val);
        Dual {
            val: a * b,
            grad: Dual::zip(self.grad, &rhs.grad, b, a),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let (a, b) = (self.val, rhs.val);
        Dual {
            val: a / b,
            grad: Dual::zip(self.grad, &rhs.grad, 1.0 / b, -a / (b * b)),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        let val = -self.val;
        Dual {
            val,
            grad: self.scaled(-1.0),
        }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(mut self, rhs: f64) -> Dual {
        self.val += rhs;
        self
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(mut self, rhs: f64) -> Dual {
        self.val -= rhs;
        self
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, rhs: f64) -> Dual {
        let val = self.val * rhs;
        Dual {
            val,
            grad: self.scaled(rhs),
        }
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    fn div(self, rhs: f64) -> Dual {
        let val = self.val / rhs;
        Dual {
            val,
            grad: self.scaled(1.0 / rhs),
        }
    }
}

impl Scalar for Dual {
    fn constant(value: f64) -> Self {
        Dual {
            val: value,
            grad: Vec::new(),
        }
    }

    fn value(&self) -> f64 {
        self.val
    }
}
