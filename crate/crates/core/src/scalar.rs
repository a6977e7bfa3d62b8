//! Scalar fields supported by the integrators.

use nalgebra::{Complex, ComplexField};

/// A real or complex scalar with an `f64` real part.
///
/// All inner products are the conjugate-linear Frobenius product
/// `<A, B> = trace(A^H B)`; for real scalars the conjugation is a no-op.
pub trait Scalar: ComplexField<RealField = f64> + Copy + Send + Sync + 'static {
    const IS_COMPLEX: bool;

    fn from_parts(re: f64, im: f64) -> Self;

    fn parts(self) -> (f64, f64);

    fn finite(self) -> bool {
        let (re, im) = self.parts();
        re.is_finite() && im.is_finite()
    }
}

impl Scalar for f64 {
    const IS_COMPLEX: bool = false;

    fn from_parts(re: f64, _im: f64) -> Self {
        re
    }

    fn parts(self) -> (f64, f64) {
        (self, 0.0)
    }
}

impl Scalar for Complex<f64> {
    const IS_COMPLEX: bool = true;

    fn from_parts(re: f64, im: f64) -> Self {
        Complex::new(re, im)
    }

    fn parts(self) -> (f64, f64) {
        (self.re, self.im)
    }
}

/// Field tag carried by states and problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Real,
    Complex,
}

impl Field {
    pub fn of<T: Scalar>() -> Self {
        if T::IS_COMPLEX {
            Field::Complex
        } else {
            Field::Real
        }
    }
}
