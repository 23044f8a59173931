//! Third-order polynomial regression on the normalized inputs, the accuracy
//! baseline for the networks.

use nalgebra::{DMatrix, DVector};

use super::{SurrogateError, INPUTS, TARGET_EPSILON};
use crate::dataset::EmissionRecord;
use crate::factors::{continuous_inputs, normalize_raw, DynamicsPoint, FactorVector, VehicleClass, INPUT_BOUNDS};

/// Monomials of total degree ≤ 3 in six variables: C(9, 3).
pub const MONOMIALS: usize = 84;

#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialModel {
    pub class: VehicleClass,
    exponents: Vec<[u8; INPUTS]>,
    pub coefficients: Vec<f64>,
}

fn exponents() -> Vec<[u8; INPUTS]> {
    let mut out = Vec::with_capacity(MONOMIALS);
    let mut e = [0u8; INPUTS];
    fn rec(i: usize, left: u8, e: &mut [u8; INPUTS], out: &mut Vec<[u8; INPUTS]>) {
        if i == INPUTS {
            out.push(*e);
            return;
        }
        for k in 0..=left {
            e[i] = k;
            rec(i + 1, left - k, e, out);
        }
        e[i] = 0;
    }
    rec(0, 3, &mut e, &mut out);
    out
}

fn features(exps: &[[u8; INPUTS]], z: &[f64; INPUTS]) -> Vec<f64> {
    exps.iter()
        .map(|e| (0..INPUTS).map(|i| z[i].powi(e[i] as i32)).product())
        .collect()
}

fn normalized(v: f64, a: f64, x: &FactorVector) -> [f64; INPUTS] {
    normalize_raw(&continuous_inputs(x, &DynamicsPoint { v, a }), &INPUT_BOUNDS)
}

impl PolynomialModel {
    /// Minimizes `Σ ((e_i − f_i)/e_i)²` over the records of `class`, a
    /// relative-error least-squares proxy for the MAPE objective.
    pub fn fit(class: VehicleClass, data: &[EmissionRecord]) -> Result<Self, SurrogateError> {
        let exps = exponents();
        let mut ata = DMatrix::<f64>::zeros(MONOMIALS, MONOMIALS);
        let mut atb = DVector::<f64>::zeros(MONOMIALS);
        let mut n = 0usize;
        for r in data.iter().filter(|r| r.x.class() == class) {
            let w = 1.0 / r.e.max(TARGET_EPSILON);
            let phi = DVector::from_vec(features(&exps, &normalized(r.v, r.a, &r.x))) * w;
            ata.ger(1.0, &phi, &phi, 1.0);
            atb.axpy(1.0, &phi, 1.0);
            n += 1;
        }
        if n == 0 {
            return Err(SurrogateError::Empty);
        }
        // rank-revealing solve: sparse factor coverage leaves some monomials unidentifiable
        let eps = 1e-12 * ata.diagonal().max();
        let coefficients = ata.svd(true, true).solve(&atb, eps).map_err(|_| SurrogateError::Singular)?;
        Ok(Self {
            class,
            exponents: exps,
            coefficients: coefficients.iter().copied().collect(),
        })
    }

    pub fn predict(&self, v: f64, a: f64, x: &FactorVector) -> Result<f64, SurrogateError> {
        if x.class() != self.class {
            return Err(SurrogateError::UnknownClass(x.class()));
        }
        let z = normalized(v, a, x);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFinite);
        }
        Ok(features(&self.exponents, &z)
            .iter()
            .zip(&self.coefficients)
            .map(|(f, c)| f * c)
            .sum())
    }
}
