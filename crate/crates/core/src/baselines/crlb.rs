//! Cramer-Rao bounds on DOA estimation for the unconditional (Gaussian
//! signal) and conditional signal models.

use ndarray::Array2;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::array::{steering_derivative, steering_matrix, ArrayConfig, SourceSet};
use crate::error::{Error, Result};
use crate::linalg::{conj_transpose, identity, inverse};
use crate::scalar::{rad_to_deg, Real};

type C<T> = Complex<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrlbKind {
    /// Gaussian signals: `(s2/2T) {Re[(D^H P D) o (Rs A^H R^-1 A Rs)^T]}^-1`.
    #[default]
    Stochastic,
    /// Deterministic signals: `(s2/2T) {Re[(D^H P D) o Rs^T]}^-1`.
    Deterministic,
}

/// `Q x Q` bound matrix in squared degrees.
pub fn crlb<T: Real>(cfg: &ArrayConfig<T>, src: &SourceSet<T>, snapshots: usize, kind: CrlbKind) -> Result<Array2<T>> {
    if snapshots == 0 {
        return Err(Error::Config("snapshot count must be at least 1".into()));
    }
    cfg.check_sources(src)?;
    let noise = src.noise_power();
    if !(noise > T::zero()) {
        return Err(Error::Config("the bound needs positive noise power".into()));
    }
    let q = src.len();
    let m = cfg.num_elements;
    let a = steering_matrix(cfg, src.doas_deg());
    let mut d = Array2::<C<T>>::zeros((m, q));
    for (k, &theta) in src.doas_deg().iter().enumerate() {
        d.column_mut(k).assign(&steering_derivative(cfg, theta));
    }
    let a_h = conj_transpose(&a);
    let gram_inv = inverse(&a_h.dot(&a)).map_err(|_| Error::Numerical("steering matrix is rank deficient (coincident DOAs)".into()))?;
    let p_perp = identity::<T>(m) - a.dot(&gram_inv).dot(&a_h);
    let dpd = conj_transpose(&d).dot(&p_perp).dot(&d);

    let rs = Array2::from_shape_fn((q, q), |(i, j)| if i == j { C::new(src.powers()[i], T::zero()) } else { C::new(T::zero(), T::zero()) });
    let weight = match kind {
        CrlbKind::Deterministic => rs.clone(),
        CrlbKind::Stochastic => {
            let r = a.dot(&rs).dot(&a_h) + identity::<T>(m).mapv(|z| z * noise);
            let r_inv = inverse(&r)?;
            rs.dot(&a_h).dot(&r_inv).dot(&a).dot(&rs)
        }
    };
    let fim = Array2::from_shape_fn((q, q), |(i, j)| C::new((dpd[[i, j]] * weight[[j, i]]).re, T::zero()));
    let inv = inverse(&fim).map_err(|_| Error::Numerical("information matrix is singular".into()))?;
    let scale = noise / (T::of(2.0) * T::of_usize(snapshots));
    let to_deg2 = rad_to_deg(T::one()) * rad_to_deg(T::one());
    Ok(Array2::from_shape_fn((q, q), |(i, j)| (inv[[i, j]].re + inv[[j, i]].re) / T::of(2.0) * scale * to_deg2))
}
