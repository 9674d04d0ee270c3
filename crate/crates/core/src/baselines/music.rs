//! Root-MUSIC and the grid-search MUSIC pseudo-spectrum used to check it.

use ndarray::{s, Array2};
use num_complex::Complex;
use num_traits::Zero;

use crate::array::{steering_vector, ArrayConfig, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::linalg::{conj_transpose, hermitian_eigh, poly_roots};
use crate::scalar::{rad_to_deg, Real};

type C<T> = Complex<T>;

/// Eigenvectors of the `M - q` smallest eigenvalues, as columns.
pub fn noise_subspace<T: Real>(r: &CovarianceMatrix<T>, q: usize) -> Result<Array2<C<T>>> {
    let m = r.dim();
    if q == 0 || q >= m {
        return Err(Error::Config(format!("root-MUSIC needs 0 < Q < M; got Q={q}, M={m}")));
    }
    let (_, vectors) = hermitian_eigh(r.entries())?;
    Ok(vectors.slice(s![.., ..m - q]).to_owned())
}

/// Coefficients (ascending powers) of `z^(M-1) a(z)^H E_n E_n^H a(z)`, a
/// polynomial of degree `2(M-1)`; entry `k` sums diagonal `k - (M-1)` of the
/// noise projector.
pub fn root_music_polynomial<T: Real>(r: &CovarianceMatrix<T>, q: usize) -> Result<Vec<C<T>>> {
    let en = noise_subspace(r, q)?;
    let proj = en.dot(&conj_transpose(&en));
    let m = proj.nrows();
    let mut coeffs = vec![C::<T>::zero(); 2 * m - 1];
    for i in 0..m {
        for j in 0..m {
            // z^(j - i) term
            coeffs[j + m - 1 - i] = coeffs[j + m - 1 - i] + proj[[i, j]];
        }
    }
    Ok(coeffs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootMusic<T> {
    /// Estimates in degrees, ascending.
    pub doas_deg: Vec<T>,
    /// The roots the estimates came from, in the same order.
    pub selected_roots: Vec<C<T>>,
    /// Every root of the polynomial.
    pub all_roots: Vec<C<T>>,
    /// Set when an arcsine argument fell outside `[-1, 1]` and was clamped.
    pub clamped: bool,
}

/// Root-MUSIC: the `q` polynomial roots strictly inside the unit circle and
/// closest to it, mapped to angles through the element spacing.
pub fn root_music<T: Real>(r: &CovarianceMatrix<T>, q: usize, cfg: &ArrayConfig<T>) -> Result<RootMusic<T>> {
    if r.dim() != cfg.num_elements {
        return Err(Error::Dimension { expected: cfg.num_elements, got: r.dim() });
    }
    let coeffs = root_music_polynomial(r, q)?;
    let all_roots = poly_roots(&coeffs)?;
    let mut inside: Vec<C<T>> = all_roots.iter().copied().filter(|z| z.norm() < T::one()).collect();
    inside.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(std::cmp::Ordering::Equal));
    if inside.len() < q {
        return Err(Error::Numerical(format!("only {} roots inside the unit circle, need {q}", inside.len())));
    }
    inside.truncate(q);

    let mut clamped = false;
    let mut pairs: Vec<(T, C<T>)> = inside
        .into_iter()
        .map(|z| {
            let s = z.arg() / (T::TAU() * cfg.spacing_wavelengths);
            if s.abs() > T::one() {
                clamped = true;
            }
            (rad_to_deg(s.max(-T::one()).min(T::one()).asin()), z)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    Ok(RootMusic {
        doas_deg: pairs.iter().map(|p| p.0).collect(),
        selected_roots: pairs.iter().map(|p| p.1).collect(),
        all_roots,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MusicSpectrum<T> {
    pub angles_deg: Vec<T>,
    /// `1 / ||E_n^H a(theta)||^2` at each grid angle.
    pub values: Vec<T>,
    /// Indices of interior local maxima, strongest first.
    pub peaks: Vec<usize>,
}

impl<T: Real> MusicSpectrum<T> {
    /// Angles of the `q` strongest peaks, ascending.
    pub fn peak_doas(&self, q: usize) -> Vec<T> {
        let mut doas: Vec<T> = self.peaks.iter().take(q).map(|&i| self.angles_deg[i]).collect();
        doas.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        doas
    }
}

/// MUSIC pseudo-spectrum on `theta_min, theta_min + step, ...` below `theta_max`.
pub fn music_spectrum<T: Real>(r: &CovarianceMatrix<T>, q: usize, cfg: &ArrayConfig<T>, grid_step: T) -> Result<MusicSpectrum<T>> {
    if !(grid_step > T::zero()) {
        return Err(Error::Config("grid step must be positive".into()));
    }
    let en = noise_subspace(r, q)?;
    let en_h = conj_transpose(&en);
    let count = ((cfg.theta_max - cfg.theta_min) / grid_step).ceil().to_usize().unwrap_or(0);
    let mut angles = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let theta = cfg.theta_min + T::of_usize(i) * grid_step;
        if theta >= cfg.theta_max {
            break;
        }
        let proj = en_h.dot(&steering_vector(cfg, theta));
        let denom: T = proj.iter().map(|z| z.norm_sqr()).sum();
        angles.push(theta);
        values.push(T::one() / denom.max(T::min_positive_value()));
    }
    let mut peaks: Vec<usize> = (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1])
        .collect();
    peaks.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(MusicSpectrum { angles_deg: angles, values, peaks })
}
