//! Narrowband uniform-linear-array signal model: steering vectors, snapshot
//! synthesis, covariance estimation and the real feature vector.

use ndarray::{Array1, Array2};
use num_complex::Complex;
use num_traits::Zero;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::scalar::{deg_to_rad, Real};

type C<T> = Complex<T>;

/// ULA geometry and the angular search domain `[theta_min, theta_max)` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig<T> {
    pub num_elements: usize,
    pub spacing_wavelengths: T,
    pub theta_min: T,
    pub theta_max: T,
}

impl<T: Real> ArrayConfig<T> {
    pub fn new(num_elements: usize, spacing_wavelengths: T, theta_min: T, theta_max: T) -> Result<Self> {
        if num_elements < 2 {
            return Err(Error::Config(format!("array needs at least 2 elements, got {num_elements}")));
        }
        if !(spacing_wavelengths > T::zero()) || !spacing_wavelengths.is_finite() {
            return Err(Error::Config(format!("element spacing must be positive, got {spacing_wavelengths}")));
        }
        if !(theta_min < theta_max) || !theta_min.is_finite() || !theta_max.is_finite() {
            return Err(Error::Config(format!("empty angular domain [{theta_min}, {theta_max})")));
        }
        Ok(Self { num_elements, spacing_wavelengths, theta_min, theta_max })
    }

    /// Half-wavelength ULA over `[-60, 60)` degrees.
    pub fn half_wavelength(num_elements: usize) -> Result<Self> {
        Self::new(num_elements, T::of(0.5), T::of(-60.0), T::of(60.0))
    }

    /// Length of the real feature vector, `M (M - 1)`.
    pub fn feature_dim(&self) -> usize {
        self.num_elements * (self.num_elements - 1)
    }

    pub fn contains(&self, theta_deg: T) -> bool {
        theta_deg >= self.theta_min && theta_deg < self.theta_max
    }

    pub(crate) fn check_sources(&self, src: &SourceSet<T>) -> Result<()> {
        for &theta in &src.doas_deg {
            if !self.contains(theta) {
                return Err(Error::OutOfDomain { angle: theta.to64(), min: self.theta_min.to64(), max: self.theta_max.to64() });
            }
        }
        Ok(())
    }
}

/// Far-field narrowband emitters plus white noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet<T> {
    doas_deg: Vec<T>,
    powers: Vec<T>,
    noise_power: T,
}

impl<T: Real> SourceSet<T> {
    pub fn new(doas_deg: Vec<T>, powers: Vec<T>, noise_power: T) -> Result<Self> {
        if doas_deg.is_empty() {
            return Err(Error::Config("source set must contain at least one source".into()));
        }
        if doas_deg.len() != powers.len() {
            return Err(Error::Dimension { expected: doas_deg.len(), got: powers.len() });
        }
        if doas_deg.iter().any(|d| !d.is_finite()) {
            return Err(Error::Config("DOAs must be finite".into()));
        }
        if doas_deg.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("DOAs must be strictly increasing: {doas_deg:?}")));
        }
        if powers.iter().any(|&p| !(p > T::zero()) || !p.is_finite()) {
            return Err(Error::Config("source powers must be positive".into()));
        }
        if !(noise_power >= T::zero()) || !noise_power.is_finite() {
            return Err(Error::Config("noise power must be non-negative".into()));
        }
        Ok(Self { doas_deg, powers, noise_power })
    }

    /// Unit-power sources with noise set for the requested per-source SNR.
    pub fn unit_power(doas_deg: Vec<T>, snr_db: T) -> Result<Self> {
        let q = doas_deg.len();
        let noise = T::of(10.0).powf(-snr_db / T::of(10.0));
        Self::new(doas_deg, vec![T::one(); q], noise)
    }

    /// Unit-power, noise-free sources.
    pub fn noiseless(doas_deg: Vec<T>) -> Result<Self> {
        let q = doas_deg.len();
        Self::new(doas_deg, vec![T::one(); q], T::zero())
    }

    pub fn doas_deg(&self) -> &[T] {
        &self.doas_deg
    }

    pub fn powers(&self) -> &[T] {
        &self.powers
    }

    pub fn noise_power(&self) -> T {
        self.noise_power
    }

    pub fn len(&self) -> usize {
        self.doas_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doas_deg.is_empty()
    }

    /// `10 log10(power_q / noise_power)`; infinite when noise-free.
    pub fn snr_db(&self, q: usize) -> T {
        T::of(10.0) * (self.powers[q] / self.noise_power).log10()
    }
}

/// `T` snapshots stored as the rows of a `T x M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBatch<T> {
    samples: Array2<C<T>>,
}

impl<T: Real> SnapshotBatch<T> {
    pub fn from_rows(samples: Array2<C<T>>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Config("snapshot batch needs at least one snapshot".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &Array2<C<T>> {
        &self.samples
    }

    pub fn snapshot_count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_elements(&self) -> usize {
        self.samples.ncols()
    }
}

/// Hermitian positive-semidefinite `M x M` covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix<T> {
    entries: Array2<C<T>>,
}

impl<T: Real> CovarianceMatrix<T> {
    /// Wraps an arbitrary matrix; only `extract_features` checks squareness.
    pub fn from_entries(entries: Array2<C<T>>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &Array2<C<T>> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<C<T>> {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Largest `|R_ij - conj(R_ji)|` relative to the largest entry.
    pub fn hermitian_defect(&self) -> T {
        let n = self.entries.nrows();
        let scale = self.entries.iter().map(|z| z.norm()).fold(T::zero(), T::max);
        if scale == T::zero() {
            return T::zero();
        }
        let mut worst = T::zero();
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.entries[[i, j]] - self.entries[[j, i]].conj()).norm());
            }
        }
        worst / scale
    }
}

/// Real feature vector of length `M (M - 1)`: real parts of the strictly
/// upper-triangular entries in row-major order, followed by their imaginary
/// parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    values: Array1<T>,
}

impl<T: Real> FeatureVector<T> {
    pub fn from_values(values: Array1<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array1<T> {
        &self.values
    }

    pub fn as_slice(&self) -> &[T] {
        self.values.as_slice().expect("feature storage is contiguous")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Array1<T> {
        self.values
    }
}

impl<T: Real> std::ops::Add for &FeatureVector<T> {
    type Output = FeatureVector<T>;
    fn add(self, rhs: Self) -> FeatureVector<T> {
        FeatureVector { values: &self.values + &rhs.values }
    }
}

/// Array manifold `a(theta)`; element `m` is `exp(j 2 pi d m sin theta)`.
pub fn steering_vector<T: Real>(cfg: &ArrayConfig<T>, theta_deg: T) -> Array1<C<T>> {
    let phase = T::TAU() * cfg.spacing_wavelengths * deg_to_rad(theta_deg).sin();
    Array1::from_shape_fn(cfg.num_elements, |m| {
        if m == 0 {
            C::new(T::one(), T::zero())
        } else {
            C::from_polar(T::one(), phase * T::of_usize(m))
        }
    })
}

/// Derivative of the steering vector with respect to the angle in radians.
pub fn steering_derivative<T: Real>(cfg: &ArrayConfig<T>, theta_deg: T) -> Array1<C<T>> {
    let rad = deg_to_rad(theta_deg);
    let scale = T::TAU() * cfg.spacing_wavelengths * rad.cos();
    let a = steering_vector(cfg, theta_deg);
    Array1::from_shape_fn(cfg.num_elements, |m| a[m] * C::new(T::zero(), scale * T::of_usize(m)))
}

/// `M x Q` steering matrix with one column per source.
pub fn steering_matrix<T: Real>(cfg: &ArrayConfig<T>, doas_deg: &[T]) -> Array2<C<T>> {
    let mut a = Array2::zeros((cfg.num_elements, doas_deg.len()));
    for (q, &theta) in doas_deg.iter().enumerate() {
        a.column_mut(q).assign(&steering_vector(cfg, theta));
    }
    a
}

fn complex_gaussian<T: Real, R: Rng>(rng: &mut R, variance: f64) -> C<T> {
    let sd = (variance * 0.5).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C::new(T::of(re * sd), T::of(im * sd))
}

/// Draws `snapshots` array outputs with i.i.d. circular Gaussian baseband
/// signals and white circular Gaussian noise.
pub fn synth_snapshots<T: Real>(
    cfg: &ArrayConfig<T>,
    src: &SourceSet<T>,
    snapshots: usize,
    stream: SeedStream,
) -> Result<SnapshotBatch<T>> {
    if snapshots == 0 {
        return Err(Error::Config("snapshot count must be at least 1".into()));
    }
    cfg.check_sources(src)?;
    let m = cfg.num_elements;
    let steering = steering_matrix(cfg, src.doas_deg());
    let mut rng = stream.rng();
    let mut samples = Array2::<C<T>>::zeros((snapshots, m));
    let noise = src.noise_power().to64();
    let mut s = vec![C::<T>::zero(); src.len()];
    for t in 0..snapshots {
        for (q, slot) in s.iter_mut().enumerate() {
            *slot = complex_gaussian(&mut rng, src.powers()[q].to64());
        }
        for e in 0..m {
            let mut y = C::zero();
            for (q, &sq) in s.iter().enumerate() {
                y = y + steering[[e, q]] * sq;
            }
            if noise > 0.0 {
                y = y + complex_gaussian::<T, _>(&mut rng, noise);
            }
            samples[[t, e]] = y;
        }
    }
    SnapshotBatch::from_rows(samples)
}

/// `(1/T) sum_t y(t) y(t)^H`, with the lower triangle mirrored from the upper.
pub fn sample_covariance<T: Real>(batch: &SnapshotBatch<T>) -> CovarianceMatrix<T> {
    let y = batch.samples();
    let (t_count, m) = y.dim();
    let inv_t = T::one() / T::of_usize(t_count);
    let mut r = Array2::<C<T>>::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let mut acc = C::zero();
            for t in 0..t_count {
                acc = acc + y[[t, i]] * y[[t, j]].conj();
            }
            let v = acc * inv_t;
            if i == j {
                r[[i, i]] = C::new(v.re, T::zero());
            } else {
                r[[i, j]] = v;
                r[[j, i]] = v.conj();
            }
        }
    }
    CovarianceMatrix::from_entries(r)
}

/// Statistical covariance `sum_q p_q a(theta_q) a(theta_q)^H + noise I`.
pub fn analytic_covariance<T: Real>(cfg: &ArrayConfig<T>, src: &SourceSet<T>) -> Result<CovarianceMatrix<T>> {
    cfg.check_sources(src)?;
    let m = cfg.num_elements;
    let mut r = Array2::<C<T>>::zeros((m, m));
    for (q, &theta) in src.doas_deg().iter().enumerate() {
        let a = steering_vector(cfg, theta);
        let p = src.powers()[q];
        for i in 0..m {
            for j in i..m {
                let v = (a[i] * a[j].conj()) * p;
                if i == j {
                    r[[i, i]].re += v.re;
                } else {
                    r[[i, j]] = r[[i, j]] + v;
                }
            }
        }
    }
    for i in 0..m {
        r[[i, i]].re += src.noise_power();
        for j in i + 1..m {
            r[[j, i]] = r[[i, j]].conj();
        }
    }
    Ok(CovarianceMatrix::from_entries(r))
}

/// Stacks the strictly upper-triangular entries of `r` into a real vector.
pub fn extract_features<T: Real>(r: &CovarianceMatrix<T>) -> Result<FeatureVector<T>> {
    let (rows, cols) = r.entries().dim();
    if rows != cols {
        return Err(Error::Dimension { expected: rows, got: cols });
    }
    let m = rows;
    let half = m * (m.saturating_sub(1)) / 2;
    let mut values = Array1::zeros(2 * half);
    let mut k = 0;
    for i in 0..m {
        for j in i + 1..m {
            let z = r.entries()[[i, j]];
            values[k] = z.re;
            values[half + k] = z.im;
            k += 1;
        }
    }
    Ok(FeatureVector::from_values(values))
}

/// Noise-free feature of unit-power sources at the given angles.
pub fn noiseless_features<T: Real>(cfg: &ArrayConfig<T>, doas_deg: &[T]) -> Result<FeatureVector<T>> {
    let src = SourceSet::noiseless(doas_deg.to_vec())?;
    extract_features(&analytic_covariance(cfg, &src)?)
}
