//! Least-squares problem in the eigenbasis of the covariance.
//!
//! Covariates are sampled coordinatewise with variance `sigma_i`, so every
//! vector here (covariates, `w*`, iterates) is expressed in the eigenbasis of
//! `Sigma` and the population covariance is diagonal.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};
use crate::rng;

/// Eigenvalues of the population covariance, strictly positive and nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    decay_nu: Option<f64>,
    kappa_sq: f64,
}

impl Spectrum {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return domain("spectrum must have at least one eigenvalue");
        }
        if let Some(bad) = eigenvalues.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return domain(format!(
                "eigenvalues must be positive and finite, got {bad}"
            ));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return domain("eigenvalues must be nonincreasing");
        }
        let kappa_sq = eigenvalues.iter().sum();
        Ok(Self {
            eigenvalues,
            decay_nu: None,
            kappa_sq,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Largest eigenvalue.
    pub fn top(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn trace(&self) -> f64 {
        self.kappa_sq
    }

    /// `Tr[Sigma^alpha]`
    pub fn trace_pow(&self, alpha: f64) -> f64 {
        self.eigenvalues.iter().map(|s| s.powf(alpha)).sum()
    }

    /// Decay exponent the spectrum was generated with, if any.
    pub fn decay_nu(&self) -> Option<f64> {
        self.decay_nu
    }

    /// Operational `kappa^2`: the trace `E||X||^2`, used for every step-size guard.
    ///
    /// Gaussian covariates are unbounded, so the almost-sure bound `||X||^2 <= kappa^2`
    /// has no finite value; the trace is its deterministic stand-in.
    pub fn kappa_sq(&self) -> f64 {
        self.kappa_sq
    }
}

/// Power-law spectrum `sigma_i = i^{-1/nu}`, `i = 1..=d`.
pub fn make_spectrum(d: usize, nu: f64) -> Result<Spectrum> {
    if d == 0 {
        return domain("dimension must be at least 1");
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return domain(format!("decay nu must lie in (0, 1], got {nu}"));
    }
    let eig = (1..=d).map(|i| (i as f64).powf(-1.0 / nu)).collect();
    let mut s = Spectrum::new(eig)?;
    s.decay_nu = Some(nu);
    Ok(s)
}

/// `w* = Sigma^r v*` in eigenbasis coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceVector {
    pub coeffs: Vec<f64>,
    pub r: f64,
    /// Bound on `||v*||`.
    pub radius: f64,
}

impl SourceVector {
    /// Builds `w*_i = sigma_i^r * base_i` and records `radius = ||base||`.
    pub fn from_base(spectrum: &Spectrum, r: f64, base: &[f64]) -> Result<Self> {
        if !(r >= 0.0 && r.is_finite()) {
            return domain(format!("smoothness r must be nonnegative, got {r}"));
        }
        if base.len() != spectrum.len() {
            return Err(Error::LengthMismatch {
                expected: spectrum.len(),
                got: base.len(),
            });
        }
        let coeffs: Vec<f64> = spectrum
            .eigenvalues()
            .iter()
            .zip(base)
            .map(|(s, b)| s.powf(r) * b)
            .collect();
        if coeffs.iter().any(|c| !c.is_finite()) {
            return domain("source coefficients are not finite");
        }
        Ok(Self {
            coeffs,
            r,
            radius: base.iter().map(|b| b * b).sum::<f64>().sqrt(),
        })
    }

    /// Recovers `||v*|| = ||Sigma^{-r} w*||`.
    pub fn base_norm(&self, spectrum: &Spectrum) -> f64 {
        spectrum
            .eigenvalues()
            .iter()
            .zip(&self.coeffs)
            .map(|(s, c)| (c / s.powf(self.r)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// `w* = Sigma^r e` with `e` the all-ones vector.
pub fn make_source(spectrum: &Spectrum, r: f64) -> Result<SourceVector> {
    SourceVector::from_base(spectrum, r, &vec![1.0; spectrum.len()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub spectrum: Spectrum,
    pub source: SourceVector,
    pub noise_std: f64,
    /// Almost-sure label bound. `None` for Gaussian noise, which has no such bound.
    pub label_bound: Option<f64>,
}

impl Problem {
    pub fn new(spectrum: Spectrum, source: SourceVector, noise_std: f64) -> Result<Self> {
        if source.len() != spectrum.len() {
            return Err(Error::LengthMismatch {
                expected: spectrum.len(),
                got: source.len(),
            });
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return domain(format!("noise std must be nonnegative, got {noise_std}"));
        }
        Ok(Self {
            spectrum,
            source,
            noise_std,
            label_bound: None,
        })
    }

    /// Power-law spectrum with `w* = Sigma^r e` and the given noise level.
    pub fn power_law(d: usize, nu: f64, r: f64, noise_std: f64) -> Result<Self> {
        let spectrum = make_spectrum(d, nu)?;
        let source = make_source(&spectrum, r)?;
        Self::new(spectrum, source, noise_std)
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    /// `h = Sigma w*`, the right-hand side of the normal equation.
    pub fn h(&self) -> Vec<f64> {
        self.spectrum
            .eigenvalues()
            .iter()
            .zip(&self.source.coeffs)
            .map(|(s, w)| s * w)
            .collect()
    }
}

/// `n` samples `(x_j, y_j)`, covariates stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    pub seed: u64,
    pub generator_id: String,
}

impl Dataset {
    /// Assembles a dataset from explicit rows. Used for hand-built fixtures.
    pub fn from_rows(rows: &[Vec<f64>], ys: &[f64]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if rows.len() != ys.len() {
            return Err(Error::LengthMismatch {
                expected: rows.len(),
                got: ys.len(),
            });
        }
        let d = rows[0].len();
        let mut xs = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            xs.extend_from_slice(row);
        }
        if xs.iter().chain(ys).any(|v| !v.is_finite()) {
            return domain("dataset entries must be finite");
        }
        Ok(Self {
            n: rows.len(),
            d,
            xs,
            ys: ys.to_vec(),
            seed: 0,
            generator_id: "explicit".to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn x(&self, j: usize) -> &[f64] {
        &self.xs[j * self.d..(j + 1) * self.d]
    }

    pub fn y(&self, j: usize) -> f64 {
        self.ys[j]
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    /// Writes `sample_index, x_1..x_d, y` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_index".to_string()];
        header.extend((1..=self.d).map(|i| format!("x_{i}")));
        header.push("y".to_string());
        w.write_record(&header)?;
        for j in 0..self.n {
            let mut rec = vec![j.to_string()];
            rec.extend(self.x(j).iter().map(|v| format!("{v:?}")));
            rec.push(format!("{:?}", self.ys[j]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws `n` i.i.d. samples `x ~ N(0, Sigma)`, `y = <w*, x> + noise_std * z`.
///
/// Draw order per sample: `d` standard normals for the coordinates, then one
/// for the noise, all from the stream `(seed, "dataset")`.
pub fn sample_dataset(problem: &Problem, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = problem.dim();
    let scales: Vec<f64> = problem
        .spectrum
        .eigenvalues()
        .iter()
        .map(|s| s.sqrt())
        .collect();
    let w = &problem.source.coeffs;
    let mut rng = rng::stream(seed, "dataset", &[]);
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let start = xs.len();
        for &sc in &scales {
            let z: f64 = StandardNormal.sample(&mut rng);
            xs.push(sc * z);
        }
        let dot: f64 = xs[start..].iter().zip(w).map(|(a, b)| a * b).sum();
        let z: f64 = StandardNormal.sample(&mut rng);
        ys.push(if problem.noise_std == 0.0 {
            dot
        } else {
            dot + problem.noise_std * z
        });
    }
    Ok(Dataset {
        n,
        d,
        xs,
        ys,
        seed,
        generator_id: rng::GENERATOR_ID.to_string(),
    })
}

/// `Sigma_hat = (1/n) sum x_j x_j^T` and `h_hat = (1/n) sum y_j x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub sigma_hat: DMatrix<f64>,
    pub h_hat: DVector<f64>,
}

impl EmpiricalMoments {
    pub fn dim(&self) -> usize {
        self.h_hat.len()
    }

    /// Largest eigenvalue of `Sigma_hat`.
    pub fn top_eigenvalue(&self) -> f64 {
        self.sigma_hat
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn empirical_moments(dataset: &Dataset) -> Result<EmpiricalMoments> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n, d) = (dataset.len(), dataset.dim());
    let mut sigma_hat = DMatrix::<f64>::zeros(d, d);
    let mut h_hat = DVector::<f64>::zeros(d);
    for j in 0..n {
        let x = dataset.x(j);
        let y = dataset.y(j);
        for a in 0..d {
            h_hat[a] += y * x[a];
            for b in a..d {
                sigma_hat[(a, b)] += x[a] * x[b];
            }
        }
    }
    let inv = 1.0 / n as f64;
    for a in 0..d {
        for b in a..d {
            let v = sigma_hat[(a, b)] * inv;
            sigma_hat[(a, b)] = v;
            sigma_hat[(b, a)] = v;
        }
    }
    h_hat *= inv;
    Ok(EmpiricalMoments { sigma_hat, h_hat })
}

/// `N(lambda) = Tr[(Sigma + lambda)^{-1} Sigma]`.
pub fn effective_dimension(spectrum: &Spectrum, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return domain(format!("lambda must be positive, got {lambda}"));
    }
    Ok(spectrum
        .eigenvalues()
        .iter()
        .map(|s| s / (s + lambda))
        .sum())
}

/// `||Sigma^{1/2} (w - w*)||^2`.
pub fn excess_risk(spectrum: &Spectrum, w: &[f64], source: &SourceVector) -> Result<f64> {
    seminorm_sq(spectrum, w, &source.coeffs)
}

/// `||Sigma^{1/2} (a - b)||^2` for eigenbasis vectors.
pub fn seminorm_sq(spectrum: &Spectrum, a: &[f64], b: &[f64]) -> Result<f64> {
    for v in [a, b] {
        if v.len() != spectrum.len() {
            return Err(Error::LengthMismatch {
                expected: spectrum.len(),
                got: v.len(),
            });
        }
    }
    Ok(spectrum
        .eigenvalues()
        .iter()
        .zip(a.iter().zip(b))
        .map(|(s, (x, y))| s * (x - y) * (x - y))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_examples() {
        let s = make_spectrum(3, 0.5).unwrap();
        assert_eq!(s.eigenvalues()[..2], [1.0, 0.25]);
        assert!((s.eigenvalues()[2] - 1.0 / 9.0).abs() < 1e-16);
        assert_eq!(make_spectrum(1, 0.3).unwrap().eigenvalues(), &[1.0]);
        let h = make_spectrum(4, 1.0).unwrap();
        for (i, v) in h.eigenvalues().iter().enumerate() {
            assert!((v - 1.0 / (i + 1) as f64).abs() < 1e-16);
        }
        assert_eq!(s.decay_nu(), Some(0.5));
        assert!((s.kappa_sq() - (1.0 + 0.25 + 1.0 / 9.0)).abs() < 1e-15);
        assert!(make_spectrum(3, 0.0).is_err());
        assert!(make_spectrum(3, 1.5).is_err());
        assert!(make_spectrum(0, 0.5).is_err());
        assert!(Spectrum::new(vec![1.0, 2.0]).is_err());
        assert!(Spectrum::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn source_examples() {
        let s = make_spectrum(3, 0.5).unwrap();
        let w = make_source(&s, 1.0).unwrap();
        assert_eq!(w.coeffs, s.eigenvalues());
        assert!((w.radius - 3f64.sqrt()).abs() < 1e-15);
        assert!(w.base_norm(&s) <= w.radius + 1e-12);
        assert_eq!(make_source(&s, 0.0).unwrap().coeffs, vec![1.0; 3]);
        let s2 = Spectrum::new(vec![1.0, 0.25]).unwrap();
        assert_eq!(make_source(&s2, 2.0).unwrap().coeffs, vec![1.0, 0.0625]);
        assert!(make_source(&s2, -1.0).is_err());
    }

    #[test]
    fn noiseless_labels_are_exact() {
        let p = Problem::power_law(5, 0.5, 1.0, 0.0).unwrap();
        let ds = sample_dataset(&p, 20, 3).unwrap();
        for j in 0..ds.len() {
            let dot: f64 = ds
                .x(j)
                .iter()
                .zip(&p.source.coeffs)
                .map(|(a, b)| a * b)
                .sum();
            assert_eq!(ds.y(j), dot);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = Problem::power_law(8, 0.5, 0.5, 1.0).unwrap();
        let a = sample_dataset(&p, 30, 99).unwrap();
        let b = sample_dataset(&p, 30, 99).unwrap();
        let c = sample_dataset(&p, 30, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.ys(), c.ys());
        assert_eq!(a.generator_id, rng::GENERATOR_ID);
        assert!(sample_dataset(&p, 0, 1).is_err());
    }

    #[test]
    fn sample_variances_match_spectrum() {
        let p = Problem::power_law(100, 0.5, 0.5, 1.0).unwrap();
        let ds = sample_dataset(&p, 10_000, 5).unwrap();
        for i in 0..10 {
            let var: f64 = (0..ds.len()).map(|j| ds.x(j)[i].powi(2)).sum::<f64>() / ds.len() as f64;
            let s = p.spectrum.eigenvalues()[i];
            assert!((var - s).abs() < 0.1 * s, "coord {i}: {var} vs {s}");
        }
    }

    #[test]
    fn moments_examples() {
        let one = Dataset::from_rows(&[vec![1.0, 0.0]], &[2.0]).unwrap();
        let m = empirical_moments(&one).unwrap();
        assert_eq!(
            m.sigma_hat,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(m.h_hat, DVector::from_vec(vec![2.0, 0.0]));

        let two = Dataset::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0]).unwrap();
        let m = empirical_moments(&two).unwrap();
        assert_eq!(
            m.sigma_hat,
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5])
        );
        assert_eq!(m.h_hat, DVector::from_vec(vec![0.5, 0.5]));
        assert!(Dataset::from_rows(&[], &[]).is_err());
    }

    #[test]
    fn moments_are_psd_and_consistent() {
        let p = Problem::power_law(6, 0.5, 1.0, 0.0).unwrap();
        let ds = sample_dataset(&p, 5000, 11).unwrap();
        let m = empirical_moments(&ds).unwrap();
        assert!((&m.sigma_hat - m.sigma_hat.transpose()).amax() < 1e-12);
        let eig = m.sigma_hat.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-10));
        // Noiseless: h_hat = Sigma_hat w* up to rounding.
        let w = DVector::from_vec(p.source.coeffs.clone());
        let direct = &m.sigma_hat * &w;
        assert!((direct - &m.h_hat).amax() < 1e-12);
    }

    #[test]
    fn frobenius_gap_shrinks_with_n() {
        let p = Problem::power_law(20, 0.5, 0.5, 1.0).unwrap();
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(p.spectrum.eigenvalues().to_vec()));
        let median_gap = |n: usize| {
            let mut gaps: Vec<f64> = (0..7)
                .map(|seed| {
                    let m = empirical_moments(&sample_dataset(&p, n, seed).unwrap()).unwrap();
                    (&m.sigma_hat - &sigma).norm()
                })
                .collect();
            gaps.sort_by(f64::total_cmp);
            gaps[3]
        };
        let (a, b, c) = (median_gap(100), median_gap(1000), median_gap(10_000));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn effective_dimension_examples() {
        let one = Spectrum::new(vec![1.0]).unwrap();
        assert_eq!(effective_dimension(&one, 1.0).unwrap(), 0.5);
        let two = Spectrum::new(vec![1.0, 0.5]).unwrap();
        assert!((effective_dimension(&two, 0.5).unwrap() - 7.0 / 6.0).abs() < 1e-15);
        assert!(effective_dimension(&two, 1e12).unwrap() < 1e-11);
        assert!(effective_dimension(&two, 0.0).is_err());
    }

    #[test]
    fn effective_dimension_decay_band() {
        let s = make_spectrum(1000, 0.5).unwrap();
        let lambdas = crate::spectral::log_grid(1e-4, 1.0, 30).unwrap();
        let mut prev = 0.0;
        let mut band = (f64::INFINITY, 0.0f64);
        for &l in &lambdas {
            // grid runs from 1 down to 1e-4, so N increases
            let nl = effective_dimension(&s, l).unwrap();
            assert!(nl > prev && nl <= 1000.0);
            prev = nl;
            let scaled = nl * l.powf(0.5);
            band = (band.0.min(scaled), band.1.max(scaled));
        }
        assert!(band.1 / band.0 < 3.0, "{band:?}");
    }

    #[test]
    fn excess_risk_examples() {
        let s = Spectrum::new(vec![4.0]).unwrap();
        let w = SourceVector::from_base(&s, 0.0, &[0.0]).unwrap();
        assert_eq!(excess_risk(&s, &[0.5], &w).unwrap(), 1.0);
        assert_eq!(excess_risk(&s, &[0.0], &w).unwrap(), 0.0);
        let s2 = Spectrum::new(vec![1.0, 0.25]).unwrap();
        let w2 = SourceVector::from_base(&s2, 0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(excess_risk(&s2, &[1.0, 2.0], &w2).unwrap(), 2.0);
        assert!(excess_risk(&s2, &[1.0], &w2).is_err());
    }

    #[test]
    fn dataset_csv_export() {
        let ds = Dataset::from_rows(&[vec![1.0, 0.5]], &[2.0]).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample_index,x_1,x_2,y\n0,1.0,0.5,2.0\n"
        );
    }
}
