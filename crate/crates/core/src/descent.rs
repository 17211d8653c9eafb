//! Gradient iterations for least squares, each tail-averaged.
//!
//! All three start from the origin and move against the gradient:
//!
//! * population GD, `u_{t+1} = u_t - gamma (Sigma u_t - h)`, via its spectral form;
//! * batch GD on empirical moments, `v_{t+1} = v_t - gamma (Sigma_hat v_t - h_hat)`;
//! * mini-batch SGD, `w_{t+1} = w_t - (gamma/b) sum_{j in B_t} (<w_t, x_j> - y_j) x_j`,
//!   with `B_t` drawn uniformly with replacement.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::model::{empirical_moments, seminorm_sq, Dataset, EmpiricalMoments, Problem, Spectrum};
use crate::rng;
use crate::spectral::{self, FilterKind, FilterParams};

/// Iterates whose Euclidean norm exceeds this are reported as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// How each SGD step picks its mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// `b` indices drawn i.i.d. uniformly from `0..n`, in sequence, from the run's stream.
    #[default]
    UniformWithReplacement,
    /// Every step uses the full dataset. Reduces SGD to batch GD; used as a diagnostic.
    FullSweep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub tail_start: usize,
    pub seed: u64,
    pub sampling: Sampling,
}

impl SgdConfig {
    pub fn new(
        gamma: f64,
        batch_size: usize,
        iterations: usize,
        tail_start: usize,
        seed: u64,
    ) -> Result<Self> {
        FilterParams::new(gamma, iterations, tail_start)?;
        if batch_size == 0 {
            return domain("batch size must be at least 1");
        }
        Ok(Self {
            gamma,
            batch_size,
            iterations,
            tail_start,
            seed,
            sampling: Sampling::UniformWithReplacement,
        })
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams::new(self.gamma, self.iterations, self.tail_start)
            .expect("validated at construction")
    }

    /// `ceil(b T / n)`
    pub fn passes(&self, n: usize) -> usize {
        (self.batch_size * self.iterations).div_ceil(n.max(1))
    }
}

/// Running mean of the iterates `t = S+1..=T`.
///
/// Updated incrementally, so constant iterates average to exactly that constant.
#[derive(Debug, Clone)]
pub struct TailAverager {
    tail_start: usize,
    iterations: usize,
    mean: Vec<f64>,
    count: usize,
    last_t: usize,
}

impl TailAverager {
    pub fn new(tail_start: usize, iterations: usize, dim: usize) -> Self {
        Self {
            tail_start,
            iterations,
            mean: vec![0.0; dim],
            count: 0,
            last_t: 0,
        }
    }

    pub fn for_params(p: &FilterParams, dim: usize) -> Self {
        Self::new(p.tail_start(), p.iterations(), dim)
    }

    /// Feeds iterate `w_t`. Indices must strictly increase; out-of-window iterates are ignored.
    pub fn push(&mut self, t: usize, w: &[f64]) -> Result<()> {
        if t <= self.last_t {
            return domain(format!("iterate index {t} not after {}", self.last_t));
        }
        if w.len() != self.mean.len() {
            return Err(Error::LengthMismatch {
                expected: self.mean.len(),
                got: w.len(),
            });
        }
        self.last_t = t;
        if t > self.tail_start && t <= self.iterations {
            self.count += 1;
            let c = self.count as f64;
            for (m, v) in self.mean.iter_mut().zip(w) {
                *m += (v - *m) / c;
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// The tail average. Errors unless the whole window has been fed.
    pub fn average(&self) -> Result<Vec<f64>> {
        let expected = self.iterations - self.tail_start;
        if self.count != expected {
            return domain(format!(
                "tail window incomplete: {} of {expected} iterates",
                self.count
            ));
        }
        Ok(self.mean.clone())
    }
}

/// `u_bar_{S,T} = G_{S,T}(Sigma) Sigma w*`, computed as `(1 - R_{S,T}(sigma_i)) w*_i`.
pub fn population_gd_tail_average(problem: &Problem, p: &FilterParams) -> Result<Vec<f64>> {
    let residual = spectral::apply_filter(
        &problem.spectrum,
        &problem.source.coeffs,
        FilterKind::TailResidual,
        p,
    )?;
    Ok(problem
        .source
        .coeffs
        .iter()
        .zip(residual)
        .map(|(w, r)| w - r)
        .collect())
}

/// One batch GD step `v <- v - gamma (Sigma_hat v - h_hat)`, written into `next`.
fn batch_step(m: &EmpiricalMoments, gamma: f64, v: &[f64], next: &mut [f64]) {
    for (a, out) in next.iter_mut().enumerate() {
        let grad = m
            .sigma_hat
            .row(a)
            .iter()
            .zip(v)
            .fold(-m.h_hat[a], |g, (s, w)| g + s * w);
        *out = v[a] - gamma * grad;
    }
}

/// Callback receiving `(t, w_t)` after every step.
pub type TrajectoryHook<'a> = &'a mut dyn FnMut(usize, &[f64]);

fn run_batch_recursion(
    m: &EmpiricalMoments,
    p: &FilterParams,
    mut hook: Option<TrajectoryHook<'_>>,
) -> Result<Vec<f64>> {
    let d = m.dim();
    let mut v = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut avg = TailAverager::for_params(p, d);
    for t in 1..=p.iterations() {
        batch_step(m, p.gamma(), &v, &mut next);
        std::mem::swap(&mut v, &mut next);
        avg.push(t, &v)?;
        if let Some(h) = hook.as_mut() {
            h(t, &v);
        }
    }
    avg.average()
}

/// Tail-averaged batch GD on empirical moments, from `v_0 = 0`.
///
/// The step size is checked against the top eigenvalue of `Sigma_hat`.
pub fn batch_gd_run(
    moments: &EmpiricalMoments,
    p: &FilterParams,
    hook: Option<TrajectoryHook<'_>>,
) -> Result<Vec<f64>> {
    let top = moments.top_eigenvalue();
    if p.gamma() * top >= 1.0 {
        return domain(format!(
            "gamma * sigma_max(Sigma_hat) = {} must be below 1",
            p.gamma() * top
        ));
    }
    run_batch_recursion(moments, p, hook)
}

/// `G_{S,T}(Sigma_hat) h_hat` through the eigendecomposition of `Sigma_hat`.
///
/// Eigenvalues below zero (rounding) are clamped to zero, where the filter
/// takes its limit `gamma (S + T + 1) / 2`.
pub fn batch_gd_spectral(moments: &EmpiricalMoments, p: &FilterParams) -> Result<Vec<f64>> {
    let eig = moments.sigma_hat.clone().symmetric_eigen();
    let mut coeffs = eig.eigenvectors.transpose() * &moments.h_hat;
    for (c, &lam) in coeffs.iter_mut().zip(eig.eigenvalues.iter()) {
        let x = p.gamma() * lam.max(0.0);
        if x >= 1.0 {
            return domain(format!("gamma * eigenvalue = {x} must be below 1"));
        }
        *c *= p.gamma() * spectral::tail_filter_unit(x, p.tail_start(), p.iterations());
    }
    let out: DVector<f64> = &eig.eigenvectors * coeffs;
    Ok(out.iter().cloned().collect())
}

/// Tail-averaged mini-batch SGD from `w_0 = 0`.
pub fn minibatch_sgd_run(dataset: &Dataset, config: &SgdConfig) -> Result<Vec<f64>> {
    minibatch_sgd_run_with_hook(dataset, config, None)
}

pub fn minibatch_sgd_run_with_hook(
    dataset: &Dataset,
    config: &SgdConfig,
    mut hook: Option<TrajectoryHook<'_>>,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = config.filter_params();
    if config.sampling == Sampling::FullSweep {
        return run_batch_recursion(&empirical_moments(dataset)?, &p, hook);
    }

    let (n, d) = (dataset.len(), dataset.dim());
    let b = config.batch_size;
    let step = config.gamma / b as f64;
    let mut rng = rng::stream(config.seed, "minibatch-sgd", &[]);
    let mut w = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut avg = TailAverager::for_params(&p, d);
    for t in 1..=config.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..b {
            let j = rng.random_range(0..n);
            let x = dataset.x(j);
            let resid: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - dataset.y(j);
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += resid * xi;
            }
        }
        let mut norm_sq = 0.0;
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= step * g;
            norm_sq += *wi * *wi;
        }
        let norm = norm_sq.sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Diverged { step: t, norm });
        }
        avg.push(t, &w)?;
        if let Some(h) = hook.as_mut() {
            h(t, &w);
        }
    }
    avg.average()
}

/// Mean over replicates of `||Sigma^{1/2} (w_bar - v_bar)||^2`.
///
/// `v_bar` is batch GD on the dataset; each replicate reruns SGD with the seed
/// derived from `(master_seed, "computational-variance", replicate)`.
pub fn computational_variance(
    dataset: &Dataset,
    spectrum: &Spectrum,
    config: &SgdConfig,
    replicates: usize,
    master_seed: u64,
) -> Result<f64> {
    if replicates == 0 {
        return domain("replicates must be at least 1");
    }
    let moments = empirical_moments(dataset)?;
    let v_bar = batch_gd_run(&moments, &config.filter_params(), None)?;
    let per_rep: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|k| {
            let seed = rng::derive_seed(master_seed, "computational-variance", &[k as u64]);
            let w_bar = minibatch_sgd_run(dataset, &config.with_seed(seed))?;
            seminorm_sq(spectrum, &w_bar, &v_bar)
        })
        .collect();
    let mut total = 0.0;
    for v in per_rep {
        total += v?;
    }
    Ok(total / replicates as f64)
}

/// Inputs to [`recursion_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub noise_var: f64,
    /// `c` in `H_hat_t = H (1 + c eps_t)` with Rademacher `eps_t`; `0 <= c <= 1`.
    pub perturbation: f64,
    pub params: FilterParams,
    pub u: f64,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    /// Monte-Carlo mean of `||H^{u/2} mu_bar||^2`.
    pub empirical_moment: f64,
    pub std_error: f64,
    /// `16 sigma^2 Tr[H^alpha] gamma^{1-u+alpha} L^{alpha-u} (1 + (S+1)/L)`.
    pub prop_bound: f64,
    /// `kappa^2` used for the guard: `max(Tr H, sigma_1 (1 + c^2))`.
    pub kappa_sq: f64,
}

impl ProbeReport {
    /// Whether the empirical moment is within `z` standard errors of the bound.
    pub fn within(&self, z: f64) -> bool {
        self.empirical_moment <= self.prop_bound + z * self.std_error
    }
}

/// Operational `kappa^2` for the probe: large enough that `E[H_hat^2] <= kappa^2 H`.
pub fn probe_kappa_sq(h: &Spectrum, perturbation: f64) -> f64 {
    h.kappa_sq()
        .max(h.top() * (1.0 + perturbation * perturbation))
}

/// `16 sigma^2 Tr[H^alpha] gamma^{1-u+alpha} L^{alpha-u} Upsilon(S, T)`.
pub fn probe_bound(h: &Spectrum, noise_var: f64, p: &FilterParams, u: f64, alpha: f64) -> f64 {
    let l = p.tail_len() as f64;
    let upsilon = 1.0 + (p.tail_start() as f64 + 1.0) / l;
    16.0 * noise_var
        * h.trace_pow(alpha)
        * p.gamma().powf(1.0 - u + alpha)
        * l.powf(alpha - u)
        * upsilon
}

/// Monte-Carlo moment of the tail-averaged recursion
/// `mu_{t+1} = (I - gamma H_hat_{t+1}) mu_t + gamma xi_{t+1}`, `mu_0 = 0`.
///
/// `H_hat_t = H (1 + c eps_t)` coordinatewise with independent Rademacher
/// signs, and `xi_t = sigma H^{1/2} z_t` with standard normal `z_t`, so
/// `E[H_hat_t] = H`, `E[H_hat_t^2] <= kappa^2 H` and `E[xi xi^T] = sigma^2 H`.
/// Per step and coordinate the draw order is sign, then normal.
pub fn recursion_probe(h: &Spectrum, settings: &ProbeSettings) -> Result<ProbeReport> {
    let ProbeSettings {
        noise_var,
        perturbation,
        params: p,
        u,
        alpha,
        replicates,
        seed,
    } = *settings;
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return domain(format!(
            "noise variance must be nonnegative, got {noise_var}"
        ));
    }
    if !(0.0..=1.0).contains(&perturbation) {
        return domain(format!(
            "perturbation must lie in [0, 1], got {perturbation}"
        ));
    }
    if !(0.0..=1.0).contains(&u) {
        return domain(format!("u must lie in [0, 1], got {u}"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return domain(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    if replicates == 0 {
        return domain("replicates must be at least 1");
    }
    let kappa_sq = probe_kappa_sq(h, perturbation);
    if p.gamma() * kappa_sq > 0.25 {
        return domain(format!(
            "gamma * kappa^2 = {} exceeds 1/4",
            p.gamma() * kappa_sq
        ));
    }

    let sig = h.eigenvalues();
    let noise_scale: Vec<f64> = sig.iter().map(|s| (noise_var * s).sqrt()).collect();
    let weights: Vec<f64> = sig.iter().map(|s| s.powf(u)).collect();
    let gamma = p.gamma();
    let moments: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, "recursion-probe", &[k as u64]);
            let mut mu = vec![0.0; sig.len()];
            let mut avg = TailAverager::for_params(&p, sig.len());
            for t in 1..=p.iterations() {
                for i in 0..sig.len() {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let h_hat = sig[i] * (1.0 + perturbation * sign);
                    mu[i] = (1.0 - gamma * h_hat) * mu[i] + gamma * noise_scale[i] * z;
                }
                avg.push(t, &mu).expect("indices increase");
            }
            let bar = avg.average().expect("full window");
            bar.iter()
                .zip(&weights)
                .map(|(m, w)| w * m * m)
                .sum::<f64>()
        })
        .collect();

    let r = replicates as f64;
    let mean = moments.iter().sum::<f64>() / r;
    let var = if replicates > 1 {
        moments.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (r - 1.0)
    } else {
        0.0
    };
    Ok(ProbeReport {
        empirical_moment: mean,
        std_error: (var / r).sqrt(),
        prop_bound: probe_bound(h, noise_var, &p, u, alpha),
        kappa_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_source, sample_dataset, Dataset, Problem, SourceVector};

    fn fp(g: f64, t: usize, s: usize) -> FilterParams {
        FilterParams::new(g, t, s).unwrap()
    }

    #[test]
    fn tail_averager_window() {
        let mut avg = TailAverager::new(2, 5, 1);
        for t in 1..=5 {
            avg.push(t, &[t as f64]).unwrap();
        }
        assert_eq!(avg.count(), 3);
        assert_eq!(avg.average().unwrap(), vec![4.0]);
        assert!(avg.push(5, &[0.0]).is_err());
        let mut short = TailAverager::new(0, 3, 1);
        short.push(1, &[1.0]).unwrap();
        assert!(short.average().is_err());
        let mut c = TailAverager::new(3, 10, 2);
        for t in 1..=10 {
            c.push(t, &[0.1, -7.25]).unwrap();
        }
        assert_eq!(c.average().unwrap(), vec![0.1, -7.25]);
    }

    #[test]
    fn population_gd_examples() {
        let s = Spectrum::new(vec![1.0]).unwrap();
        let w = make_source(&s, 0.0).unwrap();
        let prob = Problem::new(s.clone(), w, 0.0).unwrap();
        // u_1 = 0.5, u_2 = 0.75
        let out = population_gd_tail_average(&prob, &fp(0.5, 2, 0)).unwrap();
        assert!((out[0] - 0.625).abs() < 1e-15);
        let zero = Problem::new(
            s.clone(),
            SourceVector::from_base(&s, 0.0, &[0.0]).unwrap(),
            0.0,
        )
        .unwrap();
        assert_eq!(
            population_gd_tail_average(&zero, &fp(0.5, 2, 0)).unwrap(),
            vec![0.0]
        );
        let far = population_gd_tail_average(&prob, &fp(0.5, 200, 100)).unwrap();
        assert!((far[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn population_gd_matches_recursion() {
        let prob = Problem::power_law(12, 0.5, 1.0, 0.0).unwrap();
        let p = fp(0.3, 57, 20);
        let h = prob.h();
        let sig = prob.spectrum.eigenvalues();
        let mut u = vec![0.0; 12];
        let mut avg = TailAverager::for_params(&p, 12);
        for t in 1..=57 {
            for i in 0..12 {
                u[i] = (1.0 - 0.3 * sig[i]) * u[i] + 0.3 * h[i];
            }
            avg.push(t, &u).unwrap();
        }
        let rec = avg.average().unwrap();
        let spec = population_gd_tail_average(&prob, &p).unwrap();
        for (a, b) in rec.iter().zip(&spec) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn diag_moments(sig: f64, h: f64) -> EmpiricalMoments {
        let ds = Dataset::from_rows(&[vec![sig.sqrt()]], &[h / sig.sqrt()]).unwrap();
        empirical_moments(&ds).unwrap()
    }

    #[test]
    fn batch_gd_examples() {
        let m = diag_moments(1.0, 1.0);
        let out = batch_gd_run(&m, &fp(0.5, 2, 0), None).unwrap();
        assert!((out[0] - 0.625).abs() < 1e-15);
        let z = diag_moments(1.0, 0.0);
        assert_eq!(batch_gd_run(&z, &fp(0.5, 2, 0), None).unwrap(), vec![0.0]);

        let mut last = Vec::new();
        let mut hook = |t: usize, v: &[f64]| {
            if t == 7 {
                last = v.to_vec();
            }
        };
        let tail = batch_gd_run(&m, &fp(0.3, 7, 6), Some(&mut hook)).unwrap();
        assert_eq!(tail, last);
        assert!(batch_gd_run(&m, &fp(1.0, 2, 0), None).is_err());
    }

    #[test]
    fn batch_gd_spectral_matches_recursion() {
        let prob = Problem::power_law(5, 0.5, 0.5, 1.0).unwrap();
        let ds = sample_dataset(&prob, 30, 4).unwrap();
        let m = empirical_moments(&ds).unwrap();
        let p = fp(0.2, 150, 75);
        let a = batch_gd_run(&m, &p, None).unwrap();
        let b = batch_gd_spectral(&m, &p).unwrap();
        let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn sgd_single_step() {
        let ds = Dataset::from_rows(&[vec![1.0, 0.0]], &[1.0]).unwrap();
        let cfg = SgdConfig::new(0.5, 1, 1, 0, 1).unwrap();
        assert_eq!(minibatch_sgd_run(&ds, &cfg).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn full_sweep_is_batch_gd_bitwise() {
        let prob = Problem::power_law(6, 0.5, 1.0, 1.0).unwrap();
        let ds = sample_dataset(&prob, 40, 8).unwrap();
        let cfg = SgdConfig::new(0.25, 3, 80, 40, 2)
            .unwrap()
            .with_sampling(Sampling::FullSweep);
        let sgd = minibatch_sgd_run(&ds, &cfg).unwrap();
        let gd =
            batch_gd_run(&empirical_moments(&ds).unwrap(), &cfg.filter_params(), None).unwrap();
        assert_eq!(sgd, gd);
    }

    #[test]
    fn sgd_is_deterministic() {
        let prob = Problem::power_law(10, 0.5, 0.5, 1.0).unwrap();
        let ds = sample_dataset(&prob, 200, 1).unwrap();
        let cfg = SgdConfig::new(0.1, 4, 100, 50, 77).unwrap();
        let a = minibatch_sgd_run(&ds, &cfg).unwrap();
        assert_eq!(a, minibatch_sgd_run(&ds, &cfg).unwrap());
        assert_ne!(a, minibatch_sgd_run(&ds, &cfg.with_seed(78)).unwrap());
        assert_eq!(cfg.passes(200), 2);
    }

    #[test]
    fn sgd_divergence_is_reported() {
        let prob = Problem::power_law(10, 0.5, 0.5, 1.0).unwrap();
        let ds = sample_dataset(&prob, 50, 1).unwrap();
        let cfg = SgdConfig::new(50.0, 1, 500, 0, 3).unwrap();
        match minibatch_sgd_run(&ds, &cfg) {
            Err(Error::Diverged { step, .. }) => assert!((1..=500).contains(&step)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sgd_step_is_unbiased() {
        // Mean single step from a fixed iterate vs the batch GD step.
        let prob = Problem::power_law(4, 0.5, 0.5, 1.0).unwrap();
        let ds = sample_dataset(&prob, 25, 6).unwrap();
        let m = empirical_moments(&ds).unwrap();
        let w0 = [0.3, -0.2, 0.1, 0.5];
        let gamma = 0.1;
        let mut expected = vec![0.0; 4];
        batch_step(&m, gamma, &w0, &mut expected);

        let reps = 20_000;
        let mut rng = rng::stream(5, "unbiased-step-test", &[]);
        let mut sum = [0.0; 4];
        let mut sumsq = [0.0; 4];
        for _ in 0..reps {
            let j = rng.random_range(0..ds.len());
            let x = ds.x(j);
            let resid: f64 = w0.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - ds.y(j);
            for i in 0..4 {
                let v = w0[i] - gamma * resid * x[i];
                sum[i] += v;
                sumsq[i] += v * v;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / reps as f64;
            let se = ((sumsq[i] / reps as f64 - mean * mean) / reps as f64).sqrt();
            assert!((mean - expected[i]).abs() < 4.0 * se + 1e-12, "coord {i}");
        }
    }

    #[test]
    fn computational_variance_examples() {
        let prob = Problem::power_law(8, 0.5, 0.5, 1.0).unwrap();
        let ds = sample_dataset(&prob, 100, 2).unwrap();
        let base = SgdConfig::new(0.1, 1, 200, 100, 0).unwrap();
        let full = base.with_sampling(Sampling::FullSweep);
        assert_eq!(
            computational_variance(&ds, &prob.spectrum, &full, 3, 9).unwrap(),
            0.0
        );

        let v1 = computational_variance(&ds, &prob.spectrum, &base, 2, 9).unwrap();
        assert_eq!(
            v1,
            computational_variance(&ds, &prob.spectrum, &base, 2, 9).unwrap()
        );
        let big = SgdConfig {
            batch_size: 100,
            ..base
        };
        let vb = computational_variance(&ds, &prob.spectrum, &big, 8, 9).unwrap();
        let v1b = computational_variance(&ds, &prob.spectrum, &base, 8, 9).unwrap();
        assert!(vb < v1b, "{vb} vs {v1b}");
        assert!(computational_variance(&ds, &prob.spectrum, &base, 0, 9).is_err());
    }

    fn settings(
        noise: f64,
        c: f64,
        p: FilterParams,
        u: f64,
        alpha: f64,
        reps: usize,
    ) -> ProbeSettings {
        ProbeSettings {
            noise_var: noise,
            perturbation: c,
            params: p,
            u,
            alpha,
            replicates: reps,
            seed: 17,
        }
    }

    #[test]
    fn probe_without_forcing_is_zero() {
        let h = Spectrum::new(vec![1.0, 0.3]).unwrap();
        let r = recursion_probe(&h, &settings(0.0, 0.7, fp(0.1, 40, 10), 0.5, 1.0, 5)).unwrap();
        assert_eq!(r.empirical_moment, 0.0);
    }

    /// Exact `E||H^{u/2} mu_bar||^2` for the unperturbed recursion:
    /// `mu_bar = sum_k c_k xi_k` with `c_k = (gamma/L) sum_{t=max(k,S+1)}^{T} q^{t-k}`.
    fn semi_stochastic_moment(h: &[f64], noise: f64, g: f64, s: usize, t: usize, u: f64) -> f64 {
        let l = (t - s) as f64;
        h.iter()
            .map(|&sig| {
                let q = 1.0 - g * sig;
                let mut total = 0.0;
                for k in 1..=t {
                    let c: f64 = (k.max(s + 1)..=t).map(|tt| q.powi((tt - k) as i32)).sum();
                    let c = g / l * c;
                    total += c * c;
                }
                sig.powf(u) * noise * sig * total
            })
            .sum()
    }

    #[test]
    fn probe_matches_semi_stochastic_closed_form() {
        let h = Spectrum::new(vec![1.0, 0.4, 0.1]).unwrap();
        let p = fp(0.15, 60, 30);
        let r = recursion_probe(&h, &settings(1.3, 0.0, p, 0.5, 1.0, 4000)).unwrap();
        let exact = semi_stochastic_moment(h.eigenvalues(), 1.3, 0.15, 30, 60, 0.5);
        assert!(
            (r.empirical_moment - exact).abs() < 4.0 * r.std_error,
            "{} vs {exact} (se {})",
            r.empirical_moment,
            r.std_error
        );
    }

    #[test]
    fn probe_bound_example() {
        let h = Spectrum::new(vec![1.0]).unwrap();
        let r = recursion_probe(&h, &settings(1.0, 0.0, fp(0.1, 100, 0), 0.0, 1.0, 200)).unwrap();
        let bound = 16.0 * 0.1f64.powi(2) * 100.0 * (1.0 + 1.0 / 100.0);
        assert!((r.prop_bound - bound).abs() < 1e-12);
        assert!(r.within(3.0));
    }

    #[test]
    fn probe_guard() {
        let h = Spectrum::new(vec![1.0]).unwrap();
        assert!(recursion_probe(&h, &settings(1.0, 0.0, fp(0.3, 10, 0), 0.0, 1.0, 2)).is_err());
        // perturbation raises kappa^2 to 2, so gamma = 0.2 is out
        assert!(recursion_probe(&h, &settings(1.0, 1.0, fp(0.2, 10, 0), 0.0, 1.0, 2)).is_err());
        assert!(recursion_probe(&h, &settings(1.0, 0.0, fp(0.1, 10, 0), 1.5, 1.0, 2)).is_err());
    }
}
