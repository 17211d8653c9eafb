//! Risk-bound terms, parameter schedules and rate diagnostics.
//!
//! The bound terms carry no hidden constants. They describe the shape of the
//! excess-risk bound, not a certified upper bound on measured risk.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{effective_dimension, SourceVector, Spectrum};
use crate::spectral::{self, FilterParams};

/// `A = ||Sigma^{1/2} R_{S,T}(Sigma) w*||^2`, the deterministic approximation error.
pub fn approx_error(spectrum: &Spectrum, source: &SourceVector, p: &FilterParams) -> Result<f64> {
    if source.len() != spectrum.len() {
        return Err(Error::LengthMismatch {
            expected: spectrum.len(),
            got: source.len(),
        });
    }
    p.check_sigma(spectrum.top())?;
    let mut acc = 0.0;
    for (&s, &w) in spectrum.eigenvalues().iter().zip(&source.coeffs) {
        let r = spectral::tail_residual(s, p)?;
        acc += s * r * r * w * w;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    /// `A(L)`
    pub approx_term: f64,
    /// `N(1/(gamma L)) / n`
    pub sample_term: f64,
    /// `gamma Tr[Sigma^alpha] / (b (gamma L)^{1-alpha})`
    pub computational_term: f64,
    pub alpha: f64,
    pub total: f64,
    /// `n >= 16 kappa^2 gamma L max(1, N(1/(gamma L)))`
    pub sample_size_ok: bool,
}

/// The three terms of the tail-averaged SGD excess-risk bound.
///
/// Requires `gamma * kappa^2 < 1/4`. The sample-size condition is reported, not enforced.
pub fn bound_terms(
    spectrum: &Spectrum,
    source: &SourceVector,
    p: &FilterParams,
    batch_size: usize,
    n: usize,
    alpha: f64,
) -> Result<BoundReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return domain(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    if batch_size == 0 || n == 0 {
        return domain("batch size and sample count must be positive");
    }
    let kappa_sq = spectrum.kappa_sq();
    if p.gamma() * kappa_sq >= 0.25 {
        return domain(format!(
            "gamma * kappa^2 = {} must be below 1/4",
            p.gamma() * kappa_sq
        ));
    }
    let gl = p.gamma() * p.tail_len() as f64;
    let approx_term = approx_error(spectrum, source, p)?;
    let n_eff = effective_dimension(spectrum, 1.0 / gl)?;
    let sample_term = n_eff / n as f64;
    let computational_term =
        p.gamma() * spectrum.trace_pow(alpha) / (batch_size as f64 * gl.powf(1.0 - alpha));
    Ok(BoundReport {
        approx_term,
        sample_term,
        computational_term,
        alpha,
        total: approx_term + sample_term + computational_term,
        sample_size_ok: n as f64 >= 16.0 * kappa_sq * gl * n_eff.max(1.0),
    })
}

/// The three parameter regimes that attain the optimal rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleVariant {
    /// `b = 1`, `T ~ n`, decaying step size: one pass.
    A,
    /// `b ~ n^{(2r+nu)/(2r+1+nu)}`, `T ~ n^{1/(2r+1+nu)}`, constant step: one pass.
    B,
    /// `b = n`, `T ~ n^{1/(2r+1+nu)}`, constant step: many passes.
    C,
}

impl fmt::Display for ScheduleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleVariant::A => "a",
            ScheduleVariant::B => "b",
            ScheduleVariant::C => "c",
        })
    }
}

impl FromStr for ScheduleVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            other => domain(format!("unknown schedule variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleChoice {
    pub variant: ScheduleVariant,
    pub n: usize,
    pub r: f64,
    pub nu: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub tail_len: usize,
    pub iterations: usize,
    pub tail_start: usize,
    /// Window constant: 1 for full averaging, 3 for `S = floor(T/2)`.
    pub k: f64,
    /// Exponent for [`bound_terms`]; the schedules use `alpha = nu`.
    pub alpha: f64,
}

impl ScheduleChoice {
    pub fn filter_params(&self) -> FilterParams {
        FilterParams::new(self.gamma, self.iterations, self.tail_start)
            .expect("schedule produces a valid window")
    }

    /// Exponent of the predicted rate `n^{-(2r+1)/(2r+1+nu)}`.
    pub fn rate_exponent(&self) -> f64 {
        rate_exponent(self.r, self.nu)
    }

    /// `ceil(b T / n)`
    pub fn passes(&self) -> usize {
        (self.batch_size * self.iterations).div_ceil(self.n)
    }
}

/// `(2r+1)/(2r+1+nu)`
pub fn rate_exponent(r: f64, nu: f64) -> f64 {
    (2.0 * r + 1.0) / (2.0 * r + 1.0 + nu)
}

/// Rounds half up with a floor of 1.
pub fn round_count(x: f64) -> usize {
    ((x + 0.5).floor() as usize).max(1)
}

/// Largest step size admitted by the schedules: `0.9 / (4 kappa^2)`.
pub fn step_size_cap(kappa_sq: f64) -> f64 {
    0.9 / (4.0 * kappa_sq)
}

/// Parameters `(gamma, b, T, S)` for sample size `n` under one of the three regimes.
///
/// The horizon from the regime sets `T`. For `r <= 1/2` the whole run is
/// averaged (`S = 0`); otherwise `S = floor(T/2)`, which satisfies the window
/// constraints with `K = 3`.
pub fn schedule(
    variant: ScheduleVariant,
    n: usize,
    r: f64,
    nu: f64,
    kappa_sq: f64,
) -> Result<ScheduleChoice> {
    if n < 2 {
        return domain(format!("sample size must be at least 2, got {n}"));
    }
    if !(r >= 0.0 && r.is_finite()) {
        return domain(format!("r must be nonnegative, got {r}"));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return domain(format!("nu must lie in (0, 1], got {nu}"));
    }
    if !(kappa_sq > 0.0 && kappa_sq.is_finite()) {
        return domain(format!("kappa^2 must be positive, got {kappa_sq}"));
    }
    let nf = n as f64;
    let denom = 2.0 * r + 1.0 + nu;
    let step_exp = (2.0 * r + nu) / denom;
    let cap = step_size_cap(kappa_sq);
    let (gamma_raw, batch_size, horizon) = match variant {
        ScheduleVariant::A => (nf.powf(-step_exp), 1, n),
        ScheduleVariant::B => (
            1.0,
            round_count(nf.powf(step_exp)),
            round_count(nf.powf(1.0 / denom)),
        ),
        ScheduleVariant::C => (1.0, n, round_count(nf.powf(1.0 / denom))),
    };
    let (iterations, tail_start, k) = if r <= 0.5 {
        (horizon, 0, 1.0)
    } else {
        let t = horizon.max(2);
        (t, t / 2, 3.0)
    };
    Ok(ScheduleChoice {
        variant,
        n,
        r,
        nu,
        gamma: gamma_raw.min(cap),
        batch_size,
        tail_len: iterations - tail_start,
        iterations,
        tail_start,
        k,
        alpha: nu,
    })
}

/// Averaging window used by the saturation curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// `S = 0`
    Uniform,
    /// `S = floor(T/2)`
    TailHalf,
}

impl AveragingMode {
    pub fn params(self, gamma: f64, iterations: usize) -> Result<FilterParams> {
        match self {
            AveragingMode::Uniform => FilterParams::uniform(gamma, iterations),
            AveragingMode::TailHalf => FilterParams::tail_half(gamma, iterations),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AveragingMode::Uniform => "uniform",
            AveragingMode::TailHalf => "tail",
        }
    }
}

fn saturation_points(
    spectrum: &Spectrum,
    r: f64,
    gamma: f64,
    t_grid: &[usize],
    mode: AveragingMode,
    reduce: impl Fn(&mut dyn Iterator<Item = f64>) -> f64,
) -> Result<Vec<(f64, f64)>> {
    if !(r >= 0.0 && r.is_finite()) {
        return domain(format!("r must be nonnegative, got {r}"));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return domain("T grid must be strictly increasing");
    }
    t_grid
        .iter()
        .map(|&t| {
            let p = mode.params(gamma, t)?;
            p.check_sigma(spectrum.top())?;
            let terms = spectrum
                .eigenvalues()
                .iter()
                .map(|&s| {
                    let res = spectral::tail_residual(s, &p).expect("checked above");
                    s.powf(1.0 + 2.0 * r) * res * res
                })
                .collect::<Vec<_>>();
            Ok((gamma * t as f64, reduce(&mut terms.into_iter())))
        })
        .collect()
}

/// `(gamma T, ||Sigma^{1/2} R_{S,T}(Sigma) Sigma^r v||^2)` with `v` the all-ones vector.
pub fn saturation_curves(
    spectrum: &Spectrum,
    r: f64,
    gamma: f64,
    t_grid: &[usize],
    mode: AveragingMode,
) -> Result<Vec<(f64, f64)>> {
    saturation_points(
        spectrum,
        r,
        gamma,
        t_grid,
        mode,
        |it: &mut dyn Iterator<Item = f64>| it.sum(),
    )
}

/// Operator-norm counterpart of [`saturation_curves`]:
/// `||Sigma^{1/2} R_{S,T}(Sigma) Sigma^r||^2 = max_i sigma_i^{1+2r} R_{S,T}(sigma_i)^2`.
pub fn saturation_curves_operator(
    spectrum: &Spectrum,
    r: f64,
    gamma: f64,
    t_grid: &[usize],
    mode: AveragingMode,
) -> Result<Vec<(f64, f64)>> {
    saturation_points(
        spectrum,
        r,
        gamma,
        t_grid,
        mode,
        |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max),
    )
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn slope_fit(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return domain(format!(
            "slope fit needs at least 2 points, got {}",
            points.len()
        ));
    }
    if let Some(p) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return domain(format!("slope fit needs positive coordinates, got {p:?}"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return domain("slope fit needs at least two distinct x values");
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_source, make_spectrum};

    fn unit() -> (Spectrum, SourceVector) {
        let s = Spectrum::new(vec![1.0]).unwrap();
        let w = make_source(&s, 0.0).unwrap();
        (s, w)
    }

    #[test]
    fn approx_error_examples() {
        let (s, w) = unit();
        let p = FilterParams::new(0.1, 10, 0).unwrap();
        let oracle = (0.9 * (1.0 - 0.9f64.powi(10))).powi(2);
        let a = approx_error(&s, &w, &p).unwrap();
        assert!((a - oracle).abs() < 1e-14);
        assert!((a - 0.343_618).abs() < 1e-6);
        let far = FilterParams::new(0.1, 4000, 2000).unwrap();
        assert!(approx_error(&s, &w, &far).unwrap() < 1e-80);
        let zero = SourceVector::from_base(&s, 0.0, &[0.0]).unwrap();
        assert_eq!(approx_error(&s, &zero, &p).unwrap(), 0.0);
    }

    #[test]
    fn bound_terms_examples() {
        let (s, w) = unit();
        let p = FilterParams::new(0.1, 10, 0).unwrap();
        let b = bound_terms(&s, &w, &p, 1, 100, 1.0).unwrap();
        assert!((b.approx_term - 0.343_618).abs() < 1e-6);
        assert!((b.sample_term - 0.005).abs() < 1e-15);
        assert!((b.computational_term - 0.1).abs() < 1e-15);
        assert!((b.total - (b.approx_term + 0.105)).abs() < 1e-15);
        // 100 >= 16 * kappa^2 * gamma L * max(1, N) = 16
        assert!(b.sample_size_ok);
        assert!(!bound_terms(&s, &w, &p, 1, 15, 1.0).unwrap().sample_size_ok);
        let big_b = bound_terms(&s, &w, &p, 1_000_000, 100, 1.0).unwrap();
        assert!(big_b.computational_term < 1e-6);
        let big_n = bound_terms(&s, &w, &p, 1, 10_000_000, 1.0).unwrap();
        assert!(big_n.sample_term < 1e-7);
        assert!(bound_terms(&s, &w, &p, 1, 100, 0.0).is_err());
        assert!(bound_terms(&s, &w, &p, 1, 100, 1.5).is_err());
        let hot = FilterParams::new(0.3, 10, 0).unwrap();
        assert!(bound_terms(&s, &w, &hot, 1, 100, 1.0).is_err());
    }

    #[test]
    fn approx_term_depends_on_gamma_l_and_ratio_only() {
        // Same gamma*L and S/T, different (gamma, T, S): equal in the continuum limit.
        let s = make_spectrum(50, 0.5).unwrap();
        let w = make_source(&s, 1.0).unwrap();
        let p1 = FilterParams::new(0.002, 4000, 2000).unwrap();
        let p2 = FilterParams::new(0.004, 2000, 1000).unwrap();
        let p0 = FilterParams::new(0.001, 8000, 4000).unwrap();
        let a0 = approx_error(&s, &w, &p0).unwrap();
        let a1 = approx_error(&s, &w, &p1).unwrap();
        let a2 = approx_error(&s, &w, &p2).unwrap();
        // The discrete correction is O(gamma * sigma_1): halving gamma halves the gap.
        assert!((a1 - a2).abs() < 2e-3 * a1, "{a1} vs {a2}");
        let ratio = (a0 - a1).abs() / (a1 - a2).abs();
        assert!((0.4..0.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn schedule_examples() {
        let a = schedule(ScheduleVariant::A, 10_000, 0.5, 0.5, 1.0).unwrap();
        assert!((a.gamma - 10_000f64.powf(-0.6)).abs() < 1e-15);
        assert!((a.gamma - 3.981e-3).abs() < 1e-6);
        assert_eq!((a.batch_size, a.tail_len, a.tail_start), (1, 10_000, 0));
        assert_eq!(a.passes(), 1);
        assert_eq!(a.alpha, 0.5);

        let c = schedule(ScheduleVariant::C, 10_000, 0.5, 0.5, 1.0).unwrap();
        assert_eq!((c.batch_size, c.tail_len), (10_000, 40));
        assert_eq!(c.passes(), 40);

        for v in [ScheduleVariant::A, ScheduleVariant::B, ScheduleVariant::C] {
            let s = schedule(v, 500, 0.0, 1.0, 1.0).unwrap();
            assert!((s.rate_exponent() - 0.5).abs() < 1e-15);
        }
        assert!(schedule(ScheduleVariant::A, 1, 0.5, 0.5, 1.0).is_err());
        assert!(schedule(ScheduleVariant::A, 100, 0.5, 1.5, 1.0).is_err());
    }

    #[test]
    fn schedule_b_and_c_share_gamma_and_l() {
        for &n in &[100usize, 1000, 12_345] {
            for &r in &[0.0, 0.5, 1.0, 2.0] {
                let b = schedule(ScheduleVariant::B, n, r, 0.5, 1.7).unwrap();
                let c = schedule(ScheduleVariant::C, n, r, 0.5, 1.7).unwrap();
                assert_eq!(
                    (b.gamma, b.tail_len, b.iterations),
                    (c.gamma, c.tail_len, c.iterations)
                );
                assert!(b.batch_size <= c.batch_size);
                assert!(b.gamma * 1.7 < 0.25);
            }
        }
    }

    #[test]
    fn schedule_tail_window_constraints() {
        let s = schedule(ScheduleVariant::A, 1001, 1.0, 0.5, 1.0).unwrap();
        let (t, sf) = (s.iterations as f64, s.tail_start as f64);
        assert_eq!(s.tail_start, s.iterations / 2);
        assert!(sf <= (s.k - 1.0) / (s.k + 1.0) * t && t <= (s.k + 1.0) * sf);
        let cap = schedule(ScheduleVariant::B, 1000, 1.0, 0.5, 10.0).unwrap();
        assert_eq!(cap.gamma, 0.9 / 40.0);
    }

    #[test]
    fn rounding_is_half_up_with_floor() {
        assert_eq!(round_count(2.5), 3);
        assert_eq!(round_count(2.49), 2);
        assert_eq!(round_count(0.2), 1);
    }

    #[test]
    fn slope_fit_examples() {
        assert!((slope_fit(&[(1.0, 1.0), (10.0, 0.01)]).unwrap() + 2.0).abs() < 1e-14);
        assert_eq!(
            slope_fit(&[(1.0, 5.0), (2.0, 5.0), (4.0, 5.0)]).unwrap(),
            0.0
        );
        assert!((slope_fit(&[(1.0, 1.0), (2.0, 0.5), (4.0, 0.25)]).unwrap() + 1.0).abs() < 1e-14);
        assert!(slope_fit(&[(1.0, 1.0)]).is_err());
        assert!(slope_fit(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
        assert!(slope_fit(&[(2.0, 1.0), (2.0, 3.0)]).is_err());
    }

    #[test]
    fn saturation_examples() {
        let grid: Vec<usize> = (2..=12).map(|k| 1usize << k).collect();
        let s = make_spectrum(1000, 0.5).unwrap();
        let uni = saturation_curves(&s, 0.0, 0.1, &grid, AveragingMode::Uniform).unwrap();
        let tail = saturation_curves(&s, 0.0, 0.1, &grid, AveragingMode::TailHalf).unwrap();
        for (u, t) in uni.iter().zip(&tail) {
            assert_eq!(u.0, t.0);
            let ratio = u.1 / t.1;
            assert!((0.25..=4.0).contains(&ratio), "{ratio}");
        }

        // Finite rank with sigma_min > 0: tail residual decays geometrically.
        let fr = Spectrum::new(vec![1.0, 0.5]).unwrap();
        let pts =
            saturation_curves(&fr, 0.0, 0.1, &[100, 200, 400], AveragingMode::TailHalf).unwrap();
        // Successive ratios shrink: faster than any power law.
        let (q1, q2) = (pts[1].1 / pts[0].1, pts[2].1 / pts[1].1);
        assert!(q1 < 1e-2 && q2 < 1e-2 * q1, "{q1} {q2}");

        // Single eigenvalue, r = 1, uniform: ||R||^2 ~ (gamma T)^{-2}.
        let one = Spectrum::new(vec![1.0]).unwrap();
        let u1 =
            saturation_curves(&one, 1.0, 0.1, &[10, 100, 1000], AveragingMode::Uniform).unwrap();
        assert!((slope_fit(&u1).unwrap() + 2.0).abs() < 0.2);
        assert!(saturation_curves(&one, 1.0, 0.1, &[10, 10], AveragingMode::Uniform).is_err());
    }

    #[test]
    fn operator_norm_curves_reach_their_asymptotic_slopes() {
        // Large-T window, where the pre-asymptotic small-gammaT points are excluded.
        let s = make_spectrum(1000, 0.5).unwrap();
        let grid: Vec<usize> = (8..=14).map(|k| 1usize << k).collect();
        for &r in &[0.0, 1.0, 2.0] {
            let pts =
                saturation_curves_operator(&s, r, 0.1, &grid, AveragingMode::TailHalf).unwrap();
            let slope = slope_fit(&pts).unwrap();
            assert!((slope + 2.0 * r + 1.0).abs() < 0.2, "r={r}: {slope}");
        }
        let pts = saturation_curves_operator(&s, 2.0, 0.1, &grid, AveragingMode::Uniform).unwrap();
        assert!((slope_fit(&pts).unwrap() + 2.0).abs() < 0.05);
    }
}
