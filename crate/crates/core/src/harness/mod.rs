//! Experiment runners behind the `tailsgd` CLI.
//!
//! Every sweep is a set of independent work items (grid cell x replicate).
//! Each item derives its own random streams from `master_seed` and its
//! indices, items run on the rayon pool in any order, and results are
//! gathered by index. Output bytes therefore do not depend on the thread count.

mod config;
mod output;

pub use config::{Experiment, ExperimentConfig, ProbeConfig, VerifyConfig};
pub use output::{fmt_f64, mean_stderr, Table};

use rand::Rng;
use rayon::prelude::*;

use crate::descent::{self, minibatch_sgd_run_with_hook, ProbeSettings, SgdConfig, TailAverager};
use crate::error::{Error, Result};
use crate::model::{excess_risk, make_spectrum, sample_dataset, Problem};
use crate::rng;
use crate::spectral::{self, FilterParams};
use crate::theory::{self, schedule};

/// Result of one experiment run.
#[derive(Debug, Clone)]
pub struct Report {
    pub csv: String,
    /// Rows whose verification check failed (`verify-filters` and `probe`).
    pub failed_checks: usize,
    pub trajectory_csv: Option<String>,
}

/// Validates `config` for `experiment` and runs it.
pub fn run(experiment: Experiment, config: &ExperimentConfig) -> Result<Report> {
    config.validate(experiment)?;
    match experiment {
        Experiment::FigureA => run_figure_a(config),
        Experiment::FigureGrid => run_figure_grid(config),
        Experiment::Rates => run_rates(config),
        Experiment::VerifyFilters => run_verify_filters(config),
        Experiment::Probe => run_probe(config),
    }
}

fn metadata(experiment: Experiment, config: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let kappa_sq = make_spectrum(config.d, config.nu)
        .map_err(|e| Error::Config(e.to_string()))?
        .kappa_sq();
    Ok(vec![
        ("tailsgd".into(), env!("CARGO_PKG_VERSION").into()),
        ("experiment".into(), experiment.name().into()),
        ("config_sha256".into(), config.hash()),
        ("generator_id".into(), rng::GENERATOR_ID.into()),
        ("master_seed".into(), config.master_seed.to_string()),
        ("kappa_sq".into(), fmt_f64(kappa_sq)),
        (
            "kappa_sq_definition".into(),
            "trace of covariance (E||X||^2)".into(),
        ),
    ])
}

fn problem_for(config: &ExperimentConfig, r: f64) -> Result<Problem> {
    Problem::power_law(config.d, config.nu, r, config.noise_std)
}

/// Outcome of one SGD trajectory averaged two ways.
#[derive(Debug, Clone, Copy)]
struct PairedRisk {
    uniform: f64,
    tail: f64,
}

/// Runs one SGD trajectory and evaluates both its uniform average (`S = 0`)
/// and its tail average (`S = floor(T/2)`). `None` on divergence.
#[allow(clippy::too_many_arguments)]
fn paired_sgd(
    problem: &Problem,
    data_seed: u64,
    n: usize,
    gamma: f64,
    batch_size: usize,
    iterations: usize,
    sgd_seed: u64,
    mut trajectory: Option<&mut Vec<(usize, f64)>>,
) -> Result<Option<PairedRisk>> {
    let ds = sample_dataset(problem, n, data_seed)?;
    let cfg = SgdConfig::new(gamma, batch_size, iterations, 0, sgd_seed)?;
    let mut tail = TailAverager::new(iterations / 2, iterations, problem.dim());
    let mut hook = |t: usize, w: &[f64]| {
        tail.push(t, w).expect("indices increase");
        if let Some(tr) = trajectory.as_deref_mut() {
            let risk = excess_risk(&problem.spectrum, w, &problem.source).expect("lengths agree");
            tr.push((t, risk));
        }
    };
    match minibatch_sgd_run_with_hook(&ds, &cfg, Some(&mut hook)) {
        Ok(uniform) => Ok(Some(PairedRisk {
            uniform: excess_risk(&problem.spectrum, &uniform, &problem.source)?,
            tail: excess_risk(&problem.spectrum, &tail.average()?, &problem.source)?,
        })),
        Err(Error::Diverged { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mean and standard error over the finite entries; returns the divergence count too.
fn summarize(values: impl Iterator<Item = Option<f64>>) -> (f64, f64, usize, usize) {
    let mut ok = Vec::new();
    let mut diverged = 0;
    for v in values {
        match v {
            Some(x) => ok.push(x),
            None => diverged += 1,
        }
    }
    let (m, se) = mean_stderr(&ok);
    (m, se, ok.len(), diverged)
}

/// Step size of the single-pass schedule: `n^{-(2r+nu)/(2r+1+nu)}`.
pub fn one_pass_step(n: usize, r: f64, nu: f64) -> f64 {
    (n as f64).powf(-(2.0 * r + nu) / (2.0 * r + 1.0 + nu))
}

/// Excess risk of uniformly and tail-averaged single-pass SGD (`b = 1`, `T = n`)
/// across smoothness values `r`.
pub fn run_figure_a(config: &ExperimentConfig) -> Result<Report> {
    let reps = config.replicates;
    let n = config.n;
    let items: Vec<(usize, usize)> = (0..config.r_values.len())
        .flat_map(|ri| (0..reps).map(move |k| (ri, k)))
        .collect();
    let want_traj = config.trajectory_path.is_some();
    type Item = (Option<PairedRisk>, Vec<(usize, f64)>);
    let results: Vec<Result<Item>> = items
        .par_iter()
        .map(|&(ri, k)| {
            let r = config.r_values[ri];
            let problem = problem_for(config, r)?;
            let idx = [ri as u64, k as u64];
            let data_seed = rng::derive_seed(config.master_seed, "figure-a/dataset", &idx);
            let sgd_seed = rng::derive_seed(config.master_seed, "figure-a/sgd", &idx);
            let mut traj = Vec::new();
            let record = want_traj && k == 0;
            let pair = paired_sgd(
                &problem,
                data_seed,
                n,
                one_pass_step(n, r, config.nu),
                1,
                n,
                sgd_seed,
                record.then_some(&mut traj),
            )?;
            Ok((pair, traj))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut table = Table::new(&[
        "r",
        "mode",
        "mean_excess_risk",
        "stderr",
        "replicates",
        "diverged",
    ]);
    let mut traj_table = Table::new(&["r", "t", "excess_risk"]);
    for (ri, &r) in config.r_values.iter().enumerate() {
        let cell = &results[ri * reps..(ri + 1) * reps];
        for mode in ["uniform", "tail"] {
            let (m, se, used, div) = summarize(
                cell.iter()
                    .map(|(p, _)| p.map(|p| if mode == "uniform" { p.uniform } else { p.tail })),
            );
            table.push(vec![
                fmt_f64(r),
                mode.into(),
                fmt_f64(m),
                fmt_f64(se),
                used.to_string(),
                div.to_string(),
            ]);
        }
        for &(t, risk) in &cell[0].1 {
            traj_table.push(vec![fmt_f64(r), t.to_string(), fmt_f64(risk)]);
        }
    }
    let meta = metadata(Experiment::FigureA, config)?;
    Ok(Report {
        csv: table.render(&meta)?,
        failed_checks: 0,
        trajectory_csv: if want_traj {
            Some(traj_table.render(&meta)?)
        } else {
            None
        },
    })
}

/// Excess risk over a step-size x batch-size grid with `T = round(n/b)` (one pass).
pub fn run_figure_grid(config: &ExperimentConfig) -> Result<Report> {
    let reps = config.replicates;
    let n = config.n;
    let problem = problem_for(config, config.r)?;
    let cells: Vec<(f64, usize)> = config
        .gammas
        .iter()
        .flat_map(|&g| config.batch_sizes.iter().map(move |&b| (g, b)))
        .collect();
    let items: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..reps).map(move |k| (c, k)))
        .collect();
    let results: Vec<Result<Option<PairedRisk>>> = items
        .par_iter()
        .map(|&(c, k)| {
            let (gamma, b) = cells[c];
            let iterations = theory::round_count(n as f64 / b as f64);
            // One dataset per replicate, shared by all cells.
            let data_seed =
                rng::derive_seed(config.master_seed, "figure-grid/dataset", &[k as u64]);
            let sgd_seed =
                rng::derive_seed(config.master_seed, "figure-grid/sgd", &[c as u64, k as u64]);
            paired_sgd(&problem, data_seed, n, gamma, b, iterations, sgd_seed, None)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut table = Table::new(&[
        "gamma",
        "b",
        "mode",
        "mean_excess_risk",
        "stderr",
        "diverged_count",
    ]);
    for (c, &(gamma, b)) in cells.iter().enumerate() {
        let cell = &results[c * reps..(c + 1) * reps];
        for mode in ["uniform", "tail"] {
            let (m, se, _, div) = summarize(
                cell.iter()
                    .map(|p| p.map(|p| if mode == "uniform" { p.uniform } else { p.tail })),
            );
            table.push(vec![
                fmt_f64(gamma),
                b.to_string(),
                mode.into(),
                fmt_f64(m),
                fmt_f64(se),
                div.to_string(),
            ]);
        }
    }
    Ok(Report {
        csv: table.render(&metadata(Experiment::FigureGrid, config)?)?,
        failed_checks: 0,
        trajectory_csv: None,
    })
}

/// One row of the rates study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub n: usize,
    pub mean_excess_risk: f64,
    pub stderr: f64,
    pub diverged: usize,
}

/// Mean excess risk per sample size under the configured schedule, and the
/// fitted log-log slope when at least two sample sizes are given.
pub fn rates_study(
    config: &ExperimentConfig,
) -> Result<(Vec<theory::ScheduleChoice>, Vec<RatePoint>, Option<f64>)> {
    config.validate(Experiment::Rates)?;
    let problem = problem_for(config, config.r)?;
    let kappa_sq = problem.spectrum.kappa_sq();
    let schedules = config
        .n_values
        .iter()
        .map(|&n| schedule(config.variant, n, config.r, config.nu, kappa_sq))
        .collect::<Result<Vec<_>>>()?;
    let reps = config.replicates;
    let items: Vec<(usize, usize)> = (0..schedules.len())
        .flat_map(|i| (0..reps).map(move |k| (i, k)))
        .collect();
    let results: Vec<Result<Option<f64>>> = items
        .par_iter()
        .map(|&(i, k)| {
            let sc = &schedules[i];
            let idx = [i as u64, k as u64];
            let ds = sample_dataset(
                &problem,
                sc.n,
                rng::derive_seed(config.master_seed, "rates/dataset", &idx),
            )?;
            let cfg = SgdConfig::new(
                sc.gamma,
                sc.batch_size,
                sc.iterations,
                sc.tail_start,
                rng::derive_seed(config.master_seed, "rates/sgd", &idx),
            )?;
            match descent::minibatch_sgd_run(&ds, &cfg) {
                Ok(w) => Ok(Some(excess_risk(&problem.spectrum, &w, &problem.source)?)),
                Err(Error::Diverged { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let points: Vec<RatePoint> = schedules
        .iter()
        .enumerate()
        .map(|(i, sc)| {
            let (m, se, _, div) = summarize(results[i * reps..(i + 1) * reps].iter().copied());
            RatePoint {
                n: sc.n,
                mean_excess_risk: m,
                stderr: se,
                diverged: div,
            }
        })
        .collect();
    let slope = if points.len() >= 2 {
        let xy: Vec<(f64, f64)> = points
            .iter()
            .map(|p| (p.n as f64, p.mean_excess_risk))
            .collect();
        theory::slope_fit(&xy).ok()
    } else {
        None
    };
    Ok((schedules, points, slope))
}

/// Rates-vs-n study under a schedule variant, with a trailing slope row.
pub fn run_rates(config: &ExperimentConfig) -> Result<Report> {
    let (schedules, points, slope) = rates_study(config)?;
    let mut table = Table::new(&[
        "n",
        "variant",
        "gamma",
        "b",
        "L",
        "T",
        "S",
        "mean_excess_risk",
        "stderr",
    ]);
    for (sc, p) in schedules.iter().zip(&points) {
        table.push(vec![
            sc.n.to_string(),
            sc.variant.to_string(),
            fmt_f64(sc.gamma),
            sc.batch_size.to_string(),
            sc.tail_len.to_string(),
            sc.iterations.to_string(),
            sc.tail_start.to_string(),
            fmt_f64(p.mean_excess_risk),
            fmt_f64(p.stderr),
        ]);
    }
    if let Some(s) = slope {
        let mut row = vec![String::new(); 9];
        row[0] = "slope".into();
        row[1] = config.variant.to_string();
        row[7] = fmt_f64(s);
        table.push(row);
    }
    Ok(Report {
        csv: table.render(&metadata(Experiment::Rates, config)?)?,
        failed_checks: 0,
        trajectory_csv: None,
    })
}

/// One verification check aggregated over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check_name: String,
    pub worst_gap: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Numerical checks of the spectral filters on the configured grid.
///
/// * `closed_form_vs_average`: `|G - (1/L) sum g_t| / max(1, gamma T)` against `1e-10`;
/// * `residual_identity`: `|R + sigma G - 1|` against `1e-12`;
/// * `window_of_one`: `|G - g_T| / g_T` for `S = T - 1` against `1e-12`;
/// * `residual_sup_u*`, `filter_sup_u*`, `residual_sup_u2_tail`: largest ratio of
///   the grid sup to its analytic bound, passing when every sup is within its bound.
pub fn verify_filter_checks(v: &VerifyConfig) -> Result<Vec<CheckRow>> {
    v.validate()?;
    let mut rows = Vec::new();
    for &gamma in &v.gammas {
        let grid = spectral::log_grid(v.sigma_min, v.sigma_max_for(gamma), v.grid_points)?;
        let windows = v
            .windows
            .iter()
            .map(|&(s, t)| FilterParams::new(gamma, t, s))
            .collect::<Result<Vec<_>>>()?;
        let g = fmt_f64(gamma);
        let mut push = |name: String, worst: f64, bound: f64, pass: bool| {
            rows.push(CheckRow {
                check_name: format!("{name}[gamma={g}]"),
                worst_gap: worst,
                bound,
                pass,
            })
        };

        let (mut closed, mut ident, mut one) = (0.0f64, 0.0f64, None::<f64>);
        for p in &windows {
            let scale = (gamma * p.iterations() as f64).max(1.0);
            for &sigma in &grid {
                let gt = spectral::tail_filter(sigma, p)?;
                let direct = (p.tail_start() + 1..=p.iterations())
                    .map(|t| spectral::gd_filter(sigma, p, t))
                    .sum::<Result<f64>>()?
                    / p.tail_len() as f64;
                closed = closed.max((gt - direct).abs() / scale);
                let r = spectral::tail_residual(sigma, p)?;
                ident = ident.max((r + sigma * gt - 1.0).abs());
                if p.tail_len() == 1 {
                    let g_t = spectral::gd_filter(sigma, p, p.iterations())?;
                    let gap = (gt - g_t).abs() / g_t;
                    one = Some(one.map_or(gap, |o: f64| o.max(gap)));
                }
            }
        }
        push(
            "closed_form_vs_average".into(),
            closed,
            1e-10,
            closed <= 1e-10,
        );
        push("residual_identity".into(), ident, 1e-12, ident <= 1e-12);
        if let Some(o) = one {
            push("window_of_one".into(), o, 1e-12, o <= 1e-12);
        }

        for &u in &v.u_values {
            let (mut worst, mut pass) = (0.0f64, true);
            for p in &windows {
                let gap = spectral::residual_sup_gap(p, u, &grid, 1.0)?;
                worst = worst.max(gap.observed_sup / gap.lemma_bound);
                pass &= gap.holds();
            }
            push(format!("residual_sup_u{u}"), worst, 1.0, pass);

            let (mut worst, mut pass) = (0.0f64, true);
            for p in &windows {
                let (s, t) = (p.tail_start() as f64, p.iterations() as f64);
                // smallest K with S <= (K-1)/(K+1) T
                let k = ((t + s) / (t - s)).max(1.0);
                let gap = spectral::filter_sup_gap(p, u, &grid, k)?;
                worst = worst.max(gap.observed_sup / gap.lemma_bound);
                pass &= gap.holds();
                if u == 1.0 {
                    // sigma G = 1 - R; near x = 1 the product may round a few ulps above 1.
                    pass &= gap.observed_sup <= 1.0 + 4.0 * f64::EPSILON;
                }
            }
            push(format!("filter_sup_u{u}"), worst, 1.0, pass);
        }

        let tail_windows: Vec<&FilterParams> = windows
            .iter()
            .filter(|p| {
                let (s, t) = (p.tail_start() as f64, p.iterations() as f64);
                s > 0.0 && s <= 0.5 * t && t <= 4.0 * s
            })
            .collect();
        if !tail_windows.is_empty() {
            let (mut worst, mut pass) = (0.0f64, true);
            for p in tail_windows {
                let gap = spectral::residual_sup_gap(p, 2.0, &grid, 3.0)?;
                worst = worst.max(gap.observed_sup / gap.lemma_bound);
                pass &= gap.holds();
            }
            push("residual_sup_u2_tail".into(), worst, 1.0, pass);
        }
    }
    Ok(rows)
}

pub fn run_verify_filters(config: &ExperimentConfig) -> Result<Report> {
    let rows = verify_filter_checks(&config.verify)?;
    let mut table = Table::new(&["check_name", "worst_gap", "bound", "pass"]);
    let failed = rows.iter().filter(|r| !r.pass).count();
    for r in rows {
        table.push(vec![
            r.check_name,
            fmt_f64(r.worst_gap),
            fmt_f64(r.bound),
            r.pass.to_string(),
        ]);
    }
    Ok(Report {
        csv: table.render(&metadata(Experiment::VerifyFilters, config)?)?,
        failed_checks: failed,
        trajectory_csv: None,
    })
}

/// A randomly drawn recursion-probe instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCase {
    pub index: usize,
    pub d: usize,
    pub nu: f64,
    pub settings: ProbeSettings,
}

/// Draws probe configuration `index` from `(master_seed, "probe/config", index)`,
/// with the step size inside the `gamma kappa^2 <= 1/4` guard.
pub fn probe_case(master_seed: u64, index: usize, pc: &ProbeConfig) -> Result<ProbeCase> {
    let mut r = rng::stream(master_seed, "probe/config", &[index as u64]);
    let d = r.random_range(1..=pc.max_dim);
    let nu = r.random_range(0.3..=1.0);
    let perturbation: f64 = r.random_range(0.0..=1.0);
    let h = make_spectrum(d, nu)?;
    let kappa_sq = descent::probe_kappa_sq(&h, perturbation);
    let gamma = r.random_range(0.05..=1.0) * 0.25 / kappa_sq;
    let t = r.random_range(2..=pc.max_iterations);
    let s = r.random_range(0..t);
    let u = r.random_range(0.0..=1.0);
    let alpha = r.random_range(0.2..=1.0);
    let noise_var = r.random_range(0.5..=2.0);
    Ok(ProbeCase {
        index,
        d,
        nu,
        settings: ProbeSettings {
            noise_var,
            perturbation,
            params: FilterParams::new(gamma, t, s)?,
            u,
            alpha,
            replicates: pc.replicates,
            seed: rng::derive_seed(master_seed, "probe/replicates", &[index as u64]),
        },
    })
}

pub fn run_probe(config: &ExperimentConfig) -> Result<Report> {
    let pc = &config.probe;
    let cases = (0..pc.configurations)
        .map(|i| probe_case(config.master_seed, i, pc))
        .collect::<Result<Vec<_>>>()?;
    let reports = cases
        .iter()
        .map(|c| descent::recursion_probe(&make_spectrum(c.d, c.nu)?, &c.settings))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&[
        "config_index",
        "d",
        "nu",
        "gamma",
        "S",
        "T",
        "u",
        "alpha",
        "noise_var",
        "perturbation",
        "empirical",
        "stderr",
        "bound",
        "pass",
    ]);
    let mut failed = 0;
    for (c, rep) in cases.iter().zip(&reports) {
        let pass = rep.within(3.0);
        failed += usize::from(!pass);
        let s = &c.settings;
        table.push(vec![
            c.index.to_string(),
            c.d.to_string(),
            fmt_f64(c.nu),
            fmt_f64(s.params.gamma()),
            s.params.tail_start().to_string(),
            s.params.iterations().to_string(),
            fmt_f64(s.u),
            fmt_f64(s.alpha),
            fmt_f64(s.noise_var),
            fmt_f64(s.perturbation),
            fmt_f64(rep.empirical_moment),
            fmt_f64(rep.std_error),
            fmt_f64(rep.prop_bound),
            pass.to_string(),
        ]);
    }
    Ok(Report {
        csv: table.render(&metadata(Experiment::Probe, config)?)?,
        failed_checks: failed,
        trajectory_csv: None,
    })
}
