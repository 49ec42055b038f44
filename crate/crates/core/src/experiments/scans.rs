//! Scan drivers. Each one builds the model, runs replicas in parallel and
//! collects them in `(N, replica)` order, so results do not depend on the
//! thread count.

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{
    FrozenLawConfig, InitLaw, InitialCoupling, LlnConfig, LlnFamily, OracleConfig, ScanConfig, SimulateConfig,
    SimulateMode, Statistic,
};
use super::persist::Record;
use super::ExperimentError;
use crate::dynamics::{
    em_step, run_coupled, simulate, CoupledRun, Ensemble, FrozenLaw, GapRecord, GaussianPath, ParticleSystem,
    ReferenceLaw, RunSpec, StepMode, System,
};
use crate::linalg::Matrix;
use crate::metrics::lln_gap;
use crate::models::config::{BuiltModel, ModelConfig};
use crate::models::spot::{
    spot_check_delay, spot_check_hamiltonian, spot_check_mean_field, SpotCheckConfig, SpotCheckReport,
};
use crate::models::{
    validate_delay, validate_dissipative, validate_hamiltonian, DelayReport, DissipativeReport, HamiltonianReport,
    Regime,
};
use crate::noise::{normal_pair, unit_f64, NoisePlan};
use crate::oracle::{exact_chaos_curve, ChaosPoint, LinearModelSpec};
use crate::stats::{fit_exponential_decay, fit_power_law, Estimate, FitResult};

// ---------------------------------------------------------------- validation

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdReport {
    /// `dissipative` is present for the dissipative regime only.
    MeanField { dissipative: Option<DissipativeReport<f64>> },
    Delay(DelayReport<f64>),
    Hamiltonian(HamiltonianReport<f64>),
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub threshold: ThresholdReport,
    pub spot_check: SpotCheckReport,
    /// Contraction rate promised by the threshold condition, when there is one.
    pub theoretical_rate: Option<f64>,
    pub passed: bool,
}

/// Builds the model, evaluates its threshold condition and spot-checks the
/// declared constants.
pub fn validate_model(model: &ModelConfig, spot: &SpotCheckConfig) -> Result<ValidationReport, ExperimentError> {
    let report = match model.build::<f64>()? {
        BuiltModel::MeanField(m) => {
            let spot_check = spot_check_mean_field(&m, spot);
            let diss = (m.regime == Regime::Dissipative).then(|| validate_dissipative(&m));
            let threshold_ok = diss.as_ref().is_none_or(|r| r.passed);
            ValidationReport {
                theoretical_rate: diss.as_ref().map(|r| r.rate),
                passed: threshold_ok && spot_check.passed,
                threshold: ThresholdReport::MeanField { dissipative: diss },
                spot_check,
            }
        }
        BuiltModel::Delay(m) => {
            let r = validate_delay(&m)?;
            let spot_check = spot_check_delay(&m, spot);
            ValidationReport {
                theoretical_rate: Some(r.decay_rate),
                passed: r.passed && spot_check.passed,
                threshold: ThresholdReport::Delay(r),
                spot_check,
            }
        }
        BuiltModel::Hamiltonian(m) => {
            let r = validate_hamiltonian(&m)?;
            let spot_check = spot_check_hamiltonian(&m, spot);
            ValidationReport {
                theoretical_rate: Some(r.decay_rate),
                passed: r.passed && spot_check.passed,
                threshold: ThresholdReport::Hamiltonian(r),
                spot_check,
            }
        }
    };
    Ok(report)
}

// ------------------------------------------------------------------- seeding

/// `count` particles from `law`, particle-major, `ceil(D/2)` normal pairs each,
/// so the first `k` particles do not depend on `count`.
fn draw_states(law: &InitLaw, shift: Option<&[f64]>, count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = law.mean.len();
    let mut out = Vec::with_capacity(count * dim);
    let mut z = vec![0.0; dim.div_ceil(2) * 2];
    for _ in 0..count {
        for pair in z.chunks_mut(2) {
            let (a, b) = normal_pair(rng);
            pair[0] = a;
            pair[1] = b;
        }
        for j in 0..dim {
            let s = shift.map_or(0.0, |h| h[j]);
            out.push(law.mean[j] + s + law.std[j] * z[j]);
        }
    }
    out
}

fn offset_of(coupling: &InitialCoupling) -> Option<&[f64]> {
    match coupling {
        InitialCoupling::Offset { offset } => Some(offset),
        _ => None,
    }
}

/// Reference runs use domains far away from the replica indices.
const REFERENCE_NOISE: u64 = u64::MAX;
const REFERENCE_INIT: u64 = u64::MAX - 1;

fn build_frozen(
    sys: &System<'_, f64>,
    scan: &ScanConfig,
    dt: f64,
    steps: usize,
) -> Result<FrozenLaw<f64>, ExperimentError> {
    let (dim, lag) = (sys.state_dim(), sys.lag_steps());
    let shift = offset_of(&scan.initial_coupling);
    match scan.frozen_law {
        FrozenLawConfig::ReferenceEnsemble { .. } => {
            let m_ref = scan.m_ref().unwrap_or(1);
            let base = NoisePlan::new(scan.seed);
            let states = draw_states(&scan.init, shift, m_ref, &mut base.derive(REFERENCE_INIT).rng(0));
            let init = Ensemble::with_lag(states, dim, lag)?;
            let law = ReferenceLaw::simulate(sys, init, &base.derive(REFERENCE_NOISE), dt, steps)?;
            Ok(FrozenLaw::ReferenceEnsemble(law))
        }
        FrozenLawConfig::GaussianOracle {} => {
            if !sys.is_affine_in_measure() {
                return Err(ExperimentError::Config(
                    "gaussian_oracle backend needs kernels that are affine in the measure; use reference_ensemble"
                        .into(),
                ));
            }
            let mean: Vec<f64> = (0..dim).map(|j| scan.init.mean[j] + shift.map_or(0.0, |h| h[j])).collect();
            Ok(FrozenLaw::GaussianOracle(mean_path(sys, mean, dt, steps)?))
        }
    }
}

/// Euler mean of the limit law. For drifts affine in the state and in the
/// measure, the mean of the Euler chain obeys the Euler recursion of the
/// mean, which is a single noiseless particle interacting with itself.
fn mean_path(sys: &System<'_, f64>, mean: Vec<f64>, dt: f64, steps: usize) -> Result<GaussianPath<f64>, ExperimentError> {
    let mut ens = Ensemble::with_lag(mean, sys.state_dim(), sys.lag_steps())?;
    let zeros = vec![0.0; sys.noise_dim()];
    let mut means = Vec::with_capacity(steps + 1);
    means.push(ens.heads());
    for _ in 0..steps {
        em_step(sys, &mut ens, StepMode::Interacting, dt, &zeros)?;
        means.push(ens.heads());
    }
    Ok(GaussianPath::new(dt, means)?)
}

fn run_replica(
    sys: &System<'_, f64>,
    frozen: &FrozenLaw<f64>,
    scan: &ScanConfig,
    coupling: &InitialCoupling,
    n: usize,
    replica: usize,
    spec: &RunSpec<f64>,
) -> Result<CoupledRun<f64>, ExperimentError> {
    let wrap = |source| ExperimentError::Replica { n, replica, source };
    let (dim, lag) = (sys.state_dim(), sys.lag_steps());
    let k = scan.k_for(n);
    let plan = NoisePlan::new(scan.seed).derive(replica as u64);
    let inter = draw_states(&scan.init, None, n, &mut plan.derive(0).rng(0));
    let limit = match coupling {
        InitialCoupling::Matched {} => inter[..k * dim].to_vec(),
        InitialCoupling::Independent {} => draw_states(&scan.init, None, k, &mut plan.derive(1).rng(0)),
        InitialCoupling::Offset { offset } => inter[..k * dim]
            .iter()
            .enumerate()
            .map(|(j, x)| x + offset[j % dim])
            .collect(),
    };
    let inter = Ensemble::with_lag(inter, dim, lag).map_err(wrap)?;
    let limit = Ensemble::with_lag(limit, dim, lag).map_err(wrap)?;
    run_coupled(sys, inter, limit, &plan, frozen, spec).map_err(wrap)
}

fn pick(stat: Statistic, r: &GapRecord<f64>) -> f64 {
    match stat {
        Statistic::SupGap => r.sup_gap,
        Statistic::Gap => r.gap,
        Statistic::SegmentGap => r.segment_gap,
    }
}

/// Record times on the `dt` grid: `extra`, the regular grid and `t_end`.
fn record_grid(scan: &ScanConfig, extra: &[f64], every: Option<f64>) -> Vec<f64> {
    let mut times: Vec<f64> = scan.record_times.iter().chain(extra).copied().collect();
    times.push(scan.t_end);
    if let Some(e) = every {
        let count = (scan.t_end / e + 1e-9).floor() as usize;
        times.extend((0..=count).map(|j| j as f64 * e));
    }
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * scan.t_end);
    times
}

/// Per record time, one estimate over replicas.
fn replica_estimates(
    sys: &System<'_, f64>,
    frozen: &FrozenLaw<f64>,
    scan: &ScanConfig,
    coupling: &InitialCoupling,
    n: usize,
    spec: &RunSpec<f64>,
    stat: Statistic,
) -> Result<(Vec<f64>, Vec<Estimate>), ExperimentError> {
    let runs: Vec<Vec<GapRecord<f64>>> = (0..scan.replicas)
        .into_par_iter()
        .map(|r| run_replica(sys, frozen, scan, coupling, n, r, spec).map(|run| run.records))
        .collect::<Result<_, _>>()?;
    let times: Vec<f64> = runs[0].iter().map(|r| r.t).collect();
    let estimates = (0..times.len())
        .map(|j| {
            let samples: Vec<f64> = runs.iter().map(|run| pick(stat, &run[j])).collect();
            Estimate::from_samples(&samples)
        })
        .collect();
    Ok((times, estimates))
}

struct Prepared<'a> {
    sys: System<'a, f64>,
    frozen: FrozenLaw<f64>,
    spec: RunSpec<f64>,
}

fn prepare<'a>(
    built: &'a BuiltModel<f64>,
    scan: &ScanConfig,
    dt: f64,
    record_times: Vec<f64>,
) -> Result<Prepared<'a>, ExperimentError> {
    let sys = System::from_built(built, dt)?;
    scan.check(sys.state_dim())?;
    let spec = RunSpec {
        dt,
        t_end: scan.t_end,
        record_times,
        snapshots: false,
    };
    let steps = spec.steps()? as usize;
    let frozen = build_frozen(&sys, scan, dt, steps)?;
    Ok(Prepared { sys, frozen, spec })
}

fn nearest(times: &[f64], t: f64) -> usize {
    times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map_or(0, |(j, _)| j)
}

// -------------------------------------------------------------------- scan-n

#[derive(Debug, Clone, Serialize)]
pub struct NScanRow {
    pub n: usize,
    pub k: usize,
    pub t: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct DtCheck {
    pub n: usize,
    pub dt: f64,
    pub coarse: Estimate,
    pub fine: Estimate,
    /// `|fine − coarse| / coarse` on the means.
    pub relative_change: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NScanResult {
    pub backend: String,
    pub statistic: Statistic,
    pub fit_time: f64,
    /// All record times for every N, ordered by `(N, t)`.
    pub rows: Vec<NScanRow>,
    /// Log-log fit of the statistic at `fit_time` against N.
    pub fit: Option<FitResult>,
    pub fit_error: Option<String>,
    pub dt_check: Option<DtCheck>,
}

impl NScanResult {
    /// One record per N at the fit time.
    pub fn records(&self) -> Vec<Record> {
        self.at(self.fit_time)
            .into_iter()
            .map(|row| Record::from_estimate(row.n as f64, &row.estimate))
            .collect()
    }

    /// Rows recorded at (the grid time nearest to) `t`, one per N.
    pub fn at(&self, t: f64) -> Vec<&NScanRow> {
        let mut out: Vec<&NScanRow> = Vec::new();
        for row in &self.rows {
            match out.last_mut() {
                Some(last) if last.n == row.n => {
                    if (row.t - t).abs() < (last.t - t).abs() {
                        *last = row;
                    }
                }
                _ => out.push(row),
            }
        }
        out
    }
}

/// Coupling statistic against N with a log-log fit at the fit time.
pub fn rate_scan_n(model: &ModelConfig, scan: &ScanConfig) -> Result<NScanResult, ExperimentError> {
    let built = model.build::<f64>()?;
    let stat = scan.statistic.unwrap_or(Statistic::SupGap);
    let fit_time = scan.fit_time.unwrap_or(scan.t_end);
    let times = record_grid(scan, &[fit_time], scan.record_every);
    let prep = prepare(&built, scan, scan.dt, times)?;

    let mut rows = Vec::new();
    for &n in &scan.n_grid {
        let (times, est) = replica_estimates(&prep.sys, &prep.frozen, scan, &scan.initial_coupling, n, &prep.spec, stat)?;
        rows.extend(times.into_iter().zip(est).map(|(t, estimate)| NScanRow {
            n,
            k: scan.k_for(n),
            t,
            estimate,
        }));
    }
    let mut result = NScanResult {
        backend: prep.frozen.backend_name().into(),
        statistic: stat,
        fit_time,
        rows,
        fit: None,
        fit_error: None,
        dt_check: None,
    };
    let at_fit = result.at(fit_time);
    let ns: Vec<f64> = at_fit.iter().map(|r| r.n as f64).collect();
    let means: Vec<f64> = at_fit.iter().map(|r| r.estimate.mean).collect();
    match fit_power_law(&ns, &means) {
        Ok(f) => result.fit = Some(f),
        Err(e) => result.fit_error = Some(e.to_string()),
    }

    if scan.dt_check {
        let n = scan.n_grid[0];
        let fine_dt = scan.dt / 2.0;
        let fine = prepare(&built, scan, fine_dt, vec![fit_time])?;
        let (_, est) = replica_estimates(&fine.sys, &fine.frozen, scan, &scan.initial_coupling, n, &fine.spec, stat)?;
        let coarse = result.at(fit_time)[0].estimate;
        let fine = est[0];
        result.dt_check = Some(DtCheck {
            n,
            dt: fine_dt,
            coarse,
            fine,
            relative_change: (fine.mean - coarse.mean).abs() / coarse.mean.abs(),
            consistent: coarse.overlaps(&fine),
        });
    }
    Ok(result)
}

// -------------------------------------------------------------------- scan-t

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Uniform,
    NotUniform,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct TScanSeries {
    pub n: usize,
    pub times: Vec<f64>,
    /// Gap with the configured initial coupling.
    pub transient: Vec<Estimate>,
    /// Gap with matched initials.
    pub matched: Vec<Estimate>,
    /// Mean of the matched series over the last 20% of the window.
    pub plateau: f64,
    /// Same average for the transient series.
    pub transient_tail: f64,
    pub plateau_reached: bool,
    /// `N · sup_t` of the matched series.
    pub n_sup_matched: f64,
    pub fit: Option<FitResult>,
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TScanResult {
    pub backend: String,
    pub statistic: Statistic,
    pub series: Vec<TScanSeries>,
    /// Smallest fitted rate over the N grid.
    pub fitted_rate: Option<f64>,
    pub theoretical_rate: Option<f64>,
    pub rate_ok: Option<bool>,
    /// `max_N / min_N` of `N · plateau`.
    pub plateau_n_ratio: f64,
    pub verdict: Verdict,
}

impl TScanResult {
    /// Transient series of the largest N as `(t, estimate)` records.
    pub fn records(&self) -> Vec<Record> {
        self.series
            .iter()
            .flat_map(|s| {
                s.times
                    .iter()
                    .zip(&s.transient)
                    .map(|(t, e)| Record::from_estimate(*t, e))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

const PLATEAU_FACTOR_BOUND: f64 = 2.0;

/// Transient decay rate and time-uniformity of the plateau across N.
pub fn longtime_scan(model: &ModelConfig, scan: &ScanConfig) -> Result<TScanResult, ExperimentError> {
    let built = model.build::<f64>()?;
    let theoretical_rate = validate_model(model, &SpotCheckConfig {
        samples: 0,
        ..Default::default()
    })?
    .theoretical_rate;
    let stat = scan.statistic.unwrap_or(Statistic::Gap);
    let every = scan.record_every.unwrap_or(scan.t_end / 100.0);
    let times = record_grid(scan, &[], Some(every));
    let prep = prepare(&built, scan, scan.dt, times)?;
    let matched_prep;
    // The matched companion needs its own frozen law when the offset moves
    // the limit's initial law.
    let matched_frozen = if let InitialCoupling::Offset { .. } = scan.initial_coupling {
        let mut m = scan.clone();
        m.initial_coupling = InitialCoupling::Matched {};
        matched_prep = prepare(&built, &m, scan.dt, prep.spec.record_times.clone())?;
        &matched_prep.frozen
    } else {
        &prep.frozen
    };

    let mut series = Vec::new();
    for &n in &scan.n_grid {
        let (times, transient) =
            replica_estimates(&prep.sys, &prep.frozen, scan, &scan.initial_coupling, n, &prep.spec, stat)?;
        let matched = if matches!(scan.initial_coupling, InitialCoupling::Matched {}) {
            transient.clone()
        } else {
            replica_estimates(&prep.sys, matched_frozen, scan, &InitialCoupling::Matched {}, n, &prep.spec, stat)?.1
        };
        let tail_start = nearest(&times, 0.8 * scan.t_end);
        let tail_mean = |v: &[Estimate]| v[tail_start..].iter().map(|e| e.mean).sum::<f64>() / (v.len() - tail_start) as f64;
        let plateau = tail_mean(&matched);
        let transient_tail = tail_mean(&transient);
        let plateau_reached = transient_tail <= 2.0 * plateau;
        let n_sup_matched = n as f64 * matched.iter().map(|e| e.mean).fold(0.0, f64::max);

        let (ft, fv): (Vec<f64>, Vec<f64>) = times
            .iter()
            .zip(&transient)
            .filter(|(_, e)| e.mean > 2.0 * plateau)
            .map(|(t, e)| (*t, e.mean))
            .unzip();
        let (fit, fit_error) = match fit_exponential_decay(&ft, &fv, plateau) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        series.push(TScanSeries {
            n,
            times,
            transient,
            matched,
            plateau,
            transient_tail,
            plateau_reached,
            n_sup_matched,
            fit,
            fit_error,
        });
    }

    let fitted_rate = series
        .iter()
        .map(|s| s.fit.as_ref().map(|f| f.slope))
        .collect::<Option<Vec<f64>>>()
        .and_then(|v| v.into_iter().reduce(f64::min));
    let rate_ok = fitted_rate.zip(theoretical_rate).map(|(f, t)| f >= t);
    let scaled: Vec<f64> = series.iter().map(|s| s.plateau * s.n as f64).collect();
    let (lo, hi) = scaled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let plateau_n_ratio = hi / lo;
    let verdict = if !series.iter().all(|s| s.plateau_reached) || !(lo > 0.0) {
        Verdict::Inconclusive
    } else if plateau_n_ratio <= PLATEAU_FACTOR_BOUND {
        Verdict::Uniform
    } else {
        Verdict::NotUniform
    };
    Ok(TScanResult {
        backend: prep.frozen.backend_name().into(),
        statistic: stat,
        series,
        fitted_rate,
        theoretical_rate,
        rate_ok,
        plateau_n_ratio,
        verdict,
    })
}

// --------------------------------------------------------------- gap series

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeriesPoint {
    pub t: f64,
    pub estimate: Estimate,
}

/// Coupling statistic over time for a single N.
pub fn coupled_series(model: &ModelConfig, scan: &ScanConfig, n: usize) -> Result<Vec<SeriesPoint>, ExperimentError> {
    let built = model.build::<f64>()?;
    let mut one = scan.clone();
    one.n_grid = vec![n];
    let stat = scan.statistic.unwrap_or(Statistic::Gap);
    let every = scan.record_every.unwrap_or(scan.t_end / 100.0);
    let prep = prepare(&built, &one, scan.dt, record_grid(&one, &[], Some(every)))?;
    let (times, est) = replica_estimates(&prep.sys, &prep.frozen, &one, &one.initial_coupling, n, &prep.spec, stat)?;
    Ok(times
        .into_iter()
        .zip(est)
        .map(|(t, estimate)| SeriesPoint { t, estimate })
        .collect())
}

// ------------------------------------------------------------------ simulate

#[derive(Debug, Clone, Serialize)]
pub struct SimulationResult {
    pub n: usize,
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major `N × D` states per record time.
    pub states: Vec<Vec<f64>>,
}

impl SimulationResult {
    /// Ensemble mean of the first coordinate over time, CI across particles.
    pub fn records(&self) -> Vec<Record> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(t, s)| {
                let first: Vec<f64> = s.iter().step_by(self.dim.max(1)).copied().collect();
                Record::from_estimate(*t, &Estimate::from_samples(&first))
            })
            .collect()
    }
}

pub fn run_simulation(model: &ModelConfig, sim: &SimulateConfig) -> Result<SimulationResult, ExperimentError> {
    let built = model.build::<f64>()?;
    let sys = System::from_built(&built, sim.dt)?;
    let (dim, lag) = (sys.state_dim(), sys.lag_steps());
    if sim.n == 0 || sim.init.mean.len() != dim || sim.init.std.len() != dim {
        return Err(ExperimentError::Config(format!("need n > 0 and init of length {dim}")));
    }
    let as_scan = ScanConfig {
        n_grid: vec![sim.n],
        k: None,
        t_end: sim.t_end,
        record_times: Vec::new(),
        record_every: Some(sim.record_every),
        fit_time: None,
        replicas: 2,
        dt: sim.dt,
        seed: sim.seed,
        frozen_law: sim.frozen_law.clone().unwrap_or(FrozenLawConfig::GaussianOracle {}),
        initial_coupling: InitialCoupling::Matched {},
        init: sim.init.clone(),
        statistic: None,
        dt_check: false,
    };
    let spec = RunSpec {
        dt: sim.dt,
        t_end: sim.t_end,
        record_times: record_grid(&as_scan, &[], Some(sim.record_every)),
        snapshots: false,
    };
    let plan = NoisePlan::new(sim.seed);
    let states = draw_states(&sim.init, None, sim.n, &mut plan.derive(0).rng(0));
    let init = Ensemble::with_lag(states, dim, lag)?;
    let traj = match sim.mode {
        SimulateMode::Interacting => simulate(&sys, init, &plan, StepMode::Interacting, &spec)?,
        SimulateMode::Limit => {
            if sim.frozen_law.is_none() {
                return Err(ExperimentError::Config("limit mode needs a frozen_law".into()));
            }
            let frozen = build_frozen(&sys, &as_scan, sim.dt, spec.steps()? as usize)?;
            simulate(&sys, init, &plan, StepMode::Frozen(&frozen), &spec)?
        }
    };
    Ok(SimulationResult {
        n: sim.n,
        dim,
        times: traj.times,
        states: traj.states,
    })
}

// ----------------------------------------------------------------------- LLN

#[derive(Debug, Clone, Serialize)]
pub struct LlnRow {
    pub n: usize,
    pub estimate: Estimate,
    /// `N · E|gap|²`.
    pub scaled: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LlnResult {
    pub rows: Vec<LlnRow>,
    /// `max / min` of the scaled column; `None` when some entry is zero.
    pub ratio: Option<f64>,
    pub flat: bool,
}

impl LlnResult {
    pub fn records(&self) -> Vec<Record> {
        self.rows.iter().map(|r| Record::from_estimate(r.n as f64, &r.estimate)).collect()
    }
}

const LLN_FLATNESS: f64 = 1.5;

pub fn lln_scan(cfg: &LlnConfig) -> Result<LlnResult, ExperimentError> {
    if cfg.n_grid.is_empty() || cfg.n_grid.contains(&0) || cfg.trials < 2 {
        return Err(ExperimentError::Config("lln needs positive N values and at least 2 trials".into()));
    }
    let rows: Vec<LlnRow> = cfg
        .n_grid
        .iter()
        .map(|&n| {
            let estimate = match cfg.h {
                LlnFamily::Bernoulli {} => lln_gap(
                    |_, w| *w,
                    |_| 0.5,
                    |rng: &mut ChaCha8Rng| if unit_f64(rng.next_u64()) < 0.5 { 1.0 } else { 0.0 },
                    n,
                    cfg.trials,
                    cfg.seed,
                ),
                LlnFamily::Constant { value } => {
                    lln_gap(|_, _: &f64| value, |_| value, |_: &mut ChaCha8Rng| 0.0, n, cfg.trials, cfg.seed)
                }
                LlnFamily::ProductGaussian {} => lln_gap(
                    |v, w| v * w,
                    |_| 0.0,
                    |rng: &mut ChaCha8Rng| normal_pair(rng).0,
                    n,
                    cfg.trials,
                    cfg.seed,
                ),
            };
            LlnRow {
                n,
                scaled: n as f64 * estimate.mean,
                estimate,
            }
        })
        .collect();
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.scaled), hi.max(r.scaled)));
    let ratio = (lo > 0.0).then(|| hi / lo);
    Ok(LlnResult {
        rows,
        flat: ratio.is_none_or(|r| r <= LLN_FLATNESS),
        ratio,
    })
}

// -------------------------------------------------------------------- oracle

#[derive(Debug, Clone, Serialize)]
pub struct OracleCurve {
    pub k: usize,
    pub points: Vec<ChaosPoint<f64>>,
    pub kl_fit: Option<FitResult>,
    pub w2_fit: Option<FitResult>,
    /// `KL(k) / KL(1)` at the largest N, when `k = 1` is on the grid.
    pub kl_ratio_to_k1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub t: f64,
    pub curves: Vec<OracleCurve>,
}

impl OracleResult {
    /// KL against N for each k, in the order of the k grid.
    pub fn records(&self) -> Vec<Record> {
        self.curves
            .iter()
            .flat_map(|c| c.points.iter().map(|p| exact_record(p.n as f64, p.kl)))
            .collect()
    }
}

fn exact_record(param: f64, v: f64) -> Record {
    Record {
        param,
        stat: v,
        ci_low: v,
        ci_high: v,
        n_replicas: 0,
    }
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<Matrix<f64>, ExperimentError> {
    Matrix::from_rows(rows).map_err(|e| ExperimentError::Config(format!("{name}: {e}")))
}

pub fn oracle_scan(cfg: &OracleConfig) -> Result<OracleResult, ExperimentError> {
    let a0 = rows_to_matrix("a0", &cfg.a0)?;
    let d = a0.rows();
    let zero = || Matrix::zeros(d, d);
    let b1 = cfg.b1.as_deref().map(|r| rows_to_matrix("b1", r)).transpose()?.unwrap_or_else(zero);
    let b2 = cfg.b2.as_deref().map(|r| rows_to_matrix("b2", r)).transpose()?.unwrap_or_else(zero);
    let sigma = rows_to_matrix("sigma", &cfg.sigma)?;
    let s0 = rows_to_matrix("s0", &cfg.s0)?;
    let c0 = cfg.c0.clone().unwrap_or_else(|| vec![0.0; d]);
    let c1 = cfg.c1.clone().unwrap_or_else(|| vec![0.0; d]);
    let spec = LinearModelSpec::new(a0, c0, b1, b2, c1, sigma)?;
    if cfg.k.is_empty() || cfg.n_grid.is_empty() || cfg.k.iter().any(|&k| cfg.n_grid.iter().any(|&n| k > n)) {
        return Err(ExperimentError::Config("need nonempty k and N grids with k <= N".into()));
    }
    let mut curves = Vec::with_capacity(cfg.k.len());
    for &k in &cfg.k {
        let points = exact_chaos_curve(&spec, &cfg.n_grid, k, cfg.t, &cfg.m0, &s0, cfg.dt_ode)?;
        let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
        let kl: Vec<f64> = points.iter().map(|p| p.kl).collect();
        let w2: Vec<f64> = points.iter().map(|p| p.w2_sq).collect();
        curves.push(OracleCurve {
            k,
            kl_fit: fit_power_law(&ns, &kl).ok(),
            w2_fit: fit_power_law(&ns, &w2).ok(),
            points,
            kl_ratio_to_k1: None,
        });
    }
    if let Some(base) = curves.iter().find(|c| c.k == 1).and_then(|c| c.points.last()).map(|p| p.kl) {
        for c in &mut curves {
            c.kl_ratio_to_k1 = c.points.last().map(|p| p.kl / base);
        }
    }
    Ok(OracleResult { t: cfg.t, curves })
}
