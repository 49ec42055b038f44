//! Euler–Maruyama integration of interacting particle systems, of their
//! limit copies driven by a frozen law, and of the synchronous coupling
//! between the two.
//!
//! Every step evaluates all coefficients on the pre-step ensemble and only
//! then writes the new states, so a step is a parallel map over particles
//! whose result does not depend on the thread count.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist_sq, Matrix};
use crate::measure::{exp2_of_heads, MeasureSummary, SummaryNeeds};
use crate::metrics::GaussianLaw;
use crate::models::config::BuiltModel;
use crate::models::{DelayModel, HamiltonianModel, MeanFieldModel, ModelError};
use crate::noise::{NoiseCursor, NoisePlan};
use crate::oracle::MomentPath;
use crate::scalar::Scalar;
use crate::segment::{SegmentCloud, SegmentView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Interacting,
    Limit,
    Reference,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Interacting => "interacting",
            Side::Limit => "limit",
            Side::Reference => "reference",
        })
    }
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("blow-up in the {side} system: non-finite state of particle {particle} after step {step}")]
    BlowUp { step: u64, particle: usize, side: Side },
    #[error("frozen law mismatch: {0}")]
    FrozenLawMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `N` particles in `R^D`, each with a ring buffer of its last `L + 1` grid states.
///
/// With `L = 0` the buffer is just the current state and the storage is a
/// plain `N × D` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    count: usize,
    dim: usize,
    lag: usize,
    data: Vec<T>,
    head_slot: usize,
    step: u64,
    t: T,
}

/// An ensemble whose particles carry path segments; same type, `L > 0`.
pub type SegmentEnsemble<T> = Ensemble<T>;

impl<T: Scalar> Ensemble<T> {
    /// Current states, row-major `N × D`, no history.
    pub fn new(states: Vec<T>, dim: usize) -> Result<Self, DynamicsError> {
        Self::with_lag(states, dim, 0)
    }

    /// Current states extended constantly over `L` past grid points.
    pub fn with_lag(states: Vec<T>, dim: usize, lag: usize) -> Result<Self, DynamicsError> {
        check_layout(states.len(), dim, 1)?;
        let count = states.len() / dim;
        let mut data = Vec::with_capacity(count * (lag + 1) * dim);
        for x in states.chunks(dim) {
            for _ in 0..=lag {
                data.extend_from_slice(x);
            }
        }
        Self::from_raw(count, dim, lag, data)
    }

    /// Explicit histories: for each particle, `L + 1` states oldest first.
    pub fn from_histories(histories: Vec<T>, dim: usize, lag: usize) -> Result<Self, DynamicsError> {
        check_layout(histories.len(), dim, lag + 1)?;
        let count = histories.len() / ((lag + 1) * dim);
        Self::from_raw(count, dim, lag, histories)
    }

    fn from_raw(count: usize, dim: usize, lag: usize, data: Vec<T>) -> Result<Self, DynamicsError> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidArgument(format!(
                "initial state of particle {} is not finite",
                bad / ((lag + 1) * dim)
            )));
        }
        Ok(Self {
            count,
            dim,
            lag,
            data,
            head_slot: lag,
            step: 0,
            t: T::zero(),
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lag_steps(&self) -> usize {
        self.lag
    }

    /// Number of steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn t(&self) -> T {
        self.t
    }

    pub fn segment(&self, i: usize) -> SegmentView<'_, T> {
        SegmentView::ring(&self.data, self.dim, self.lag, i, self.head_slot)
    }

    pub fn head(&self, i: usize) -> &[T] {
        self.segment(i).head()
    }

    /// Current states as a row-major `N × D` array.
    pub fn heads(&self) -> Vec<T> {
        if self.lag == 0 {
            return self.data.clone();
        }
        (0..self.count).flat_map(|i| self.head(i).iter().copied()).collect()
    }

    pub fn cloud(&self) -> SegmentCloud<'_, T> {
        SegmentCloud::ring(&self.data, self.dim, self.lag, self.count, self.head_slot)
    }

    /// Empirical measure of the current segments.
    pub fn summary(&self, needs: SummaryNeeds) -> MeasureSummary<'_, T> {
        MeasureSummary::empirical(self.cloud(), needs)
    }

    /// Ensemble mean of the current states.
    pub fn mean(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.dim];
        for i in 0..self.count {
            for (a, v) in m.iter_mut().zip(self.head(i)) {
                *a += *v;
            }
        }
        let n = T::from_usize_lossy(self.count);
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// First `k` particles with their histories.
    pub fn prefix(&self, k: usize) -> Self {
        let k = k.min(self.count);
        let block = (self.lag + 1) * self.dim;
        Self {
            count: k,
            dim: self.dim,
            lag: self.lag,
            data: self.data[..k * block].to_vec(),
            head_slot: self.head_slot,
            step: self.step,
            t: self.t,
        }
    }

    /// Rotates the ring buffers and stores `heads` (row-major `N × D`) as the new current states.
    fn push_heads(&mut self, heads: &[T], dt: T) -> Result<(), usize> {
        let slot = if self.lag == 0 { 0 } else { (self.head_slot + 1) % (self.lag + 1) };
        let block = (self.lag + 1) * self.dim;
        let mut bad = None;
        for (i, h) in heads.chunks(self.dim).enumerate() {
            if bad.is_none() && h.iter().any(|v| !v.is_finite()) {
                bad = Some(i);
            }
            let start = i * block + slot * self.dim;
            self.data[start..start + self.dim].copy_from_slice(h);
        }
        self.head_slot = slot;
        self.step += 1;
        self.t = T::from_u64(self.step).expect("step count representable") * dt;
        bad.map_or(Ok(()), Err)
    }
}

fn check_layout(len: usize, dim: usize, points: usize) -> Result<(), DynamicsError> {
    if dim == 0 || len == 0 || len % (dim * points) != 0 {
        return Err(DynamicsError::InvalidArgument(format!(
            "{len} values do not split into particles of {points} points in dimension {dim}"
        )));
    }
    Ok(())
}

/// Coefficients of one particle system, evaluated against a measure summary.
pub trait ParticleSystem<T: Scalar>: Sync {
    /// Dimension `D` of a particle state.
    fn state_dim(&self) -> usize;
    /// Dimension of the driving Brownian motion.
    fn noise_dim(&self) -> usize;
    /// Delay steps `L`; zero for Markovian systems.
    fn lag_steps(&self) -> usize;
    fn summary_needs(&self) -> SummaryNeeds;
    /// Writes the drift (`D`) and the row-major diffusion (`D × noise_dim`)
    /// of the particle whose segment is `seg`. `scratch` has length `D`.
    fn coefficients(
        &self,
        t: T,
        seg: &SegmentView<'_, T>,
        mu: &MeasureSummary<'_, T>,
        drift: &mut [T],
        diffusion: &mut [T],
        scratch: &mut [T],
    );
    /// Whether a frozen law carrying only means is enough.
    fn is_affine_in_measure(&self) -> bool {
        let n = self.summary_needs();
        !n.cloud && !n.exp2
    }
}

/// The interacting system `b(x, μ) = b⁽⁰⁾(x) + ∫ b⁽¹⁾(x, y) μ(dy)`, `σ(x, μ) = ∫ σ̃(x, y) μ(dy)`.
#[derive(Debug, Clone, Copy)]
pub struct MeanFieldSystem<'a, T> {
    model: &'a MeanFieldModel<T>,
}

impl<'a, T: Scalar> MeanFieldSystem<'a, T> {
    pub fn new(model: &'a MeanFieldModel<T>) -> Self {
        Self { model }
    }
}

impl<T: Scalar> ParticleSystem<T> for MeanFieldSystem<'_, T> {
    fn state_dim(&self) -> usize {
        self.model.d()
    }

    fn noise_dim(&self) -> usize {
        self.model.n()
    }

    fn lag_steps(&self) -> usize {
        0
    }

    fn summary_needs(&self) -> SummaryNeeds {
        self.model
            .drift
            .b1
            .needs()
            .union(self.model.diffusion.sigma_tilde.needs())
    }

    fn coefficients(
        &self,
        t: T,
        seg: &SegmentView<'_, T>,
        mu: &MeasureSummary<'_, T>,
        drift: &mut [T],
        diffusion: &mut [T],
        scratch: &mut [T],
    ) {
        let x = seg.head();
        self.model.drift.b0.eval(t, x, drift);
        self.model.drift.b1.average(t, x, mu, scratch);
        for (o, v) in drift.iter_mut().zip(scratch.iter()) {
            *o += *v;
        }
        self.model.diffusion.sigma_tilde.average(t, x, mu, diffusion);
    }
}

/// `dX = b(X(t))dt + B(X_t, μ_t)dt + σ(X_t, μ_t)dW` on the `dt` grid.
#[derive(Debug, Clone, Copy)]
pub struct DelaySystem<'a, T> {
    model: &'a DelayModel<T>,
    lag: usize,
}

impl<'a, T: Scalar> DelaySystem<'a, T> {
    pub fn new(model: &'a DelayModel<T>, dt: T) -> Result<Self, DynamicsError> {
        Ok(Self {
            model,
            lag: model.lag_steps(dt)?,
        })
    }
}

impl<T: Scalar> ParticleSystem<T> for DelaySystem<'_, T> {
    fn state_dim(&self) -> usize {
        self.model.d()
    }

    fn noise_dim(&self) -> usize {
        self.model.n()
    }

    fn lag_steps(&self) -> usize {
        self.lag
    }

    fn summary_needs(&self) -> SummaryNeeds {
        self.model.b_tilde.needs().union(self.model.sigma_tilde.needs())
    }

    fn coefficients(
        &self,
        t: T,
        seg: &SegmentView<'_, T>,
        mu: &MeasureSummary<'_, T>,
        drift: &mut [T],
        diffusion: &mut [T],
        scratch: &mut [T],
    ) {
        self.model.b.eval(t, seg.head(), drift);
        self.model.b_tilde.average(t, seg, mu, scratch);
        for (o, v) in drift.iter_mut().zip(scratch.iter()) {
            *o += *v;
        }
        self.model.sigma_tilde.average(t, seg, mu, diffusion);
    }
}

/// Kinetic system on `R^{m+d}`; noise enters the second block only.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianSystem<'a, T> {
    model: &'a HamiltonianModel<T>,
    lag: usize,
}

impl<'a, T: Scalar> HamiltonianSystem<'a, T> {
    pub fn new(model: &'a HamiltonianModel<T>, dt: T) -> Result<Self, DynamicsError> {
        Ok(Self {
            model,
            lag: model.lag_steps(dt)?,
        })
    }
}

impl<T: Scalar> ParticleSystem<T> for HamiltonianSystem<'_, T> {
    fn state_dim(&self) -> usize {
        self.model.m() + self.model.d()
    }

    fn noise_dim(&self) -> usize {
        self.model.d()
    }

    fn lag_steps(&self) -> usize {
        self.lag
    }

    fn summary_needs(&self) -> SummaryNeeds {
        self.model.b_tilde.needs()
    }

    fn coefficients(
        &self,
        t: T,
        seg: &SegmentView<'_, T>,
        mu: &MeasureSummary<'_, T>,
        drift: &mut [T],
        diffusion: &mut [T],
        scratch: &mut [T],
    ) {
        let m = self.model.m();
        let d = self.model.d();
        let x = seg.head();
        let (x1, x2) = x.split_at(m);
        let (d1, d2) = drift.split_at_mut(m);
        self.model.a.mul_vec_into(x1, d1);
        self.model.coupling.mul_vec_acc(x2, d1);
        self.model.b.eval(t, x2, d2);
        self.model.b_tilde.average(t, seg, mu, &mut scratch[..d]);
        for (o, v) in d2.iter_mut().zip(scratch.iter()) {
            *o += *v;
        }
        let (upper, lower) = diffusion.split_at_mut(m * d);
        upper.iter_mut().for_each(|v| *v = T::zero());
        lower.copy_from_slice(self.model.sigma.as_slice());
    }
}

/// Any of the built-in systems.
#[derive(Debug, Clone, Copy)]
pub enum System<'a, T> {
    MeanField(MeanFieldSystem<'a, T>),
    Delay(DelaySystem<'a, T>),
    Hamiltonian(HamiltonianSystem<'a, T>),
}

impl<'a, T: Scalar> System<'a, T> {
    pub fn from_built(model: &'a BuiltModel<T>, dt: T) -> Result<Self, DynamicsError> {
        Ok(match model {
            BuiltModel::MeanField(m) => Self::MeanField(MeanFieldSystem::new(m)),
            BuiltModel::Delay(m) => Self::Delay(DelaySystem::new(m, dt)?),
            BuiltModel::Hamiltonian(m) => Self::Hamiltonian(HamiltonianSystem::new(m, dt)?),
        })
    }
}

macro_rules! delegate {
    ($self:ident, $s:ident => $e:expr) => {
        match $self {
            System::MeanField($s) => $e,
            System::Delay($s) => $e,
            System::Hamiltonian($s) => $e,
        }
    };
}

impl<T: Scalar> ParticleSystem<T> for System<'_, T> {
    fn state_dim(&self) -> usize {
        delegate!(self, s => s.state_dim())
    }

    fn noise_dim(&self) -> usize {
        delegate!(self, s => s.noise_dim())
    }

    fn lag_steps(&self) -> usize {
        delegate!(self, s => s.lag_steps())
    }

    fn summary_needs(&self) -> SummaryNeeds {
        delegate!(self, s => s.summary_needs())
    }

    fn coefficients(
        &self,
        t: T,
        seg: &SegmentView<'_, T>,
        mu: &MeasureSummary<'_, T>,
        drift: &mut [T],
        diffusion: &mut [T],
        scratch: &mut [T],
    ) {
        delegate!(self, s => s.coefficients(t, seg, mu, drift, diffusion, scratch))
    }
}

/// Stored law of a separate, independently driven interacting run of `M_ref` particles.
#[derive(Debug, Clone)]
pub struct ReferenceLaw<T> {
    dt: T,
    steps: usize,
    count: usize,
    dim: usize,
    lag: usize,
    means_now: Vec<T>,
    means_lag: Vec<T>,
    /// Time-major `(L + steps + 1) × M_ref × D`; row `L + s` is step `s`.
    history: Option<Vec<T>>,
    exp2: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ReferenceLaw<T> {
    /// Runs the interacting system from `init` for `steps` steps and stores
    /// what kernel averages against its empirical measures will need.
    pub fn simulate<S: ParticleSystem<T> + ?Sized>(
        sys: &S,
        mut init: Ensemble<T>,
        plan: &NoisePlan,
        dt: T,
        steps: usize,
    ) -> Result<Self, DynamicsError> {
        check_system(sys, &init)?;
        let needs = sys.summary_needs();
        let (count, dim, lag) = (init.len(), init.dim(), init.lag_steps());
        let row = count * dim;
        let keep_history = needs.cloud;
        let mut history = keep_history.then(|| Vec::with_capacity((lag + steps + 1) * row));
        if let Some(h) = history.as_mut() {
            for j in (1..=lag).rev() {
                for i in 0..count {
                    h.extend_from_slice(init.segment(i).at_lag(j));
                }
            }
        }
        let mut law = Self {
            dt,
            steps,
            count,
            dim,
            lag,
            means_now: Vec::with_capacity((steps + 1) * dim),
            means_lag: Vec::with_capacity((steps + 1) * dim),
            history: None,
            exp2: Vec::with_capacity(steps + 1),
        };
        let mut record = |ens: &Ensemble<T>, law: &mut Self| {
            let summary = ens.summary(SummaryNeeds {
                means: true,
                ..Default::default()
            });
            law.means_now.extend_from_slice(summary.mean_now());
            law.means_lag.extend_from_slice(summary.mean_lag());
            law.exp2.push(if needs.exp2 { exp2_of_heads(&ens.cloud()) } else { None });
            if let Some(h) = history.as_mut() {
                for i in 0..count {
                    h.extend_from_slice(ens.head(i));
                }
            }
        };
        record(&init, &mut law);
        let mut noise = NoiseBank::new(plan, count, init.step(), sys.noise_dim());
        let mut buf = vec![T::zero(); row];
        for _ in 0..steps {
            let inc = noise.next(dt);
            advance_interacting(sys, &mut init, dt, inc, &mut buf).map_err(|p| blow_up(&init, p, Side::Reference))?;
            record(&init, &mut law);
        }
        law.history = history;
        Ok(law)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Empirical measure of the reference run after `step` steps.
    pub fn summary(&self, step: usize) -> MeasureSummary<'_, T> {
        let mean_now = self.means_now[step * self.dim..(step + 1) * self.dim].to_vec();
        let mean_lag = self.means_lag[step * self.dim..(step + 1) * self.dim].to_vec();
        match &self.history {
            Some(h) => MeasureSummary::empirical_with_exp2(
                SegmentCloud::history(h, self.dim, self.lag, self.count, step + self.lag),
                mean_now,
                mean_lag,
                self.exp2[step].as_deref(),
                true,
            ),
            None => MeasureSummary::moments_only(mean_now, mean_lag),
        }
    }

    /// Mean of the reference ensemble after `step` steps.
    pub fn mean(&self, step: usize) -> &[T] {
        &self.means_now[step * self.dim..(step + 1) * self.dim]
    }
}

/// Means of a Gaussian law on the `dt` grid. Only kernels that are affine in
/// the measure can be averaged against it.
#[derive(Debug, Clone)]
pub struct GaussianPath<T> {
    dt: T,
    dim: usize,
    means: Vec<T>,
}

impl<T: Scalar> GaussianPath<T> {
    /// `means[s]` is the mean at step `s`.
    pub fn new(dt: T, means: Vec<Vec<T>>) -> Result<Self, DynamicsError> {
        let dim = means.first().map_or(0, Vec::len);
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(DynamicsError::InvalidArgument("Gaussian path needs equal, nonzero dimensions".into()));
        }
        Ok(Self {
            dt,
            dim,
            means: means.concat(),
        })
    }

    pub fn from_moments(path: &MomentPath<GaussianLaw<T>, T>) -> Self {
        Self {
            dt: path.dt,
            dim: path.laws[0].dim(),
            means: path.laws.iter().flat_map(|g| g.mean().iter().copied()).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.means.len() / self.dim - 1
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn mean(&self, step: usize) -> &[T] {
        &self.means[step * self.dim..(step + 1) * self.dim]
    }

    /// The law before time zero is the initial law (constant history extension).
    fn summary(&self, step: usize, lag: usize) -> MeasureSummary<'_, T> {
        MeasureSummary::moments_only(self.mean(step).to_vec(), self.mean(step.saturating_sub(lag)).to_vec())
    }
}

/// Stand-in for the law `μ_t` of the limit process.
#[derive(Debug, Clone)]
pub enum FrozenLaw<T> {
    ReferenceEnsemble(ReferenceLaw<T>),
    GaussianOracle(GaussianPath<T>),
}

impl<T: Scalar> FrozenLaw<T> {
    pub fn dt(&self) -> T {
        match self {
            Self::ReferenceEnsemble(r) => r.dt,
            Self::GaussianOracle(g) => g.dt,
        }
    }

    /// Last step covered.
    pub fn steps(&self) -> usize {
        match self {
            Self::ReferenceEnsemble(r) => r.steps,
            Self::GaussianOracle(g) => g.steps(),
        }
    }

    pub fn backend_name(&self) -> &'static str {
        match self {
            Self::ReferenceEnsemble(_) => "reference_ensemble",
            Self::GaussianOracle(_) => "gaussian_oracle",
        }
    }

    /// Checks that the law fits `sys` on the grid `dt` up to step `last`.
    pub fn check<S: ParticleSystem<T> + ?Sized>(&self, sys: &S, dt: T, last: u64) -> Result<(), DynamicsError> {
        let fd = self.dt();
        if (fd - dt).abs() > T::lit(1e-9) * dt {
            return Err(DynamicsError::FrozenLawMismatch(format!("law is stored with dt = {fd}, run uses dt = {dt}")));
        }
        if last > self.steps() as u64 {
            return Err(DynamicsError::FrozenLawMismatch(format!(
                "law covers {} steps, run needs {last}",
                self.steps()
            )));
        }
        let dim = match self {
            Self::ReferenceEnsemble(r) => {
                if r.lag != sys.lag_steps() {
                    return Err(DynamicsError::FrozenLawMismatch(format!(
                        "reference run has {} delay steps, system has {}",
                        r.lag,
                        sys.lag_steps()
                    )));
                }
                r.dim
            }
            Self::GaussianOracle(g) => {
                if !sys.is_affine_in_measure() {
                    return Err(DynamicsError::FrozenLawMismatch(
                        "Gaussian backend needs kernels that are affine in the measure".into(),
                    ));
                }
                g.dim
            }
        };
        if dim != sys.state_dim() {
            return Err(DynamicsError::FrozenLawMismatch(format!(
                "law lives in dimension {dim}, system in {}",
                sys.state_dim()
            )));
        }
        Ok(())
    }

    fn summary(&self, step: u64, lag: usize) -> Result<MeasureSummary<'_, T>, DynamicsError> {
        let s = step as usize;
        if s > self.steps() {
            return Err(DynamicsError::FrozenLawMismatch(format!(
                "no law stored for step {step} (covers {})",
                self.steps()
            )));
        }
        Ok(match self {
            Self::ReferenceEnsemble(r) => r.summary(s),
            Self::GaussianOracle(g) => g.summary(s, lag),
        })
    }
}

/// Which measure the kernels are averaged against.
#[derive(Debug, Clone, Copy)]
pub enum StepMode<'a, T> {
    /// The ensemble's own empirical measure.
    Interacting,
    Frozen(&'a FrozenLaw<T>),
}

/// Per-particle noise cursors; step `s` of particle `i` reads `plan`'s `(i, s)` draws.
pub struct NoiseBank<T> {
    cursors: Vec<NoiseCursor>,
    dim: usize,
    buf: Vec<T>,
}

impl<T: Scalar> NoiseBank<T> {
    pub fn new(plan: &NoisePlan, count: usize, start_step: u64, dim: usize) -> Self {
        Self {
            cursors: (0..count).map(|i| plan.cursor(i, start_step, dim)).collect(),
            dim,
            buf: vec![T::zero(); count * dim],
        }
    }

    /// Increments `ΔW ~ N(0, dt I)` for the next step, row-major `N × n`.
    pub fn next(&mut self, dt: T) -> &[T] {
        let dim = self.dim;
        if dim > 0 {
            self.buf
                .par_chunks_mut(dim)
                .zip(self.cursors.par_iter_mut())
                .with_min_len(64)
                .for_each(|(out, c)| c.next_increments(dt, out));
        }
        &self.buf
    }
}

fn check_system<T: Scalar, S: ParticleSystem<T> + ?Sized>(sys: &S, ens: &Ensemble<T>) -> Result<(), DynamicsError> {
    if ens.dim() != sys.state_dim() || ens.lag_steps() != sys.lag_steps() {
        return Err(DynamicsError::InvalidArgument(format!(
            "ensemble has dimension {} and {} delay steps, system expects {} and {}",
            ens.dim(),
            ens.lag_steps(),
            sys.state_dim(),
            sys.lag_steps()
        )));
    }
    Ok(())
}

fn check_step_inputs<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    ens: &Ensemble<T>,
    dt: T,
    increments: &[T],
) -> Result<(), DynamicsError> {
    check_system(sys, ens)?;
    if !(dt > T::zero()) {
        return Err(DynamicsError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if increments.len() != ens.len() * sys.noise_dim() {
        return Err(DynamicsError::InvalidArgument(format!(
            "expected {}x{} increments, got {} values",
            ens.len(),
            sys.noise_dim(),
            increments.len()
        )));
    }
    Ok(())
}

fn blow_up<T: Scalar>(ens: &Ensemble<T>, particle: usize, side: Side) -> DynamicsError {
    DynamicsError::BlowUp {
        step: ens.step(),
        particle,
        side,
    }
}

/// Euler–Maruyama proposals for every particle, written to `out` (`N × D`).
fn propose<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    ens: &Ensemble<T>,
    mu: &MeasureSummary<'_, T>,
    dt: T,
    increments: &[T],
    out: &mut [T],
) {
    let dd = sys.state_dim();
    let nn = sys.noise_dim();
    let t = ens.t();
    out.par_chunks_mut(dd)
        .enumerate()
        .with_min_len(8)
        .for_each_init(
            || (vec![T::zero(); dd], vec![T::zero(); dd * nn], vec![T::zero(); dd]),
            |(drift, diff, scratch), (i, o)| {
                let seg = ens.segment(i);
                sys.coefficients(t, &seg, mu, drift, diff, scratch);
                let x = seg.head();
                let dw = &increments[i * nn..(i + 1) * nn];
                for r in 0..dd {
                    let mut v = x[r] + drift[r] * dt;
                    let row = &diff[r * nn..(r + 1) * nn];
                    for (s, w) in row.iter().zip(dw) {
                        v += *s * *w;
                    }
                    o[r] = v;
                }
            },
        );
}

fn advance_interacting<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    ens: &mut Ensemble<T>,
    dt: T,
    increments: &[T],
    buf: &mut [T],
) -> Result<(), usize> {
    {
        let mu = ens.summary(sys.summary_needs());
        propose(sys, ens, &mu, dt, increments, buf);
    }
    ens.push_heads(buf, dt)
}

fn advance_frozen<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    ens: &mut Ensemble<T>,
    mu: &MeasureSummary<'_, T>,
    dt: T,
    increments: &[T],
    buf: &mut [T],
) -> Result<(), usize> {
    propose(sys, ens, mu, dt, increments, buf);
    ens.push_heads(buf, dt)
}

/// One step of `sys` in the given mode. `increments` is row-major `N × n`.
pub fn em_step<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    ens: &mut Ensemble<T>,
    mode: StepMode<'_, T>,
    dt: T,
    increments: &[T],
) -> Result<(), DynamicsError> {
    check_step_inputs(sys, ens, dt, increments)?;
    let mut buf = vec![T::zero(); ens.len() * ens.dim()];
    match mode {
        StepMode::Interacting => {
            advance_interacting(sys, ens, dt, increments, &mut buf).map_err(|p| blow_up(ens, p, Side::Interacting))
        }
        StepMode::Frozen(law) => {
            law.check(sys, dt, ens.step())?;
            let mu = law.summary(ens.step(), sys.lag_steps())?;
            advance_frozen(sys, ens, &mu, dt, increments, &mut buf).map_err(|p| blow_up(ens, p, Side::Limit))
        }
    }
}

/// One step of the N-particle system, kernels averaged over its own empirical measure.
pub fn em_step_interacting<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    ens: &mut Ensemble<T>,
    dt: T,
    increments: &[T],
) -> Result<(), DynamicsError> {
    em_step(sys, ens, StepMode::Interacting, dt, increments)
}

/// One step of independent limit copies driven by the frozen law at the current step.
pub fn em_step_limit<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    ens: &mut Ensemble<T>,
    frozen: &FrozenLaw<T>,
    dt: T,
    increments: &[T],
) -> Result<(), DynamicsError> {
    em_step(sys, ens, StepMode::Frozen(frozen), dt, increments)
}

pub fn em_step_delay<T: Scalar>(
    ens: &mut SegmentEnsemble<T>,
    model: &DelayModel<T>,
    dt: T,
    increments: &[T],
    mode: StepMode<'_, T>,
) -> Result<(), DynamicsError> {
    em_step(&DelaySystem::new(model, dt)?, ens, mode, dt, increments)
}

/// Ensemble states are `(x⁽¹⁾, x⁽²⁾)` in `R^{m+d}`; increments are `N × d`.
pub fn em_step_hamiltonian<T: Scalar>(
    ens: &mut Ensemble<T>,
    model: &HamiltonianModel<T>,
    dt: T,
    increments: &[T],
    mode: StepMode<'_, T>,
) -> Result<(), DynamicsError> {
    em_step(&HamiltonianSystem::new(model, dt)?, ens, mode, dt, increments)
}

/// Drift and diffusion of particle `i` under the ensemble's empirical measure
/// (self term included).
pub fn interaction_fields<T: Scalar>(
    ens: &Ensemble<T>,
    model: &MeanFieldModel<T>,
    i: usize,
) -> Result<(Vec<T>, Matrix<T>), DynamicsError> {
    let sys = MeanFieldSystem::new(model);
    check_system(&sys, ens)?;
    if i >= ens.len() {
        return Err(DynamicsError::InvalidArgument(format!("particle {i} out of range 0..{}", ens.len())));
    }
    let (d, n) = (model.d(), model.n());
    let mu = ens.summary(sys.summary_needs());
    let mut drift = vec![T::zero(); d];
    let mut diff = vec![T::zero(); d * n];
    let mut scratch = vec![T::zero(); d];
    sys.coefficients(ens.t(), &ens.segment(i), &mu, &mut drift, &mut diff, &mut scratch);
    if drift.iter().chain(&diff).any(|v| !v.is_finite()) {
        return Err(blow_up(ens, i, Side::Interacting));
    }
    Ok((drift, Matrix::from_vec(d, n, diff)))
}

/// Grid sup-norm `max_j |ξ(−j dt)|`.
pub fn segment_sup_norm<T: Scalar>(seg: &SegmentView<'_, T>) -> T {
    seg.sup_norm()
}

/// Time grid and recording schedule of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec<T> {
    pub dt: T,
    pub t_end: T,
    /// Times at which gap records (and snapshots) are taken; multiples of `dt` in `[0, T]`.
    pub record_times: Vec<T>,
    pub snapshots: bool,
}

impl<T: Scalar> RunSpec<T> {
    pub fn steps(&self) -> Result<u64, DynamicsError> {
        grid_index(self.t_end, self.dt)
    }

    fn record_steps(&self) -> Result<Vec<u64>, DynamicsError> {
        let last = self.steps()?;
        let mut out: Vec<u64> = self
            .record_times
            .iter()
            .map(|&t| grid_index(t, self.dt))
            .collect::<Result<_, _>>()?;
        if out.iter().any(|&s| s > last) {
            return Err(DynamicsError::InvalidArgument("record time beyond T".into()));
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

fn grid_index<T: Scalar>(t: T, dt: T) -> Result<u64, DynamicsError> {
    if !(dt > T::zero()) || !(t >= T::zero()) {
        return Err(DynamicsError::InvalidArgument(format!("need dt > 0 and t >= 0, got dt={dt}, t={t}")));
    }
    let r = t / dt;
    let s = r.round();
    if (r - s).abs() > T::lit(1e-6) * s.max(T::one()) {
        return Err(DynamicsError::InvalidArgument(format!("t = {t} is not a multiple of dt = {dt}")));
    }
    Ok(s.to_u64().unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRecord<T> {
    pub t: T,
    pub step: u64,
    /// `(1/k) Σ_{i<k} |X^{i,N}_t − X^i_t|²` over the tracked particles.
    pub gap: T,
    /// `(1/k) Σ_{i<k} sup_{s≤t} |X^{i,N}_s − X^i_s|²` on the grid.
    pub sup_gap: T,
    /// `(1/k) Σ_{i<k} ‖X^{i,N}_t − X^i_t‖∞²`; equals `gap` without delay.
    pub segment_gap: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot<T> {
    pub t: T,
    pub interacting: Vec<T>,
    pub limit: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct CoupledRun<T> {
    pub records: Vec<GapRecord<T>>,
    /// Running sup of the squared gap of each tracked particle over the whole run.
    pub sup_gap: Vec<T>,
    pub interacting: Ensemble<T>,
    pub limit: Ensemble<T>,
    pub snapshots: Vec<Snapshot<T>>,
}

/// Drives the interacting system and the limit copies with the same
/// increments: particle `i` on both sides reads `plan`'s stream `i`.
///
/// `init_limit` may hold only the first `k ≤ N` copies. Limit copies do not
/// interact, so dropping the untracked ones changes nothing for the tracked ones.
pub fn run_coupled<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    init_interacting: Ensemble<T>,
    init_limit: Ensemble<T>,
    plan: &NoisePlan,
    frozen: &FrozenLaw<T>,
    spec: &RunSpec<T>,
) -> Result<CoupledRun<T>, DynamicsError> {
    let mut inter = init_interacting;
    let mut limit = init_limit;
    check_system(sys, &inter)?;
    check_system(sys, &limit)?;
    let k = limit.len();
    if k > inter.len() {
        return Err(DynamicsError::InvalidArgument(format!(
            "{k} limit copies for {} interacting particles",
            inter.len()
        )));
    }
    if inter.step() != limit.step() {
        return Err(DynamicsError::InvalidArgument("both sides must start at the same step".into()));
    }
    let dt = spec.dt;
    let start = inter.step();
    let steps = spec.steps()?;
    frozen.check(sys, dt, start + steps)?;
    let record_steps = spec.record_steps()?;
    let (dim, nn) = (sys.state_dim(), sys.noise_dim());
    let kf = T::from_usize_lossy(k);

    let mut sup_gap = vec![T::zero(); k];
    let update_sup = |inter: &Ensemble<T>, limit: &Ensemble<T>, sup: &mut [T]| {
        for (i, s) in sup.iter_mut().enumerate() {
            *s = s.max(dist_sq(inter.head(i), limit.head(i)));
        }
    };
    let mut records = Vec::with_capacity(record_steps.len());
    let mut snapshots = Vec::new();
    let mut next_record = 0;
    let mut take_record = |s: u64, inter: &Ensemble<T>, limit: &Ensemble<T>, sup: &[T]| {
        if next_record < record_steps.len() && record_steps[next_record] == s {
            next_record += 1;
            let gap = (0..k).map(|i| dist_sq(inter.head(i), limit.head(i))).sum::<T>() / kf;
            let segment_gap = (0..k)
                .map(|i| inter.segment(i).sup_dist_sq(&limit.segment(i)))
                .sum::<T>()
                / kf;
            records.push(GapRecord {
                t: inter.t(),
                step: inter.step(),
                gap,
                sup_gap: sup.iter().copied().sum::<T>() / kf,
                segment_gap,
            });
            if spec.snapshots {
                snapshots.push(Snapshot {
                    t: inter.t(),
                    interacting: inter.heads(),
                    limit: limit.heads(),
                });
            }
        }
    };

    update_sup(&inter, &limit, &mut sup_gap);
    take_record(0, &inter, &limit, &sup_gap);
    let mut noise = NoiseBank::new(plan, inter.len(), start, nn);
    let mut buf_inter = vec![T::zero(); inter.len() * dim];
    let mut buf_limit = vec![T::zero(); k * dim];
    for s in 1..=steps {
        let inc = noise.next(dt);
        {
            let mu = frozen.summary(limit.step(), sys.lag_steps())?;
            advance_frozen(sys, &mut limit, &mu, dt, &inc[..k * nn], &mut buf_limit)
                .map_err(|p| blow_up(&limit, p, Side::Limit))?;
        }
        advance_interacting(sys, &mut inter, dt, inc, &mut buf_inter).map_err(|p| blow_up(&inter, p, Side::Interacting))?;
        update_sup(&inter, &limit, &mut sup_gap);
        take_record(s, &inter, &limit, &sup_gap);
    }
    Ok(CoupledRun {
        records,
        sup_gap,
        interacting: inter,
        limit,
        snapshots,
    })
}

/// Trajectory snapshots of a single run.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    /// Row-major `N × D` states at each record time.
    pub states: Vec<Vec<T>>,
    pub last: Ensemble<T>,
}

/// Runs one system alone, interacting or against a frozen law.
pub fn simulate<T: Scalar, S: ParticleSystem<T> + ?Sized>(
    sys: &S,
    init: Ensemble<T>,
    plan: &NoisePlan,
    mode: StepMode<'_, T>,
    spec: &RunSpec<T>,
) -> Result<Trajectory<T>, DynamicsError> {
    let mut ens = init;
    check_system(sys, &ens)?;
    let dt = spec.dt;
    let steps = spec.steps()?;
    let start = ens.step();
    if let StepMode::Frozen(law) = mode {
        law.check(sys, dt, start + steps)?;
    }
    let record_steps = spec.record_steps()?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut next = 0;
    let mut record = |s: u64, ens: &Ensemble<T>| {
        if next < record_steps.len() && record_steps[next] == s {
            next += 1;
            times.push(ens.t());
            states.push(ens.heads());
        }
    };
    record(0, &ens);
    let mut noise = NoiseBank::new(plan, ens.len(), start, sys.noise_dim());
    let mut buf = vec![T::zero(); ens.len() * ens.dim()];
    for s in 1..=steps {
        let inc = noise.next(dt);
        match mode {
            StepMode::Interacting => {
                advance_interacting(sys, &mut ens, dt, inc, &mut buf).map_err(|p| blow_up(&ens, p, Side::Interacting))?
            }
            StepMode::Frozen(law) => {
                let mu = law.summary(ens.step(), sys.lag_steps())?;
                advance_frozen(sys, &mut ens, &mu, dt, inc, &mut buf).map_err(|p| blow_up(&ens, p, Side::Limit))?
            }
        }
        record(s, &ens);
    }
    Ok(Trajectory {
        times,
        states,
        last: ens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        DiffusionKernelSpec, DriftSpec, PairDiffusion, PairDrift, Regime, SegmentDiffusion, SegmentDrift, SelfDrift,
    };
    use crate::noise::normal_pair;
    use crate::oracle::{propagate_limit_moments, LinearModelSpec};

    fn m1(v: f64) -> Matrix<f64> {
        Matrix::from_vec(1, 1, vec![v])
    }

    fn mean_field(d: usize, b0: SelfDrift<f64>, b1: PairDrift<f64>, sigma: PairDiffusion<f64>) -> MeanFieldModel<f64> {
        let n = sigma.shape(d).1;
        MeanFieldModel::new(
            d,
            n,
            DriftSpec {
                b0,
                b1,
                k_b: 0.0,
                k1: 0.0,
                k2: 0.0,
            },
            DiffusionKernelSpec {
                sigma_tilde: sigma,
                k_sigma: 0.0,
                delta: None,
                distribution_free: false,
            },
            Regime::FiniteTime,
        )
        .unwrap()
    }

    fn pair_affine(on_x: f64, on_y: f64) -> PairDrift<f64> {
        PairDrift::Affine {
            on_x: m1(on_x),
            on_y: m1(on_y),
            c: vec![0.0],
        }
    }

    fn zero_model() -> MeanFieldModel<f64> {
        mean_field(1, SelfDrift::linear(m1(0.0)), PairDrift::Zero, PairDiffusion::Constant(m1(0.0)))
    }

    fn tanh_model() -> MeanFieldModel<f64> {
        mean_field(
            1,
            SelfDrift::linear(m1(-2.0)),
            PairDrift::TanhDifference { scale: 0.2 },
            PairDiffusion::TanhSum { base: 1.0, scale: 0.1 },
        )
    }

    fn gaussian_states(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = NoisePlan::new(seed).rng(0);
        (0..n).map(|_| normal_pair(&mut rng).0).collect()
    }

    fn spec(dt: f64, t_end: f64, every: usize) -> RunSpec<f64> {
        let steps = (t_end / dt).round() as usize;
        RunSpec {
            dt,
            t_end,
            record_times: (0..=steps).step_by(every).map(|s| s as f64 * dt).collect(),
            snapshots: false,
        }
    }

    fn constant_mean_law(mean: f64, dt: f64, steps: usize) -> FrozenLaw<f64> {
        FrozenLaw::GaussianOracle(GaussianPath::new(dt, vec![vec![mean]; steps + 1]).unwrap())
    }

    #[test]
    fn interaction_fields_hand_examples() {
        let ens = Ensemble::new(vec![1.0, -3.0], 1).unwrap();
        let (drift, diff) = interaction_fields(&ens, &zero_model(), 0).unwrap();
        assert_eq!(drift, vec![0.0]);
        assert_eq!(diff, m1(0.0));

        let self_only = mean_field(1, SelfDrift::linear(m1(0.0)), pair_affine(0.0, 1.0), PairDiffusion::Constant(m1(0.0)));
        let ens = Ensemble::new(vec![2.0], 1).unwrap();
        assert_eq!(interaction_fields(&ens, &self_only, 0).unwrap().0, vec![2.0]);

        let diff_model = mean_field(1, SelfDrift::linear(m1(0.0)), pair_affine(-1.0, 1.0), PairDiffusion::Constant(m1(0.0)));
        let ens = Ensemble::new(vec![0.0, 4.0], 1).unwrap();
        assert_eq!(interaction_fields(&ens, &diff_model, 0).unwrap().0, vec![2.0]);
        assert!(interaction_fields(&ens, &diff_model, 2).is_err());
    }

    #[test]
    fn tanh_fields_match_direct_sums() {
        let model = tanh_model();
        let states = gaussian_states(37, 3);
        let ens = Ensemble::new(states.clone(), 1).unwrap();
        for i in [0, 5, 36] {
            let (drift, diff) = interaction_fields(&ens, &model, i).unwrap();
            let x = states[i];
            let n = states.len() as f64;
            let b1: f64 = states.iter().map(|y| 0.2 * (y - x).tanh()).sum::<f64>() / n;
            let s: f64 = states.iter().map(|y| 1.0 + 0.1 * (x + y).tanh()).sum::<f64>() / n;
            assert!((drift[0] - (-2.0 * x + b1)).abs() < 1e-13);
            assert!((diff[(0, 0)] - s).abs() < 1e-13);
        }
    }

    #[test]
    fn interacting_step_examples() {
        let sys_model = zero_model();
        let sys = MeanFieldSystem::new(&sys_model);
        let mut ens = Ensemble::new(vec![1.0, -2.0, 0.5], 1).unwrap();
        let before = ens.heads();
        em_step_interacting(&sys, &mut ens, 0.1, &[0.3, -0.2, 1.0]).unwrap();
        assert_eq!(ens.heads(), before);
        assert_eq!(ens.step(), 1);

        let model = mean_field(1, SelfDrift::linear(m1(0.0)), pair_affine(0.0, 1.0), PairDiffusion::Constant(m1(0.0)));
        let sys = MeanFieldSystem::new(&model);
        let mut ens = Ensemble::new(vec![2.0], 1).unwrap();
        em_step_interacting(&sys, &mut ens, 0.5, &[0.0]).unwrap();
        assert_eq!(ens.heads(), vec![3.0]);
        assert_eq!(ens.t(), 0.5);
        assert!(em_step_interacting(&sys, &mut ens, 0.5, &[0.0, 1.0]).is_err());
        assert!(em_step_interacting(&sys, &mut ens, -0.5, &[0.0]).is_err());
    }

    #[test]
    fn linear_step_mean_matches_euler_mean() {
        let mut rng = NoisePlan::new(8).rng(1);
        let mut g = || normal_pair(&mut rng).0;
        let d = 2;
        let mat = |g: &mut dyn FnMut() -> f64| Matrix::from_vec(d, d, (0..d * d).map(|_| g()).collect());
        let spec = LinearModelSpec::new(
            mat(&mut g),
            vec![g(), g()],
            mat(&mut g),
            mat(&mut g),
            vec![g(), g()],
            mat(&mut g),
        )
        .unwrap();
        let model = spec.to_model(Regime::FiniteTime).unwrap();
        let sys = MeanFieldSystem::new(&model);
        let states: Vec<f64> = (0..5 * d).map(|_| g()).collect();
        let mut ens = Ensemble::new(states, d).unwrap();
        let m = ens.mean();
        let dt = 0.01;
        em_step_interacting(&sys, &mut ens, dt, &vec![0.0; 5 * d]).unwrap();
        let a = spec.a0.add(&spec.b1).unwrap().add(&spec.b2).unwrap();
        let am = a.mul_vec(&m);
        for j in 0..d {
            let want = m[j] + dt * (am[j] + spec.c0[j] + spec.c1[j]);
            assert!((ens.mean()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn limit_step_examples() {
        // b1 = 0, constant σ: the law is irrelevant
        let model = mean_field(1, SelfDrift::linear(m1(-1.0)), PairDrift::Zero, PairDiffusion::Constant(m1(0.7)));
        let sys = MeanFieldSystem::new(&model);
        let law = constant_mean_law(5.0, 0.1, 3);
        let mut a = Ensemble::new(vec![1.0, 2.0], 1).unwrap();
        let mut b = a.clone();
        em_step_interacting(&sys, &mut a, 0.1, &[0.3, -0.4]).unwrap();
        em_step_limit(&sys, &mut b, &law, 0.1, &[0.3, -0.4]).unwrap();
        assert_eq!(a.heads(), b.heads());

        // b1(x, y) = βy against a Gaussian with mean m contributes βm
        let model = mean_field(1, SelfDrift::linear(m1(0.0)), pair_affine(0.0, 0.3), PairDiffusion::Constant(m1(0.0)));
        let sys = MeanFieldSystem::new(&model);
        let law = constant_mean_law(2.0, 1.0, 2);
        let mut e = Ensemble::new(vec![7.0, -1.0], 1).unwrap();
        em_step_limit(&sys, &mut e, &law, 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(e.heads(), vec![7.6, -0.4]);
    }

    #[test]
    fn frozen_law_mismatches_are_errors() {
        let model = mean_field(1, SelfDrift::linear(m1(0.0)), pair_affine(0.0, 0.3), PairDiffusion::Constant(m1(0.0)));
        let sys = MeanFieldSystem::new(&model);
        let law = constant_mean_law(2.0, 0.1, 1);
        let mut e = Ensemble::new(vec![0.0], 1).unwrap();
        assert!(matches!(
            em_step_limit(&sys, &mut e, &law, 0.2, &[0.0]),
            Err(DynamicsError::FrozenLawMismatch(_))
        ));
        em_step_limit(&sys, &mut e, &law, 0.1, &[0.0]).unwrap();
        em_step_limit(&sys, &mut e, &law, 0.1, &[0.0]).unwrap();
        assert!(matches!(
            em_step_limit(&sys, &mut e, &law, 0.1, &[0.0]),
            Err(DynamicsError::FrozenLawMismatch(_))
        ));
        let nonlinear = tanh_model();
        let sys = MeanFieldSystem::new(&nonlinear);
        let mut e = Ensemble::new(vec![0.0], 1).unwrap();
        assert!(matches!(
            em_step_limit(&sys, &mut e, &law, 0.1, &[0.0]),
            Err(DynamicsError::FrozenLawMismatch(_))
        ));
    }

    #[test]
    fn blow_up_names_particle_and_step() {
        let model = mean_field(1, SelfDrift::linear(m1(1e200)), PairDrift::Zero, PairDiffusion::Constant(m1(0.0)));
        let sys = MeanFieldSystem::new(&model);
        let init = Ensemble::new(vec![0.0, 1.0, 0.0], 1).unwrap();
        let err = simulate(&sys, init, &NoisePlan::new(1), StepMode::Interacting, &spec(1.0, 5.0, 1)).unwrap_err();
        match err {
            DynamicsError::BlowUp { step, particle, side } => {
                assert_eq!((step, particle, side), (2, 1, Side::Interacting));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn coupled_identical_inits_without_interaction_have_zero_gap() {
        let model = mean_field(1, SelfDrift::linear(m1(-1.0)), PairDrift::Zero, PairDiffusion::Constant(m1(1.0)));
        let sys = MeanFieldSystem::new(&model);
        let init = Ensemble::new(gaussian_states(20, 4), 1).unwrap();
        let law = constant_mean_law(0.0, 0.01, 100);
        let run = run_coupled(&sys, init.clone(), init, &NoisePlan::new(9), &law, &spec(0.01, 1.0, 10)).unwrap();
        assert_eq!(run.records.len(), 11);
        assert!(run.records.iter().all(|r| r.gap == 0.0 && r.sup_gap == 0.0 && r.segment_gap == 0.0));
    }

    #[test]
    fn offset_gap_contracts_exactly() {
        let model = mean_field(1, SelfDrift::linear(m1(-1.0)), PairDrift::Zero, PairDiffusion::Constant(m1(1.0)));
        let sys = MeanFieldSystem::new(&model);
        let states = gaussian_states(16, 5);
        let h = 0.5;
        let init = Ensemble::new(states.clone(), 1).unwrap();
        let offset = Ensemble::new(states.iter().map(|x| x + h).collect(), 1).unwrap();
        let dt = 0.01;
        let law = constant_mean_law(0.0, dt, 200);
        let run = run_coupled(&sys, init, offset, &NoisePlan::new(2), &law, &spec(dt, 2.0, 1)).unwrap();
        for r in &run.records {
            let want = h * h * (1.0 - dt).powi(2 * r.step as i32);
            assert!((r.gap - want).abs() < 1e-12 * want.max(1e-300) + 1e-15, "{} {}", r.gap, want);
            assert!((r.sup_gap - h * h).abs() < 1e-15);
        }
        for w in run.records.windows(2) {
            assert!(w[1].gap <= w[0].gap);
        }
    }

    #[test]
    fn tracking_a_prefix_leaves_tracked_copies_unchanged() {
        let model = mean_field(1, SelfDrift::linear(m1(-1.0)), pair_affine(0.0, 0.2), PairDiffusion::Constant(m1(1.0)));
        let sys = MeanFieldSystem::new(&model);
        let init = Ensemble::new(gaussian_states(12, 6), 1).unwrap();
        let dt = 0.01;
        let law = constant_mean_law(0.1, dt, 50);
        let plan = NoisePlan::new(3);
        let full = run_coupled(&sys, init.clone(), init.clone(), &plan, &law, &spec(dt, 0.5, 50)).unwrap();
        let part = run_coupled(&sys, init.clone(), init.prefix(3), &plan, &law, &spec(dt, 0.5, 50)).unwrap();
        assert_eq!(full.limit.heads()[..3], part.limit.heads()[..]);
        assert_eq!(full.interacting.heads(), part.interacting.heads());
        assert_eq!(full.sup_gap[..3], part.sup_gap[..]);
    }

    #[test]
    fn ring_buffer_keeps_the_last_points() {
        let hist: Vec<f64> = vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        let mut e = Ensemble::from_histories(hist, 1, 2).unwrap();
        assert_eq!(e.segment(1).points().map(|p| p[0]).collect::<Vec<_>>(), vec![30.0, 20.0, 10.0]);
        e.push_heads(&[4.0, 40.0], 0.1).unwrap();
        e.push_heads(&[5.0, 50.0], 0.1).unwrap();
        assert_eq!(e.segment(0).points().map(|p| p[0]).collect::<Vec<_>>(), vec![5.0, 4.0, 3.0]);
        assert_eq!(e.segment(1).tail(), &[30.0]);
        assert_eq!(e.heads(), vec![5.0, 50.0]);
        assert!(Ensemble::from_histories(vec![1.0, 2.0], 1, 2).is_err());
    }

    #[test]
    fn segment_sup_norm_examples() {
        assert_eq!(segment_sup_norm(&SegmentView::from_oldest_first(&[-3.0, 1.0, 2.0], 1)), 3.0);
        assert_eq!(segment_sup_norm(&SegmentView::from_oldest_first(&[3.0, 4.0, 3.0, 4.0], 2)), 5.0);
        assert_eq!(segment_sup_norm(&SegmentView::from_oldest_first(&[0.0; 6], 1)), 0.0);
        let e = Ensemble::with_lag(vec![-2.5], 1, 4).unwrap();
        assert_eq!(segment_sup_norm(&e.segment(0)), 2.5);
    }

    fn delay_model(r0: f64, other_lag: f64, other_now: f64, b: f64, sigma: f64) -> DelayModel<f64> {
        DelayModel::new(
            1,
            1,
            r0,
            SelfDrift::linear(m1(b)),
            0.0,
            SegmentDrift::Affine {
                self_now: m1(0.0),
                self_lag: m1(0.0),
                other_now: m1(other_now),
                other_lag: m1(other_lag),
                c: vec![0.0],
            },
            0.0,
            SegmentDiffusion::Constant(m1(sigma)),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn delay_drift_reads_the_lagged_measure() {
        let model = delay_model(0.1, 1.0, 0.0, 0.0, 0.0);
        let dt = 0.01;
        let mut e = Ensemble::with_lag(vec![2.0; 3], 1, 10).unwrap();
        em_step_delay(&mut e, &model, dt, &[0.0; 3], StepMode::Interacting).unwrap();
        assert_eq!(e.heads(), vec![2.0 + 2.0 * dt; 3]);
        assert_eq!(segment_sup_norm(&e.segment(0)), 2.0 + 2.0 * dt);
        // the lagged point stays at the initial value for L steps
        for _ in 0..9 {
            em_step_delay(&mut e, &model, dt, &[0.0; 3], StepMode::Interacting).unwrap();
        }
        assert!((e.heads()[0] - (2.0 + 10.0 * 2.0 * dt)).abs() < 1e-12);
        assert!(matches!(
            DelaySystem::new(&model, 0.03),
            Err(DynamicsError::Model(ModelError::DelayGrid { .. }))
        ));
    }

    #[test]
    fn zero_delay_reproduces_mean_field_bitwise() {
        let mf = mean_field(1, SelfDrift::linear(m1(-1.5)), pair_affine(0.0, 0.3), PairDiffusion::Constant(m1(0.8)));
        let dm = DelayModel::new(
            1,
            1,
            0.0,
            SelfDrift::linear(m1(-1.5)),
            0.0,
            SegmentDrift::Affine {
                self_now: m1(0.0),
                self_lag: m1(0.0),
                other_now: m1(0.3),
                other_lag: m1(0.0),
                c: vec![0.0],
            },
            0.0,
            SegmentDiffusion::Constant(m1(0.8)),
            0.0,
        )
        .unwrap();
        let init = Ensemble::new(gaussian_states(25, 7), 1).unwrap();
        let plan = NoisePlan::new(10);
        let s = spec(0.01, 1.0, 10);
        let a = simulate(&MeanFieldSystem::new(&mf), init.clone(), &plan, StepMode::Interacting, &s).unwrap();
        let b = simulate(&DelaySystem::new(&dm, 0.01).unwrap(), init, &plan, StepMode::Interacting, &s).unwrap();
        assert_eq!(a.states, b.states);
    }

    fn kinetic(a: f64, coupling: f64, b: f64, sigma: f64) -> HamiltonianModel<f64> {
        HamiltonianModel::new(
            m1(a),
            0.0,
            m1(coupling),
            SelfDrift::linear(m1(b)),
            0.0,
            0.0,
            SegmentDrift::Zero,
            0.0,
            m1(sigma),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn hamiltonian_step_examples() {
        let zero = kinetic(0.0, 0.0, 0.0, 0.0);
        let mut e = Ensemble::new(vec![1.0, 2.0, -3.0, 4.0], 2).unwrap();
        em_step_hamiltonian(&mut e, &zero, 0.1, &[0.5, -0.5], StepMode::Interacting).unwrap();
        assert_eq!(e.heads(), vec![1.0, 2.0, -3.0, 4.0]);

        let transport = kinetic(0.0, 1.0, 0.0, 0.0);
        let mut e = Ensemble::new(vec![0.0, 3.0], 2).unwrap();
        em_step_hamiltonian(&mut e, &transport, 0.1, &[0.7], StepMode::Interacting).unwrap();
        assert!((e.heads()[0] - 0.3).abs() < 1e-15);
        assert_eq!(e.heads()[1], 3.0);

        // noise reaches only the second block
        let noisy = kinetic(0.0, 0.0, 0.0, 2.0);
        let mut e = Ensemble::new(vec![1.0, 1.0], 2).unwrap();
        em_step_hamiltonian(&mut e, &noisy, 0.1, &[0.5], StepMode::Interacting).unwrap();
        assert_eq!(e.heads(), vec![1.0, 2.0]);

        let decay = kinetic(-1.0, 0.0, -0.5, 1.0);
        let sys = HamiltonianSystem::new(&decay, 0.01).unwrap();
        let init = Ensemble::new(vec![2.0, 0.3, -1.0, 0.1], 2).unwrap();
        let traj = simulate(&sys, init, &NoisePlan::new(4), StepMode::Interacting, &spec(0.01, 1.0, 100)).unwrap();
        let last = traj.last.heads();
        assert!((last[0] - 2.0 * 0.99f64.powi(100)).abs() < 1e-13);
        assert!((last[2] + 0.99f64.powi(100)).abs() < 1e-13);
    }

    #[test]
    fn reference_law_summaries() {
        let model = tanh_model();
        let sys = MeanFieldSystem::new(&model);
        let init = Ensemble::new(gaussian_states(50, 11), 1).unwrap();
        let plan = NoisePlan::new(12);
        let law = ReferenceLaw::simulate(&sys, init.clone(), &plan, 0.01, 20).unwrap();
        let traj = simulate(&sys, init, &plan, StepMode::Interacting, &spec(0.01, 0.2, 1)).unwrap();
        for (s, states) in traj.states.iter().enumerate() {
            let mean = states.iter().sum::<f64>() / states.len() as f64;
            assert!((law.mean(s)[0] - mean).abs() < 1e-14);
            let mu = law.summary(s);
            assert_eq!(mu.count(), 50);
            let heads: Vec<f64> = mu.cloud().unwrap().segments().map(|g| g.head()[0]).collect();
            assert_eq!(&heads, states);
            assert!(mu.exp2().is_some());
        }
    }

    #[test]
    fn delay_reference_history_rows() {
        let model = delay_model(0.03, 0.5, 0.0, -1.0, 0.3);
        let sys = DelaySystem::new(&model, 0.01).unwrap();
        let init = Ensemble::with_lag(gaussian_states(6, 1), 1, 3).unwrap();
        // keep the cloud so the history table is exercised
        struct WithCloud<'a>(DelaySystem<'a, f64>);
        impl ParticleSystem<f64> for WithCloud<'_> {
            fn state_dim(&self) -> usize {
                self.0.state_dim()
            }
            fn noise_dim(&self) -> usize {
                self.0.noise_dim()
            }
            fn lag_steps(&self) -> usize {
                self.0.lag_steps()
            }
            fn summary_needs(&self) -> SummaryNeeds {
                SummaryNeeds {
                    means: true,
                    cloud: true,
                    exp2: false,
                }
            }
            fn coefficients(
                &self,
                t: f64,
                seg: &SegmentView<'_, f64>,
                mu: &MeasureSummary<'_, f64>,
                drift: &mut [f64],
                diffusion: &mut [f64],
                scratch: &mut [f64],
            ) {
                self.0.coefficients(t, seg, mu, drift, diffusion, scratch)
            }
        }
        let wrapped = WithCloud(sys);
        let plan = NoisePlan::new(5);
        let law = ReferenceLaw::simulate(&wrapped, init.clone(), &plan, 0.01, 8).unwrap();
        let mut e = init;
        let mut bank = NoiseBank::new(&plan, 6, 0, 1);
        for s in 0..=8usize {
            let mu = law.summary(s);
            let cloud = mu.cloud().unwrap();
            for i in 0..6 {
                let a: Vec<f64> = cloud.segment(i).points().map(|p| p[0]).collect();
                let b: Vec<f64> = e.segment(i).points().map(|p| p[0]).collect();
                assert_eq!(a, b);
            }
            if s < 8 {
                let inc = bank.next(0.01).to_vec();
                em_step_interacting(&wrapped, &mut e, 0.01, &inc).unwrap();
            }
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let model = tanh_model();
        let sys = MeanFieldSystem::new(&model);
        let init = Ensemble::new(gaussian_states(300, 13), 1).unwrap();
        let plan = NoisePlan::new(14);
        let run = || {
            let law = ReferenceLaw::simulate(&sys, Ensemble::new(gaussian_states(500, 15), 1).unwrap(), &plan.derive(1), 0.01, 30)
                .unwrap();
            let law = FrozenLaw::ReferenceEnsemble(law);
            run_coupled(&sys, init.clone(), init.prefix(40), &plan, &law, &spec(0.01, 0.3, 5)).unwrap()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(one.records, four.records);
        assert_eq!(one.interacting, four.interacting);
        assert_eq!(one.limit, four.limit);
        assert!(one.records.last().unwrap().gap > 0.0);
    }

    #[test]
    fn limit_side_uses_the_gaussian_path_means() {
        let spec_lin = LinearModelSpec::homogeneous(m1(-1.0), m1(0.2), m1(0.0)).unwrap();
        let model = spec_lin.to_model(Regime::FiniteTime).unwrap();
        let sys = MeanFieldSystem::new(&model);
        let path = propagate_limit_moments(&spec_lin, &[1.0], &m1(0.0), 0.5, 0.01).unwrap();
        let law = FrozenLaw::GaussianOracle(GaussianPath::from_moments(&path));
        assert_eq!(law.steps(), 50);
        let init = Ensemble::new(vec![3.0], 1).unwrap();
        let t = simulate(&sys, init, &NoisePlan::new(0), StepMode::Frozen(&law), &spec(0.01, 0.5, 50)).unwrap();
        let mut x = 3.0;
        for s in 0..50 {
            x += 0.01 * (-x + 0.2 * path.laws[s].mean()[0]);
        }
        assert!((t.states[1][0] - x).abs() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn exchangeability(seed in 0u64..10_000, n in 2usize..12, rot in 1usize..11) {
                let model = tanh_model();
                let sys = MeanFieldSystem::new(&model);
                let states = gaussian_states(n, seed);
                let perm: Vec<usize> = (0..n).map(|j| (j + rot) % n).collect();
                let mut a = Ensemble::new(states.clone(), 1).unwrap();
                let mut b = Ensemble::new(perm.iter().map(|&p| states[p]).collect(), 1).unwrap();
                let plan = NoisePlan::new(seed ^ 0xabc);
                for s in 0..20u64 {
                    let mut inc = vec![0.0; n];
                    for (i, v) in inc.iter_mut().enumerate() {
                        let mut o = [0.0];
                        plan.increments(i, s, 0.01, &mut o);
                        *v = o[0];
                    }
                    let inc_b: Vec<f64> = perm.iter().map(|&p| inc[p]).collect();
                    em_step_interacting(&sys, &mut a, 0.01, &inc).unwrap();
                    em_step_interacting(&sys, &mut b, 0.01, &inc_b).unwrap();
                }
                let (ha, hb) = (a.heads(), b.heads());
                for (j, &p) in perm.iter().enumerate() {
                    prop_assert!((hb[j] - ha[p]).abs() < 1e-12);
                }
            }

            #[test]
            fn contraction_without_interaction(seed in 0u64..10_000, k in 0.5f64..5.0, h in -2.0f64..2.0) {
                let model = mean_field(1, SelfDrift::linear(m1(-k)), PairDrift::Zero, PairDiffusion::Constant(m1(1.0)));
                let sys = MeanFieldSystem::new(&model);
                let states = gaussian_states(8, seed);
                let init = Ensemble::new(states.clone(), 1).unwrap();
                let shifted = Ensemble::new(states.iter().map(|x| x + h).collect(), 1).unwrap();
                let dt = 0.01;
                let law = constant_mean_law(0.0, dt, 100);
                let run = run_coupled(&sys, init, shifted, &NoisePlan::new(seed), &law, &spec(dt, 1.0, 1)).unwrap();
                for w in run.records.windows(2) {
                    prop_assert!(w[1].gap <= w[0].gap);
                }
            }
        }
    }
}
