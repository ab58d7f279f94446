//! End-to-end numerics for one absorber setting: build the mode space, find the
//! resonance by a stability scan, extract channels and widths, and propagate.

use ndarray::{Array1, Array2};
use ndarray_linalg::EigVals;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fock::{FockBasis, FockError, SectorOperator, TwoBody, annihilators};
use crate::lindblad::{BlockDensity, LindbladError, LindbladSystem, Method, Observables, PairExponential, Trajectory, propagate};
use crate::model::{AbsorberSpec, FdOrder, GridModel, ModeSpace, ModelError, Potentials, Representation, assemble_hamiltonian};
use crate::spectral::{
    ChannelFilter, ChannelState, Eigenpair, ResonanceSearch, ResonanceState, ScanParameter, SpectralError, diagonalize_sector,
    identify_trajectory, StabilityRecord,
};
use crate::widths::{
    WidthError, WidthMethod, WidthReport, channel_amplitudes, partial_width_cap_grid, partial_width_cap_grid_from_amplitudes,
    partial_width_cap_orbital, partial_width_ecs,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("scan parameter {parameter:?} does not apply to a {absorber} absorber")]
    ScanMismatch { parameter: ScanParameter, absorber: &'static str },
    #[error("the production value {0} lies outside the scan range")]
    OutsideScan(f64),
    #[error("the exponential propagator needs two particles in an orbital space")]
    NotPairOrbital,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Width(#[from] WidthError),
    #[error(transparent)]
    Lindblad(#[from] LindbladError),
}

/// Gaussian well and interaction of the reference model; see the README for how
/// these were chosen.
pub const REFERENCE_POTENTIALS: Potentials =
    Potentials { well_depth: 10.0, well_width: 3.0, coupling: 2.5, coupling_width: 1.0 };

/// Reference grid: 300 interior points at spacing 0.1 on `(0, 30]`.
pub fn reference_model(fd_order: FdOrder) -> GridModel {
    GridModel::half_line(30.0, 0.1, fd_order, REFERENCE_POTENTIALS).expect("reference grid is valid")
}

#[derive(Debug, Clone)]
pub struct Setup {
    pub model: GridModel,
    pub absorber: AbsorberSpec,
    /// Number of one-particle orbitals; `None` works on the grid directly.
    pub orbitals: Option<usize>,
    pub particles: usize,
    pub channel_tol: ChannelTolerances,
}

/// Channel selection tolerances; `capov_rel` is scaled by the absorber magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelTolerances {
    pub bound: f64,
    pub capov_rel: f64,
    pub orth: f64,
}

impl Default for ChannelTolerances {
    fn default() -> Self {
        Self { bound: 1e-6, capov_rel: 1e-8, orth: 1e-8 }
    }
}

/// Same absorber with one parameter replaced.
pub fn with_parameter(spec: &AbsorberSpec, parameter: ScanParameter, value: f64) -> Result<AbsorberSpec, PipelineError> {
    let mut out = *spec;
    match (&mut out, parameter) {
        (AbsorberSpec::Cap { strength, .. }, ScanParameter::Strength) => *strength = value,
        (AbsorberSpec::Cap { onset, .. }, ScanParameter::Onset) => *onset = value,
        (AbsorberSpec::Ecs { theta, .. }, ScanParameter::Theta) => *theta = value,
        (AbsorberSpec::Ecs { r0, .. }, ScanParameter::R0) => *r0 = value,
        (AbsorberSpec::Cap { .. }, _) => return Err(PipelineError::ScanMismatch { parameter, absorber: "CAP" }),
        (AbsorberSpec::Ecs { .. }, _) => return Err(PipelineError::ScanMismatch { parameter, absorber: "ECS" }),
    }
    Ok(out)
}

pub fn parameter_value(spec: &AbsorberSpec, parameter: ScanParameter) -> Result<f64, PipelineError> {
    match (spec, parameter) {
        (AbsorberSpec::Cap { strength, .. }, ScanParameter::Strength) => Ok(*strength),
        (AbsorberSpec::Cap { onset, .. }, ScanParameter::Onset) => Ok(*onset),
        (AbsorberSpec::Ecs { theta, .. }, ScanParameter::Theta) => Ok(*theta),
        (AbsorberSpec::Ecs { r0, .. }, ScanParameter::R0) => Ok(*r0),
        (AbsorberSpec::Cap { .. }, _) => Err(PipelineError::ScanMismatch { parameter, absorber: "CAP" }),
        (AbsorberSpec::Ecs { .. }, _) => Err(PipelineError::ScanMismatch { parameter, absorber: "ECS" }),
    }
}

/// Mode space and the two sector Hamiltonians the width formulas need.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub absorber: AbsorberSpec,
    pub particles: usize,
    pub grid_space: ModeSpace,
    pub space: ModeSpace,
    pub basis: FockBasis,
    pub top: SectorOperator,
    pub top_ah: SectorOperator,
    pub next: SectorOperator,
    pub next_ah: SectorOperator,
    /// Largest diagonal of the grid `h^ah` (`η` for a CAP).
    pub absorber_scale: f64,
    pub channel_tol: ChannelTolerances,
}

pub fn prepare(setup: &Setup) -> Result<Prepared, PipelineError> {
    let grid_space = ModeSpace::grid(&setup.model, &setup.absorber)?;
    let space = match setup.orbitals {
        Some(k) => grid_space.project(&grid_space.lowest_orbitals(k)?)?,
        None => grid_space.clone(),
    };
    let basis = FockBasis::new(space.num_modes(), setup.particles)?;
    let n = setup.particles;
    let (top, top_ah) = assemble_hamiltonian(&basis, &space, n)?;
    let (next, next_ah) = assemble_hamiltonian(&basis, &space, n - 1)?;
    let absorber_scale = grid_space.h_ah.diag().iter().map(|c| c.re).fold(0.0, f64::max);
    Ok(Prepared {
        absorber: setup.absorber,
        particles: n,
        grid_space,
        space,
        basis,
        top,
        top_ah,
        next,
        next_ah,
        absorber_scale,
        channel_tol: setup.channel_tol,
    })
}

impl Prepared {
    pub fn top_eigenvalues(&self) -> Result<Vec<Complex64>, PipelineError> {
        let v = self.top.matrix.eigvals().map_err(|e| SpectralError::Eigensolver { sector: self.top.sector, msg: e.to_string() })?;
        Ok(v.to_vec())
    }

    pub fn next_eigenvalues(&self) -> Result<Vec<Complex64>, PipelineError> {
        let v = self.next.matrix.eigvals().map_err(|e| SpectralError::Eigensolver { sector: self.next.sector, msg: e.to_string() })?;
        Ok(v.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub parameter: ScanParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub prepared: Prepared,
    pub pairs: Vec<Eigenpair>,
    pub resonance: ResonanceState,
    pub channels: Vec<ChannelState>,
    /// CAP: orbital formula for orbital spaces, grid formula otherwise. ECS: `h^I`.
    pub report: WidthReport,
    /// CAP in an orbital space: the diagonal grid formula on amplitudes mapped back
    /// to the grid.
    pub grid_report: Option<WidthReport>,
}

/// Diagonalize the production setting, scan the chosen parameter (eigenvalues
/// only), follow the resonance, and compute widths.
pub fn solve(setup: &Setup, scan: &ScanSpec, search: &ResonanceSearch) -> Result<Solution, PipelineError> {
    let prepared = prepare(setup)?;
    let production = parameter_value(&setup.absorber, scan.parameter)?;
    let pairs = diagonalize_sector(&prepared.top)?;
    let mut points: Vec<(f64, Vec<Complex64>)> = vec![(production, pairs.iter().map(|p| p.value).collect())];
    for &v in &scan.values {
        if v == production {
            continue;
        }
        let s = Setup { absorber: with_parameter(&setup.absorber, scan.parameter, v)?, ..setup.clone() };
        points.push((v, prepare(&s)?.top_eigenvalues()?));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let at = points.iter().position(|p| p.0 == production).unwrap();
    if at == 0 || at == points.len() - 1 {
        return Err(PipelineError::OutsideScan(production));
    }
    let (stability, idx) = identify_trajectory(scan.parameter, &points, search)?;
    let energy = points[at].1[idx[at]];
    let pair = pairs.iter().find(|p| p.value == energy).expect("production eigenvalues come from these pairs");
    let mut resonance = ResonanceState::from_pair(setup.particles, pair, stability);
    resonance.scan_index = at;
    let channels = crate::spectral::channel_states(&prepared.next, &prepared.next_ah, &channel_filter(&prepared))?;
    let (report, grid_report) = widths(&prepared, &resonance, &channels)?;
    Ok(Solution { prepared, pairs, resonance, channels, report, grid_report })
}

/// Width reports for a solved resonance.
pub fn widths(
    prepared: &Prepared,
    resonance: &ResonanceState,
    channels: &[ChannelState],
) -> Result<(WidthReport, Option<WidthReport>), PipelineError> {
    let ann = annihilators(&prepared.basis, prepared.particles)?;
    let space = &prepared.space;
    match (prepared.absorber, space.representation) {
        (AbsorberSpec::Cap { .. }, Representation::Grid) => {
            let cap = space.h_ah.diag().mapv(|c| c.re);
            Ok((partial_width_cap_grid(resonance, channels, &cap, &ann)?, None))
        }
        (AbsorberSpec::Cap { .. }, Representation::Orbital) => {
            let orb = partial_width_cap_orbital(resonance, channels, space.h_ah.view(), &ann, 1e-10)?;
            let q = space.orbitals.as_ref().expect("orbital spaces carry their orbitals");
            let a_grid = channel_amplitudes(resonance, channels, &ann)?.dot(&q.t());
            let cap = prepared.grid_space.h_ah.diag().mapv(|c| c.re);
            let grid = partial_width_cap_grid_from_amplitudes(resonance, channels, &cap, a_grid.view())?;
            Ok((orb, Some(grid)))
        }
        (AbsorberSpec::Ecs { .. }, _) => Ok((partial_width_ecs(resonance, channels, space.h_ah.view(), &ann)?, None)),
    }
}

impl Solution {
    pub fn method(&self) -> WidthMethod {
        self.report.method
    }

    pub fn observables(&self) -> Observables {
        Observables {
            channels: self.channels.iter().map(|c| c.vector.clone()).collect(),
            channel_energies: self.channels.iter().map(|c| c.energy).collect(),
            entropy: true,
        }
    }

    /// Antisymmetrized two-body `Ṽ^ah` in pair order, if nonzero.
    pub fn pair_absorber(&self) -> Option<Array2<Complex64>> {
        match &self.prepared.space.v_ah {
            TwoBody::Pairs(m) if m.iter().any(|c| c.norm() > 0.0) => Some(m.clone()),
            TwoBody::Pairs(_) => None,
            other => {
                let k = self.prepared.space.num_modes();
                let np = k * (k - 1) / 2;
                let m = Array2::from_shape_fn((np, np), |(a, b)| {
                    let (p, q) = crate::fock::pair_modes(a);
                    let (r, s) = crate::fock::pair_modes(b);
                    other.antisymmetrized(p, q, r, s)
                });
                m.iter().any(|c| c.norm() > 0.0).then_some(m)
            }
        }
    }

    /// Exponential propagator for two particles.
    pub fn pair_exponential(&self) -> Result<PairExponential, PipelineError> {
        if self.prepared.particles != 2 {
            return Err(PipelineError::NotPairOrbital);
        }
        let d = self.pairs.len();
        let values = Array1::from_iter(self.pairs.iter().map(|p| p.value));
        let mut vectors = Array2::zeros((d, d));
        for (j, p) in self.pairs.iter().enumerate() {
            vectors.column_mut(j).assign(&p.vector);
        }
        Ok(PairExponential::new(values, vectors, &self.prepared.next.matrix, self.prepared.space.h_ah.clone(), self.pair_absorber())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Propagator {
    /// Exact top sector and exponential integration of the one-particle block; two
    /// particles only.
    Exponential { max_step: f64 },
    Rk4 { dt: f64 },
    Adaptive { dt: f64, tol: f64 },
}

/// Propagate `ρ_N(0) = |ψ_res⟩⟨ψ_res|` through `times`.
pub fn propagate_resonance(sol: &Solution, times: &[f64], propagator: Propagator) -> Result<Trajectory, PipelineError> {
    let obs = sol.observables();
    let method = match propagator {
        Propagator::Exponential { max_step } => {
            return Ok(sol.pair_exponential()?.propagate(&sol.resonance.vector, times, max_step, &obs)?);
        }
        Propagator::Rk4 { dt } => Method::Rk4 { dt },
        Propagator::Adaptive { dt, tol } => Method::Adaptive { dt, tol },
    };
    let p = &sol.prepared;
    let sys = LindbladSystem::from_mode_space(&p.basis, &p.space, p.particles)?;
    let others: Vec<(usize, usize)> = sys.sector_dims().into_iter().filter(|d| d.0 != p.particles).collect();
    let init = BlockDensity::pure(p.particles, &sol.resonance.vector, &others);
    Ok(propagate(&sys, &init, times, method, &obs)?)
}

/// Eigenpairs of one scan point, kept until the trajectory is known.
#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub value: f64,
    pub prepared: Prepared,
    pub pairs: Vec<Eigenpair>,
}

pub fn scan_point(setup: &Setup, parameter: ScanParameter, value: f64) -> Result<ScanPoint, PipelineError> {
    let s = Setup { absorber: with_parameter(&setup.absorber, parameter, value)?, ..setup.clone() };
    let prepared = prepare(&s)?;
    let pairs = diagonalize_sector(&prepared.top)?;
    Ok(ScanPoint { value, prepared, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub value: f64,
    pub energy: Complex64,
    pub gamma: f64,
    pub partials: Vec<f64>,
    pub channel_energies: Vec<f64>,
    pub sum_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub parameter: ScanParameter,
    pub rows: Vec<ScanRow>,
    pub stability: StabilityRecord,
    /// `(max − min)/|mean|` of `Γ` over the scan.
    pub gamma_drift: f64,
    /// Same for each channel present at every point with `Γ_p ≥ floor·Γ`.
    pub partial_drifts: Vec<(f64, f64)>,
    pub drift_floor: f64,
    pub tolerance: f64,
    /// Whether `|Γ − ΣΓ_p|` decreases strictly along the scan order.
    pub residual_monotone: bool,
    pub pass: bool,
}

fn relative_drift(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (max - min) / mean.abs().max(f64::MIN_POSITIVE)
}

/// Identify the resonance along sorted scan points, compute widths at each, and
/// judge drift of `Γ` and of every non-negligible `Γ_p` against `tolerance`.
pub fn scan_report(
    mut points: Vec<ScanPoint>,
    parameter: ScanParameter,
    search: &ResonanceSearch,
    tolerance: f64,
    drift_floor: f64,
) -> Result<ScanReport, PipelineError> {
    points.sort_by(|a, b| a.value.total_cmp(&b.value));
    let values: Vec<(f64, Vec<Complex64>)> =
        points.iter().map(|p| (p.value, p.pairs.iter().map(|e| e.value).collect())).collect();
    let (stability, idx) = identify_trajectory(parameter, &values, search)?;
    let mut rows = Vec::with_capacity(points.len());
    for (k, point) in points.iter().enumerate() {
        let mut res = ResonanceState::from_pair(point.prepared.particles, &point.pairs[idx[k]], stability.clone());
        res.scan_index = k;
        let channels = crate::spectral::channel_states(&point.prepared.next, &point.prepared.next_ah, &channel_filter(&point.prepared))?;
        let (report, _) = widths(&point.prepared, &res, &channels)?;
        rows.push(ScanRow {
            value: point.value,
            energy: res.energy,
            gamma: report.gamma_total,
            partials: report.gammas(),
            channel_energies: report.energies(),
            sum_residual: report.sum_residual,
        });
    }
    let gammas: Vec<f64> = rows.iter().map(|r| r.gamma).collect();
    let gamma_drift = relative_drift(&gammas);
    let mut partial_drifts = Vec::new();
    let first = &rows[0];
    for &e in &first.channel_energies {
        let tol_e = 1e-6 * e.abs().max(1.0);
        let series: Option<Vec<f64>> = rows
            .iter()
            .map(|r| r.channel_energies.iter().position(|&x| (x - e).abs() <= tol_e).map(|q| r.partials[q]))
            .collect();
        if let Some(series) = series
            && series.iter().zip(&rows).all(|(g, r)| *g >= drift_floor * r.gamma)
        {
            partial_drifts.push((e, relative_drift(&series)));
        }
    }
    let residual_monotone = rows.windows(2).all(|w| w[1].sum_residual.abs() < w[0].sum_residual.abs());
    let pass = gamma_drift <= tolerance && partial_drifts.iter().all(|d| d.1 <= tolerance);
    Ok(ScanReport { parameter, rows, stability, gamma_drift, partial_drifts, drift_floor, tolerance, residual_monotone, pass })
}

fn channel_filter(prepared: &Prepared) -> ChannelFilter {
    let t = prepared.channel_tol;
    ChannelFilter { tol_bound: t.bound, tol_capov: t.capov_rel * prepared.absorber_scale, tol_orth: t.orth, threshold: 0.0 }
}
