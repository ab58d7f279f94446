//! Sector-block Lindblad propagation with absorber source terms, plus the rate
//! equations it should reproduce.
//!
//! The density matrix is stored as blocks for sectors `N`, `N−1` and a sink `N−2`
//! (when `N ≥ 2`). The sink only accumulates what is fed into it, so total trace is
//! checkable even when some population leaves the bound channels.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eig, EigValsh, Inverse, Solve, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fock::{FockBasis, FockError, SectorMap, TwoBody, annihilator, pair_modes};
use crate::model::{ModeSpace, ModelError, assemble_hamiltonian};
use crate::spectral::hermitian_eigen;
use crate::widths::PopulationCurves;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Propagation aborts once `|Tr ρ − 1|` exceeds this.
pub const TRACE_ABORT: f64 = 1e-6;
/// Block eigenvalues below `−POSITIVITY_TOL` are logged as violations.
pub const POSITIVITY_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum LindbladError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Dimension { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("no block for sector {0}")]
    MissingSector(usize),
    #[error("trace drifted to {trace} at t = {time}")]
    TraceDrift { time: f64, trace: f64 },
    #[error("non-finite state at t = {0}")]
    Instability(f64),
    #[error("invalid step size {0}")]
    BadStep(f64),
    #[error("adaptive step fell to {dt:e} at t = {time}")]
    StepUnderflow { time: f64, dt: f64 },
    #[error("sample times must be nonnegative and increasing")]
    BadTimes,
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn linalg(e: impl std::fmt::Display) -> LindbladError {
    LindbladError::Linalg(e.to_string())
}

fn adjoint(a: &Array2<Complex64>) -> Array2<Complex64> {
    a.t().mapv(|c| c.conj())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDensity {
    pub time: f64,
    pub blocks: BTreeMap<usize, Array2<Complex64>>,
}

impl BlockDensity {
    /// `|v⟩⟨v|` in sector `n`, empty blocks of the given dimensions elsewhere.
    pub fn pure(n: usize, v: &Array1<Complex64>, others: &[(usize, usize)]) -> Self {
        let col = v.view().insert_axis(Axis(1));
        let mut blocks = BTreeMap::new();
        blocks.insert(n, col.dot(&col.t().mapv(|c| c.conj())));
        for &(m, d) in others {
            blocks.insert(m, Array2::zeros((d, d)));
        }
        Self { time: 0.0, blocks }
    }

    pub fn block(&self, n: usize) -> Result<&Array2<Complex64>, LindbladError> {
        self.blocks.get(&n).ok_or(LindbladError::MissingSector(n))
    }

    pub fn sector_trace(&self, n: usize) -> f64 {
        self.blocks.get(&n).map_or(0.0, |b| b.diag().iter().map(|c| c.re).sum())
    }

    pub fn trace(&self) -> f64 {
        self.blocks.keys().map(|&n| self.sector_trace(n)).sum()
    }

    /// `Tr ρ²` (blocks are Hermitian, so this is the squared Frobenius norm).
    pub fn purity(&self) -> f64 {
        self.blocks.values().flat_map(|b| b.iter()).map(|c| c.norm_sqr()).sum()
    }

    /// Eigenvalues of the Hermitian part of every block.
    pub fn spectra(&self) -> Result<BTreeMap<usize, Array1<f64>>, LindbladError> {
        self.blocks
            .iter()
            .map(|(&n, b)| {
                let h = (b + &adjoint(b)).mapv(|c| c * 0.5);
                h.eigvalsh(UPLO::Upper).map(|w| (n, w)).map_err(linalg)
            })
            .collect()
    }

    fn combine(&self, other: &Self, a: f64) -> Self {
        let blocks = self.blocks.iter().map(|(&n, b)| (n, b + &other.blocks[&n].mapv(|c| c * a))).collect();
        Self { time: self.time, blocks }
    }

    fn is_finite(&self) -> bool {
        self.blocks.values().all(|b| b.iter().all(|c| c.re.is_finite() && c.im.is_finite()))
    }

    fn max_diff(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .map(|(n, b)| (b - &other.blocks[n]).iter().map(|c| c.norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }
}

fn entropy_of(w: &Array1<f64>) -> f64 {
    w.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// `S[ρ] = 2 Σ_m w_m D_m ρ D_m†`, a source from sector `from` into `to`.
#[derive(Debug, Clone)]
pub struct JumpSet {
    pub from: usize,
    pub to: usize,
    rows: usize,
    weights: Vec<f64>,
    ops: Vec<Array2<Complex64>>,
}

fn hermitian_modes(coeff: ArrayView2<Complex64>) -> Result<Vec<(f64, Array1<Complex64>)>, LindbladError> {
    let herm = (&coeff + &coeff.t().mapv(|c| c.conj())).mapv(|c| c * 0.5);
    let (w, u) = hermitian_eigen(herm.view()).map_err(linalg)?;
    let scale = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
    Ok(w.iter()
        .zip(u.axis_iter(Axis(1)))
        .filter(|(x, _)| x.abs() > 1e-15 * scale)
        .map(|(&x, v)| (x, v.mapv(|c| c.conj())))
        .collect())
}

impl JumpSet {
    /// One-body source `2 Σ_kl G_kl c_l ρ c_k†` out of sector `from`, written through
    /// the eigen-decomposition of `G`.
    pub fn one_body(basis: &FockBasis, coeff: ArrayView2<Complex64>, from: usize) -> Result<Self, LindbladError> {
        let m = basis.num_modes();
        if coeff.dim() != (m, m) {
            return Err(LindbladError::Dimension { what: "one-body coefficients", expected: (m, m), got: coeff.dim() });
        }
        let c: Vec<Array2<Complex64>> =
            (0..m).map(|k| annihilator(basis, k, from).map(|a| a.to_dense())).collect::<Result<_, _>>()?;
        let mut weights = Vec::new();
        let mut ops = Vec::new();
        for (w, u) in hermitian_modes(coeff)? {
            let d = u.iter().zip(&c).fold(Array2::zeros(c[0].dim()), |acc, (x, ck)| acc + &ck.mapv(|v| v * x));
            weights.push(w);
            ops.push(d);
        }
        Ok(Self { from, to: from - 1, rows: basis.dim(from - 1), weights, ops })
    }

    /// Two-body source `2 Σ_{p<q, r<s} Ṽ_pq,rs (c_s c_r) ρ (c_q c_p)†` out of sector `from`.
    pub fn two_body(basis: &FockBasis, v: &TwoBody, from: usize) -> Result<Self, LindbladError> {
        let m = basis.num_modes();
        let npairs = m * (m - 1) / 2;
        let pairs = Array2::from_shape_fn((npairs, npairs), |(a, b)| {
            let (p, q) = pair_modes(a);
            let (r, s) = pair_modes(b);
            v.antisymmetrized(p, q, r, s)
        });
        let lower: Vec<Array2<Complex64>> =
            (0..m).map(|k| annihilator(basis, k, from).map(|a| a.to_dense())).collect::<Result<_, _>>()?;
        let lower2: Vec<Array2<Complex64>> =
            (0..m).map(|k| annihilator(basis, k, from - 1).map(|a| a.to_dense())).collect::<Result<_, _>>()?;
        let e: Vec<Array2<Complex64>> = (0..npairs)
            .map(|b| {
                let (r, s) = pair_modes(b);
                lower2[s].dot(&lower[r])
            })
            .collect();
        let mut weights = Vec::new();
        let mut ops = Vec::new();
        for (w, u) in hermitian_modes(pairs.view())? {
            let d = u.iter().zip(&e).fold(Array2::zeros(e[0].dim()), |acc, (x, er)| acc + &er.mapv(|c| c * x));
            weights.push(w);
            ops.push(d);
        }
        Ok(Self { from, to: from - 2, rows: basis.dim(from - 2), weights, ops })
    }

    pub fn apply(&self, rho: &Array2<Complex64>) -> Array2<Complex64> {
        let mut out = Array2::zeros((self.rows, self.rows));
        for (w, d) in self.weights.iter().zip(&self.ops) {
            out += &d.dot(rho).dot(&adjoint(d)).mapv(|c| c * (2.0 * w));
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// `2 Σ_kl G_kl c_l ρ c_k†` directly from the annihilators of sector `n+1`.
pub fn source_cap(
    rho_next: &Array2<Complex64>,
    coeff: ArrayView2<Complex64>,
    annihilators: &[SectorMap],
) -> Result<Array2<Complex64>, LindbladError> {
    let m = annihilators.len();
    if coeff.dim() != (m, m) {
        return Err(LindbladError::Dimension { what: "one-body coefficients", expected: (m, m), got: coeff.dim() });
    }
    let Some(first) = annihilators.first() else {
        return Err(LindbladError::Dimension { what: "annihilators", expected: (1, 0), got: (0, 0) });
    };
    let (rows, cols) = first.shape();
    if rho_next.dim() != (cols, cols) {
        return Err(LindbladError::Dimension { what: "density block", expected: (cols, cols), got: rho_next.dim() });
    }
    // y_l = c_l ρ, then S = 2 Σ_k (Σ_l G_kl y_l) c_k† = 2 Σ_k (c_k (Σ_l G_kl y_l)†)†
    let y: Vec<Array2<Complex64>> = annihilators.iter().map(|c| c.apply_rows(rho_next.view())).collect();
    let mut out = Array2::zeros((rows, rows));
    for (k, ck) in annihilators.iter().enumerate() {
        let mut z = Array2::<Complex64>::zeros((rows, cols));
        for (l, yl) in y.iter().enumerate() {
            let g = coeff[(k, l)];
            if g != ZERO {
                z.scaled_add(g, yl);
            }
        }
        out += &adjoint(&ck.apply_rows(adjoint(&z).view()));
    }
    Ok(out.mapv(|c| c * 2.0))
}

/// ECS source into sector `n`: `S₁[ρ_{n+1}]` with `h^I` plus
/// `S₂[ρ_{n+2}] = 2 Σ_{p<q, r<s} Ṽ^I_pq,rs (c_s c_r) ρ_{n+2} (c_q c_p)†`.
pub fn source_ecs(
    rho_next: &Array2<Complex64>,
    rho_next2: Option<&Array2<Complex64>>,
    h_i: ArrayView2<Complex64>,
    v_i: &TwoBody,
    annihilators_next: &[SectorMap],
    annihilators_next2: &[SectorMap],
) -> Result<Array2<Complex64>, LindbladError> {
    let mut out = source_cap(rho_next, h_i, annihilators_next)?;
    let Some(rho2) = rho_next2 else { return Ok(out) };
    let m = annihilators_next.len();
    if annihilators_next2.len() != m {
        return Err(LindbladError::Dimension { what: "annihilators", expected: (m, 0), got: (annihilators_next2.len(), 0) });
    }
    // y_rs = c_s c_r ρ₂
    let npairs = m * (m - 1) / 2;
    let y: Vec<Array2<Complex64>> = (0..npairs)
        .map(|b| {
            let (r, s) = pair_modes(b);
            annihilators_next[s].apply_rows(annihilators_next2[r].apply_rows(rho2.view()).view())
        })
        .collect();
    for a in 0..npairs {
        let (p, q) = pair_modes(a);
        let mut z = Array2::<Complex64>::zeros(y[0].dim());
        for (b, yb) in y.iter().enumerate() {
            let (r, s) = pair_modes(b);
            let v = v_i.antisymmetrized(p, q, r, s);
            if v != ZERO {
                z.scaled_add(v, yb);
            }
        }
        // z (c_q c_p)† = (c_q c_p z†)†
        let t = annihilators_next[q].apply_rows(annihilators_next2[p].apply_rows(adjoint(&z).view()).view());
        out += &adjoint(&t).mapv(|c| c * 2.0);
    }
    Ok(out)
}

/// Generator of the truncated block dynamics.
#[derive(Debug, Clone)]
pub struct LindbladSystem {
    pub top: usize,
    /// Full `H = H^h − i H^ah` for the sectors that evolve coherently.
    pub hamiltonians: BTreeMap<usize, Array2<Complex64>>,
    pub sources: Vec<JumpSet>,
    /// Sector that only accumulates, if any.
    pub sink: Option<usize>,
}

impl LindbladSystem {
    /// Sectors `n`, `n−1` (coherent) and `n−2` (sink) from a mode space; sources are
    /// the one-body `h^ah` out of `n` and `n−1` and the two-body `V^ah` out of `n`.
    pub fn from_mode_space(basis: &FockBasis, space: &ModeSpace, n: usize) -> Result<Self, LindbladError> {
        if n == 0 {
            return Err(LindbladError::MissingSector(0));
        }
        let mut hamiltonians = BTreeMap::new();
        for s in [n, n - 1] {
            hamiltonians.insert(s, assemble_hamiltonian(basis, space, s)?.0.matrix);
        }
        let mut sources = vec![JumpSet::one_body(basis, space.h_ah.view(), n)?];
        let mut sink = None;
        if n >= 2 {
            sink = Some(n - 2);
            sources.push(JumpSet::one_body(basis, space.h_ah.view(), n - 1)?);
            let two = JumpSet::two_body(basis, &space.v_ah, n)?;
            if !two.is_empty() {
                sources.push(two);
            }
        }
        Ok(Self { top: n, hamiltonians, sources, sink })
    }

    pub fn sector_dims(&self) -> Vec<(usize, usize)> {
        let mut d: Vec<(usize, usize)> = self.hamiltonians.iter().map(|(&n, h)| (n, h.nrows())).collect();
        if let Some(s) = self.sink {
            let dim = self.sources.iter().find(|j| j.to == s).map_or(1, |j| j.rows);
            d.push((s, dim));
        }
        d
    }

    /// `ρ̇_n = −i(H ρ_n − ρ_n H†) + S_n`.
    pub fn rhs(&self, state: &BlockDensity) -> Result<BlockDensity, LindbladError> {
        let mut blocks = BTreeMap::new();
        for (&n, rho) in &state.blocks {
            let d = match self.hamiltonians.get(&n) {
                Some(h) => {
                    if h.dim() != rho.dim() {
                        return Err(LindbladError::Dimension { what: "density block", expected: h.dim(), got: rho.dim() });
                    }
                    let hr = h.dot(rho);
                    (&hr - &adjoint(&hr)).mapv(|c| -I * c)
                }
                None => Array2::zeros(rho.dim()),
            };
            blocks.insert(n, d);
        }
        for j in &self.sources {
            let rho = state.block(j.from)?;
            let s = j.apply(rho);
            let target = blocks.get_mut(&j.to).ok_or(LindbladError::MissingSector(j.to))?;
            *target += &s;
        }
        Ok(BlockDensity { time: state.time, blocks })
    }

    fn rk4_step(&self, y: &BlockDensity, dt: f64) -> Result<BlockDensity, LindbladError> {
        let k1 = self.rhs(y)?;
        let k2 = self.rhs(&y.combine(&k1, dt / 2.0))?;
        let k3 = self.rhs(&y.combine(&k2, dt / 2.0))?;
        let k4 = self.rhs(&y.combine(&k3, dt))?;
        let mut out = y.combine(&k1, dt / 6.0).combine(&k2, dt / 3.0).combine(&k3, dt / 3.0).combine(&k4, dt / 6.0);
        out.time = y.time + dt;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with a fixed step (shortened to land on
    /// sample times).
    Rk4 { dt: f64 },
    /// Step-doubling Runge–Kutta with local error below `tol` per step.
    Adaptive { dt: f64, tol: f64 },
}

/// What to record at each sample.
#[derive(Debug, Clone, Default)]
pub struct Observables {
    pub channels: Vec<Array1<Complex64>>,
    pub channel_energies: Vec<f64>,
    pub entropy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityViolation {
    pub time: f64,
    pub sector: usize,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub sectors: Vec<usize>,
    /// `sector_traces[i][j]` is `Tr ρ_{sectors[j]}` at `times[i]`.
    pub sector_traces: Vec<Vec<f64>>,
    pub p_res: Vec<f64>,
    pub channel_energies: Vec<f64>,
    /// `populations[i][p] = ⟨φ_p|ρ_{N−1}|φ_p⟩`.
    pub populations: Vec<Vec<f64>>,
    /// `⟨φ_r|ρ_{N−1}|φ_s⟩` at each sample.
    pub coefficients: Vec<Array2<Complex64>>,
    pub trace: Vec<f64>,
    pub purity: Vec<f64>,
    pub entropy: Vec<Option<f64>>,
    /// Smallest eigenvalue over all blocks at each sample.
    pub min_eigenvalue: Vec<f64>,
    pub positivity_log: Vec<PositivityViolation>,
}

impl Trajectory {
    pub fn max_trace_error(&self) -> f64 {
        self.trace.iter().map(|t| (t - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,P_res");
        for (p, e) in self.channel_energies.iter().enumerate() {
            s.push_str(&format!(",P_{p}[{e:.10}]"));
        }
        s.push_str(",trace,purity,entropy\n");
        for i in 0..self.times.len() {
            s.push_str(&format!("{:.12e},{:.15e}", self.times[i], self.p_res[i]));
            for p in &self.populations[i] {
                s.push_str(&format!(",{p:.15e}"));
            }
            let ent = self.entropy[i].map_or(String::new(), |e| format!("{e:.15e}"));
            s.push_str(&format!(",{:.15e},{:.15e},{ent}\n", self.trace[i], self.purity[i]));
        }
        s
    }

    fn record(
        &mut self,
        time: f64,
        top: usize,
        traces: Vec<(usize, f64)>,
        channel_block: &Array2<Complex64>,
        obs: &Observables,
        purity: f64,
        spectra: &BTreeMap<usize, Array1<f64>>,
    ) -> Result<(), LindbladError> {
        let total: f64 = traces.iter().map(|t| t.1).sum();
        if !total.is_finite() {
            return Err(LindbladError::Instability(time));
        }
        if (total - 1.0).abs() > TRACE_ABORT {
            return Err(LindbladError::TraceDrift { time, trace: total });
        }
        if self.sectors.is_empty() {
            self.sectors = traces.iter().map(|t| t.0).collect();
            self.channel_energies = obs.channel_energies.clone();
        }
        self.times.push(time);
        self.p_res.push(traces.iter().find(|t| t.0 == top).map_or(0.0, |t| t.1));
        self.sector_traces.push(traces.iter().map(|t| t.1).collect());
        let n = obs.channels.len();
        let proj: Vec<Array1<Complex64>> = obs.channels.iter().map(|phi| channel_block.dot(phi)).collect();
        let coeff = Array2::from_shape_fn((n, n), |(r, s)| obs.channels[r].iter().zip(&proj[s]).map(|(a, b)| a.conj() * b).sum::<Complex64>());
        self.populations.push((0..n).map(|p| coeff[(p, p)].re).collect());
        self.coefficients.push(coeff);
        self.trace.push(total);
        self.purity.push(purity);
        self.entropy.push(obs.entropy.then(|| spectra.values().map(entropy_of).sum()));
        let mut lowest = f64::INFINITY;
        for (&sector, w) in spectra {
            let m = w.iter().cloned().fold(f64::INFINITY, f64::min);
            lowest = lowest.min(m);
            if m < -POSITIVITY_TOL {
                self.positivity_log.push(PositivityViolation { time, sector, min_eigenvalue: m });
            }
        }
        self.min_eigenvalue.push(lowest);
        Ok(())
    }
}

fn check_times(times: &[f64]) -> Result<(), LindbladError> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LindbladError::BadTimes);
    }
    Ok(())
}

fn sample(
    traj: &mut Trajectory,
    sys: &LindbladSystem,
    y: &BlockDensity,
    obs: &Observables,
) -> Result<(), LindbladError> {
    let traces = y.blocks.keys().map(|&n| (n, y.sector_trace(n))).collect();
    let spectra = y.spectra()?;
    let empty = Array2::zeros((0, 0));
    let block = y.blocks.get(&(sys.top - 1)).unwrap_or(&empty);
    traj.record(y.time, sys.top, traces, block, obs, y.purity(), &spectra)
}

/// Propagate `initial` (at its own time) through the sample `times`.
pub fn propagate(
    sys: &LindbladSystem,
    initial: &BlockDensity,
    times: &[f64],
    method: Method,
    obs: &Observables,
) -> Result<Trajectory, LindbladError> {
    check_times(times)?;
    let (Method::Rk4 { dt } | Method::Adaptive { dt, .. }) = method;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(LindbladError::BadStep(dt));
    }
    let mut traj = Trajectory::default();
    let mut y = initial.clone();
    let mut h = dt;
    for &target in times {
        while y.time < target {
            let remaining = target - y.time;
            match method {
                Method::Rk4 { dt } => {
                    let steps = (remaining / dt - 1e-9).ceil().max(1.0);
                    let step = remaining / steps;
                    for _ in 0..steps as usize {
                        y = sys.rk4_step(&y, step)?;
                    }
                    y.time = target;
                }
                Method::Adaptive { tol, .. } => {
                    let step = h.min(remaining);
                    let full = sys.rk4_step(&y, step)?;
                    let half = sys.rk4_step(&sys.rk4_step(&y, step / 2.0)?, step / 2.0)?;
                    let err = full.max_diff(&half) / 15.0;
                    if err <= tol {
                        y = half;
                        if step == remaining {
                            y.time = target;
                        }
                    }
                    let factor = if err > 0.0 { 0.9 * (tol / err).powf(0.2) } else { 4.0 };
                    h = step * factor.clamp(0.2, 4.0);
                    if h < 1e-12 * target.max(1.0) {
                        return Err(LindbladError::StepUnderflow { time: y.time, dt: h });
                    }
                }
            }
            if !y.is_finite() {
                return Err(LindbladError::Instability(y.time));
            }
        }
        sample(&mut traj, sys, &y, obs)?;
    }
    Ok(traj)
}

/// Same propagation at `dt` and `dt/2`; the largest difference in sampled
/// populations and traces estimates the integration error.
pub fn richardson_check(
    sys: &LindbladSystem,
    initial: &BlockDensity,
    times: &[f64],
    dt: f64,
    obs: &Observables,
) -> Result<f64, LindbladError> {
    let a = propagate(sys, initial, times, Method::Rk4 { dt }, obs)?;
    let b = propagate(sys, initial, times, Method::Rk4 { dt: dt / 2.0 }, obs)?;
    let mut d = 0.0f64;
    for i in 0..a.times.len() {
        d = d.max((a.p_res[i] - b.p_res[i]).abs());
        for (x, y) in a.populations[i].iter().zip(&b.populations[i]) {
            d = d.max((x - y).abs());
        }
    }
    Ok(d)
}

/// `φ_0(z) … φ_5(z)` with `φ_0 = e^z`, `φ_{k+1}(z) = (φ_k(z) − 1/k!)/z`.
pub fn phi_functions(z: Complex64) -> [Complex64; 6] {
    let mut out = [ZERO; 6];
    if z.norm() < 2.0 {
        for (k, o) in out.iter_mut().enumerate() {
            // Σ_n z^n/(n+k)!
            let mut term = Complex64::new(1.0 / (1..=k).product::<usize>() as f64, 0.0);
            let mut sum = term;
            for n in 1..60 {
                term = term * z / (n + k) as f64;
                sum += term;
                if term.norm() < 1e-18 * sum.norm() {
                    break;
                }
            }
            *o = sum;
        }
    } else {
        out[0] = z.exp();
        let mut fact = 1.0;
        for k in 0..5 {
            out[k + 1] = (out[k] - 1.0 / fact) / z;
            fact *= (k + 1) as f64;
        }
    }
    out
}

/// Exact-in-time propagation for two particles in an orbital mode space.
///
/// The top sector is pure, `ρ₂ = U U†`, and is advanced through the eigenvectors
/// of `H₂`. The one-particle block is carried in the eigenbasis of `H₁`, where its
/// generator is diagonal; the source is interpolated by a cubic on each step and
/// integrated exactly with `φ` functions. The vacuum collects `2 Tr(G ρ₁)` and the
/// two-body term `2 U† Ṽ^ah U`.
pub struct PairExponential {
    top_values: Array1<Complex64>,
    top_vectors: Array2<Complex64>,
    lam1: Array1<Complex64>,
    r1: Array2<Complex64>,
    r1_inv: Array2<Complex64>,
    g: Array2<Complex64>,
    /// `2 R₁† G R₁`, giving the vacuum feed `Σ_ab W_ab σ_ba`.
    w: Array2<Complex64>,
    v_pairs: Option<Array2<Complex64>>,
    modes: usize,
}

/// Monomial coefficients of the cubic through four equally spaced samples at
/// `u = 0, 1/3, 2/3, 1`.
const CUBIC: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [-5.5, 9.0, -4.5, 1.0],
    [9.0, -22.5, 18.0, -4.5],
    [-4.5, 13.5, -13.5, 4.5],
];

impl PairExponential {
    /// `top`: eigenpairs of the two-particle `H₂` (values, vectors as columns);
    /// `h1`: one-particle `H₁`; `g`: one-body `h^ah`; `v_pairs`: antisymmetrized
    /// two-body `Ṽ^ah` in pair order, if any.
    pub fn new(
        top_values: Array1<Complex64>,
        top_vectors: Array2<Complex64>,
        h1: &Array2<Complex64>,
        g: Array2<Complex64>,
        v_pairs: Option<Array2<Complex64>>,
    ) -> Result<Self, LindbladError> {
        let k = h1.nrows();
        let d = k * (k - 1) / 2;
        if top_vectors.dim() != (d, top_values.len()) {
            return Err(LindbladError::Dimension { what: "two-particle eigenvectors", expected: (d, d), got: top_vectors.dim() });
        }
        if g.dim() != (k, k) {
            return Err(LindbladError::Dimension { what: "one-body coefficients", expected: (k, k), got: g.dim() });
        }
        if let Some(v) = &v_pairs {
            if v.dim() != (d, d) {
                return Err(LindbladError::Dimension { what: "pair coefficients", expected: (d, d), got: v.dim() });
            }
        }
        let (lam1, r1) = h1.eig().map_err(linalg)?;
        let r1_inv = r1.inv().map_err(linalg)?;
        let w = adjoint(&r1).dot(&g).dot(&r1).mapv(|c| c * 2.0);
        Ok(Self { top_values, top_vectors, lam1, r1, r1_inv, g, w, v_pairs, modes: k })
    }

    fn top_state(&self, a: &Array1<Complex64>, t: f64) -> Array1<Complex64> {
        let c = Array1::from_iter(a.iter().zip(&self.top_values).map(|(x, l)| x * (-I * l * t).exp()));
        self.top_vectors.dot(&c)
    }

    /// One-particle source in the `H₁` eigenbasis and the two-body vacuum feed.
    fn sources(&self, u: &Array1<Complex64>) -> (Array2<Complex64>, f64) {
        let k = self.modes;
        // b[l, j] = (c_l U)_j
        let mut b = Array2::zeros((k, k));
        for q in 1..k {
            for p in 0..q {
                let x = u[crate::fock::pair_index(p, q)];
                b[(p, q)] = x;
                b[(q, p)] = -x;
            }
        }
        let s = b.t().dot(&self.g.t()).dot(&b.mapv(|c| c.conj())).mapv(|c| c * 2.0);
        let sh = self.r1_inv.dot(&s).dot(&adjoint(&self.r1_inv));
        let s2 = self.v_pairs.as_ref().map_or(0.0, |v| {
            2.0 * u.iter().zip(v.dot(u).iter()).map(|(a, b)| a.conj() * b).sum::<Complex64>().re
        });
        (sh, s2)
    }

    /// `‖S₂‖/‖S₁‖` for the pure two-particle state `u` (Frobenius norms).
    pub fn source_ratio(&self, u: &Array1<Complex64>) -> f64 {
        let (sh, s2) = self.sources(u);
        let s1 = self.r1.dot(&sh).dot(&adjoint(&self.r1));
        s2.abs() / s1.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn propagate(
        &self,
        u0: &Array1<Complex64>,
        times: &[f64],
        max_step: f64,
        obs: &Observables,
    ) -> Result<Trajectory, LindbladError> {
        check_times(times)?;
        if !(max_step > 0.0 && max_step.is_finite()) {
            return Err(LindbladError::BadStep(max_step));
        }
        let k = self.modes;
        let a = self.top_vectors.solve(u0).map_err(linalg)?;
        let mut sigma = Array2::<Complex64>::zeros((k, k));
        let mut vacuum = 0.0;
        let mut t = 0.0;
        let mut traj = Trajectory::default();
        let mut cache: Option<(f64, Vec<[Complex64; 6]>)> = None;
        let mut left = self.sources(&self.top_state(&a, 0.0));
        for &target in times {
            while t < target {
                let remaining = target - t;
                let steps = (remaining / max_step - 1e-9).ceil().max(1.0);
                let h = remaining / steps;
                for _ in 0..steps as usize {
                    if cache.as_ref().is_none_or(|c| c.0 != h) {
                        let phis = (0..k * k)
                            .map(|ab| {
                                let (x, y) = (ab / k, ab % k);
                                phi_functions(-I * (self.lam1[x] - self.lam1[y].conj()) * h)
                            })
                            .collect();
                        cache = Some((h, phis));
                    }
                    let phis = &cache.as_ref().unwrap().1;
                    let nodes = [
                        left.clone(),
                        self.sources(&self.top_state(&a, t + h / 3.0)),
                        self.sources(&self.top_state(&a, t + 2.0 * h / 3.0)),
                        self.sources(&self.top_state(&a, t + h)),
                    ];
                    let coeffs: Vec<(Array2<Complex64>, f64)> = CUBIC
                        .iter()
                        .map(|row| {
                            let mut m = Array2::zeros((k, k));
                            let mut s = 0.0;
                            for (w, n) in row.iter().zip(&nodes) {
                                if *w != 0.0 {
                                    m.scaled_add(Complex64::new(*w, 0.0), &n.0);
                                    s += w * n.1;
                                }
                            }
                            (m, s)
                        })
                        .collect();
                    let mut next = Array2::zeros((k, k));
                    let mut feed = ZERO;
                    for x in 0..k {
                        for y in 0..k {
                            let p = &phis[x * k + y];
                            let s0 = sigma[(x, y)];
                            let mut v = p[0] * s0;
                            let mut integral = p[1] * s0 * h;
                            let mut fact = 1.0;
                            for (j, (c, _)) in coeffs.iter().enumerate() {
                                v += c[(x, y)] * p[j + 1] * (fact * h);
                                integral += c[(x, y)] * p[j + 2] * (fact * h * h);
                                fact *= (j + 1) as f64;
                            }
                            next[(x, y)] = v;
                            feed += self.w[(y, x)] * integral;
                        }
                    }
                    // exact integral of the cubic two-body feed: Simpson's 3/8 rule
                    let s2 = h / 8.0 * (nodes[0].1 + 3.0 * nodes[1].1 + 3.0 * nodes[2].1 + nodes[3].1);
                    vacuum += feed.re + s2;
                    sigma = next;
                    t += h;
                    left = nodes[3].clone();
                }
                t = target;
            }
            let u = self.top_state(&a, t);
            let p2: f64 = u.iter().map(|c| c.norm_sqr()).sum();
            let rho1 = self.r1.dot(&sigma).dot(&adjoint(&self.r1));
            let herm = (&rho1 + &adjoint(&rho1)).mapv(|c| c * 0.5);
            let w1 = herm.eigvalsh(UPLO::Upper).map_err(linalg)?;
            let mut spectra = BTreeMap::new();
            spectra.insert(0, Array1::from(vec![vacuum]));
            spectra.insert(1, w1);
            // rank one: the only nonzero eigenvalue is ‖U‖²
            spectra.insert(2, Array1::from(vec![p2, 0.0]));
            let tr1: f64 = rho1.diag().iter().map(|c| c.re).sum();
            let purity = p2 * p2 + rho1.iter().map(|c| c.norm_sqr()).sum::<f64>() + vacuum * vacuum;
            traj.record(t, 2, vec![(0, vacuum), (1, tr1), (2, p2)], &rho1, obs, purity, &spectra)?;
        }
        Ok(traj)
    }
}

/// `Ṗ_res = −Γ P_res`, `Ṗ_p = Γ_p P_res`, integrated numerically (fourth-order
/// Runge–Kutta with `Γ·dt ≤ 2e-3`), independent of the closed form.
pub fn rate_oracle(gamma_total: f64, partials: &[f64], times: &[f64]) -> Result<PopulationCurves, LindbladError> {
    check_times(times)?;
    if !(gamma_total > 0.0) {
        return Err(LindbladError::BadStep(gamma_total));
    }
    let f = |y: &[f64]| -> Vec<f64> {
        let mut d = vec![-gamma_total * y[0]];
        d.extend(partials.iter().map(|g| g * y[0]));
        d
    };
    let mut y = vec![0.0; partials.len() + 1];
    y[0] = 1.0;
    let mut t = 0.0;
    let mut out = PopulationCurves { times: times.to_vec(), p_res: vec![], channels: vec![vec![]; partials.len()] };
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let steps = (span * gamma_total / 2e-3).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            for _ in 0..steps {
                let k1 = f(&y);
                let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
                let k2 = f(&y2);
                let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
                let k3 = f(&y3);
                let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
                let k4 = f(&y4);
                for i in 0..y.len() {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            t = target;
        }
        out.p_res.push(y[0]);
        for (c, v) in out.channels.iter_mut().zip(&y[1..]) {
            c.push(*v);
        }
    }
    Ok(out)
}
