//! Sector diagonalization, resonance identification from absorber-parameter scans,
//! and the bound channel states of the (N−1)-particle sector.

use ndarray::{Array1, Array2, ArrayView2, Axis, ShapeBuilder};
use ndarray_linalg::{Eig, EigValsh, Eigh, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fock::SectorOperator;

#[derive(Debug, thiserror::Error)]
pub enum SpectralError {
    #[error("eigensolver failed on sector {sector}: {msg}")]
    Eigensolver { sector: usize, msg: String },
    #[error("a stability scan needs at least 3 points, got {0}")]
    TooFewScanPoints(usize),
    #[error("scan points come from different sector dimensions")]
    MixedScan,
    #[error("no stable resonance{}", best.as_ref().map(|b| format!(" (best trajectory moves by {:.3e}, tolerance {:.3e})", b.max_displacement, b.tolerance)).unwrap_or_default())]
    NoStableResonance { best: Option<Box<StabilityRecord>> },
    #[error("ambiguous trajectory at scan point {point}: neighbours {nearest:.3e} and {second:.3e} apart")]
    AmbiguousMatch { point: usize, nearest: f64, second: f64 },
    #[error("no bound channel states in sector {0}")]
    NoChannels(usize),
    #[error("channel states overlap by {0:.3e}")]
    NonOrthogonal(f64),
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub value: Complex64,
    pub vector: Array1<Complex64>,
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a Hermitian matrix.
///
/// The input is copied to column-major order first: for row-major complex input
/// the LAPACK wrapper hands back conjugated eigenvectors.
pub fn hermitian_eigen(a: ArrayView2<Complex64>) -> Result<(Array1<f64>, Array2<Complex64>), ndarray_linalg::error::LinalgError> {
    let mut f = Array2::zeros(a.dim().f());
    f.assign(&a);
    f.eigh(UPLO::Upper)
}

/// Rotate `v` so its largest-magnitude component is real and positive.
pub fn fix_phase(v: &mut Array1<Complex64>) {
    let big = v.iter().copied().fold(Complex64::new(0.0, 0.0), |a, c| if c.norm() > a.norm() { c } else { a });
    if big.norm() > 0.0 {
        let ph = big.conj() / big.norm();
        v.mapv_inplace(|c| c * ph);
    }
}

fn order(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
}

/// All eigenpairs, unit-normalized right vectors with fixed phase, ordered by
/// `(Re ε, Im ε)`.
pub fn diagonalize_sector(op: &SectorOperator) -> Result<Vec<Eigenpair>, SpectralError> {
    let (vals, vecs) =
        op.matrix.eig().map_err(|e| SpectralError::Eigensolver { sector: op.sector, msg: e.to_string() })?;
    let mut pairs: Vec<Eigenpair> = vals
        .iter()
        .zip(vecs.axis_iter(Axis(1)))
        .map(|(&value, v)| {
            let mut vector = v.to_owned();
            let norm = vector.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            vector.mapv_inplace(|c| c / norm);
            fix_phase(&mut vector);
            Eigenpair { value, vector }
        })
        .collect();
    pairs.sort_by(|a, b| order(&a.value, &b.value));
    Ok(pairs)
}

/// Which absorber parameter a stability scan varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanParameter {
    Strength,
    Onset,
    Theta,
    R0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub parameter: ScanParameter,
    pub values: Vec<f64>,
    pub energies: Vec<Complex64>,
    /// `|ε_{i+1} − ε_i|` along the trajectory.
    pub displacements: Vec<f64>,
    pub max_displacement: f64,
    pub tolerance: f64,
}

/// Candidate filter for [`identify_resonance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResonanceSearch {
    /// Relative stability tolerance; trajectories may move by at most `tol·|ε|`.
    pub stability_tol: f64,
    /// Smallest `Γ = −2 Im ε` accepted, so that bound states with a leakage-sized
    /// imaginary part are not taken for resonances.
    pub min_width: f64,
    /// Optional `[lo, hi]` window on `Re ε` at the first scan point.
    pub window: Option<(f64, f64)>,
}

impl Default for ResonanceSearch {
    fn default() -> Self {
        Self { stability_tol: 1e-4, min_width: 1e-8, window: None }
    }
}

#[derive(Debug, Clone)]
pub struct ResonanceState {
    pub sector: usize,
    pub energy: Complex64,
    pub eps_i: f64,
    pub vector: Array1<Complex64>,
    pub stability: StabilityRecord,
    /// Which scan point the energy and vector belong to.
    pub scan_index: usize,
}

impl ResonanceState {
    /// Wrap a single eigenpair, e.g. for small models where no scan is needed.
    pub fn from_pair(sector: usize, pair: &Eigenpair, stability: StabilityRecord) -> Self {
        Self {
            sector,
            energy: pair.value,
            eps_i: -pair.value.im,
            vector: pair.vector.clone(),
            stability,
            scan_index: 0,
        }
    }
}

/// Follow every admissible eigenvalue of the first scan point through the others
/// by nearest neighbour; return the trajectory with the smallest maximal step and
/// the index of its eigenvalue at each point.
pub fn identify_trajectory(
    parameter: ScanParameter,
    scans: &[(f64, Vec<Complex64>)],
    search: &ResonanceSearch,
) -> Result<(StabilityRecord, Vec<usize>), SpectralError> {
    if scans.len() < 3 {
        return Err(SpectralError::TooFewScanPoints(scans.len()));
    }
    let first = &scans[0].1;
    let admissible = |z: &Complex64| {
        -2.0 * z.im >= search.min_width && search.window.is_none_or(|(lo, hi)| z.re >= lo && z.re <= hi)
    };
    let nearest = |set: &[Complex64], z: Complex64| -> (usize, f64, f64) {
        let mut best = (usize::MAX, f64::INFINITY, f64::INFINITY);
        for (i, w) in set.iter().enumerate() {
            let d = (w - z).norm();
            if d < best.1 {
                best = (i, d, best.1);
            } else if d < best.2 {
                best.2 = d;
            }
        }
        best
    };
    let mut best: Option<(f64, StabilityRecord, Vec<usize>)> = None;
    for (start, z0) in first.iter().enumerate().filter(|(_, z)| admissible(z)) {
        let mut idx = vec![start];
        let mut energies = vec![*z0];
        let mut displacements = Vec::new();
        for (_, set) in &scans[1..] {
            let (i, d, _) = nearest(set, *energies.last().unwrap());
            if i == usize::MAX {
                return Err(SpectralError::MixedScan);
            }
            idx.push(i);
            energies.push(set[i]);
            displacements.push(d);
        }
        let max_d = displacements.iter().cloned().fold(0.0, f64::max);
        let rel = max_d / z0.norm().max(f64::MIN_POSITIVE);
        if best.as_ref().is_none_or(|b| rel < b.0) {
            let record = StabilityRecord {
                parameter,
                values: scans.iter().map(|s| s.0).collect(),
                tolerance: search.stability_tol * z0.norm(),
                energies,
                displacements,
                max_displacement: max_d,
            };
            best = Some((rel, record, idx));
        }
    }
    let Some((_, record, idx)) = best else {
        return Err(SpectralError::NoStableResonance { best: None });
    };
    if record.max_displacement > record.tolerance || record.energies.iter().any(|z| z.im >= 0.0) {
        return Err(SpectralError::NoStableResonance { best: Some(Box::new(record)) });
    }
    for (k, (_, set)) in scans.iter().enumerate().skip(1) {
        let (_, d, second) = nearest(set, record.energies[k - 1]);
        if second - d < 2.0 * record.tolerance {
            return Err(SpectralError::AmbiguousMatch { point: k, nearest: d, second });
        }
    }
    Ok((record, idx))
}

/// The stable trajectory, with energy and vector taken at the middle scan point.
pub fn identify_resonance(
    sector: usize,
    parameter: ScanParameter,
    scans: &[(f64, Vec<Eigenpair>)],
    search: &ResonanceSearch,
) -> Result<ResonanceState, SpectralError> {
    let values: Vec<(f64, Vec<Complex64>)> =
        scans.iter().map(|(p, pairs)| (*p, pairs.iter().map(|e| e.value).collect())).collect();
    let (stability, idx) = identify_trajectory(parameter, &values, search)?;
    let mid = scans.len() / 2;
    let pair = &scans[mid].1[idx[mid]];
    Ok(ResonanceState {
        sector,
        energy: pair.value,
        eps_i: -pair.value.im,
        vector: pair.vector.clone(),
        stability,
        scan_index: mid,
    })
}

#[derive(Debug, Clone)]
pub struct ChannelState {
    pub index: usize,
    pub energy: f64,
    pub energy_im: f64,
    pub vector: Array1<Complex64>,
    /// `⟨φ_p|H^ah|φ_p⟩`
    pub cap_overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelFilter {
    pub tol_bound: f64,
    /// Absolute bound on `⟨φ|H^ah|φ⟩`; see [`ChannelFilter::for_scale`].
    pub tol_capov: f64,
    pub tol_orth: f64,
    /// Only states below this energy count as bound (the one-particle continuum
    /// threshold of a potential that vanishes at large distance is 0).
    pub threshold: f64,
}

impl ChannelFilter {
    /// Default tolerances with `tol_capov = 1e-8·scale`, where `scale` is the
    /// absorber magnitude (`η` for a CAP).
    pub fn for_scale(scale: f64) -> Self {
        Self { tol_bound: 1e-6, tol_capov: 1e-8 * scale, tol_orth: 1e-9, threshold: 0.0 }
    }
}

fn inner(a: &Array1<Complex64>, b: &Array1<Complex64>) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Bound, absorber-free eigenstates of the (N−1)-particle sector, ordered by energy.
pub fn channel_states(
    h: &SectorOperator,
    hah: &SectorOperator,
    filter: &ChannelFilter,
) -> Result<Vec<ChannelState>, SpectralError> {
    let pairs = diagonalize_sector(h)?;
    let mut out: Vec<ChannelState> = pairs
        .into_iter()
        .filter(|p| p.value.im.abs() <= filter.tol_bound && p.value.re < filter.threshold)
        .map(|p| {
            let cap_overlap = inner(&p.vector, &hah.matrix.dot(&p.vector)).re;
            ChannelState { index: 0, energy: p.value.re, energy_im: p.value.im, vector: p.vector, cap_overlap }
        })
        .filter(|c| c.cap_overlap <= filter.tol_capov)
        .collect();
    if out.is_empty() {
        return Err(SpectralError::NoChannels(h.sector));
    }
    let n = out.len();
    let gram = Array2::from_shape_fn((n, n), |(i, j)| inner(&out[i].vector, &out[j].vector));
    let worst = gram.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, c)| c.norm()).fold(0.0, f64::max);
    if worst > 10.0 * filter.tol_orth {
        return Err(SpectralError::NonOrthogonal(worst));
    }
    if worst > filter.tol_orth {
        // symmetric (Löwdin) orthonormalization: φ' = Σ_j φ_j (G^{-1/2})_ji
        let (w, u) = hermitian_eigen(gram.view())
            .map_err(|e| SpectralError::Eigensolver { sector: h.sector, msg: e.to_string() })?;
        let s = Array2::from_diag(&w.mapv(|x| Complex64::from(1.0 / x.sqrt())));
        let ginv = u.dot(&s).dot(&u.t().mapv(|c| c.conj()));
        let old: Vec<Array1<Complex64>> = out.iter().map(|c| c.vector.clone()).collect();
        for (i, c) in out.iter_mut().enumerate() {
            c.vector = old.iter().enumerate().fold(Array1::zeros(old[0].len()), |acc, (j, v)| acc + v * ginv[(j, i)]);
        }
    }
    for (i, c) in out.iter_mut().enumerate() {
        c.index = i;
    }
    Ok(out)
}

/// Smallest eigenvalue of the Hermitian part of a block; used to report positivity.
pub fn min_hermitian_eigenvalue(m: &Array2<Complex64>) -> Result<f64, SpectralError> {
    let herm = (m + &m.t().mapv(|c| c.conj())).mapv(|c| c * 0.5);
    let w = herm.eigvalsh(UPLO::Upper).map_err(|e| SpectralError::Eigensolver { sector: 0, msg: e.to_string() })?;
    Ok(w.iter().cloned().fold(f64::INFINITY, f64::min))
}
