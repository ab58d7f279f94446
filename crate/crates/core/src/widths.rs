//! Total and partial widths, the κ coefficient matrix, and the closed-form
//! population, coherence and purity curves they imply.

use ndarray::{Array1, Array2, ArrayView2};
use ndarray_linalg::{EigValsh, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fock::{FockError, SectorMap};
use crate::spectral::{ChannelState, ResonanceState};

#[derive(Debug, thiserror::Error)]
pub enum WidthError {
    #[error("expected a sector-{expected} {what}, got sector {got}")]
    SectorMismatch { what: &'static str, expected: usize, got: usize },
    #[error("coefficient matrix is not Hermitian (defect {0:.3e})")]
    NotHermitian(f64),
    #[error("coefficient matrix has a negative eigenvalue {0:.3e}")]
    NotPositive(f64),
    #[error("{what}: expected {expected} entries, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("resonance does not decay (Γ = {0:e})")]
    NoDecay(f64),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Fock(#[from] FockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthMethod {
    CapGrid,
    CapOrbital,
    Ecs,
}

/// `Γ = 2 ε^I`.
pub fn total_width(res: &ResonanceState) -> f64 {
    2.0 * res.eps_i
}

/// `A[p, k] = ⟨φ_p| c_k |ψ_res⟩`.
pub fn channel_amplitudes(
    res: &ResonanceState,
    channels: &[ChannelState],
    annihilators: &[SectorMap],
) -> Result<Array2<Complex64>, WidthError> {
    let n = res.sector;
    if n == 0 {
        return Err(WidthError::SectorMismatch { what: "resonance", expected: 1, got: 0 });
    }
    for c in annihilators {
        if c.sector() != n {
            return Err(WidthError::SectorMismatch { what: "annihilator", expected: n, got: c.sector() });
        }
    }
    let mut a = Array2::zeros((channels.len(), annihilators.len()));
    for (k, c) in annihilators.iter().enumerate() {
        let (rows, cols) = c.shape();
        if cols != res.vector.len() {
            return Err(WidthError::Dimension { what: "resonance vector", expected: cols, got: res.vector.len() });
        }
        let ck = c.apply(res.vector.view());
        for (p, ch) in channels.iter().enumerate() {
            if ch.vector.len() != rows {
                return Err(WidthError::Dimension { what: "channel vector", expected: rows, got: ch.vector.len() });
            }
            a[(p, k)] = ch.vector.iter().zip(&ck).map(|(x, y)| x.conj() * y).sum();
        }
    }
    Ok(a)
}

/// `κ_rs = 2 Σ_kl G_kl A[r,l] A[s,k]*`.
pub fn kappa_from_amplitudes(a: ArrayView2<Complex64>, g: ArrayView2<Complex64>) -> Array2<Complex64> {
    let ah = a.t().mapv(|c| c.conj());
    a.dot(&g.t()).dot(&ah).mapv(|c| c * 2.0)
}

pub fn kappa_matrix(
    res: &ResonanceState,
    channels: &[ChannelState],
    coefficients: ArrayView2<Complex64>,
    annihilators: &[SectorMap],
) -> Result<Array2<Complex64>, WidthError> {
    let a = channel_amplitudes(res, channels, annihilators)?;
    check_square(coefficients, a.ncols())?;
    Ok(kappa_from_amplitudes(a.view(), coefficients))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialWidth {
    pub p: usize,
    pub energy: f64,
    pub gamma_p: f64,
    /// Imaginary residue of the (real in exact arithmetic) expression.
    pub imag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthReport {
    pub method: WidthMethod,
    pub resonance_energy: Complex64,
    pub gamma_total: f64,
    pub partials: Vec<PartialWidth>,
    pub sum_residual: f64,
    pub kappa: Array2<Complex64>,
    pub warnings: Vec<String>,
}

impl WidthReport {
    fn build(
        method: WidthMethod,
        res: &ResonanceState,
        channels: &[ChannelState],
        kappa: Array2<Complex64>,
    ) -> Result<Self, WidthError> {
        let gamma_total = total_width(res);
        let partials: Vec<PartialWidth> = channels
            .iter()
            .enumerate()
            .map(|(p, c)| PartialWidth { p, energy: c.energy, gamma_p: kappa[(p, p)].re, imag: kappa[(p, p)].im })
            .collect();
        let sum_residual = gamma_total - partials.iter().map(|p| p.gamma_p).sum::<f64>();
        let mut warnings = Vec::new();
        for p in &partials {
            if method != WidthMethod::CapGrid && p.gamma_p < -1e-6 * gamma_total {
                warnings.push(format!("channel {} has negative partial width {:.3e}; check convergence", p.p, p.gamma_p));
            }
        }
        Ok(Self { method, resonance_energy: res.energy, gamma_total, partials, sum_residual, kappa, warnings })
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.partials.iter().map(|p| p.gamma_p).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.partials.iter().map(|p| p.energy).collect()
    }
}

fn check_square(m: ArrayView2<Complex64>, n: usize) -> Result<(), WidthError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(WidthError::Dimension { what: "coefficient matrix", expected: n * n, got: m.len() });
    }
    Ok(())
}

fn hermitian_defect(m: ArrayView2<Complex64>) -> f64 {
    let scale = m.iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    m.indexed_iter().map(|((i, j), c)| (c - m[(j, i)].conj()).norm()).fold(0.0, f64::max) / scale
}

/// `Γ_p = 2 Σ_k Γ(x_k) |⟨φ_p|c_k|ψ⟩|²` for a CAP diagonal on the grid.
pub fn partial_width_cap_grid(
    res: &ResonanceState,
    channels: &[ChannelState],
    cap: &Array1<f64>,
    annihilators: &[SectorMap],
) -> Result<WidthReport, WidthError> {
    let a = channel_amplitudes(res, channels, annihilators)?;
    partial_width_cap_grid_from_amplitudes(res, channels, cap, a.view())
}

/// Same, from precomputed grid amplitudes (e.g. orbital amplitudes mapped back to
/// the grid).
pub fn partial_width_cap_grid_from_amplitudes(
    res: &ResonanceState,
    channels: &[ChannelState],
    cap: &Array1<f64>,
    a: ArrayView2<Complex64>,
) -> Result<WidthReport, WidthError> {
    if cap.len() != a.ncols() {
        return Err(WidthError::Dimension { what: "CAP values", expected: a.ncols(), got: cap.len() });
    }
    if let Some(g) = cap.iter().find(|&&g| g < 0.0) {
        return Err(WidthError::NotPositive(*g));
    }
    let n = channels.len();
    let mut kappa = Array2::zeros((n, n));
    for r in 0..n {
        for s in 0..n {
            kappa[(r, s)] = (0..cap.len()).map(|k| a[(r, k)] * a[(s, k)].conj() * cap[k]).sum::<Complex64>() * 2.0;
        }
    }
    // the diagonal is a sum of squares, so keep it exactly real
    for p in 0..n {
        kappa[(p, p)] = Complex64::new(2.0 * (0..cap.len()).map(|k| cap[k] * a[(p, k)].norm_sqr()).sum::<f64>(), 0.0);
    }
    WidthReport::build(WidthMethod::CapGrid, res, channels, kappa)
}

/// `Γ_p = 2 Σ_kl ⟨χ_k|Γ|χ_l⟩ ⟨φ_p|c_l|ψ⟩⟨ψ|c_k†|φ_p⟩` for a CAP in a general orbital basis.
pub fn partial_width_cap_orbital(
    res: &ResonanceState,
    channels: &[ChannelState],
    gamma_orb: ArrayView2<Complex64>,
    annihilators: &[SectorMap],
    tol_psd: f64,
) -> Result<WidthReport, WidthError> {
    check_square(gamma_orb, annihilators.len())?;
    let defect = hermitian_defect(gamma_orb);
    if defect > 1e-10 {
        return Err(WidthError::NotHermitian(defect));
    }
    let herm = (&gamma_orb + &gamma_orb.t().mapv(|c| c.conj())).mapv(|c| c * 0.5);
    let w = herm.eigvalsh(UPLO::Upper).map_err(|e| WidthError::Linalg(e.to_string()))?;
    let scale = w.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if let Some(&neg) = w.iter().find(|&&x| x < -tol_psd * scale) {
        return Err(WidthError::NotPositive(neg));
    }
    let kappa = kappa_matrix(res, channels, gamma_orb, annihilators)?;
    WidthReport::build(WidthMethod::CapOrbital, res, channels, kappa)
}

/// `Γ_p = 2 Σ_kl h^I_kl ⟨φ_p|c_l|ψ⟩⟨ψ|c_k†|φ_p⟩`; nonnegativity is not structural here.
pub fn partial_width_ecs(
    res: &ResonanceState,
    channels: &[ChannelState],
    h_i: ArrayView2<Complex64>,
    annihilators: &[SectorMap],
) -> Result<WidthReport, WidthError> {
    check_square(h_i, annihilators.len())?;
    let defect = hermitian_defect(h_i);
    if defect > 1e-10 {
        return Err(WidthError::NotHermitian(defect));
    }
    let kappa = kappa_matrix(res, channels, h_i, annihilators)?;
    WidthReport::build(WidthMethod::Ecs, res, channels, kappa)
}

/// Same as the CAP/ECS constructors but from a precomputed κ.
pub fn report_from_kappa(
    method: WidthMethod,
    res: &ResonanceState,
    channels: &[ChannelState],
    kappa: Array2<Complex64>,
) -> Result<WidthReport, WidthError> {
    WidthReport::build(method, res, channels, kappa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationCurves {
    pub times: Vec<f64>,
    pub p_res: Vec<f64>,
    /// `channels[p][i]` is `P_p(times[i])`.
    pub channels: Vec<Vec<f64>>,
}

/// `P_res = e^{−Γt}`, `P_p = (Γ_p/Γ)(1 − e^{−Γt})`.
pub fn population_closed_form(report: &WidthReport, times: &[f64]) -> Result<PopulationCurves, WidthError> {
    let g = report.gamma_total;
    if g <= 0.0 {
        return Err(WidthError::NoDecay(g));
    }
    let p_res = times.iter().map(|&t| (-g * t).exp()).collect();
    let channels = report
        .partials
        .iter()
        .map(|p| times.iter().map(|&t| p.gamma_p / g * -(-g * t).exp_m1()).collect())
        .collect();
    Ok(PopulationCurves { times: times.to_vec(), p_res, channels })
}

/// `p_rs(t) = κ_rs/(Γ − iΔε_rs) (e^{−iΔε_rs t} − e^{−Γt})`, the channel-basis
/// matrix elements of `ρ_{N−1}(t)`.
pub fn coefficient_closed_form(kappa: &Array2<Complex64>, energies: &[f64], gamma: f64, t: f64) -> Array2<Complex64> {
    let n = energies.len();
    Array2::from_shape_fn((n, n), |(r, s)| {
        let de = energies[r] - energies[s];
        let num = Complex64::from_polar(1.0, -de * t) - (-gamma * t).exp();
        if de == 0.0 {
            // (1 − e^{−Γt})/Γ without cancellation
            kappa[(r, s)] * -(-gamma * t).exp_m1() / gamma
        } else {
            kappa[(r, s)] / Complex64::new(gamma, -de) * num
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `Σ_rs |κ_rs|²/(Γ² + Δε_rs²)`.
    pub asymptote: f64,
}

/// `ς(t) = e^{−2Γt} + Σ_rs |κ_rs|²/(Γ²+Δε_rs²) (1 + e^{−2Γt} − 2 cos(Δε_rs t) e^{−Γt})`.
pub fn purity_closed_form(kappa: &Array2<Complex64>, energies: &[f64], gamma: f64, times: &[f64]) -> PurityCurve {
    let n = energies.len();
    let terms: Vec<(f64, f64)> = (0..n)
        .flat_map(|r| (0..n).map(move |s| (r, s)))
        .map(|(r, s)| {
            let de = energies[r] - energies[s];
            (kappa[(r, s)].norm_sqr() / (gamma * gamma + de * de), de)
        })
        .collect();
    let asymptote = terms.iter().map(|t| t.0).sum();
    let values = times
        .iter()
        .map(|&t| {
            let e1 = (-gamma * t).exp();
            let e2 = e1 * e1;
            let em1 = -(-gamma * t).exp_m1();
            e2 + terms
                .iter()
                .map(|&(w, de)| {
                    // 1 + e² − 2cos e = (1 − e)² + 2e(1 − cos), written to avoid cancellation
                    let one_minus_cos = 2.0 * (0.5 * de * t).sin().powi(2);
                    w * (em1 * em1 + 2.0 * e1 * one_minus_cos)
                })
                .sum::<f64>()
        })
        .collect();
    PurityCurve { times: times.to_vec(), values, asymptote }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{FockBasis, annihilators};
    use crate::spectral::{ScanParameter, StabilityRecord};
    use ndarray::array;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn record() -> StabilityRecord {
        StabilityRecord {
            parameter: ScanParameter::Strength,
            values: vec![],
            energies: vec![],
            displacements: vec![],
            max_displacement: 0.0,
            tolerance: 0.0,
        }
    }

    fn resonance(energy: Complex64, vector: Array1<Complex64>, sector: usize) -> ResonanceState {
        ResonanceState { sector, energy, eps_i: -energy.im, vector, stability: record(), scan_index: 0 }
    }

    fn channel(index: usize, energy: f64, vector: Array1<Complex64>) -> ChannelState {
        ChannelState { index, energy, energy_im: 0.0, vector, cap_overlap: 0.0 }
    }

    /// Three modes, two particles; ψ = (|01⟩ + i|02⟩ + 2|12⟩)/√6 in sector-2 order
    /// (pairs (0,1), (0,2), (1,2)); channels |0⟩ and (|1⟩ + |2⟩)/√2.
    fn fixture() -> (FockBasis, ResonanceState, Vec<ChannelState>) {
        let b = FockBasis::new(3, 2).unwrap();
        let s6 = 6f64.sqrt();
        let psi = array![c(1.0 / s6, 0.0), c(0.0, 1.0 / s6), c(2.0 / s6, 0.0)];
        let r = resonance(c(-1.0, -0.01), psi, 2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let ch = vec![channel(0, -2.0, array![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]), channel(1, -1.5, array![c(0.0, 0.0), c(h, 0.0), c(h, 0.0)])];
        (b, r, ch)
    }

    #[test]
    fn total_width_is_twice_the_imaginary_part() {
        assert!((total_width(&resonance(c(1.0, -0.005), array![c(1.0, 0.0)], 1)) - 0.01).abs() < 1e-16);
        assert_eq!(total_width(&resonance(c(1.0, 0.0), array![c(1.0, 0.0)], 1)), 0.0);
    }

    #[test]
    fn amplitudes_by_hand() {
        let (b, r, ch) = fixture();
        let a = channel_amplitudes(&r, &ch, &annihilators(&b, 2).unwrap()).unwrap();
        let s6 = 6f64.sqrt();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // c_0 ψ = (|1⟩ + i|2⟩)/√6;  c_1 ψ = (−|0⟩ + 2|2⟩)/√6;  c_2 ψ = (−i|0⟩ − 2|1⟩)/√6
        let want = array![
            [c(0.0, 0.0), c(-1.0 / s6, 0.0), c(0.0, -1.0 / s6)],
            [c(h / s6, h / s6), c(2.0 * h / s6, 0.0), c(-2.0 * h / s6, 0.0)]
        ];
        assert!((&a - &want).iter().all(|x| x.norm() < 1e-15), "{a}");
    }

    #[test]
    fn zero_cap_gives_zero_partials() {
        let (b, r, ch) = fixture();
        let ann = annihilators(&b, 2).unwrap();
        let rep = partial_width_cap_grid(&r, &ch, &Array1::zeros(3), &ann).unwrap();
        assert!(rep.partials.iter().all(|p| p.gamma_p == 0.0));
        let rep = partial_width_cap_orbital(&r, &ch, Array2::zeros((3, 3)).view(), &ann, 1e-12).unwrap();
        assert!(rep.partials.iter().all(|p| p.gamma_p == 0.0));
        assert!((rep.sum_residual - 0.02).abs() < 1e-15);
    }

    #[test]
    fn diagonal_orbital_matches_grid_formula() {
        let (b, r, ch) = fixture();
        let ann = annihilators(&b, 2).unwrap();
        let cap = array![0.0, 0.3, 1.1];
        let grid = partial_width_cap_grid(&r, &ch, &cap, &ann).unwrap();
        let orb = partial_width_cap_orbital(&r, &ch, Array2::from_diag(&cap.mapv(Complex64::from)).view(), &ann, 1e-12).unwrap();
        for (g, o) in grid.partials.iter().zip(&orb.partials) {
            assert!((g.gamma_p - o.gamma_p).abs() < 1e-12 && g.gamma_p >= 0.0);
        }
        assert!((&grid.kappa - &orb.kappa).iter().all(|x| x.norm() < 1e-12));
        for p in 0..2 {
            assert!((grid.kappa[(p, p)].re - grid.partials[p].gamma_p).abs() < 1e-15);
        }
    }

    #[test]
    fn orbital_validation() {
        let (b, r, ch) = fixture();
        let ann = annihilators(&b, 2).unwrap();
        let skew = array![[c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]];
        assert!(matches!(partial_width_cap_orbital(&r, &ch, skew.view(), &ann, 1e-12), Err(WidthError::NotHermitian(_))));
        let neg = Array2::from_diag(&array![c(1.0, 0.0), c(-0.5, 0.0), c(0.0, 0.0)]);
        assert!(matches!(partial_width_cap_orbital(&r, &ch, neg.view(), &ann, 1e-12), Err(WidthError::NotPositive(_))));
        let r1 = resonance(c(-1.0, -0.01), array![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)], 1);
        assert!(matches!(channel_amplitudes(&r1, &ch, &ann), Err(WidthError::SectorMismatch { .. })));
    }

    #[test]
    fn single_channel_kappa_is_gamma() {
        let (b, r, ch) = fixture();
        let ann = annihilators(&b, 2).unwrap();
        let g = Array2::from_diag(&array![c(0.2, 0.0), c(0.0, 0.0), c(0.7, 0.0)]);
        let k = kappa_matrix(&r, &ch[..1], g.view(), &ann).unwrap();
        assert_eq!(k.dim(), (1, 1));
        let rep = partial_width_ecs(&r, &ch[..1], g.view(), &ann).unwrap();
        assert_eq!(rep.method, WidthMethod::Ecs);
        assert!((k[(0, 0)].re - rep.partials[0].gamma_p).abs() < 1e-15);
    }

    #[test]
    fn population_anchors() {
        let (b, r, ch) = fixture();
        let ann = annihilators(&b, 2).unwrap();
        let mut rep = partial_width_cap_grid(&r, &ch, &array![0.0, 0.3, 1.1], &ann).unwrap();
        let g = rep.gamma_total;
        let t_half = std::f64::consts::LN_2 / g;
        let curves = population_closed_form(&rep, &[0.0, t_half, 1e6]).unwrap();
        assert_eq!(curves.p_res[0], 1.0);
        assert!(curves.channels.iter().all(|c| c[0] == 0.0));
        assert!((curves.p_res[1] - 0.5).abs() < 1e-15);
        for (p, c) in rep.partials.iter().zip(&curves.channels) {
            assert!((c[2] - p.gamma_p / g).abs() < 1e-15);
        }
        // with the sum rule enforced, probability is conserved at every time
        let total: f64 = rep.partials.iter().map(|p| p.gamma_p).sum();
        rep.gamma_total = total;
        let curves = population_closed_form(&rep, &[0.0, 3.0, 40.0]).unwrap();
        for i in 0..3 {
            let sum: f64 = curves.p_res[i] + curves.channels.iter().map(|c| c[i]).sum::<f64>();
            assert!((sum - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn single_channel_purity_returns_to_one() {
        let k = array![[c(0.02, 0.0)]];
        let curve = purity_closed_form(&k, &[-1.0], 0.02, &[0.0, 10.0, 1e5]);
        assert!((curve.values[0] - 1.0).abs() < 1e-15);
        assert!(curve.values[1] < 1.0);
        assert!((curve.asymptote - 1.0).abs() < 1e-15);
        assert!((curve.values[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coefficients_solve_their_equation() {
        // ṗ_rs = −iΔε_rs p_rs + κ_rs e^{−Γt}, checked by central differences
        let k = array![[c(0.3, 0.0), c(0.1, 0.05)], [c(0.1, -0.05), c(0.2, 0.0)]];
        let e = [-2.0, -1.3];
        let g = 0.5;
        let (t, h) = (1.7, 1e-5);
        let d = (coefficient_closed_form(&k, &e, g, t + h) - coefficient_closed_form(&k, &e, g, t - h)) / c(2.0 * h, 0.0);
        let p = coefficient_closed_form(&k, &e, g, t);
        for r in 0..2 {
            for s in 0..2 {
                let rhs = c(0.0, -(e[r] - e[s])) * p[(r, s)] + k[(r, s)] * (-g * t).exp();
                assert!((d[(r, s)] - rhs).norm() < 1e-8);
            }
        }
        assert!(coefficient_closed_form(&k, &e, g, 0.0).iter().all(|x| x.norm() < 1e-16));
    }

    #[test]
    fn purity_is_trace_of_square_of_closed_form_state() {
        let k = array![[c(0.3, 0.0), c(0.1, 0.05)], [c(0.1, -0.05), c(0.2, 0.0)]];
        let e = [-2.0, -1.3];
        let g = 0.5;
        let times = [0.0, 0.4, 2.0, 9.0];
        let curve = purity_closed_form(&k, &e, g, &times);
        for (i, &t) in times.iter().enumerate() {
            let p = coefficient_closed_form(&k, &e, g, t);
            let direct = (-2.0 * g * t).exp() + p.iter().map(|x| x.norm_sqr()).sum::<f64>();
            assert!((curve.values[i] - direct).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use ndarray_linalg::QR;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c_: usize) -> Array2<Complex64> {
            Array2::from_shape_fn((r, c_), |_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        }

        fn adjoint(m: &Array2<Complex64>) -> Array2<Complex64> {
            m.t().mapv(|z| z.conj())
        }

        proptest! {
            #[test]
            fn kappa_is_psd_and_basis_invariant(n in 1usize..5, m in 1usize..6, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_matrix(&mut rng, n, m);
                let b = random_matrix(&mut rng, m, m);
                let g = b.dot(&adjoint(&b));
                let kappa = kappa_from_amplitudes(a.view(), g.view());
                prop_assert!(hermitian_defect(kappa.view()) < 1e-13);
                let lowest = kappa.eigvalsh(UPLO::Lower).unwrap()[0];
                prop_assert!(lowest > -1e-12 * kappa.iter().map(|z| z.norm()).fold(1.0, f64::max));

                // mode rotation: amplitudes pick up V, the coefficient matrix its conjugate action
                let (v, _) = random_matrix(&mut rng, m, m).qr().unwrap();
                let a2 = a.dot(&v);
                let g2t = adjoint(&v).dot(&g.t()).dot(&v);
                let g2 = g2t.t().to_owned();
                let kappa2 = kappa_from_amplitudes(a2.view(), g2.view());
                let scale = kappa.iter().map(|z| z.norm()).fold(1e-300, f64::max);
                prop_assert!((&kappa2 - &kappa).iter().all(|z| z.norm() < 1e-12 * scale));
            }

            #[test]
            fn closed_forms_conserve_probability(weights in prop::collection::vec(0.01f64..1.0, 1..5), gamma in 1e-4f64..1.0, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let total: f64 = weights.iter().sum();
                let partials: Vec<PartialWidth> = weights
                    .iter()
                    .enumerate()
                    .map(|(p, w)| PartialWidth { p, energy: -1.0 - p as f64 - rng.random_range(0.0..0.5), gamma_p: gamma * w / total, imag: 0.0 })
                    .collect();
                let kappa = Array2::from_diag(&Array1::from_iter(partials.iter().map(|p| c(p.gamma_p, 0.0))));
                let energies: Vec<f64> = partials.iter().map(|p| p.energy).collect();
                let report = WidthReport {
                    method: WidthMethod::CapOrbital,
                    resonance_energy: c(0.0, -gamma / 2.0),
                    gamma_total: gamma,
                    partials,
                    sum_residual: 0.0,
                    kappa: kappa.clone(),
                    warnings: vec![],
                };
                let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.4 / gamma).collect();
                let pops = population_closed_form(&report, &times).unwrap();
                for i in 0..times.len() {
                    let sum = pops.p_res[i] + pops.channels.iter().map(|ch| ch[i]).sum::<f64>();
                    prop_assert!((sum - 1.0).abs() < 1e-13);
                    let coeff = coefficient_closed_form(&kappa, &energies, gamma, times[i]);
                    let tr: f64 = coeff.diag().iter().map(|z| z.re).sum();
                    prop_assert!((tr + pops.p_res[i] - 1.0).abs() < 1e-13);
                }
                let purity = purity_closed_form(&kappa, &energies, gamma, &[0.0, 60.0 / gamma]);
                prop_assert!((purity.values[0] - 1.0).abs() < 1e-15);
                prop_assert!((purity.values[1] - purity.asymptote).abs() < 1e-12);
            }
        }
    }
}
