//! One-dimensional few-fermion grid models, their absorbers, and the mode-space
//! matrices (one-body `h`, two-body `V`, and the anti-Hermitian parts) that the
//! Fock-space assembly consumes.
//!
//! Units: ħ = m = 1.

use ndarray::{Array1, Array2, ArrayView2, Axis, s};
use ndarray_linalg::{Eig, QR};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fock::{FockBasis, FockError, SectorOperator, TwoBody, one_body_operator, pair_index, two_body_operator};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("finite-difference order {0} is not supported (use 2 or 4)")]
    UnsupportedOrder(u8),
    #[error("grid spacing is not uniform (deviation {0:e})")]
    NonUniform(f64),
    #[error("grid needs at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("CAP onset {onset} outside the grid [{lo}, {hi})")]
    OnsetOutsideGrid { onset: f64, lo: f64, hi: f64 },
    #[error("CAP strength {0} is negative")]
    NegativeStrength(f64),
    #[error("CAP exponent {0} is below 2")]
    ExponentTooSmall(u32),
    #[error("scaling radius {r0}: {reason}")]
    ScalingRadius { r0: f64, reason: &'static str },
    #[error("scaling angle {0} outside (0, π/4)")]
    AngleOutOfRange(f64),
    #[error("orbital projection needs a grid-representation mode space")]
    NotGrid,
    #[error("{requested} orbitals requested from {modes} modes")]
    TooManyOrbitals { requested: usize, modes: usize },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Fock(#[from] FockError),
}

/// Finite-difference order of the Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FdOrder {
    Second,
    Fourth,
}

impl TryFrom<u8> for FdOrder {
    type Error = ModelError;

    fn try_from(v: u8) -> Result<Self, ModelError> {
        match v {
            2 => Ok(FdOrder::Second),
            4 => Ok(FdOrder::Fourth),
            other => Err(ModelError::UnsupportedOrder(other)),
        }
    }
}

impl From<FdOrder> for u8 {
    fn from(o: FdOrder) -> u8 {
        match o {
            FdOrder::Second => 2,
            FdOrder::Fourth => 4,
        }
    }
}

/// Gaussian well `V1(x) = -V0 exp(-(x/a)^2)` and Gaussian pair interaction
/// `V2(x, x') = λ exp(-((x - x')/w)^2)`. Both continue analytically to complex
/// coordinates, which exterior scaling needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Potentials {
    pub well_depth: f64,
    pub well_width: f64,
    pub coupling: f64,
    pub coupling_width: f64,
}

impl Potentials {
    pub fn one_body(&self, z: Complex64) -> Complex64 {
        let u = z / self.well_width;
        -self.well_depth * (-u * u).exp()
    }

    pub fn pair(&self, z1: Complex64, z2: Complex64) -> Complex64 {
        let u = (z1 - z2) / self.coupling_width;
        self.coupling * (-u * u).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    points: Array1<f64>,
    spacing: f64,
    fd_order: FdOrder,
    potentials: Potentials,
    v1: Array1<f64>,
    v2: Array2<f64>,
}

impl GridModel {
    /// Points `x_i = i·Δx`, `i = 1..=M` with `M = round(length/Δx)`; hard walls sit
    /// at `x = 0` and `x = (M+1)·Δx`.
    pub fn half_line(length: f64, spacing: f64, fd_order: FdOrder, potentials: Potentials) -> Result<Self, ModelError> {
        let m = (length / spacing).round() as usize;
        let points = Array1::from_iter((1..=m).map(|i| i as f64 * spacing));
        Self::from_points(points, fd_order, potentials)
    }

    pub fn from_points(points: Array1<f64>, fd_order: FdOrder, potentials: Potentials) -> Result<Self, ModelError> {
        let m = points.len();
        if m < 3 {
            return Err(ModelError::TooFewPoints { need: 3, got: m });
        }
        let spacing = (points[m - 1] - points[0]) / (m - 1) as f64;
        let dev = points
            .windows(2)
            .into_iter()
            .map(|w| (w[1] - w[0] - spacing).abs())
            .fold(0.0, f64::max);
        if dev > 1e-12 * spacing {
            return Err(ModelError::NonUniform(dev));
        }
        let v1 = points.mapv(|x| potentials.one_body(x.into()).re);
        let v2 = Array2::from_shape_fn((m, m), |(i, j)| potentials.pair(points[i].into(), points[j].into()).re);
        Ok(Self { points, spacing, fd_order, potentials, v1, v2 })
    }

    pub fn points(&self) -> &Array1<f64> {
        &self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn fd_order(&self) -> FdOrder {
        self.fd_order
    }

    pub fn potentials(&self) -> &Potentials {
        &self.potentials
    }

    pub fn v1(&self) -> &Array1<f64> {
        &self.v1
    }

    pub fn v2(&self) -> &Array2<f64> {
        &self.v2
    }

    /// Unscaled one-body Hamiltonian `T + V1`.
    pub fn hamiltonian(&self) -> Array2<f64> {
        let mut h = kinetic_matrix(self);
        h.diag_mut().zip_mut_with(&self.v1, |d, v| *d += v);
        h
    }
}

/// Absorber attached to the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AbsorberSpec {
    /// `Γ(x) = η ((x - x_cap)/(x_max - x_cap))^p` beyond the onset.
    Cap { onset: f64, strength: f64, exponent: u32 },
    /// `R(x) = R0 + e^{iθ}(x - R0)` beyond `R0`.
    Ecs { r0: f64, theta: f64 },
}

const FD4: [f64; 5] = [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0];

/// `-½ d²/dx²` with hard walls, as a symmetric matrix.
///
/// The fourth-order stencil reaches one node past each wall; that ghost value is the
/// odd mirror image, which keeps the matrix symmetric.
pub fn kinetic_matrix(model: &GridModel) -> Array2<f64> {
    let m = model.num_points();
    let h2 = model.spacing * model.spacing;
    let mut t = Array2::zeros((m, m));
    match model.fd_order {
        FdOrder::Second => {
            for i in 0..m {
                t[(i, i)] = 1.0 / h2;
                if i + 1 < m {
                    t[(i, i + 1)] = -0.5 / h2;
                    t[(i + 1, i)] = -0.5 / h2;
                }
            }
        }
        FdOrder::Fourth => {
            for i in 0..m as isize {
                for (o, w) in (-2..=2).zip(FD4) {
                    let j = i + o;
                    let c = -0.5 * w / h2;
                    if (0..m as isize).contains(&j) {
                        t[(i as usize, j as usize)] += c;
                    } else if j == -2 {
                        t[(i as usize, 0)] -= c;
                    } else if j == m as isize + 1 {
                        t[(i as usize, m - 1)] -= c;
                    }
                }
            }
        }
    }
    t
}

pub fn cap_diagonal(model: &GridModel, onset: f64, strength: f64, exponent: u32) -> Result<Array1<f64>, ModelError> {
    let x = &model.points;
    let (lo, hi) = (x[0], x[x.len() - 1]);
    if !(onset >= lo && onset < hi) {
        return Err(ModelError::OnsetOutsideGrid { onset, lo, hi });
    }
    if strength < 0.0 {
        return Err(ModelError::NegativeStrength(strength));
    }
    if exponent < 2 {
        return Err(ModelError::ExponentTooSmall(exponent));
    }
    Ok(x.mapv(|xi| {
        let r = xi.abs();
        if r > onset { strength * ((r - onset) / (hi - onset)).powi(exponent as i32) } else { 0.0 }
    }))
}

/// Which basis the mode-space matrices are written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Grid,
    Orbital,
}

/// `H^ah = Σ h^I_kl c_k† c_l + ½ Σ V^I_pq,rs c_p† c_q† c_s c_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AntiHermitianParts {
    pub h_i: Array2<Complex64>,
    pub v_i: TwoBody,
    pub representation: Representation,
}

/// Complex coordinate on the scaled contour.
pub fn contour(x: f64, r0: f64, theta: f64) -> Complex64 {
    if x > r0 { r0 + Complex64::from_polar(1.0, theta) * (x - r0) } else { x.into() }
}

/// Weights of the `deriv`-th derivative at `z0` from values at `nodes`, exact for
/// polynomials of degree `nodes.len() - 1` (Fornberg's recursion, complex nodes).
pub fn fornberg_weights(z0: Complex64, nodes: &[Complex64], deriv: usize) -> Vec<Complex64> {
    let n = nodes.len();
    let mut c = Array2::<Complex64>::zeros((n, deriv + 1));
    let mut c1 = Complex64::new(1.0, 0.0);
    let mut c4 = nodes[0] - z0;
    c[(0, 0)] = 1.0.into();
    for i in 1..n {
        let mn = i.min(deriv);
        let mut c2 = Complex64::new(1.0, 0.0);
        let c5 = c4;
        c4 = nodes[i] - z0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[(i, k)] = c1 * (c[(i - 1, k - 1)] * k as f64 - c5 * c[(i - 1, k)]) / c2;
                }
                c[(i, 0)] = -c1 * c5 * c[(i - 1, 0)] / c2;
            }
            for k in (1..=mn).rev() {
                c[(j, k)] = (c4 * c[(j, k)] - c[(j, k - 1)] * k as f64) / c3;
            }
            c[(j, 0)] = c4 * c[(j, 0)] / c3;
        }
        c1 = c2;
    }
    c.column(deriv).to_vec()
}

/// Exterior-scaled kinetic matrix.
///
/// Second order: piecewise-linear elements with lumped mass on the complex contour,
/// symmetrized by the square-root mass, so the matrix is complex symmetric and its
/// imaginary part real symmetric. Fourth order: five-point weights on the complex
/// nodes themselves, which handles the kink without special cases; the matrix is
/// no longer symmetric, so `h^I` comes out complex Hermitian. Either way only rows
/// within two nodes of `R0` differ from the plain rotated stencil.
fn ecs_kinetic(model: &GridModel, r0: f64, theta: f64) -> Array2<Complex64> {
    let m = model.num_points();
    let h = model.spacing;
    let node = |j: isize| contour(j as f64 * h, r0, theta);
    let mut t = Array2::zeros((m, m));
    match model.fd_order {
        FdOrder::Second => {
            let bond = |j: isize| node(j + 1) - node(j);
            let mass: Vec<Complex64> = (1..=m as isize).map(|j| (bond(j - 1) + bond(j)) * 0.5).collect();
            for i in 0..m {
                let j = i as isize + 1;
                t[(i, i)] = (0.5 / bond(j - 1) + 0.5 / bond(j)) / mass[i];
                if i + 1 < m {
                    let off = -0.5 / bond(j) / (mass[i] * mass[i + 1]).sqrt();
                    t[(i, i + 1)] = off;
                    t[(i + 1, i)] = off;
                }
            }
        }
        FdOrder::Fourth => {
            let mm = m as isize;
            for i in 1..=mm {
                let idx: Vec<isize> = (i - 2..=i + 2).collect();
                let z: Vec<Complex64> = idx.iter().map(|&j| node(j)).collect();
                let w = fornberg_weights(node(i), &z, 2);
                for (&j, wj) in idx.iter().zip(w) {
                    let c = -0.5 * wj;
                    let row = (i - 1) as usize;
                    if (1..=mm).contains(&j) {
                        t[(row, (j - 1) as usize)] += c;
                    } else if j == -1 {
                        t[(row, 0)] -= c;
                    } else if j == mm + 2 {
                        t[(row, m - 1)] -= c;
                    }
                }
            }
        }
    }
    t
}

/// Scaled one-body matrix `h_full = h^h - i h^I` and the anti-Hermitian parts.
///
/// The pair interaction is continued to `V2(R(x), R(x'))` only when both points lie
/// beyond `R0`; elsewhere it stays real.
pub fn ecs_parts(model: &GridModel, r0: f64, theta: f64) -> Result<(Array2<Complex64>, AntiHermitianParts), ModelError> {
    let x = &model.points;
    let m = x.len();
    if !(theta >= 0.0 && theta < std::f64::consts::FRAC_PI_4) {
        return Err(ModelError::AngleOutOfRange(theta));
    }
    let inside = x.iter().filter(|&&xi| xi <= r0).count();
    if inside < 10 {
        return Err(ModelError::ScalingRadius { r0, reason: "fewer than 10 grid points inside" });
    }
    if m - inside < 10 {
        return Err(ModelError::ScalingRadius { r0, reason: "fewer than 10 grid points beyond" });
    }
    let z = x.mapv(|xi| contour(xi, r0, theta));
    let mut h = ecs_kinetic(model, r0, theta);
    h.diag_mut().zip_mut_with(&z, |d, &zi| *d += model.potentials.one_body(zi));
    let h_i = (&h - &h.t().mapv(|c| c.conj())).mapv(|c| c * I * 0.5);
    let v_i = Array2::from_shape_fn((m, m), |(i, j)| {
        if x[i] > r0 && x[j] > r0 { Complex64::new(-model.potentials.pair(z[i], z[j]).im, 0.0) } else { ZERO }
    });
    Ok((h, AntiHermitianParts { h_i, v_i: TwoBody::PairDiagonal(v_i), representation: Representation::Grid }))
}

/// Everything the Fock layer needs: `h` (full, non-Hermitian), `h^I`, `V`, `V^I`.
#[derive(Debug, Clone)]
pub struct ModeSpace {
    pub h: Array2<Complex64>,
    pub h_ah: Array2<Complex64>,
    pub v: TwoBody,
    pub v_ah: TwoBody,
    pub representation: Representation,
    /// Orbital coefficients on the grid (columns), for orbital spaces.
    pub orbitals: Option<Array2<Complex64>>,
}

impl ModeSpace {
    pub fn grid(model: &GridModel, absorber: &AbsorberSpec) -> Result<Self, ModelError> {
        let m = model.num_points();
        let v2 = model.v2.mapv(Complex64::from);
        match *absorber {
            AbsorberSpec::Cap { onset, strength, exponent } => {
                let g = cap_diagonal(model, onset, strength, exponent)?;
                let h_ah = Array2::from_diag(&g.mapv(Complex64::from));
                let h = model.hamiltonian().mapv(Complex64::from) - h_ah.mapv(|c| c * I);
                Ok(Self {
                    h,
                    h_ah,
                    v: TwoBody::PairDiagonal(v2),
                    v_ah: TwoBody::PairDiagonal(Array2::zeros((m, m))),
                    representation: Representation::Grid,
                    orbitals: None,
                })
            }
            AbsorberSpec::Ecs { r0, theta } => {
                let (h, parts) = ecs_parts(model, r0, theta)?;
                let x = model.points();
                let v = Array2::from_shape_fn((m, m), |(i, j)| {
                    if x[i] > r0 && x[j] > r0 {
                        model.potentials.pair(contour(x[i], r0, theta), contour(x[j], r0, theta))
                    } else {
                        v2[(i, j)]
                    }
                });
                Ok(Self {
                    h,
                    h_ah: parts.h_i,
                    v: TwoBody::PairDiagonal(v),
                    v_ah: parts.v_i,
                    representation: Representation::Grid,
                    orbitals: None,
                })
            }
        }
    }

    pub fn num_modes(&self) -> usize {
        self.h.nrows()
    }

    pub fn parts(&self) -> AntiHermitianParts {
        AntiHermitianParts { h_i: self.h_ah.clone(), v_i: self.v_ah.clone(), representation: self.representation }
    }

    /// The `count` eigenvectors of the one-body `h` with the lowest real parts,
    /// orthonormalized in that order.
    pub fn lowest_orbitals(&self, count: usize) -> Result<Array2<Complex64>, ModelError> {
        let m = self.num_modes();
        if count > m {
            return Err(ModelError::TooManyOrbitals { requested: count, modes: m });
        }
        let (vals, vecs) = self.h.eig().map_err(|e| ModelError::Linalg(e.to_string()))?;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| vals[a].re.total_cmp(&vals[b].re).then(vals[a].im.total_cmp(&vals[b].im)));
        let chosen = vecs.select(Axis(1), &order[..count]);
        let (q, _) = chosen.qr().map_err(|e| ModelError::Linalg(e.to_string()))?;
        Ok(q)
    }

    /// The same operators restricted to the span of orthonormal grid vectors `q`
    /// (columns): `h' = q† h q`, `V'_pq,rs = Σ_ij q*_ip q*_jq v_ij q_ir q_js`.
    pub fn project(&self, q: &Array2<Complex64>) -> Result<Self, ModelError> {
        if self.representation != Representation::Grid {
            return Err(ModelError::NotGrid);
        }
        let (TwoBody::PairDiagonal(v), TwoBody::PairDiagonal(v_ah)) = (&self.v, &self.v_ah) else {
            return Err(ModelError::NotGrid);
        };
        if q.nrows() != self.num_modes() {
            return Err(FockError::DimensionMismatch {
                what: "orbital coefficients",
                expected: (self.num_modes(), q.ncols()),
                got: q.dim(),
            }
            .into());
        }
        let qh = q.t().mapv(|c| c.conj());
        let k = q.ncols();
        let pairs = k * (k - 1) / 2;
        let v_ah = if v_ah.iter().all(|c| *c == ZERO) {
            Array2::zeros((pairs, pairs))
        } else {
            project_pair_diagonal(v_ah.view(), q.view())
        };
        Ok(Self {
            h: qh.dot(&self.h).dot(q),
            h_ah: qh.dot(&self.h_ah).dot(q),
            v: TwoBody::Pairs(project_pair_diagonal(v.view(), q.view())),
            v_ah: TwoBody::Pairs(v_ah),
            representation: Representation::Orbital,
            orbitals: Some(q.clone()),
        })
    }
}

/// Antisymmetrized pair matrix `V'_pq,rs - V'_pq,sr` (`p < q`, `r < s`) of a
/// pair-diagonal grid interaction in the orbitals `q`.
pub fn project_pair_diagonal(v: ArrayView2<Complex64>, q: ArrayView2<Complex64>) -> Array2<Complex64> {
    let (m, k) = q.dim();
    // d[i, p*k + r] = conj(q_ip) q_ir: the orbital pair density at grid point i
    let mut d = Array2::<Complex64>::zeros((m, k * k));
    for i in 0..m {
        for p in 0..k {
            let a = q[(i, p)].conj();
            for r in 0..k {
                d[(i, p * k + r)] = a * q[(i, r)];
            }
        }
    }
    // zt[p*k + r, j] = Σ_i d[i, pr] v_ij
    let zt = d.t().dot(&v);
    let npairs = k * (k - 1) / 2;
    let mut out = Array2::zeros((npairs, npairs));
    for p in 0..k {
        // w[r, q*k + s] = V_pq,rs
        let w = zt.slice(s![p * k..(p + 1) * k, ..]).dot(&d);
        for qq in p + 1..k {
            let row = pair_index(p, qq);
            for sidx in 1..k {
                for r in 0..sidx {
                    out[(row, pair_index(r, sidx))] = w[(r, qq * k + sidx)] - w[(sidx, qq * k + r)];
                }
            }
        }
    }
    out
}

/// `H = H^h - i H^ah` and `H^ah` on sector `n`.
pub fn assemble_hamiltonian(
    basis: &FockBasis,
    space: &ModeSpace,
    n: usize,
) -> Result<(SectorOperator, SectorOperator), ModelError> {
    let mut h = one_body_operator(basis, space.h.view(), n)?;
    h.matrix += &two_body_operator(basis, &space.v, n)?.matrix;
    let mut hah = one_body_operator(basis, space.h_ah.view(), n)?;
    hah.matrix += &two_body_operator(basis, &space.v_ah, n)?.matrix;
    Ok((h, hah))
}
