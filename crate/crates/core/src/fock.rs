//! Occupation-number bases split into particle-number sectors, and the fermionic
//! operators acting between them.
//!
//! A basis state is a bit-string with bit `k` set when mode `k` is occupied. Within
//! a sector, states are ordered by the integer value of the bit-string. Mode 0 is the
//! leftmost factor of the creation string, so `c_k` picks up a factor `-1` for every
//! occupied mode below `k`.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2};
use ndarray_linalg::EigValsh;
use num_complex::Complex64;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub type Bits = u128;

pub const MAX_MODES: usize = 128;

/// Largest sector dimension built unless the caller asks for more.
pub const DEFAULT_BUDGET: usize = 6000;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FockError {
    #[error("{0} modes requested, at most {MAX_MODES} are supported")]
    TooManyModes(usize),
    #[error("max_particles {max} exceeds num_modes {modes}")]
    TooManyParticles { max: usize, modes: usize },
    #[error("sector {sector} has dimension {dim}, over the budget of {budget}")]
    BudgetExceeded { sector: usize, dim: u128, budget: usize },
    #[error("mode {mode} out of range for {modes} modes")]
    ModeOutOfRange { mode: usize, modes: usize },
    #[error("sector {sector} is not in the basis (0..={max})")]
    SectorOutOfRange { sector: usize, max: usize },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    DimensionMismatch { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("two-body coefficients break V_pq,rs = V_qp,sr by {0:e}")]
    SymmetryViolation(f64),
    #[error("dissipator matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("dissipator matrix has eigenvalue {0:e} below zero")]
    NotPositive(f64),
    #[error("eigensolver failed: {0}")]
    Linalg(String),
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn lowest_bits(n: usize) -> Bits {
    if n >= 128 { Bits::MAX } else { (1 << n) - 1 }
}

/// `(-1)^(number of occupied modes below k)`.
#[inline]
pub fn sign_below(bits: Bits, k: usize) -> f64 {
    let below = bits & lowest_bits(k);
    if below.count_ones() % 2 == 0 { 1.0 } else { -1.0 }
}

#[inline]
fn annihilate(bits: Bits, k: usize) -> Option<(Bits, f64)> {
    let b = 1 << k;
    (bits & b != 0).then(|| (bits & !b, sign_below(bits, k)))
}

#[inline]
fn create(bits: Bits, k: usize) -> Option<(Bits, f64)> {
    let b = 1 << k;
    (bits & b == 0).then(|| (bits | b, sign_below(bits, k)))
}

fn occupied(bits: Bits) -> impl Iterator<Item = usize> {
    let mut rest = bits;
    std::iter::from_fn(move || {
        if rest == 0 {
            return None;
        }
        let k = rest.trailing_zeros() as usize;
        rest &= rest - 1;
        Some(k)
    })
}

/// Rank of the pair `p < q` inside the two-particle sector.
#[inline]
pub fn pair_index(p: usize, q: usize) -> usize {
    debug_assert!(p < q);
    q * (q - 1) / 2 + p
}

/// Inverse of [`pair_index`].
pub fn pair_modes(index: usize) -> (usize, usize) {
    let mut q = ((1.0 + (1.0 + 8.0 * index as f64).sqrt()) / 2.0) as usize;
    while q * (q - 1) / 2 > index {
        q -= 1;
    }
    while (q + 1) * q / 2 <= index {
        q += 1;
    }
    (index - q * (q - 1) / 2, q)
}

#[derive(Debug, Clone)]
pub struct FockBasis {
    num_modes: usize,
    sectors: Vec<Vec<Bits>>,
    binom: Vec<Vec<usize>>,
}

impl FockBasis {
    pub fn new(num_modes: usize, max_particles: usize) -> Result<Self, FockError> {
        Self::with_budget(num_modes, max_particles, DEFAULT_BUDGET)
    }

    pub fn with_budget(num_modes: usize, max_particles: usize, budget: usize) -> Result<Self, FockError> {
        if num_modes > MAX_MODES {
            return Err(FockError::TooManyModes(num_modes));
        }
        if max_particles > num_modes {
            return Err(FockError::TooManyParticles { max: max_particles, modes: num_modes });
        }
        for n in 0..=max_particles {
            let dim = binomial(num_modes, n);
            if dim > budget as u128 {
                return Err(FockError::BudgetExceeded { sector: n, dim, budget });
            }
        }
        let binom = (0..=num_modes)
            .map(|m| (0..=max_particles).map(|j| binomial(m, j) as usize).collect())
            .collect();
        let sectors = (0..=max_particles).map(|n| enumerate(num_modes, n)).collect();
        Ok(Self { num_modes, sectors, binom })
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn max_particles(&self) -> usize {
        self.sectors.len() - 1
    }

    pub fn sector(&self, n: usize) -> Result<&[Bits], FockError> {
        self.sectors
            .get(n)
            .map(Vec::as_slice)
            .ok_or(FockError::SectorOutOfRange { sector: n, max: self.max_particles() })
    }

    pub fn dim(&self, n: usize) -> usize {
        self.sectors.get(n).map_or(0, Vec::len)
    }

    /// Position of `bits` inside its sector (colexicographic rank).
    pub fn index_of(&self, bits: Bits) -> usize {
        occupied(bits).enumerate().map(|(i, m)| self.binom[m][i + 1]).sum()
    }

    /// Stable identifier for serialized operators.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("fock:{}:{}", self.num_modes, self.max_particles()).as_bytes());
        hex::encode(h.finalize())
    }

    fn check_mode(&self, k: usize) -> Result<(), FockError> {
        if k >= self.num_modes {
            return Err(FockError::ModeOutOfRange { mode: k, modes: self.num_modes });
        }
        Ok(())
    }
}

fn enumerate(m: usize, n: usize) -> Vec<Bits> {
    let mut out = Vec::with_capacity(binomial(m, n) as usize);
    let mut x = lowest_bits(n);
    let limit = if m >= 128 { None } else { Some(1u128 << m) };
    if n == 0 {
        return vec![0];
    }
    loop {
        if limit.is_some_and(|l| x >= l) {
            break;
        }
        out.push(x);
        // Gosper: next integer with the same popcount
        let c = x & x.wrapping_neg();
        let Some(r) = x.checked_add(c) else { break };
        x = (((r ^ x) >> 2) / c) | r;
    }
    out
}

/// A dense operator restricted to one particle-number sector.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorOperator {
    pub sector: usize,
    pub matrix: Array2<Complex64>,
}

#[derive(Serialize)]
struct SerializedOperator<'a> {
    basis_hash: String,
    sector: usize,
    rows: usize,
    cols: usize,
    entries: &'a [(f64, f64)],
}

impl SectorOperator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn to_json(&self, basis: &FockBasis) -> serde_json::Value {
        let entries: Vec<(f64, f64)> = self.matrix.iter().map(|z| (z.re, z.im)).collect();
        serde_json::to_value(SerializedOperator {
            basis_hash: basis.hash(),
            sector: self.sector,
            rows: self.matrix.nrows(),
            cols: self.matrix.ncols(),
            entries: &entries,
        })
        .expect("plain data serializes")
    }
}

/// `c_k` from sector `n` to sector `n-1`.
///
/// Every column holds at most one `±1`, so the map is kept as one optional
/// `(row, sign)` per column; [`SectorMap::to_dense`] gives the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorMap {
    mode: usize,
    sector: usize,
    rows: usize,
    targets: Vec<Option<(usize, f64)>>,
}

impl SectorMap {
    pub fn mode(&self) -> usize {
        self.mode
    }

    /// Particle number of the source sector.
    pub fn sector(&self) -> usize {
        self.sector
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.targets.len())
    }

    pub fn targets(&self) -> &[Option<(usize, f64)>] {
        &self.targets
    }

    pub fn to_dense(&self) -> Array2<Complex64> {
        let mut a = Array2::zeros(self.shape());
        for (col, t) in self.targets.iter().enumerate() {
            if let Some((row, s)) = *t {
                a[(row, col)] = Complex64::new(s, 0.0);
            }
        }
        a
    }

    /// `c_k v`.
    pub fn apply(&self, v: ArrayView1<Complex64>) -> Array1<Complex64> {
        let mut out = Array1::zeros(self.rows);
        for (col, t) in self.targets.iter().enumerate() {
            if let Some((row, s)) = *t {
                out[row] = v[col] * s;
            }
        }
        out
    }

    /// `c_k A`, acting on the row index of `a`.
    pub fn apply_rows(&self, a: ArrayView2<Complex64>) -> Array2<Complex64> {
        let mut out = Array2::zeros((self.rows, a.ncols()));
        for (col, t) in self.targets.iter().enumerate() {
            if let Some((row, s)) = *t {
                out.row_mut(row).scaled_add(Complex64::new(s, 0.0), &a.row(col));
            }
        }
        out
    }

    /// `c_k† w`, from sector `n-1` back to sector `n`.
    pub fn adjoint_apply(&self, w: ArrayView1<Complex64>) -> Array1<Complex64> {
        let mut out = Array1::zeros(self.targets.len());
        for (col, t) in self.targets.iter().enumerate() {
            if let Some((row, s)) = *t {
                out[col] = w[row] * s;
            }
        }
        out
    }
}

pub fn annihilator(basis: &FockBasis, k: usize, n: usize) -> Result<SectorMap, FockError> {
    basis.check_mode(k)?;
    if n == 0 {
        return Err(FockError::SectorOutOfRange { sector: n, max: basis.max_particles() });
    }
    let states = basis.sector(n)?;
    let targets = states
        .iter()
        .map(|&b| annihilate(b, k).map(|(b1, s)| (basis.index_of(b1), s)))
        .collect();
    Ok(SectorMap { mode: k, sector: n, rows: basis.dim(n - 1), targets })
}

/// `c_k` for every mode, from sector `n`.
pub fn annihilators(basis: &FockBasis, n: usize) -> Result<Vec<SectorMap>, FockError> {
    (0..basis.num_modes()).map(|k| annihilator(basis, k, n)).collect()
}

fn check_square(what: &'static str, a: &ArrayView2<Complex64>, m: usize) -> Result<(), FockError> {
    if a.dim() != (m, m) {
        return Err(FockError::DimensionMismatch { what, expected: (m, m), got: a.dim() });
    }
    Ok(())
}

/// `Σ_kl h_kl c_k† c_l` on sector `n`.
pub fn one_body_operator(
    basis: &FockBasis,
    h: ArrayView2<Complex64>,
    n: usize,
) -> Result<SectorOperator, FockError> {
    check_square("one-body matrix", &h, basis.num_modes())?;
    let states = basis.sector(n)?;
    let m = basis.num_modes();
    let mut out = Array2::zeros((states.len(), states.len()));
    for (col, &bits) in states.iter().enumerate() {
        for l in occupied(bits) {
            let (b1, s1) = annihilate(bits, l).expect("occupied");
            for k in 0..m {
                let hkl = h[(k, l)];
                if hkl == ZERO {
                    continue;
                }
                if let Some((b2, s2)) = create(b1, k) {
                    out[(basis.index_of(b2), col)] += hkl * (s1 * s2);
                }
            }
        }
    }
    Ok(SectorOperator { sector: n, matrix: out })
}

/// Coefficients `V_pq,rs` of `½ Σ V_pq,rs c_p† c_q† c_s c_r`.
#[derive(Debug, Clone, PartialEq)]
pub enum TwoBody {
    /// Grid form: `V_pq,rs = δ_pr δ_qs v[p][q]`.
    PairDiagonal(Array2<Complex64>),
    /// Full tensor `V[[p, q, r, s]]`.
    Dense(Array4<Complex64>),
    /// Antisymmetrized `V_pq,rs - V_pq,sr` for `p < q`, `r < s`, rows and columns
    /// ordered by [`pair_index`] (the two-particle sector order).
    Pairs(Array2<Complex64>),
}

impl TwoBody {
    pub fn num_modes(&self) -> usize {
        match self {
            TwoBody::PairDiagonal(v) => v.nrows(),
            TwoBody::Dense(v) => v.dim().0,
            TwoBody::Pairs(v) => pair_modes(v.nrows().saturating_sub(1)).1 + 1,
        }
    }

    /// Largest violation of `V_pq,rs = V_qp,sr`.
    pub fn symmetry_defect(&self) -> f64 {
        match self {
            TwoBody::PairDiagonal(v) => {
                let mut worst: f64 = 0.0;
                for ((i, j), x) in v.indexed_iter() {
                    worst = worst.max((x - v[(j, i)]).norm());
                }
                worst
            }
            TwoBody::Dense(v) => {
                let mut worst: f64 = 0.0;
                for ((p, q, r, s), x) in v.indexed_iter() {
                    worst = worst.max((x - v[(q, p, s, r)]).norm());
                }
                worst
            }
            TwoBody::Pairs(_) => 0.0,
        }
    }

    fn scale(&self) -> f64 {
        let it: Box<dyn Iterator<Item = &Complex64>> = match self {
            TwoBody::PairDiagonal(v) => Box::new(v.iter()),
            TwoBody::Dense(v) => Box::new(v.iter()),
            TwoBody::Pairs(v) => Box::new(v.iter()),
        };
        it.fold(0.0, |a, z| a.max(z.norm()))
    }

    /// `V_pq,rs - V_pq,sr` for `p < q`, `r < s`.
    #[inline]
    pub fn antisymmetrized(&self, p: usize, q: usize, r: usize, s: usize) -> Complex64 {
        match self {
            TwoBody::PairDiagonal(v) => {
                if p == r && q == s {
                    v[(p, q)]
                } else {
                    ZERO
                }
            }
            TwoBody::Dense(v) => v[(p, q, r, s)] - v[(p, q, s, r)],
            TwoBody::Pairs(v) => v[(pair_index(p, q), pair_index(r, s))],
        }
    }
}

/// Relative tolerance on `V_pq,rs = V_qp,sr`.
pub const TOL_SYM: f64 = 1e-12;

/// `½ Σ V_pq,rs c_p† c_q† c_s c_r` on sector `n`.
pub fn two_body_operator(basis: &FockBasis, v: &TwoBody, n: usize) -> Result<SectorOperator, FockError> {
    let m = basis.num_modes();
    if v.num_modes() != m {
        return Err(FockError::DimensionMismatch {
            what: "two-body coefficients",
            expected: (m, m),
            got: (v.num_modes(), v.num_modes()),
        });
    }
    let defect = v.symmetry_defect();
    if defect > TOL_SYM * v.scale().max(1.0) {
        return Err(FockError::SymmetryViolation(defect));
    }
    let states = basis.sector(n)?;
    let dim = states.len();
    let mut out = Array2::zeros((dim, dim));
    if n < 2 {
        return Ok(SectorOperator { sector: n, matrix: out });
    }
    if let TwoBody::PairDiagonal(w) = v {
        for (i, &bits) in states.iter().enumerate() {
            let occ: Vec<usize> = occupied(bits).collect();
            let mut acc = ZERO;
            for (a, &p) in occ.iter().enumerate() {
                for &q in &occ[a + 1..] {
                    acc += w[(p, q)];
                }
            }
            out[(i, i)] = acc;
        }
        return Ok(SectorOperator { sector: n, matrix: out });
    }
    for (col, &bits) in states.iter().enumerate() {
        let occ: Vec<usize> = occupied(bits).collect();
        for (a, &r) in occ.iter().enumerate() {
            for &s in &occ[a + 1..] {
                let (b1, s1) = annihilate(bits, r).expect("occupied");
                let (b2, s2) = annihilate(b1, s).expect("occupied");
                for q in 0..m {
                    let Some((b3, s3)) = create(b2, q) else { continue };
                    for p in 0..q {
                        let Some((b4, s4)) = create(b3, p) else { continue };
                        let x = v.antisymmetrized(p, q, r, s);
                        if x != ZERO {
                            out[(basis.index_of(b4), col)] += x * (s1 * s2 * s3 * s4);
                        }
                    }
                }
            }
        }
    }
    Ok(SectorOperator { sector: n, matrix: out })
}

/// Lindblad dissipator with jump operators `A_k = c_k` and a Hermitian PSD
/// coefficient matrix `γ`, so that `Σ γ_kl c_k† c_l` is the anti-Hermitian part.
#[derive(Debug, Clone, PartialEq)]
pub struct LindbladDissipator {
    gamma: Array2<Complex64>,
}

impl LindbladDissipator {
    pub fn new(gamma: Array2<Complex64>, tol_psd: f64) -> Result<Self, FockError> {
        let n = gamma.nrows();
        check_square("dissipator matrix", &gamma.view(), n)?;
        let mut herm: f64 = 0.0;
        for ((i, j), x) in gamma.indexed_iter() {
            herm = herm.max((x - gamma[(j, i)].conj()).norm());
        }
        let scale = gamma.iter().fold(1.0f64, |a, z| a.max(z.norm()));
        if herm > 1e-12 * scale {
            return Err(FockError::NotHermitian(herm));
        }
        let ev = gamma.eigvalsh(ndarray_linalg::UPLO::Upper).map_err(|e| FockError::Linalg(e.to_string()))?;
        let lowest = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        if lowest < -tol_psd {
            return Err(FockError::NotPositive(lowest));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> &Array2<Complex64> {
        &self.gamma
    }

    /// `Σ_kl γ_kl c_k† c_l` on sector `n`.
    pub fn generator(&self, basis: &FockBasis, n: usize) -> Result<SectorOperator, FockError> {
        one_body_operator(basis, self.gamma.view(), n)
    }
}
