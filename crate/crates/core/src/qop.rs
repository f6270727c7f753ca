//! Operators, density matrices and the superoperators driving diffusive
//! QND measurement.
//!
//! Matrices are dense, column-major `nalgebra` matrices of `Complex<f64>`.
//! Qubit conventions: the excited state `|e>` is the first basis vector and
//! `sigma_z |e> = +|e>`, so `z = tr(rho sigma_z) = 1` on `|e><e|`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

/// Per-entry tolerance for Hermiticity checks.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Tolerance on `|tr(rho) - 1|`.
pub const TRACE_TOL: f64 = 1e-9;
/// Smallest admissible eigenvalue of a density matrix.
pub const POSITIVITY_TOL: f64 = 1e-9;
/// Minimal gap between eigenvalues of a measurement operator.
pub const SPECTRAL_GAP_TOL: f64 = 1e-9;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

fn check_dims(expected: usize, found: &CMatrix) -> Result<()> {
    if found.nrows() != expected || found.ncols() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: found.nrows().max(found.ncols()),
        });
    }
    Ok(())
}

fn check_square(m: &CMatrix) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Largest per-entry deviation `|m_ij - conj(m_ji)|`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub(crate) fn trace(m: &CMatrix) -> C64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

/// Eigenvalues (ascending) and matching column eigenvectors of a Hermitian
/// matrix.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Smallest eigenvalue of a Hermitian matrix, closed form for `n = 2`.
pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    match m.nrows() {
        1 => m[(0, 0)].re,
        2 => {
            let a = m[(0, 0)].re;
            let d = m[(1, 1)].re;
            let half = 0.5 * (a - d);
            0.5 * (a + d) - (half * half + m[(0, 1)].norm_sqr()).sqrt()
        }
        _ => hermitian_eigen(m).0[0],
    }
}

/// Hermitian matrix `L = L^dagger`; measurement operators, actuation
/// Hamiltonians and Pauli matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    entries: CMatrix,
}

impl HermitianOperator {
    pub fn new(entries: CMatrix) -> Result<Self> {
        check_square(&entries)?;
        let deviation = hermiticity_defect(&entries);
        if deviation > HERMITIAN_TOL {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(Self { entries })
    }

    /// Real diagonal operator.
    pub fn diagonal(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty diagonal".into()));
        }
        let n = values.len();
        Ok(Self {
            entries: CMatrix::from_fn(n, n, |i, j| if i == j { C64::new(values[i], 0.0) } else { ZERO }),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: CMatrix::identity(n, n),
        }
    }

    pub fn sigma_x() -> Self {
        Self {
            entries: CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]),
        }
    }

    pub fn sigma_y() -> Self {
        Self {
            entries: CMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO]),
        }
    }

    pub fn sigma_z() -> Self {
        Self {
            entries: CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]),
        }
    }

    /// The qubit measurement operator `sqrt(gamma / 2) sigma_z`.
    pub fn qubit_measurement(gamma: f64) -> Self {
        Self::sigma_z().scaled((gamma / 2.0).sqrt())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self.entries.map(|v| v * factor),
        }
    }

    /// `U A U^dagger` for a unitary `U`; the result is re-Hermitized.
    pub fn conjugated_by(&self, unitary: &CMatrix) -> Result<Self> {
        check_dims(self.dim(), unitary)?;
        let m = unitary * &self.entries * unitary.adjoint();
        Ok(Self {
            entries: (&m + m.adjoint()) * C64::new(0.5, 0.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }
}

/// Positive, unit-trace Hermitian matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    entries: CMatrix,
}

impl DensityMatrix {
    pub fn new(entries: CMatrix) -> Result<Self> {
        check_square(&entries)?;
        let deviation = hermiticity_defect(&entries);
        if deviation > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!(
                "not Hermitian (deviation {deviation:.3e})"
            )));
        }
        let tr = trace(&entries).re;
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let lowest = min_eigenvalue(&entries);
        if lowest < -POSITIVITY_TOL {
            return Err(Error::InvalidState(format!("negative eigenvalue {lowest:.3e}")));
        }
        Ok(Self { entries })
    }

    /// Callers guarantee the density-matrix invariants.
    pub(crate) fn from_matrix_unchecked(entries: CMatrix) -> Self {
        Self { entries }
    }

    /// `|psi><psi|` for a (not necessarily normalized) ket.
    pub fn pure(ket: &DVector<C64>) -> Result<Self> {
        let norm = ket.norm();
        if ket.is_empty() || !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument("ket must be non-zero".into()));
        }
        let psi = ket / C64::new(norm, 0.0);
        Ok(Self {
            entries: &psi * psi.adjoint(),
        })
    }

    /// `|k><k|` in the computational basis of dimension `n`.
    pub fn basis(n: usize, k: usize) -> Result<Self> {
        if k >= n {
            return Err(Error::InvalidArgument(format!(
                "basis index {k} out of range for dimension {n}"
            )));
        }
        let mut entries = CMatrix::zeros(n, n);
        entries[(k, k)] = ONE;
        Ok(Self { entries })
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self {
            entries: CMatrix::identity(n, n) / C64::new(n as f64, 0.0),
        }
    }

    pub fn excited() -> Self {
        Self::basis(2, 0).expect("valid basis index")
    }

    pub fn ground() -> Self {
        Self::basis(2, 1).expect("valid basis index")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_matrix(self) -> CMatrix {
        self.entries
    }

    pub fn purity(&self) -> f64 {
        self.entries.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Bloch coordinates of a qubit together with `xi = sqrt(1 - z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub xi: f64,
}

impl BlochVector {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm_sq = x * x + y * y + z * z;
        if !norm_sq.is_finite() || norm_sq > 1.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "Bloch vector ({x}, {y}, {z}) lies outside the unit ball"
            )));
        }
        Ok(Self::from_coordinates(x, y, z))
    }

    pub(crate) fn from_coordinates(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            xi: (1.0 - z).max(0.0).sqrt(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Eigen-decomposition of a non-degenerate measurement operator.
#[derive(Debug, Clone, PartialEq)]
pub struct QndSpectrum {
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<DVector<C64>>,
    projectors: Vec<DensityMatrix>,
}

impl QndSpectrum {
    /// Strictly increasing eigenvalues.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Unit eigenvectors, largest-magnitude component real and positive.
    pub fn eigenvectors(&self) -> &[DVector<C64>] {
        &self.eigenvectors
    }

    /// Rank-one projectors onto the eigenvectors; the QND steady states.
    pub fn projectors(&self) -> &[DensityMatrix] {
        &self.projectors
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `min_{l != l'} (lambda_l - lambda_l')^2`.
    pub fn min_gap_squared(&self) -> f64 {
        self.eigenvalues
            .windows(2)
            .map(|w| (w[1] - w[0]).powi(2))
            .fold(f64::INFINITY, f64::min)
    }

    /// `tr(rho rho_l)` for every projector, i.e. the populations in the
    /// eigenbasis.
    pub fn populations(&self, rho: &DensityMatrix) -> Result<Vec<f64>> {
        check_dims(self.dim(), rho.matrix())?;
        Ok(populations_unchecked(&self.eigenvectors, rho.matrix()))
    }
}

pub(crate) fn populations_unchecked(vectors: &[DVector<C64>], rho: &CMatrix) -> Vec<f64> {
    vectors
        .iter()
        .map(|v| (v.adjoint() * rho * v)[(0, 0)].re.clamp(0.0, 1.0))
        .collect()
}

/// Eigenvalues and projectors of `l`; rejects degenerate spectra.
pub fn qnd_spectrum(l: &HermitianOperator) -> Result<QndSpectrum> {
    let (values, vectors) = hermitian_eigen(l.matrix());
    let gap = values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if gap < SPECTRAL_GAP_TOL {
        return Err(Error::DegenerateSpectrum {
            gap,
            tolerance: SPECTRAL_GAP_TOL,
        });
    }
    let n = values.len();
    let mut eigenvectors = Vec::with_capacity(n);
    let mut projectors = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = vectors.column(j).into_owned();
        let pivot = v
            .iter()
            .copied()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("non-empty eigenvector");
        v *= pivot.conj() / pivot.norm();
        v /= C64::new(v.norm(), 0.0);
        projectors.push(DensityMatrix::from_matrix_unchecked(&v * v.adjoint()));
        eigenvectors.push(v);
    }
    Ok(QndSpectrum {
        eigenvalues: values,
        eigenvectors,
        projectors,
    })
}

pub(crate) fn dissipator_unchecked(l: &CMatrix, rho: &CMatrix) -> CMatrix {
    let l_dag = l.adjoint();
    let ldl = &l_dag * l;
    let anti = &ldl * rho + rho * &ldl;
    l * rho * &l_dag - anti * C64::new(0.5, 0.0)
}

pub(crate) fn backaction_unchecked(l: &CMatrix, rho: &CMatrix) -> CMatrix {
    let l_rho = l * rho;
    let sym = &l_rho + l_rho.adjoint();
    let tr = trace(&sym);
    sym - rho * tr
}

/// Lindblad dissipator `D(L, rho) = L rho L^dag - (L^dag L rho + rho L^dag L) / 2`.
/// `l` need not be Hermitian.
pub fn lindblad_d(l: &CMatrix, rho: &DensityMatrix) -> Result<CMatrix> {
    check_dims(rho.dim(), l)?;
    Ok(dissipator_unchecked(l, rho.matrix()))
}

/// Measurement back-action `M(L, rho) = L rho + rho L^dag - tr((L + L^dag) rho) rho`.
pub fn measurement_m(l: &CMatrix, rho: &DensityMatrix) -> Result<CMatrix> {
    check_dims(rho.dim(), l)?;
    Ok(backaction_unchecked(l, rho.matrix()))
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    check_square(a)?;
    check_dims(a.nrows(), b)?;
    Ok(a * b - b * a)
}

/// `tr(A rho)` for Hermitian `A`.
pub fn expectation(a: &HermitianOperator, rho: &DensityMatrix) -> Result<f64> {
    check_dims(rho.dim(), a.matrix())?;
    Ok(trace_of_product(a.matrix(), rho.matrix()).re)
}

/// Trace fidelity `tr(rho rho_bar)`.
pub fn fidelity(rho: &DensityMatrix, rho_bar: &DensityMatrix) -> Result<f64> {
    check_dims(rho.dim(), rho_bar.matrix())?;
    Ok(trace_of_product(rho.matrix(), rho_bar.matrix()).re.clamp(0.0, 1.0))
}

pub(crate) fn trace_of_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Trace distance `||a - b||_1 / 2`.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    check_dims(a.dim(), b.matrix())?;
    let diff = a.matrix() - b.matrix();
    let diff = (&diff + diff.adjoint()) * C64::new(0.5, 0.0);
    if diff.nrows() == 2 {
        // Traceless up to rounding: eigenvalues are +-|r|.
        let half = 0.5 * (diff[(0, 0)].re - diff[(1, 1)].re);
        let mean = 0.5 * (diff[(0, 0)].re + diff[(1, 1)].re);
        let radius = (half * half + diff[(0, 1)].norm_sqr()).sqrt();
        return Ok(0.5 * ((mean + radius).abs() + (mean - radius).abs()));
    }
    Ok(0.5 * hermitian_eigen(&diff).0.iter().map(|v| v.abs()).sum::<f64>())
}

pub fn to_bloch(rho: &DensityMatrix) -> Result<BlochVector> {
    if rho.dim() != 2 {
        return Err(Error::NotQubit(rho.dim()));
    }
    Ok(bloch_unchecked(rho.matrix()))
}

pub(crate) fn bloch_unchecked(m: &CMatrix) -> BlochVector {
    let off = m[(0, 1)];
    BlochVector::from_coordinates(2.0 * off.re, -2.0 * off.im, m[(0, 0)].re - m[(1, 1)].re)
}

pub fn from_bloch(b: &BlochVector) -> Result<DensityMatrix> {
    let checked = BlochVector::new(b.x, b.y, b.z)?;
    let (x, y, z) = (checked.x, checked.y, checked.z);
    Ok(DensityMatrix::from_matrix_unchecked(CMatrix::from_row_slice(
        2,
        2,
        &[
            C64::new(0.5 * (1.0 + z), 0.0),
            C64::new(0.5 * x, -0.5 * y),
            C64::new(0.5 * x, 0.5 * y),
            C64::new(0.5 * (1.0 - z), 0.0),
        ],
    )))
}

/// `|g><e|`, the qubit lowering operator.
pub fn lowering() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ONE, ZERO])
}
