//! Composite Hilbert space of N two-level atoms and one truncated cavity mode.
//!
//! Basis ordering is atom-major: `atom 1 ⊗ atom 2 ⊗ … ⊗ atom N ⊗ field`.
//! A basis index is `atom_bits * (n_max + 1) + n`, where atom 1 is the most
//! significant bit of `atom_bits` and bit value 1 means excited.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CavityError, Result};

pub type C64 = Complex64;

/// Default upper bound on the total Hilbert-space dimension.
pub const DEFAULT_DIM_CAP: usize = 4096;

/// Default photon-number cutoff.
pub const DEFAULT_FOCK_CUTOFF: usize = 5;

/// Population in the highest Fock level above which a larger cutoff is recommended.
pub const FOCK_TAIL_WARNING: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct HilbertLayout {
    n_atoms: usize,
    fock_cutoff: usize,
    total_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawLayout {
    n_atoms: usize,
    fock_cutoff: usize,
    total_dim: usize,
}

impl TryFrom<RawLayout> for HilbertLayout {
    type Error = CavityError;

    fn try_from(raw: RawLayout) -> Result<Self> {
        let layout = HilbertLayout::new(raw.n_atoms, raw.fock_cutoff)?;
        if layout.total_dim != raw.total_dim {
            return Err(CavityError::InvalidLayout(format!(
                "header total_dim {} does not match 2^{} * {}",
                raw.total_dim,
                raw.n_atoms,
                raw.fock_cutoff + 1
            )));
        }
        Ok(layout)
    }
}

impl From<HilbertLayout> for RawLayout {
    fn from(l: HilbertLayout) -> Self {
        RawLayout {
            n_atoms: l.n_atoms,
            fock_cutoff: l.fock_cutoff,
            total_dim: l.total_dim,
        }
    }
}

impl HilbertLayout {
    pub fn new(n_atoms: usize, fock_cutoff: usize) -> Result<Self> {
        Self::with_cap(n_atoms, fock_cutoff, DEFAULT_DIM_CAP)
    }

    pub fn with_cap(n_atoms: usize, fock_cutoff: usize, cap: usize) -> Result<Self> {
        if n_atoms == 0 {
            return Err(CavityError::InvalidLayout("n_atoms must be at least 1".into()));
        }
        if fock_cutoff == 0 {
            return Err(CavityError::InvalidLayout("fock_cutoff must be at least 1".into()));
        }
        let atom_dim = 1usize
            .checked_shl(n_atoms as u32)
            .filter(|_| n_atoms < usize::BITS as usize)
            .ok_or(CavityError::DimensionCap { dim: usize::MAX, cap })?;
        let total_dim = atom_dim
            .checked_mul(fock_cutoff + 1)
            .ok_or(CavityError::DimensionCap { dim: usize::MAX, cap })?;
        if total_dim > cap {
            return Err(CavityError::DimensionCap { dim: total_dim, cap });
        }
        Ok(Self { n_atoms, fock_cutoff, total_dim })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn fock_cutoff(&self) -> usize {
        self.fock_cutoff
    }

    pub fn field_dim(&self) -> usize {
        self.fock_cutoff + 1
    }

    pub fn atom_dim(&self) -> usize {
        1 << self.n_atoms
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Basis index of the product state with the given atomic excitations and photon number.
    pub fn index(&self, excited: &[bool], photons: usize) -> Result<usize> {
        if excited.len() != self.n_atoms {
            return Err(CavityError::LayoutMismatch(format!(
                "expected {} atom labels, got {}",
                self.n_atoms,
                excited.len()
            )));
        }
        if photons > self.fock_cutoff {
            return Err(CavityError::IndexOutOfRange { index: photons, len: self.field_dim() });
        }
        let bits = excited.iter().fold(0usize, |acc, &e| (acc << 1) | e as usize);
        Ok(bits * self.field_dim() + photons)
    }

    pub fn photons(&self, index: usize) -> usize {
        index % self.field_dim()
    }

    pub fn is_excited(&self, index: usize, atom: usize) -> bool {
        let bits = index / self.field_dim();
        (bits >> (self.n_atoms - 1 - atom)) & 1 == 1
    }

    /// Number of excited atoms.
    pub fn excited_atoms(&self, index: usize) -> usize {
        (index / self.field_dim()).count_ones() as usize
    }

    /// Total excitation number: photons plus excited atoms.
    pub fn excitations(&self, index: usize) -> usize {
        let bits = index / self.field_dim();
        self.photons(index) + bits.count_ones() as usize
    }

    fn check_atom(&self, atom: usize) -> Result<()> {
        if atom >= self.n_atoms {
            return Err(CavityError::IndexOutOfRange { index: atom, len: self.n_atoms });
        }
        Ok(())
    }
}

pub fn build_layout(n_atoms: usize, fock_cutoff: usize) -> Result<HilbertLayout> {
    HilbertLayout::new(n_atoms, fock_cutoff)
}

/// Row-compressed sparse operator. Used to assemble superoperators and
/// observables without forming dense products.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    rows: Vec<Vec<(usize, C64)>>,
}

impl SparseOperator {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, rows: vec![Vec::new(); dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let rows = (0..dim).map(|k| vec![(k, C64::new(1.0, 0.0))]).collect();
        Self { dim, rows }
    }

    fn from_map(dim: usize, entries: BTreeMap<(usize, usize), C64>) -> Self {
        let mut rows = vec![Vec::new(); dim];
        for ((r, c), v) in entries {
            if v != C64::new(0.0, 0.0) {
                rows[r].push((c, v));
            }
        }
        Self { dim, rows }
    }

    /// Embedded lowering operator `|g⟩⟨e|` of one atom.
    pub fn atom_lowering(layout: &HilbertLayout, atom: usize) -> Result<Self> {
        layout.check_atom(atom)?;
        let shift = layout.field_dim() << (layout.n_atoms - 1 - atom);
        let mut op = Self::zeros(layout.total_dim);
        for col in 0..layout.total_dim {
            if layout.is_excited(col, atom) {
                op.rows[col - shift].push((col, C64::new(1.0, 0.0)));
            }
        }
        Ok(op)
    }

    /// Truncated photon annihilation operator.
    pub fn field_annihilation(layout: &HilbertLayout) -> Self {
        let mut op = Self::zeros(layout.total_dim);
        for col in 0..layout.total_dim {
            let n = layout.photons(col);
            if n > 0 {
                op.rows[col - 1].push((col, C64::new((n as f64).sqrt(), 0.0)));
            }
        }
        op
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[(usize, C64)] {
        &self.rows[r]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
    }

    pub fn adjoint(&self) -> Self {
        let mut map = BTreeMap::new();
        for (r, c, v) in self.triplets() {
            map.insert((c, r), v.conj());
        }
        Self::from_map(self.dim, map)
    }

    pub fn mul(&self, other: &SparseOperator) -> Self {
        assert_eq!(self.dim, other.dim, "operator dimension mismatch");
        let mut map = BTreeMap::new();
        for (r, k, a) in self.triplets() {
            for &(c, b) in other.row(k) {
                *map.entry((r, c)).or_insert(C64::new(0.0, 0.0)) += a * b;
            }
        }
        Self::from_map(self.dim, map)
    }

    pub fn add(&self, other: &SparseOperator) -> Self {
        self.add_scaled(other, C64::new(1.0, 0.0))
    }

    pub fn add_scaled(&self, other: &SparseOperator, scale: C64) -> Self {
        assert_eq!(self.dim, other.dim, "operator dimension mismatch");
        let mut map = BTreeMap::new();
        for (r, c, v) in self.triplets() {
            *map.entry((r, c)).or_insert(C64::new(0.0, 0.0)) += v;
        }
        for (r, c, v) in other.triplets() {
            *map.entry((r, c)).or_insert(C64::new(0.0, 0.0)) += scale * v;
        }
        Self::from_map(self.dim, map)
    }

    pub fn scale(&self, s: C64) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| (c, v * s)).collect())
            .collect();
        Self { dim: self.dim, rows }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Dense operator on the composite space.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    layout: HilbertLayout,
    matrix: DMatrix<C64>,
}

impl DenseOperator {
    pub fn new(layout: HilbertLayout, matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != layout.total_dim || matrix.ncols() != layout.total_dim {
            return Err(CavityError::LayoutMismatch(format!(
                "matrix is {}x{}, layout dimension is {}",
                matrix.nrows(),
                matrix.ncols(),
                layout.total_dim
            )));
        }
        Ok(Self { layout, matrix })
    }

    pub fn from_sparse(layout: HilbertLayout, op: &SparseOperator) -> Self {
        Self { layout, matrix: op.to_dense() }
    }

    pub fn identity(layout: HilbertLayout) -> Self {
        Self { layout, matrix: DMatrix::identity(layout.total_dim, layout.total_dim) }
    }

    pub fn layout(&self) -> &HilbertLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn adjoint(&self) -> Self {
        Self { layout: self.layout, matrix: self.matrix.adjoint() }
    }

    pub fn mul(&self, other: &DenseOperator) -> Self {
        Self { layout: self.layout, matrix: &self.matrix * &other.matrix }
    }

    pub fn commutator(&self, other: &DenseOperator) -> Self {
        Self {
            layout: self.layout,
            matrix: &self.matrix * &other.matrix - &other.matrix * &self.matrix,
        }
    }

    /// Largest entry of `M - M†`, relative to the largest entry magnitude.
    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.matrix)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() < tol
    }
}

pub(crate) fn hermiticity_defect(m: &DMatrix<C64>) -> f64 {
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for r in 0..m.nrows() {
        for c in r..m.ncols() {
            worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
        }
    }
    worst / scale
}

pub fn atom_lowering(layout: &HilbertLayout, atom: usize) -> Result<DenseOperator> {
    let op = SparseOperator::atom_lowering(layout, atom)?;
    Ok(DenseOperator::from_sparse(*layout, &op))
}

pub fn field_annihilation(layout: &HilbertLayout) -> DenseOperator {
    DenseOperator::from_sparse(*layout, &SparseOperator::field_annihilation(layout))
}

/// `trace(op · rho)`.
pub fn expectation(state: &QuantumState, op: &DenseOperator) -> Result<C64> {
    if state.layout != op.layout {
        return Err(CavityError::LayoutMismatch(
            "operator and state live on different layouts".into(),
        ));
    }
    let d = state.layout.total_dim;
    let mut acc = C64::new(0.0, 0.0);
    for k in 0..d {
        for l in 0..d {
            acc += op.matrix[(l, k)] * state.rho[(k, l)];
        }
    }
    Ok(acc)
}

/// Density operator on the composite space.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumState {
    layout: HilbertLayout,
    rho: DMatrix<C64>,
}

/// Tolerances of the state invariants.
pub const TRACE_TOL: f64 = 1e-8;
pub const HERMITICITY_TOL: f64 = 1e-10;
pub const DIAGONAL_FLOOR: f64 = -1e-10;

impl QuantumState {
    /// Wraps a matrix without checking the density-matrix invariants.
    pub fn from_matrix_unchecked(layout: HilbertLayout, rho: DMatrix<C64>) -> Result<Self> {
        if rho.nrows() != layout.total_dim || rho.ncols() != layout.total_dim {
            return Err(CavityError::LayoutMismatch(format!(
                "matrix is {}x{}, layout dimension is {}",
                rho.nrows(),
                rho.ncols(),
                layout.total_dim
            )));
        }
        Ok(Self { layout, rho })
    }

    pub fn from_matrix(layout: HilbertLayout, rho: DMatrix<C64>) -> Result<Self> {
        let state = Self::from_matrix_unchecked(layout, rho)?;
        state.check_invariants()?;
        Ok(state)
    }

    /// Pure product basis state.
    pub fn basis(layout: HilbertLayout, index: usize) -> Result<Self> {
        if index >= layout.total_dim {
            return Err(CavityError::IndexOutOfRange { index, len: layout.total_dim });
        }
        let mut rho = DMatrix::zeros(layout.total_dim, layout.total_dim);
        rho[(index, index)] = C64::new(1.0, 0.0);
        Ok(Self { layout, rho })
    }

    /// All atoms in the ground state, cavity in vacuum.
    pub fn ground(layout: HilbertLayout) -> Self {
        Self::basis(layout, 0).expect("index 0 always exists")
    }

    /// Pure state from an (unnormalised) amplitude vector.
    pub fn pure(layout: HilbertLayout, amplitudes: &[C64]) -> Result<Self> {
        if amplitudes.len() != layout.total_dim {
            return Err(CavityError::LayoutMismatch(format!(
                "expected {} amplitudes, got {}",
                layout.total_dim,
                amplitudes.len()
            )));
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if norm <= 0.0 {
            return Err(CavityError::InvalidState("zero amplitude vector".into()));
        }
        let d = layout.total_dim;
        let rho = DMatrix::from_fn(d, d, |k, l| amplitudes[k] * amplitudes[l].conj() / norm);
        Ok(Self { layout, rho })
    }

    pub fn layout(&self) -> &HilbertLayout {
        &self.layout
    }

    pub fn rho(&self) -> &DMatrix<C64> {
        &self.rho
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.rho
    }

    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    pub fn min_diagonal(&self) -> f64 {
        (0..self.layout.total_dim)
            .map(|k| self.rho[(k, k)].re)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.rho)
    }

    /// Trace, Hermiticity and diagonal-positivity checks.
    pub fn check_invariants(&self) -> Result<()> {
        let tr = self.trace();
        if (tr - C64::new(1.0, 0.0)).norm() > TRACE_TOL {
            return Err(CavityError::InvalidState(format!("trace is {tr}, expected 1")));
        }
        let h = self.hermiticity_defect();
        if h > HERMITICITY_TOL {
            return Err(CavityError::InvalidState(format!("hermiticity defect {h:e}")));
        }
        let m = self.min_diagonal();
        if m < DIAGONAL_FLOOR {
            return Err(CavityError::InvalidState(format!("negative diagonal entry {m:e}")));
        }
        Ok(())
    }

    /// Total population of the highest retained Fock level.
    pub fn fock_tail_population(&self) -> f64 {
        let top = self.layout.fock_cutoff;
        (0..self.layout.total_dim)
            .filter(|&k| self.layout.photons(k) == top)
            .map(|k| self.rho[(k, k)].re)
            .sum()
    }

    pub fn to_snapshot(&self) -> StateSnapshot {
        let d = self.layout.total_dim;
        let mut data = Vec::with_capacity(2 * d * d);
        for r in 0..d {
            for c in 0..d {
                let z = self.rho[(r, c)];
                data.push(z.re);
                data.push(z.im);
            }
        }
        StateSnapshot { layout: self.layout, ordering: ORDERING.to_string(), data }
    }

    pub fn from_snapshot(snap: &StateSnapshot) -> Result<Self> {
        if snap.ordering != ORDERING {
            return Err(CavityError::InvalidState(format!(
                "unsupported basis ordering `{}`",
                snap.ordering
            )));
        }
        let d = snap.layout.total_dim;
        if snap.data.len() != 2 * d * d {
            return Err(CavityError::LayoutMismatch(format!(
                "snapshot holds {} reals, expected {}",
                snap.data.len(),
                2 * d * d
            )));
        }
        let rho = DMatrix::from_fn(d, d, |r, c| {
            let k = 2 * (r * d + c);
            C64::new(snap.data[k], snap.data[k + 1])
        });
        Ok(Self { layout: snap.layout, rho })
    }
}

const ORDERING: &str = "atom-major";

/// Serialised density matrix: layout header plus a flat row-major array of
/// interleaved real and imaginary parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSnapshot {
    pub layout: HilbertLayout,
    pub ordering: String,
    pub data: Vec<f64>,
}
