//! Sparse assembly of the master-equation generator.
//!
//! The generator is linear in a small set of scalar coefficients (detuning,
//! pump, cavity loss, single-atom decay, one mode coupling per atom, one
//! dipole shift and one collective decay per pair). Each coefficient owns a
//! constant sparse superoperator, so the full generator for any atomic
//! configuration is `Σ_k c_k(positions)·L_k`, evaluated without rebuilding
//! any matrix.
//!
//! Every term changes the total excitation number `a†a + Σσ⁺σ⁻` of the ket
//! and the bra by the same amount, so the coherence sector
//! `m = exc(ket) − exc(bra)` is conserved. States are stored packed on a
//! [`Support`]: either one sector or the full matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::operators::{HilbertLayout, SparseOperator, C64};

const ABSENT: u32 = u32::MAX;

/// Set of density-matrix entries carried by a packed vector.
#[derive(Clone, Debug)]
pub struct Support {
    layout: HilbertLayout,
    sector: Option<i64>,
    pairs: Vec<(u32, u32)>,
    lookup: Vec<u32>,
}

impl Support {
    pub fn full(layout: &HilbertLayout) -> Self {
        Self::build(layout, None)
    }

    /// Entries `(k, l)` with `exc(k) − exc(l) = m`.
    pub fn sector(layout: &HilbertLayout, m: i64) -> Self {
        Self::build(layout, Some(m))
    }

    fn build(layout: &HilbertLayout, sector: Option<i64>) -> Self {
        let d = layout.total_dim();
        let mut pairs = Vec::new();
        let mut lookup = vec![ABSENT; d * d];
        for k in 0..d {
            for l in 0..d {
                let keep = sector.map_or(true, |m| {
                    layout.excitations(k) as i64 - layout.excitations(l) as i64 == m
                });
                if keep {
                    lookup[k * d + l] = pairs.len() as u32;
                    pairs.push((k as u32, l as u32));
                }
            }
        }
        Self { layout: *layout, sector, pairs, lookup }
    }

    /// Smallest support holding every entry of `m` above `tol` in magnitude,
    /// preferring the given sector.
    pub fn for_matrix(layout: &HilbertLayout, m: &DMatrix<C64>, sector: i64, tol: f64) -> Self {
        let s = Self::sector(layout, sector);
        if s.covers(m, tol) {
            s
        } else {
            Self::full(layout)
        }
    }

    pub fn covers(&self, m: &DMatrix<C64>, tol: f64) -> bool {
        let d = self.layout.total_dim();
        (0..d).all(|k| (0..d).all(|l| self.index(k, l).is_some() || m[(k, l)].norm() <= tol))
    }

    pub fn layout(&self) -> &HilbertLayout {
        &self.layout
    }

    pub fn sector_offset(&self) -> Option<i64> {
        self.sector
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn index(&self, k: usize, l: usize) -> Option<usize> {
        let d = self.layout.total_dim();
        match self.lookup[k * d + l] {
            ABSENT => None,
            i => Some(i as usize),
        }
    }

    /// Writes the supported entries of `m` as interleaved `(re, im)` pairs.
    pub fn pack(&self, m: &DMatrix<C64>, out: &mut [f64]) {
        for (i, &(k, l)) in self.pairs.iter().enumerate() {
            let z = m[(k as usize, l as usize)];
            out[2 * i] = z.re;
            out[2 * i + 1] = z.im;
        }
    }

    pub fn unpack(&self, x: &[f64]) -> DMatrix<C64> {
        let d = self.layout.total_dim();
        let mut m = DMatrix::zeros(d, d);
        for (i, &(k, l)) in self.pairs.iter().enumerate() {
            m[(k as usize, l as usize)] = C64::new(x[2 * i], x[2 * i + 1]);
        }
        m
    }
}

/// Index map of the scalar coefficients multiplying the generator pieces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoefficientMap {
    n_atoms: usize,
}

impl CoefficientMap {
    pub const DETUNING: usize = 0;
    pub const PUMP: usize = 1;
    pub const CAVITY_LOSS: usize = 2;
    pub const ATOM_DECAY: usize = 3;

    pub fn new(n_atoms: usize) -> Self {
        Self { n_atoms }
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_pairs(&self) -> usize {
        self.n_atoms * self.n_atoms.saturating_sub(1) / 2
    }

    pub fn len(&self) -> usize {
        4 + self.n_atoms + 2 * self.n_pairs()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mode(&self, atom: usize) -> usize {
        4 + atom
    }

    pub fn shift(&self, pair: usize) -> usize {
        4 + self.n_atoms + pair
    }

    pub fn collective_decay(&self, pair: usize) -> usize {
        4 + self.n_atoms + self.n_pairs() + pair
    }

    /// Atom pairs `i < j` in the order used for pair coefficients.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.n_atoms;
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
    }
}

/// Which dissipative channels the generator contains. The Hamiltonian part is
/// always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTerms {
    pub pump: bool,
    pub cavity_loss: bool,
    pub atomic_decay: bool,
}

impl Default for GeneratorTerms {
    fn default() -> Self {
        Self { pump: true, cavity_loss: true, atomic_decay: true }
    }
}

/// The operators entering the model, built once per layout.
pub struct ModelOperators {
    pub a: SparseOperator,
    pub a_dag: SparseOperator,
    pub number: SparseOperator,
    pub lower: Vec<SparseOperator>,
    pub raise: Vec<SparseOperator>,
}

impl ModelOperators {
    pub fn new(layout: &HilbertLayout) -> Self {
        let a = SparseOperator::field_annihilation(layout);
        let a_dag = a.adjoint();
        let number = a_dag.mul(&a);
        let lower: Vec<_> = (0..layout.n_atoms())
            .map(|i| SparseOperator::atom_lowering(layout, i).expect("atom index in range"))
            .collect();
        let raise = lower.iter().map(SparseOperator::adjoint).collect();
        Self { a, a_dag, number, lower, raise }
    }

    /// `a σᵢ⁺ + a† σᵢ⁻`.
    pub fn mode_coupling(&self, i: usize) -> SparseOperator {
        self.a.mul(&self.raise[i]).add(&self.a_dag.mul(&self.lower[i]))
    }

    /// `σᵢ⁺σⱼ⁻ + σⱼ⁺σᵢ⁻`.
    pub fn exchange(&self, i: usize, j: usize) -> SparseOperator {
        self.raise[i].mul(&self.lower[j]).add(&self.raise[j].mul(&self.lower[i]))
    }
}

struct Term<'a> {
    kind: usize,
    left: Option<&'a SparseOperator>,
    right: Option<&'a SparseOperator>,
    scale: C64,
}

/// Sparse generator `dρ/dt = Σ_k c_k L_k[ρ]` on a fixed support.
#[derive(Clone, Debug)]
pub struct Generator {
    support: Support,
    n_kinds: usize,
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    kinds: Vec<u16>,
    vals: Vec<C64>,
}

impl Generator {
    pub fn new(support: Support, terms: GeneratorTerms) -> Self {
        let layout = *support.layout();
        let ops = ModelOperators::new(&layout);
        let cmap = CoefficientMap::new(layout.n_atoms());
        let one = C64::new(1.0, 0.0);

        let mode: Vec<_> = (0..layout.n_atoms()).map(|k| ops.mode_coupling(k)).collect();
        let pairs: Vec<_> = cmap.pairs().collect();
        let exchange: Vec<_> = pairs.iter().map(|&(a, b)| ops.exchange(a, b)).collect();
        let pump_anti: Vec<_> = (0..layout.n_atoms()).map(|k| ops.lower[k].mul(&ops.raise[k])).collect();
        let decay_anti: Vec<_> = (0..layout.n_atoms()).map(|k| ops.raise[k].mul(&ops.lower[k])).collect();
        let two_n = ops.number.scale(C64::new(2.0, 0.0));

        let mut list: Vec<Term> = Vec::new();
        fn commutator<'a>(list: &mut Vec<Term<'a>>, kind: usize, h: &'a SparseOperator) {
            let i = C64::new(0.0, 1.0);
            list.push(Term { kind, left: Some(h), right: None, scale: -i });
            list.push(Term { kind, left: None, right: Some(h), scale: i });
        }
        fn anti<'a>(list: &mut Vec<Term<'a>>, kind: usize, a: &'a SparseOperator) {
            let half = C64::new(-0.5, 0.0);
            list.push(Term { kind, left: Some(a), right: None, scale: half });
            list.push(Term { kind, left: None, right: Some(a), scale: half });
        }
        // Hamiltonian
        commutator(&mut list, CoefficientMap::DETUNING, &ops.number);
        for (k, h) in mode.iter().enumerate() {
            commutator(&mut list, cmap.mode(k), h);
        }
        for (p, h) in exchange.iter().enumerate() {
            commutator(&mut list, cmap.shift(p), h);
        }
        if terms.pump {
            for k in 0..layout.n_atoms() {
                let kind = CoefficientMap::PUMP;
                list.push(Term { kind, left: Some(&ops.raise[k]), right: Some(&ops.lower[k]), scale: one });
                anti(&mut list, kind, &pump_anti[k]);
            }
        }
        if terms.cavity_loss {
            let kind = CoefficientMap::CAVITY_LOSS;
            list.push(Term { kind, left: Some(&ops.a), right: Some(&ops.a_dag), scale: C64::new(2.0, 0.0) });
            anti(&mut list, kind, &two_n);
        }
        if terms.atomic_decay {
            for k in 0..layout.n_atoms() {
                let kind = CoefficientMap::ATOM_DECAY;
                list.push(Term { kind, left: Some(&ops.lower[k]), right: Some(&ops.raise[k]), scale: one });
                anti(&mut list, kind, &decay_anti[k]);
            }
            for (p, &(a, b)) in pairs.iter().enumerate() {
                let kind = cmap.collective_decay(p);
                list.push(Term { kind, left: Some(&ops.lower[a]), right: Some(&ops.raise[b]), scale: one });
                list.push(Term { kind, left: Some(&ops.lower[b]), right: Some(&ops.raise[a]), scale: one });
                anti(&mut list, kind, &exchange[p]);
            }
        }
        Self::assemble(support, cmap.len(), &list)
    }

    fn assemble(support: Support, n_kinds: usize, terms: &[Term<'_>]) -> Self {
        let d = support.layout().total_dim();
        let n = support.len();
        let mut rows: Vec<Vec<(u32, u16, C64)>> = vec![Vec::new(); n];
        for term in terms {
            // column view of the right factor: right[b, l] listed per l
            let right_cols: Option<Vec<Vec<(usize, C64)>>> = term.right.map(|r| {
                let mut cols = vec![Vec::new(); d];
                for (b, l, v) in r.triplets() {
                    cols[l].push((b, v));
                }
                cols
            });
            for (row, &(k, l)) in support.pairs().iter().enumerate() {
                let (k, l) = (k as usize, l as usize);
                let identity_left = [(k, C64::new(1.0, 0.0))];
                let identity_right = [(l, C64::new(1.0, 0.0))];
                let left: &[(usize, C64)] = match term.left {
                    Some(op) => op.row(k),
                    None => &identity_left,
                };
                let right: &[(usize, C64)] = match &right_cols {
                    Some(cols) => &cols[l],
                    None => &identity_right,
                };
                for &(a, la) in left {
                    for &(b, rb) in right {
                        if let Some(src) = support.index(a, b) {
                            rows[row].push((src as u32, term.kind as u16, term.scale * la * rb));
                        }
                    }
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut kinds = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, k, _)| (c, k));
            let mut merged: Vec<(u32, u16, C64)> = Vec::with_capacity(row.len());
            for (c, k, v) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == c && last.1 == k => last.2 += v,
                    _ => merged.push((c, k, v)),
                }
            }
            for (c, k, v) in merged {
                if v.norm() > 0.0 {
                    cols.push(c);
                    kinds.push(k);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len() as u32);
        }
        Self { support, n_kinds, row_ptr, cols, kinds, vals }
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn n_coefficients(&self) -> usize {
        self.n_kinds
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `out = Σ_k coeffs[k]·L_k[x]` on packed vectors.
    pub fn apply(&self, coeffs: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.n_kinds);
        for r in 0..self.support.len() {
            let (lo, hi) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            let (mut re, mut im) = (0.0, 0.0);
            for e in lo..hi {
                let c = coeffs[self.kinds[e] as usize];
                let v = self.vals[e];
                let col = 2 * self.cols[e] as usize;
                let (xr, xi) = (x[col], x[col + 1]);
                re += c * (v.re * xr - v.im * xi);
                im += c * (v.re * xi + v.im * xr);
            }
            out[2 * r] = re;
            out[2 * r + 1] = im;
        }
    }
}

/// `trace(O·ρ)` evaluated directly on a packed vector.
#[derive(Clone, Debug)]
pub struct PackedObservable {
    entries: Vec<(u32, C64)>,
}

impl PackedObservable {
    pub fn new(op: &SparseOperator, support: &Support) -> Self {
        // trace(Oρ) = Σ_{k,l} O[l,k] ρ[k,l]
        let entries = op
            .triplets()
            .filter_map(|(l, k, v)| support.index(k, l).map(|idx| (idx as u32, v)))
            .collect();
        Self { entries }
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for &(idx, v) in &self.entries {
            let i = 2 * idx as usize;
            acc += v * C64::new(x[i], x[i + 1]);
        }
        acc
    }
}
