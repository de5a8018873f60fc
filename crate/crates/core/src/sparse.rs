//! Sparse symmetric positive-definite Cholesky factorization.
//!
//! Simplicial up-looking factorization `P A Pᵀ = L Lᵀ` with a minimum-degree
//! fill-reducing ordering. The symbolic analysis (ordering, elimination tree,
//! column counts) depends only on the sparsity pattern and is shared through
//! an [`Arc`] so refactorizations with new values skip it.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of numeric factorizations performed on the current thread.
pub fn factorization_count() -> usize {
    FACTORIZATIONS.with(|c| c.get())
}

/// Symmetric matrix stored as the lower triangle in compressed columns.
/// Each column lists its diagonal entry first, then strictly lower rows in
/// increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Builds from `(row, col, value)` triplets. Entries above the diagonal are
    /// mirrored into the lower triangle and duplicates are summed. Every
    /// diagonal entry must be present.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: i.max(j) + 1,
                });
            }
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            cols[c].push((r, v));
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for (c, col) in cols.iter_mut().enumerate() {
            col.sort_by_key(|e| e.0);
            if col.first().map(|e| e.0) != Some(c) {
                return Err(Error::InvalidParameter(format!(
                    "missing diagonal entry in column {c}"
                )));
            }
            for &(r, v) in col.iter() {
                if row_idx.len() > col_ptr[c] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(SparseSym {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseSym {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored (lower-triangle) nonzeros.
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Entries `(row, value)` of lower-triangle column `c`.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Element `(i, j)`, zero when structurally absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.column(c).find(|e| e.0 == r).map_or(0.0, |e| e.1)
    }

    /// Count of structural nonzeros in row `i` of the full symmetric matrix.
    pub fn row_nnz(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.has_entry(i, j)).count()
    }

    fn has_entry(&self, i: usize, j: usize) -> bool {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.column(c).any(|e| e.0 == r)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for (r, v) in self.column(c) {
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for c in 0..self.n {
            for (r, v) in self.column(c) {
                d[r][c] = v;
                d[c][r] = v;
            }
        }
        d
    }

    fn same_pattern(&self, col_ptr: &[usize], row_idx: &[usize]) -> bool {
        self.col_ptr == col_ptr && self.row_idx == row_idx
    }
}

/// Fill-reducing ordering choice.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    #[default]
    MinimumDegree,
    /// Explicit permutation, `perm[new] = old`.
    Custom(Vec<usize>),
}

/// Pattern-only part of the factorization.
#[derive(Debug)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    parent: Vec<usize>,
    /// Upper triangle of `P A Pᵀ` in compressed columns.
    c_col_ptr: Vec<usize>,
    c_row_idx: Vec<usize>,
    /// Position in the permuted matrix of each stored entry of `A`.
    c_map: Vec<usize>,
    l_col_ptr: Vec<usize>,
    a_col_ptr: Vec<usize>,
    a_row_idx: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl Symbolic {
    pub fn analyze(a: &SparseSym, ordering: Ordering) -> Result<Arc<Self>> {
        let n = a.n;
        let perm = match ordering {
            Ordering::Natural => (0..n).collect(),
            Ordering::MinimumDegree => minimum_degree(a),
            Ordering::Custom(p) => {
                let mut seen = vec![false; n];
                if p.len() != n
                    || p.iter()
                        .any(|&i| i >= n || std::mem::replace(&mut seen[i], true))
                {
                    return Err(Error::InvalidParameter("invalid permutation".into()));
                }
                p
            }
        };
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Upper triangle of C = P A Pᵀ, columns built by counting sort.
        let mut counts = vec![0usize; n + 1];
        for c in 0..n {
            for p in a.col_ptr[c]..a.col_ptr[c + 1] {
                let (i, j) = (pinv[a.row_idx[p]], pinv[c]);
                counts[i.max(j) + 1] += 1;
            }
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let c_col_ptr = counts.clone();
        let mut next = counts;
        let mut c_row_idx = vec![0; a.nnz()];
        let mut c_map = vec![0; a.nnz()];
        for c in 0..n {
            for p in a.col_ptr[c]..a.col_ptr[c + 1] {
                let (i, j) = (pinv[a.row_idx[p]], pinv[c]);
                let col = i.max(j);
                let q = next[col];
                next[col] += 1;
                c_row_idx[q] = i.min(j);
                c_map[p] = q;
            }
        }

        let parent = etree(n, &c_col_ptr, &c_row_idx);

        // Column counts of L from the row patterns given by the elimination tree.
        let mut col_count = vec![1usize; n];
        let mut mark = vec![NONE; n];
        let mut stack = Vec::with_capacity(n);
        for k in 0..n {
            ereach(k, &c_col_ptr, &c_row_idx, &parent, &mut mark, &mut stack);
            for &i in &stack {
                col_count[i] += 1;
            }
        }
        let mut l_col_ptr = vec![0; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + col_count[k];
        }

        Ok(Arc::new(Symbolic {
            n,
            perm,
            parent,
            c_col_ptr,
            c_row_idx,
            c_map,
            l_col_ptr,
            a_col_ptr: a.col_ptr.clone(),
            a_row_idx: a.row_idx.clone(),
        }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Permutation with `perm[new] = old`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Predicted nonzeros of `L`, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    pub fn matches(&self, a: &SparseSym) -> bool {
        a.n == self.n && a.same_pattern(&self.a_col_ptr, &self.a_row_idx)
    }
}

fn etree(n: usize, col_ptr: &[usize], row_idx: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &r in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
            let mut i = r;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), written to
/// `out` in topological order. `mark` uses `k` as the visit stamp.
fn ereach(
    k: usize,
    col_ptr: &[usize],
    row_idx: &[usize],
    parent: &[usize],
    mark: &mut [usize],
    out: &mut Vec<usize>,
) {
    out.clear();
    mark[k] = k;
    let mut paths = Vec::new();
    let mut bounds = vec![0];
    for &r in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
        if r > k {
            continue;
        }
        let mut i = r;
        while mark[i] != k {
            paths.push(i);
            mark[i] = k;
            i = parent[i];
        }
        bounds.push(paths.len());
    }
    // each path runs leaf to root; later paths end below earlier ones
    for w in bounds.windows(2).rev() {
        out.extend_from_slice(&paths[w[0]..w[1]]);
    }
}

/// Minimum-degree ordering on the explicit elimination graph; ties go to the
/// lowest index so the result is deterministic.
pub fn minimum_degree(a: &SparseSym) -> Vec<usize> {
    let n = a.n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for c in 0..n {
        for (r, _) in a.column(c) {
            if r != c {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut order = Vec::with_capacity(n);
    let mut merged = Vec::new();
    while let Some((_, v)) = queue.pop_first() {
        order.push(v);
        let nbrs = std::mem::take(&mut adj[v]);
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
            merged.clear();
            let (x, y) = (&adj[u], &nbrs);
            let (mut i, mut j) = (0, 0);
            while i < x.len() || j < y.len() {
                let next = match (x.get(i), y.get(j)) {
                    (Some(&p), Some(&q)) if p == q => {
                        i += 1;
                        j += 1;
                        p
                    }
                    (Some(&p), Some(&q)) if p < q => {
                        i += 1;
                        p
                    }
                    (Some(_), Some(&q)) => {
                        j += 1;
                        q
                    }
                    (Some(&p), None) => {
                        i += 1;
                        p
                    }
                    (None, Some(&q)) => {
                        j += 1;
                        q
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != v {
                    merged.push(next);
                }
            }
            std::mem::swap(&mut adj[u], &mut merged);
            queue.insert((adj[u].len(), u));
        }
    }
    order
}

/// Numeric Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    symbolic: Arc<Symbolic>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
}

/// Factorizes `a`. With `symbolic` given, its pattern must match `a` and only
/// the numeric phase runs; otherwise a minimum-degree analysis is done first.
pub fn factorize(a: &SparseSym, symbolic: Option<&Arc<Symbolic>>) -> Result<CholFactor> {
    let symbolic = match symbolic {
        Some(s) => {
            if !s.matches(a) {
                return Err(Error::InvalidParameter(
                    "cached symbolic analysis does not match the matrix pattern".into(),
                ));
            }
            Arc::clone(s)
        }
        None => Symbolic::analyze(a, Ordering::MinimumDegree)?,
    };
    CholFactor::numeric(a, symbolic)
}

impl CholFactor {
    fn numeric(a: &SparseSym, sym: Arc<Symbolic>) -> Result<Self> {
        FACTORIZATIONS.with(|c| c.set(c.get() + 1));
        let n = sym.n;
        let mut c_values = vec![0.0; a.nnz()];
        for (p, &q) in sym.c_map.iter().enumerate() {
            c_values[q] = a.values[p];
        }
        let nnz = sym.factor_nnz();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next: Vec<usize> = sym.l_col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut mark = vec![NONE; n];
        let mut pattern = Vec::with_capacity(n);
        for k in 0..n {
            ereach(
                k,
                &sym.c_col_ptr,
                &sym.c_row_idx,
                &sym.parent,
                &mut mark,
                &mut pattern,
            );
            for p in sym.c_col_ptr[k]..sym.c_col_ptr[k + 1] {
                x[sym.c_row_idx[p]] += c_values[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &pattern {
                let lki = x[i] / lx[sym.l_col_ptr[i]];
                x[i] = 0.0;
                for q in sym.l_col_ptr[i] + 1..next[i] {
                    x[li[q]] -= lx[q] * lki;
                }
                d -= lki * lki;
                let q = next[i];
                next[i] += 1;
                li[q] = k;
                lx[q] = lki;
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: sym.perm[k] });
            }
            let q = next[k];
            next[k] += 1;
            li[q] = k;
            lx[q] = d.sqrt();
        }
        Ok(CholFactor {
            symbolic: sym,
            l_row_idx: li,
            l_values: lx,
        })
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    /// Diagonal of `L`.
    pub fn diag(&self) -> impl Iterator<Item = f64> + '_ {
        let ptr = &self.symbolic.l_col_ptr;
        (0..self.dim()).map(move |j| self.l_values[ptr[j]])
    }

    /// Entries `(row, value)` of column `j` of `L`, diagonal first.
    pub fn l_column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.symbolic.l_col_ptr[j]..self.symbolic.l_col_ptr[j + 1];
        self.l_row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.l_values[range].iter().copied())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// In-place `y <- L⁻¹ y` on permuted coordinates; zero entries are skipped.
    fn forward(&self, y: &mut [f64]) {
        let ptr = &self.symbolic.l_col_ptr;
        for j in 0..self.dim() {
            if y[j] == 0.0 {
                continue;
            }
            let yj = y[j] / self.l_values[ptr[j]];
            y[j] = yj;
            for q in ptr[j] + 1..ptr[j + 1] {
                y[self.l_row_idx[q]] -= self.l_values[q] * yj;
            }
        }
    }

    /// In-place `y <- L⁻ᵀ y`.
    fn backward(&self, y: &mut [f64]) {
        let ptr = &self.symbolic.l_col_ptr;
        for j in (0..self.dim()).rev() {
            let mut acc = y[j];
            for q in ptr[j] + 1..ptr[j + 1] {
                acc -= self.l_values[q] * y[self.l_row_idx[q]];
            }
            y[j] = acc / self.l_values[ptr[j]];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b.len())?;
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![0.0; b.len()];
        for (new, &old) in perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    /// Half solve `L⁻¹ P b`; `‖L⁻¹ P b‖² = bᵀ A⁻¹ b`.
    pub fn whiten(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b.len())?;
        let mut y: Vec<f64> = self.symbolic.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        Ok(y)
    }

    /// `Pᵀ L⁻ᵀ z`; maps standard normal `z` to a draw with covariance `A⁻¹`.
    pub fn unwhiten(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z.len())?;
        let mut y = z.to_vec();
        self.backward(&mut y);
        let mut x = vec![0.0; y.len()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    /// `log det A = 2 Σ log L_jj`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.diag().map(f64::ln).sum::<f64>()
    }
}

pub fn solve(f: &CholFactor, b: &[f64]) -> Result<Vec<f64>> {
    f.solve(b)
}

pub fn logdet(f: &CholFactor) -> f64 {
    f.logdet()
}
