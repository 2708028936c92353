//! Sparse Cholesky factorization for symmetric positive definite matrices.
//!
//! Simplicial up-looking factorization over an elimination tree, with either
//! a greedy minimum-degree fill-reducing ordering or the natural ordering.
//! The symbolic analysis (ordering, elimination tree, row patterns, column
//! pointers) is done once per sparsity pattern; [`SparseFactor::refactor`]
//! reuses it for new numeric values with the same pattern, which is the hot
//! path when hyperparameters change during sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Row/column ordering used before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillOrdering {
    /// Greedy minimum-degree (fill-reducing, deterministic tie-break by index).
    MinimumDegree,
    /// Identity permutation; keeps banded patterns banded.
    Natural,
}

/// Symbolic structure shared by all refactorizations of one pattern.
#[derive(Debug, Clone)]
struct Symbolic {
    n: usize,
    /// ordered position k -> original index.
    perm: Vec<usize>,
    /// For each ordered row k: positions into the source value array for the
    /// strict upper entries (i, k), i < k, stored as (ordered i, source pos).
    upper_ptr: Vec<usize>,
    upper: Vec<(usize, usize)>,
    /// Source position of the diagonal entry of ordered row k (usize::MAX if
    /// structurally absent, treated as zero).
    diag_pos: Vec<usize>,
    /// Row pattern of L (the elimination-tree reach of each row, topological
    /// order, excluding the diagonal), concatenated.
    rowpat_ptr: Vec<usize>,
    rowpat: Vec<usize>,
    /// Column pointers of L (CSC), length n + 1. Column j starts with its
    /// diagonal entry at `lp[j]`.
    lp: Vec<usize>,
    /// Nonzero count of the source matrix, to guard refactor misuse.
    src_nnz: usize,
}

/// Sparse Cholesky factor `P A Pᵀ = L Lᵀ` of an SPD matrix `A`.
#[derive(Debug, Clone)]
pub struct SparseFactor {
    sym: Symbolic,
    /// Row indices of L (CSC).
    li: Vec<usize>,
    /// Values of L (CSC).
    lx: Vec<f64>,
    logdet: f64,
}

/// Greedy minimum-degree ordering of a symmetric pattern.
fn minimum_degree(a: &SparseMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for i in 0..n {
        let (cols, _) = a.row(i);
        for &j in cols {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut alive = vec![true; n];
    let mut queue: std::collections::BTreeSet<(usize, usize)> =
        (0..n).map(|i| (adj[i].len(), i)).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some(&(deg, v)) = queue.iter().next() {
        queue.remove(&(deg, v));
        if !alive[v] || adj[v].len() != deg {
            continue; // stale entry
        }
        alive[v] = false;
        perm.push(v);
        let neighbors: Vec<usize> = adj[v].iter().copied().collect();
        for &u in &neighbors {
            queue.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
        }
        // Connect the eliminated vertex's neighbors into a clique.
        for (ia, &u) in neighbors.iter().enumerate() {
            for &w in &neighbors[ia + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &neighbors {
            queue.insert((adj[u].len(), u));
        }
    }
    perm
}

/// Elimination tree of the permuted pattern (parent[k] = etree parent or
/// usize::MAX for roots), from the strict upper entries of each ordered row.
fn elimination_tree(n: usize, upper_ptr: &[usize], upper: &[(usize, usize)]) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &(i, _) in &upper[upper_ptr[k]..upper_ptr[k + 1]] {
            let mut i = i;
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

/// Nonzero pattern of row k of L via the elimination-tree reach, in the
/// topological (leaf-to-root along paths) order the numeric phase needs.
fn ereach(
    k: usize,
    upper: &[(usize, usize)],
    parent: &[usize],
    mark: &mut [usize],
    stack: &mut Vec<usize>,
    out: &mut Vec<usize>,
) {
    const NONE: usize = usize::MAX;
    out.clear();
    mark[k] = k;
    for &(i, _) in upper {
        let mut i = i;
        stack.clear();
        while mark[i] != k {
            stack.push(i);
            mark[i] = k;
            i = parent[i];
            if i == NONE {
                break;
            }
        }
        // The path was collected leaf-to-root; prepend it reversed so the
        // final order is topological across all paths.
        while let Some(j) = stack.pop() {
            out.push(j);
        }
    }
    // `out` now holds root-to-leaf segments appended per path; reverse to get
    // the required ascending-elimination order.
    out.reverse();
}

impl SparseFactor {
    /// Symbolic analysis + numeric factorization of an SPD matrix.
    pub fn new(a: &SparseMatrix, ordering: FillOrdering) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "cholesky of non-square {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let perm = match ordering {
            FillOrdering::MinimumDegree => minimum_degree(a),
            FillOrdering::Natural => (0..n).collect(),
        };
        let mut iperm = vec![0usize; n];
        for (k, &orig) in perm.iter().enumerate() {
            iperm[orig] = k;
        }
        // Permuted upper pattern with source value positions. Row `orig` of
        // the CSR input holds (orig, c) entries; by symmetry the upper column
        // of ordered k is the set of ordered images < k of row perm[k].
        let mut upper_ptr = Vec::with_capacity(n + 1);
        let mut upper: Vec<(usize, usize)> = Vec::new();
        let mut diag_pos = vec![usize::MAX; n];
        upper_ptr.push(0);
        for k in 0..n {
            let orig = perm[k];
            let (cols, _) = a.row(orig);
            let row_start = a.row_range(orig).start;
            let mut entries: Vec<(usize, usize)> = Vec::new();
            for (off, &c) in cols.iter().enumerate() {
                let kk = iperm[c];
                if kk < k {
                    entries.push((kk, row_start + off));
                } else if kk == k {
                    diag_pos[k] = row_start + off;
                }
            }
            entries.sort_unstable_by_key(|&(i, _)| i);
            upper.extend_from_slice(&entries);
            upper_ptr.push(upper.len());
        }
        let parent = elimination_tree(n, &upper_ptr, &upper);
        // Row patterns and column counts.
        let mut mark = vec![usize::MAX; n];
        let mut stack = Vec::new();
        let mut pat = Vec::new();
        let mut rowpat_ptr = Vec::with_capacity(n + 1);
        let mut rowpat: Vec<usize> = Vec::new();
        let mut col_count = vec![1usize; n]; // diagonal
        rowpat_ptr.push(0);
        for k in 0..n {
            ereach(
                k,
                &upper[upper_ptr[k]..upper_ptr[k + 1]],
                &parent,
                &mut mark,
                &mut stack,
                &mut pat,
            );
            for &j in &pat {
                col_count[j] += 1;
            }
            rowpat.extend_from_slice(&pat);
            rowpat_ptr.push(rowpat.len());
        }
        let mut lp = Vec::with_capacity(n + 1);
        lp.push(0);
        for j in 0..n {
            lp.push(lp[j] + col_count[j]);
        }
        let nnz = lp[n];
        let sym = Symbolic {
            n,
            perm,
            upper_ptr,
            upper,
            diag_pos,
            rowpat_ptr,
            rowpat,
            lp,
            src_nnz: a.nnz(),
        };
        let mut factor = SparseFactor { sym, li: vec![0; nnz], lx: vec![0.0; nnz], logdet: 0.0 };
        factor.refactor(a)?;
        Ok(factor)
    }

    /// Numeric refactorization with new values on the same pattern.
    pub fn refactor(&mut self, a: &SparseMatrix) -> Result<()> {
        let sym = &self.sym;
        let n = sym.n;
        if a.nrows() != n || a.nnz() != sym.src_nnz {
            return Err(Error::ShapeMismatch(
                "refactor called with a different sparsity pattern".into(),
            ));
        }
        // Flat value array aligned with the CSR layout the symbolic phase
        // recorded positions into.
        let values = a.values();
        let mut x = vec![0f64; n];
        // Next free slot per column (after the diagonal).
        let mut free = vec![0usize; n];
        let mut logdet = 0.0;
        for k in 0..n {
            for &(i, pos) in &sym.upper[sym.upper_ptr[k]..sym.upper_ptr[k + 1]] {
                x[i] = values[pos];
            }
            let mut d = if sym.diag_pos[k] == usize::MAX { 0.0 } else { values[sym.diag_pos[k]] };
            for &j in &sym.rowpat[sym.rowpat_ptr[k]..sym.rowpat_ptr[k + 1]] {
                let ljj = self.lx[sym.lp[j]];
                let lkj = x[j] / ljj;
                x[j] = 0.0;
                for p in sym.lp[j] + 1..free[j] {
                    x[self.li[p]] -= self.lx[p] * lkj;
                }
                d -= lkj * lkj;
                let p = free[j];
                self.li[p] = k;
                self.lx[p] = lkj;
                free[j] = p + 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    "pivot {d:.3e} at ordered row {k}"
                )));
            }
            let sq = d.sqrt();
            self.li[sym.lp[k]] = k;
            self.lx[sym.lp[k]] = sq;
            free[k] = sym.lp[k] + 1;
            logdet += sq.ln();
        }
        self.logdet = 2.0 * logdet;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.sym.n
    }

    /// log det(A) of the factored matrix.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Number of stored nonzeros in L (including the diagonal).
    pub fn l_nnz(&self) -> usize {
        self.lx.len()
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let sym = &self.sym;
        let n = sym.n;
        assert_eq!(b.len(), n, "solve dimension mismatch");
        let mut y: Vec<f64> = (0..n).map(|k| b[sym.perm[k]]).collect();
        // Forward: L z = y (CSC columns).
        for k in 0..n {
            let zk = y[k] / self.lx[sym.lp[k]];
            y[k] = zk;
            for p in sym.lp[k] + 1..sym.lp[k + 1] {
                y[self.li[p]] -= self.lx[p] * zk;
            }
        }
        // Backward: Lᵀ x = z.
        for k in (0..n).rev() {
            let mut acc = y[k];
            for p in sym.lp[k] + 1..sym.lp[k + 1] {
                acc -= self.lx[p] * y[self.li[p]];
            }
            y[k] = acc / self.lx[sym.lp[k]];
        }
        let mut out = vec![0f64; n];
        for k in 0..n {
            out[sym.perm[k]] = y[k];
        }
        out
    }

    /// Draws x ~ N(0, A⁻¹) for the factored precision matrix A, by solving
    /// Lᵀ x = ζ with ζ ~ N(0, I) and undoing the permutation.
    pub fn draw_gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let sym = &self.sym;
        let n = sym.n;
        let mut z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for k in (0..n).rev() {
            let mut acc = z[k];
            for p in sym.lp[k] + 1..sym.lp[k + 1] {
                acc -= self.lx[p] * z[self.li[p]];
            }
            z[k] = acc / self.lx[sym.lp[k]];
        }
        let mut out = vec![0f64; n];
        for k in 0..n {
            out[sym.perm[k]] = z[k];
        }
        out
    }
}

/// Factors an SPD matrix, climbing a jitter ladder on failure: on each retry
/// `jitter * mean(diag)` is added to the diagonal, with jitter starting at
/// 1e-10 and growing tenfold up to 1e-6.
pub fn factor_spd(a: &SparseMatrix, ordering: FillOrdering) -> Result<SparseFactor> {
    match SparseFactor::new(a, ordering) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite(_)) => {
            let diag = a.diagonal();
            let scale = diag.iter().map(|d| d.abs()).sum::<f64>() / diag.len().max(1) as f64;
            let mut jitter = 1e-10;
            loop {
                let eye = SparseMatrix::from_diagonal(&vec![jitter * scale; a.nrows()]);
                let jittered = a.add_scaled(1.0, &eye)?;
                match SparseFactor::new(&jittered, ordering) {
                    Ok(f) => {
                        log::warn!("cholesky needed jitter {:.1e} * mean diag", jitter);
                        return Ok(f);
                    }
                    Err(Error::NotPositiveDefinite(msg)) if jitter < 1e-6 => {
                        log::debug!("jitter {jitter:.1e} insufficient: {msg}");
                        jitter *= 10.0;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Err(e) => Err(e),
    }
}
