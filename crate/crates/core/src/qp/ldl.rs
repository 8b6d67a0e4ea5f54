//! Sparse `L D L^T` factorization of quasi-definite matrices.
//!
//! Follows the classic up-looking scheme: an elimination tree gives the
//! column counts of `L`, then each row of `L` is computed by a sparse
//! triangular solve over the tree. The input is the upper triangle of the
//! symmetric matrix in compressed-column form. No pivoting is done, which is
//! safe for quasi-definite matrices in any symmetric ordering, so the rows
//! and columns are first permuted by a minimum-degree ordering to limit
//! fill-in.

use std::collections::BTreeSet;

use super::sparse::Csc;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum LdlError {
    NotUpperTriangular,
    ZeroPivot(usize),
}

/// Factorization of a symmetric matrix given by its upper triangle; solves
/// in the original coordinates.
#[derive(Debug, Clone)]
pub struct Ldl {
    /// `perm[k]` is the original index placed at position `k`.
    perm: Vec<usize>,
    /// Position in the permuted value array of each input value.
    val_map: Vec<usize>,
    permuted: Csc,
    raw: RawLdl,
}

impl Ldl {
    pub fn new(a: &Csc) -> Result<Self, LdlError> {
        if (0..a.ncols).any(|j| a.rowind[a.colptr[j]..a.colptr[j + 1]].iter().any(|&i| i > j)) {
            return Err(LdlError::NotUpperTriangular);
        }
        let perm = minimum_degree(a);
        let (permuted, val_map) = permute_upper(a, &perm);
        let raw = RawLdl::new(&permuted).map_err(|e| unpermute(e, &perm))?;
        Ok(Ldl { perm, val_map, permuted, raw })
    }

    /// Nonzeros of `L`.
    pub fn nnz(&self) -> usize {
        self.raw.nnz()
    }

    /// Numeric factorization of a matrix with the same pattern as the one
    /// passed to [`Ldl::new`].
    pub fn refactor(&mut self, a: &Csc) -> Result<(), LdlError> {
        debug_assert_eq!(a.vals.len(), self.val_map.len());
        for (v, &p) in a.vals.iter().zip(&self.val_map) {
            self.permuted.vals[p] = *v;
        }
        self.raw.refactor(&self.permuted).map_err(|e| unpermute(e, &self.perm))
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, x: &mut [f64]) {
        let mut y = vec![0.0; x.len()];
        for (k, &i) in self.perm.iter().enumerate() {
            y[k] = x[i];
        }
        self.raw.solve(&mut y);
        for (k, &i) in self.perm.iter().enumerate() {
            x[i] = y[k];
        }
    }

    /// Number of negative pivots (the inertia's negative count).
    pub fn negative_pivots(&self) -> usize {
        self.raw.negative_pivots()
    }
}

fn unpermute(e: LdlError, perm: &[usize]) -> LdlError {
    match e {
        LdlError::ZeroPivot(k) => LdlError::ZeroPivot(perm[k]),
        other => other,
    }
}

/// Greedy minimum-degree ordering of the graph of a symmetric matrix given
/// by its upper triangle. Ties go to the lowest index, so the ordering is
/// deterministic.
pub fn minimum_degree(a: &Csc) -> Vec<usize> {
    let n = a.ncols;
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for j in 0..n {
        for &i in &a.rowind[a.colptr[j]..a.colptr[j + 1]] {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|i| (adj[i].len(), i)).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some((_, p)) = queue.pop_first() {
        perm.push(p);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[p]).into_iter().collect();
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
            adj[u].remove(&p);
        }
        for (k, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[k + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nbrs {
            queue.insert((adj[u].len(), u));
        }
    }
    perm
}

/// Upper triangle of `P A P'` and, for every input value, its position in
/// the output.
fn permute_upper(a: &Csc, perm: &[usize]) -> (Csc, Vec<usize>) {
    let n = a.ncols;
    let mut inv = vec![0usize; n];
    for (k, &i) in perm.iter().enumerate() {
        inv[i] = k;
    }
    let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(a.nnz());
    for j in 0..n {
        for p in a.colptr[j]..a.colptr[j + 1] {
            let (r, c) = (inv[a.rowind[p]], inv[j]);
            entries.push((r.min(c), r.max(c), p));
        }
    }
    entries.sort_by(|x, y| x.1.cmp(&y.1).then(x.0.cmp(&y.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowind = Vec::with_capacity(entries.len());
    let mut vals = Vec::with_capacity(entries.len());
    let mut map = vec![0usize; a.nnz()];
    for (q, &(r, c, p)) in entries.iter().enumerate() {
        colptr[c + 1] += 1;
        rowind.push(r);
        vals.push(a.vals[p]);
        map[p] = q;
    }
    for j in 0..n {
        colptr[j + 1] += colptr[j];
    }
    (Csc { nrows: n, ncols: n, colptr, rowind, vals }, map)
}

#[derive(Debug, Clone)]
struct RawLdl {
    n: usize,
    etree: Vec<usize>,
    lnz: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // workspaces
    y_idx: Vec<usize>,
    elim_buffer: Vec<usize>,
    next_space: Vec<usize>,
    y_vals: Vec<f64>,
    y_marker: Vec<bool>,
}

impl RawLdl {
    /// Symbolic analysis followed by a numeric factorization.
    fn new(a: &Csc) -> Result<Self, LdlError> {
        let n = a.ncols;
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for p in a.colptr[j]..a.colptr[j + 1] {
                let mut i = a.rowind[p];
                if i > j {
                    return Err(LdlError::NotUpperTriangular);
                }
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        let mut f = RawLdl {
            n,
            etree,
            lnz,
            lp,
            li: vec![0; total],
            lx: vec![0.0; total],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            y_idx: vec![0; n],
            elim_buffer: vec![0; n],
            next_space: vec![0; n],
            y_vals: vec![0.0; n],
            y_marker: vec![false; n],
        };
        f.refactor(a)?;
        Ok(f)
    }

    pub fn nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization of a matrix with the same pattern as the one
    /// passed to [`Ldl::new`].
    pub fn refactor(&mut self, a: &Csc) -> Result<(), LdlError> {
        let n = self.n;
        debug_assert_eq!(a.ncols, n);
        debug_assert!(self.lnz.len() == n);
        self.y_marker.iter_mut().for_each(|m| *m = false);
        self.y_vals.iter_mut().for_each(|v| *v = 0.0);
        self.next_space[..n].copy_from_slice(&self.lp[..n]);

        for k in 0..n {
            let mut nnz_y = 0usize;
            self.d[k] = 0.0;
            for p in a.colptr[k]..a.colptr[k + 1] {
                let bidx = a.rowind[p];
                if bidx == k {
                    self.d[k] = a.vals[p];
                    continue;
                }
                self.y_vals[bidx] = a.vals[p];
                if !self.y_marker[bidx] {
                    self.y_marker[bidx] = true;
                    self.elim_buffer[0] = bidx;
                    let mut nnz_e = 1usize;
                    let mut next = self.etree[bidx];
                    while next != NONE && next < k {
                        if self.y_marker[next] {
                            break;
                        }
                        self.y_marker[next] = true;
                        self.elim_buffer[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.y_idx[nnz_y] = self.elim_buffer[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let cidx = self.y_idx[i];
                let tmp = self.next_space[cidx];
                let y_c = self.y_vals[cidx];
                for j in self.lp[cidx]..tmp {
                    self.y_vals[self.li[j]] -= self.lx[j] * y_c;
                }
                self.li[tmp] = k;
                self.lx[tmp] = y_c * self.dinv[cidx];
                self.d[k] -= y_c * self.lx[tmp];
                self.next_space[cidx] += 1;
                self.y_vals[cidx] = 0.0;
                self.y_marker[cidx] = false;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
    }

    /// Number of negative pivots (the inertia's negative count).
    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|d| **d < 0.0).count()
    }
}
