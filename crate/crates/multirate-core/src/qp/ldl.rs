//! Banded LDL^T factorization for the symmetric quasi-definite KKT systems
//! assembled by the ADMM solver.
//!
//! Quasi-definite matrices (positive-definite upper-left block, negative-definite
//! lower-right block after regularization) admit an LDL^T factorization under any
//! symmetric permutation without pivoting, which keeps the factorization
//! deterministic. Problems with chained stage structure (the MPC transcription)
//! become narrow-banded under the ordering heuristic in `super::ordering`, so the
//! factor cost drops from O(n^3) to O(n b^2).

/// Symmetric matrix stored as a lower band: entry (i, j) with j <= i <= j + bw
/// lives at `data[j * (bw + 1) + (i - j)]`.
pub(crate) struct BandMatrix {
    dim: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub(crate) fn zeros(dim: usize, bw: usize) -> Self {
        BandMatrix {
            dim,
            bw,
            data: vec![0.0; dim * (bw + 1)],
        }
    }

    #[inline]
    /// Accumulate into the lower-triangular entry (i, j), i >= j.
    #[inline]
    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.bw);
        self.data[j * (self.bw + 1) + (i - j)] += v;
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i >= j);
        if i - j > self.bw {
            0.0
        } else {
            self.data[j * (self.bw + 1) + (i - j)]
        }
    }
}

pub(crate) struct LdlFactor {
    dim: usize,
    bw: usize,
    /// Unit lower-triangular factor, same band layout as `BandMatrix` (diagonal
    /// slots unused).
    low: Vec<f64>,
    diag: Vec<f64>,
}

/// Factor a quasi-definite band matrix. Returns `None` when a pivot collapses,
/// which signals a rank-deficient assembly rather than an expected runtime state.
pub(crate) fn factor(a: &BandMatrix) -> Option<LdlFactor> {
    let (n, bw) = (a.dim, a.bw);
    let stride = bw + 1;
    let mut low = vec![0.0; n * stride];
    let mut diag = vec![0.0; n];

    for j in 0..n {
        let k0 = j.saturating_sub(bw);
        let mut dj = a.get(j, j);
        for k in k0..j {
            let ljk = low[k * stride + (j - k)];
            dj -= ljk * ljk * diag[k];
        }
        if dj.abs() < 1e-300 {
            return None;
        }
        diag[j] = dj;

        let imax = (j + bw).min(n - 1);
        for i in (j + 1)..=imax {
            let mut v = a.get(i, j);
            let kk0 = k0.max(i.saturating_sub(bw));
            for k in kk0..j {
                v -= low[k * stride + (i - k)] * low[k * stride + (j - k)] * diag[k];
            }
            low[j * stride + (i - j)] = v / dj;
        }
    }
    Some(LdlFactor { dim: n, bw, low, diag })
}

impl LdlFactor {
    /// In-place solve of L D L^T x = b.
    pub(crate) fn solve(&self, b: &mut [f64]) {
        let (n, bw) = (self.dim, self.bw);
        let stride = bw + 1;
        debug_assert_eq!(b.len(), n);
        for j in 0..n {
            let bj = b[j];
            if bj != 0.0 {
                let imax = (j + bw).min(n - 1);
                for i in (j + 1)..=imax {
                    b[i] -= self.low[j * stride + (i - j)] * bj;
                }
            }
        }
        for j in 0..n {
            b[j] /= self.diag[j];
        }
        for j in (0..n).rev() {
            let imax = (j + bw).min(n - 1);
            let mut acc = b[j];
            for i in (j + 1)..=imax {
                acc -= self.low[j * stride + (i - j)] * b[i];
            }
            b[j] = acc;
        }
    }
}
