use super::CsrMatrix;
use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive semidefinite band matrix.
///
/// Pivots that fall below `drop_tol * max_diag` are treated as exact zeros:
/// the corresponding column of the factor is cleared and the matching
/// solution component is set to zero. For a consistent right-hand side
/// (one lying in the range of the matrix) the solve then returns a valid
/// solution of the singular system.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    // L(i, j) for 0 <= i - j <= bw stored at i * (bw + 1) + (i - j)
    data: Vec<f64>,
    dropped: Vec<bool>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix, drop_tol: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch {
                context: "banded Cholesky (square matrix)",
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        let n = a.nrows();
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut data = vec![0.0; n * w];
        let mut max_diag: f64 = 0.0;
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    data[i * w + (i - j)] = v;
                }
                if j == i {
                    max_diag = max_diag.max(v);
                }
            }
        }
        if max_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: "banded Cholesky",
                detail: "non-positive diagonal".into(),
            });
        }
        let threshold = drop_tol * max_diag;
        let mut dropped = vec![false; n];
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = data[j * w];
            for k in lo..j {
                let l = data[j * w + (j - k)];
                d -= l * l;
            }
            if d <= threshold {
                if d < -threshold.max(1e-8 * max_diag) {
                    return Err(Error::NotPositiveDefinite {
                        context: "banded Cholesky",
                        detail: format!("pivot {j} = {d:.3e}"),
                    });
                }
                dropped[j] = true;
                data[j * w] = 0.0;
                for i in (j + 1)..(j + w).min(n) {
                    data[i * w + (i - j)] = 0.0;
                }
                continue;
            }
            let ljj = d.sqrt();
            data[j * w] = ljj;
            for i in (j + 1)..(j + w).min(n) {
                let lo = i.saturating_sub(bw);
                let mut s = data[i * w + (i - j)];
                for k in lo..j {
                    s -= data[i * w + (i - k)] * data[j * w + (j - k)];
                }
                data[i * w + (i - j)] = s / ljj;
            }
        }
        Ok(Self {
            n,
            bw,
            data,
            dropped,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Number of pivots treated as zero (numerical rank deficiency).
    pub fn rank_deficiency(&self) -> usize {
        self.dropped.iter().filter(|&&d| d).count()
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let w = self.bw + 1;
        for i in 0..self.n {
            if self.dropped[i] {
                b[i] = 0.0;
                continue;
            }
            let lo = i.saturating_sub(self.bw);
            let mut s = b[i];
            for k in lo..i {
                s -= self.data[i * w + (i - k)] * b[k];
            }
            b[i] = s / self.data[i * w];
        }
        for i in (0..self.n).rev() {
            if self.dropped[i] {
                b[i] = 0.0;
                continue;
            }
            let hi = (i + w).min(self.n);
            let mut s = b[i];
            for k in (i + 1)..hi {
                s -= self.data[k * w + (k - i)] * b[k];
            }
            b[i] = s / self.data[i * w];
        }
    }
}
