//! Least squares by Householder QR.

/// Columns whose diagonal in R falls below this fraction of their original
/// norm are treated as linearly dependent.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    pub rss: f64,
    /// Number of columns actually used.
    pub rank: usize,
}

/// Solves `min ||X b - y||` for a column-major design `columns`.
///
/// Returns `None` when the design is rank deficient.
pub fn solve(columns: &[Vec<f64>], y: &[f64]) -> Option<LeastSquares> {
    householder(columns, y, false)
}

/// Like [`solve`], but a column that lies in the span of the columns before
/// it is dropped (coefficient 0) instead of failing. The residual is the
/// projection residual onto the column space, which is unique regardless of
/// rank. Returns `None` only for malformed input.
pub fn solve_dropping_dependent(columns: &[Vec<f64>], y: &[f64]) -> Option<LeastSquares> {
    householder(columns, y, true)
}

fn householder(columns: &[Vec<f64>], y: &[f64], drop_dependent: bool) -> Option<LeastSquares> {
    let n = y.len();
    let m = columns.len();
    if m == 0 || m > n || columns.iter().any(|c| c.len() != n) {
        return None;
    }
    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut qty = y.to_vec();
    // (column, diagonal of R) for each accepted column, in order
    let mut pivots: Vec<(usize, f64)> = Vec::with_capacity(m);

    for k in 0..m {
        let row = pivots.len();
        let full_norm = columns[k].iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = a[k][row..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if full_norm == 0.0 || norm <= RANK_TOL * full_norm {
            if drop_dependent {
                continue;
            }
            return None;
        }
        let alpha = if a[k][row] > 0.0 { -norm } else { norm };
        let mut v = a[k][row..].to_vec();
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv > 0.0 {
            let reflect = |col: &mut [f64]| {
                let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                let scale = 2.0 * dot / vtv;
                for (c, vi) in col.iter_mut().zip(&v) {
                    *c -= scale * vi;
                }
            };
            for col in a.iter_mut().skip(k + 1) {
                reflect(&mut col[row..]);
            }
            reflect(&mut qty[row..]);
        }
        pivots.push((k, alpha));
    }

    let rank = pivots.len();
    let mut coefficients = vec![0.0; m];
    for r in (0..rank).rev() {
        let (k, diag) = pivots[r];
        let tail: f64 = pivots[r + 1..].iter().map(|&(j, _)| a[j][r] * coefficients[j]).sum();
        coefficients[k] = (qty[r] - tail) / diag;
    }
    let rss = qty[rank..].iter().map(|v| v * v).sum();
    Some(LeastSquares { coefficients, rss, rank })
}
