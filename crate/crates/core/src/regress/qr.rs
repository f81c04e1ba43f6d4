//! Householder QR that walks columns in their given order and screens out
//! near-collinear columns instead of reordering them.

use nalgebra::{DMatrix, DVector};

/// Relative pivot tolerance for dropping a column.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

struct Reflector {
    row: usize,
    v: Vec<f64>,
    beta: f64,
}

impl Reflector {
    fn apply(&self, x: &mut [f64]) {
        let tail = &mut x[self.row..];
        let dot: f64 = self.v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
        let s = self.beta * dot;
        for (t, v) in tail.iter_mut().zip(self.v.iter()) {
            *t -= s * v;
        }
    }
}

/// Factorization of `diag(sqrt(w)) X` with rank screening in column order.
pub struct WeightedQr {
    sqrt_w: Vec<f64>,
    reflectors: Vec<Reflector>,
    /// Upper-triangular factor restricted to retained columns.
    r: DMatrix<f64>,
    retained: Vec<usize>,
    dropped: Vec<usize>,
}

impl WeightedQr {
    pub fn new(x: &DMatrix<f64>, weights: &[f64]) -> Self {
        let n = x.nrows();
        let p = x.ncols();
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();

        let mut cols: Vec<Vec<f64>> = (0..p)
            .map(|k| (0..n).map(|i| x[(i, k)] * sqrt_w[i]).collect())
            .collect();

        let mut reflectors: Vec<Reflector> = Vec::new();
        let mut retained = Vec::new();
        let mut dropped = Vec::new();
        let mut largest_pivot = 0.0_f64;

        for k in 0..p {
            let original_norm = norm(&cols[k]);
            for refl in &reflectors {
                refl.apply(&mut cols[k]);
            }
            let row = reflectors.len();
            let tail_norm = if row < n { norm(&cols[k][row..]) } else { 0.0 };
            let scale = largest_pivot.max(original_norm);
            if row >= n || tail_norm == 0.0 || tail_norm < PIVOT_TOLERANCE * scale {
                dropped.push(k);
                continue;
            }

            let x0 = cols[k][row];
            let alpha = if x0 >= 0.0 { -tail_norm } else { tail_norm };
            let mut v: Vec<f64> = cols[k][row..].to_vec();
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|a| a * a).sum();
            let refl = Reflector {
                row,
                v,
                beta: 2.0 / vtv,
            };
            refl.apply(&mut cols[k]);
            largest_pivot = largest_pivot.max(tail_norm);
            reflectors.push(refl);
            retained.push(k);
        }

        let rank = retained.len();
        let mut r = DMatrix::zeros(rank, rank);
        for (j, &k) in retained.iter().enumerate() {
            // later reflectors only touch rows below j
            for i in 0..=j {
                r[(i, j)] = cols[k][i];
            }
        }

        Self {
            sqrt_w,
            reflectors,
            r,
            retained,
            dropped,
        }
    }

    pub fn rank(&self) -> usize {
        self.retained.len()
    }

    /// Indices of columns kept in the factorization, in column order.
    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// Weighted least-squares coefficients for the retained columns.
    pub fn solve(&self, y: &[f64]) -> DVector<f64> {
        let mut qty: Vec<f64> = y.iter().zip(&self.sqrt_w).map(|(a, s)| a * s).collect();
        for refl in &self.reflectors {
            refl.apply(&mut qty);
        }
        let k = self.rank();
        let mut b = DVector::zeros(k);
        for i in (0..k).rev() {
            let mut acc = qty[i];
            for j in (i + 1)..k {
                acc -= self.r[(i, j)] * b[j];
            }
            b[i] = acc / self.r[(i, i)];
        }
        b
    }

    /// `(X' W X)^{-1}` over retained columns.
    pub fn xtwx_inverse(&self) -> DMatrix<f64> {
        let k = self.rank();
        let mut rinv = DMatrix::zeros(k, k);
        for c in 0..k {
            for i in (0..=c).rev() {
                let mut acc = if i == c { 1.0 } else { 0.0 };
                for j in (i + 1)..=c {
                    acc -= self.r[(i, j)] * rinv[(j, c)];
                }
                rinv[(i, c)] = acc / self.r[(i, i)];
            }
        }
        &rinv * rinv.transpose()
    }
}

fn norm(x: &[f64]) -> f64 {
    // scaled two-norm to avoid overflow on large columns
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let ss: f64 = x.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * ss.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_solve_recovers_exact_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = [1.0, 3.0, 5.0, 7.0];
        let qr = WeightedQr::new(&x, &[1.0; 4]);
        let b = qr.solve(&y);
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_dropped_in_column_order() {
        let x = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0, 1.0, 7.0, 7.0],
        );
        let qr = WeightedQr::new(&x, &[1.0; 4]);
        assert_eq!(qr.retained(), &[0, 1]);
        assert_eq!(qr.dropped(), &[2]);
    }

    #[test]
    fn zero_column_is_dropped() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 2.0, 0.0, 4.0]);
        let qr = WeightedQr::new(&x, &[1.0; 3]);
        assert_eq!(qr.retained(), &[1]);
    }

    #[test]
    fn inverse_matches_normal_matrix() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, -1.2, 1.0, 2.0, 1.0, 0.7, 1.0, 0.1]);
        let w = [1.0, 2.0, 0.5, 3.0, 1.5];
        let qr = WeightedQr::new(&x, &w);
        let inv = qr.xtwx_inverse();
        let wm = DMatrix::from_diagonal(&DVector::from_row_slice(&w));
        let xtwx = x.transpose() * wm * &x;
        let id = xtwx * inv;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }
}
