//! Small dense solvers: just enough for 5x5 fit systems and the
//! linear-probe normal equations.

/// Solves A x = b in place by Gaussian elimination with partial
/// pivoting. `a` is n x n row-major. Returns None for (numerically)
/// singular systems.
pub fn solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * x[j];
        }
        x[col] = acc / a[col * n + col];
    }
    Some(x)
}

/// Least squares via normal equations with a small ridge term:
/// minimizes |X w - y|^2 + ridge |w|^2. Rows of `x` are samples.
pub fn lstsq(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Option<Vec<f64>> {
    let rows = x.len();
    if rows == 0 || rows != y.len() {
        return None;
    }
    let cols = x[0].len();
    let mut ata = vec![0.0; cols * cols];
    let mut aty = vec![0.0; cols];
    for (row, target) in x.iter().zip(y.iter()) {
        assert_eq!(row.len(), cols);
        for i in 0..cols {
            aty[i] += row[i] * target;
            for j in 0..cols {
                ata[i * cols + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..cols {
        ata[i * cols + i] += ridge;
    }
    solve(&mut ata, &mut aty, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_known_system() {
        // [2 1; 1 3] x = [5; 10] -> x = [1, 3]
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![5.0, 10.0];
        let x = solve(&mut a, &mut b, 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular_system() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve(&mut a, &mut b, 2).is_none());
    }

    #[test]
    fn least_squares_recovers_plane() {
        // y = 3 + 2u - v sampled exactly.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                let (u, v) = (i as f64, j as f64);
                xs.push(vec![1.0, u, v]);
                ys.push(3.0 + 2.0 * u - v);
            }
        }
        let w = lstsq(&xs, &ys, 0.0).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-10);
        assert!((w[1] - 2.0).abs() < 1e-10);
        assert!((w[2] + 1.0).abs() < 1e-10);
    }
}
