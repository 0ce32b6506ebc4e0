use std::collections::HashMap;

use crate::error::{Error, Result};

/// Solve `m · x = rhs` in place by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row][row];
    }
    Some(x)
}

/// Weights `c` such that `Σ_j c_j y_j` is the least-squares polynomial of
/// degree `order` through offsets `-left..=right`, evaluated at offset 0.
fn fit_weights(left: usize, right: usize, order: usize) -> Vec<f64> {
    let xs: Vec<f64> = (-(left as isize)..=right as isize).map(|x| x as f64).collect();
    let q = order.min(xs.len() - 1);
    let pow = |x: f64, k: usize| x.powi(k as i32);
    let m: Vec<Vec<f64>> = (0..=q)
        .map(|r| (0..=q).map(|c| xs.iter().map(|&x| pow(x, r + c)).sum()).collect())
        .collect();
    let mut e0 = vec![0.0; q + 1];
    e0[0] = 1.0;
    let z = solve(m, e0).expect("Vandermonde normal matrix of distinct points is regular");
    xs.iter()
        .map(|&x| (0..=q).map(|k| z[k] * pow(x, k)).sum())
        .collect()
}

/// Savitzky–Golay smoothing. Each frame gets the value at its own position of
/// the least-squares polynomial fitted over the centred window. Near the ends
/// the window is truncated and the degree drops only if there are too few
/// points.
pub fn savgol(p: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window <= order {
        return Err(Error::invalid(
            "savgol",
            format!("window {window} must be odd and greater than order {order}"),
        ));
    }
    let n = p.len();
    let half = window / 2;
    let mut cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let left = half.min(t);
        let right = half.min(n - 1 - t);
        let w = cache
            .entry((left, right))
            .or_insert_with(|| fit_weights(left, right, order));
        let lo = t - left;
        out.push(w.iter().zip(&p[lo..=t + right]).map(|(c, y)| c * y).sum());
    }
    Ok(out)
}
