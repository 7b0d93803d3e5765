use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Linear map with intercept fitted by ridge regression.
#[derive(Clone, Debug)]
pub struct RidgeModel {
    /// `[p, q]`
    pub weights: DMatrix<f64>,
    /// `[q]`
    pub intercept: Vec<f64>,
}

fn to_matrix(rows: &[&[f64]]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::shape("ridge", "ragged rows"));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows().max(1) as f64;
    (0..m.ncols()).map(|j| m.column(j).sum() / n).collect()
}

/// Solves `min |Y - X W - b|^2 + lambda |W|^2` on centred data; the
/// intercept is not penalised.
pub fn ridge_fit(x: &[&[f64]], y: &[&[f64]], lambda: f64) -> Result<RidgeModel> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape("ridge", format!("{} feature rows vs {} label rows", x.len(), y.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("ridge penalty must be non-negative"));
    }
    let mut xm = to_matrix(x)?;
    let mut ym = to_matrix(y)?;
    let mx = column_means(&xm);
    let my = column_means(&ym);
    for (j, m) in mx.iter().enumerate() {
        xm.column_mut(j).add_scalar_mut(-m);
    }
    for (j, m) in my.iter().enumerate() {
        ym.column_mut(j).add_scalar_mut(-m);
    }
    let p = xm.ncols();
    let mut gram = xm.transpose() * &xm;
    for i in 0..p {
        gram[(i, i)] += lambda;
    }
    let rhs = xm.transpose() * &ym;
    let weights = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Config(format!("ridge solve failed: {e}")))?,
    };
    let intercept = (0..ym.ncols())
        .map(|k| my[k] - (0..p).map(|j| mx[j] * weights[(j, k)]).sum::<f64>())
        .collect();
    Ok(RidgeModel { weights, intercept })
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let q = self.intercept.len();
        (0..q)
            .map(|k| self.intercept[k] + x.iter().enumerate().map(|(j, v)| v * self.weights[(j, k)]).sum::<f64>())
            .collect()
    }
}

/// Coefficient of determination averaged over label dimensions.
///
/// Dimensions whose held-out variance is (numerically) zero are skipped;
/// `None` when every dimension is degenerate.
pub fn r_squared(pred: &[Vec<f64>], truth: &[&[f64]]) -> Option<f64> {
    let n = truth.len();
    if n == 0 || pred.len() != n {
        return None;
    }
    let q = truth[0].len();
    let mut scores = Vec::with_capacity(q);
    for k in 0..q {
        let mean = truth.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let sst: f64 = truth.iter().map(|r| (r[k] - mean).powi(2)).sum();
        let scale = truth.iter().map(|r| r[k] * r[k]).sum::<f64>().max(1.0);
        if sst <= 1e-12 * scale {
            continue;
        }
        let sse: f64 = truth.iter().zip(pred).map(|(r, p)| (r[k] - p[k]).powi(2)).sum();
        scores.push(1.0 - sse / sst);
    }
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Pearson correlation; `None` for constant inputs.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_an_exact_affine_map() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1, ((i * 7) % 11) as f64]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 * r[0] - r[1] + 3.0]).collect();
        let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
        let m = ridge_fit(&xr, &yr, 0.0).unwrap();
        assert!((m.weights[(0, 0)] - 2.0).abs() < 1e-9);
        assert!((m.weights[(1, 0)] + 1.0).abs() < 1e-9);
        assert!((m.intercept[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn constant_target_is_undefined() {
        let truth = [[1.0], [1.0], [1.0]];
        let t: Vec<&[f64]> = truth.iter().map(|r| r.as_slice()).collect();
        assert_eq!(r_squared(&[vec![0.0], vec![1.0], vec![2.0]], &t), None);
    }

    #[test]
    fn mean_prediction_scores_zero() {
        let truth = [[1.0], [2.0], [3.0]];
        let t: Vec<&[f64]> = truth.iter().map(|r| r.as_slice()).collect();
        let r2 = r_squared(&[vec![2.0], vec![2.0], vec![2.0]], &t).unwrap();
        assert!(r2.abs() < 1e-12);
    }

    #[test]
    fn pearson_of_affine_pair() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let b: Vec<f64> = a.iter().map(|v| -3.0 * v + 1.0).collect();
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[1.0; 4]), None);
    }
}
