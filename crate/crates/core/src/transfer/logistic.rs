use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BinaryClassifier, TransferError};

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized logistic regression fitted by Newton's method. The
/// intercept is not penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    weights: Vec<f64>,
    intercept: f64,
}

impl LogisticRegression {
    pub fn new(l2: f64) -> Self {
        Self {
            l2,
            max_iter: 100,
            tol: 1e-10,
            weights: Vec::new(),
            intercept: 0.0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }
}

impl BinaryClassifier for LogisticRegression {
    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<(), TransferError> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(TransferError::ShapeMismatch(format!("{n} rows for {} targets", y.len())));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(TransferError::ShapeMismatch("ragged design matrix".into()));
        }
        // Column 0 is the intercept.
        let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
        let target = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
        let mut beta = DVector::zeros(d + 1);
        for _ in 0..self.max_iter {
            let eta = &design * &beta;
            let p = eta.map(sigmoid);
            let w = p.map(|v| (v * (1.0 - v)).max(1e-12));
            let mut grad = design.transpose() * (&p - &target);
            let mut weighted = design.clone();
            for (i, mut row) in weighted.row_iter_mut().enumerate() {
                row *= w[i];
            }
            let mut hess = design.transpose() * weighted;
            for j in 1..=d {
                grad[j] += self.l2 * beta[j];
                hess[(j, j)] += self.l2;
            }
            let scale = hess.diagonal().amax().max(1e-300);
            let chol = hess.cholesky().ok_or(TransferError::SingularFit)?;
            if chol.l_dirty().diagonal().iter().any(|&l| l * l < 1e-12 * scale) {
                return Err(TransferError::SingularFit);
            }
            let step = chol.solve(&grad);
            beta -= &step;
            if !beta.iter().all(|v| v.is_finite()) {
                return Err(TransferError::SingularFit);
            }
            if step.amax() < self.tol {
                break;
            }
        }
        self.intercept = beta[0];
        self.weights = beta.iter().skip(1).copied().collect();
        Ok(())
    }

    fn score(&self, x: &[f64]) -> f64 {
        let z: f64 = self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_toy_set() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 - 9.5, ((i * 7) % 5) as f64]).collect();
        let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let mut lr = LogisticRegression::new(1.0);
        lr.fit(&x, &y).unwrap();
        let acc = x.iter().zip(&y).filter(|(r, &t)| (lr.score(r) > 0.5) == t).count();
        assert_eq!(acc, 20);
        assert!(x.iter().all(|r| (0.0..=1.0).contains(&lr.score(r))));
    }

    #[test]
    fn optimum_has_zero_gradient() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let y: Vec<bool> = (0..30).map(|i| (i * 11) % 7 < 3).collect();
        let mut lr = LogisticRegression::new(0.5);
        lr.fit(&x, &y).unwrap();
        let mut g = vec![0.0; 3];
        for (r, &t) in x.iter().zip(&y) {
            let e = lr.score(r) - if t { 1.0 } else { 0.0 };
            g[0] += e;
            g[1] += e * r[0];
            g[2] += e * r[1];
        }
        g[1] += 0.5 * lr.weights()[0];
        g[2] += 0.5 * lr.weights()[1];
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn unregularized_duplicate_columns_are_singular() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let mut lr = LogisticRegression::new(0.0);
        assert!(matches!(lr.fit(&x, &y), Err(TransferError::SingularFit)));
    }
}
