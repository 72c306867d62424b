//! Principal component projection of representation vectors.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[k, dim]`, unit rows, largest-magnitude loading positive.
    pub components: Tensor,
    /// `[n, k]` coordinates of the fitted rows.
    pub coords: Tensor,
    /// Share of total variance per component.
    pub explained: Vec<f64>,
}

/// Top-`k` components of the mean-centered rows of `x`.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Pca> {
    let (n, dim) = (x.rows(), x.cols());
    if k == 0 || k > dim {
        return Err(Error::Config(format!(
            "cannot take {k} components of {dim}-dimensional data"
        )));
    }
    if n < k {
        return Err(Error::Input(format!(
            "{n} rows are too few for {k} components"
        )));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("representation matrix is not finite".into()));
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| x.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Numeric("representations have zero variance".into()));
    }
    let mut components = Vec::with_capacity(k * dim);
    let mut explained = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let v = eig.eigenvectors.column(c);
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|x| x * sign));
        explained.push(eig.eigenvalues[c].max(0.0) / total);
    }
    let comp = DMatrix::from_row_slice(k, dim, &components);
    let coords = &centered * comp.transpose();
    let coords = Tensor::matrix(
        n,
        k,
        (0..n)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .map(|(i, j)| coords[(i, j)])
            .collect(),
    )?;
    Ok(Pca {
        mean,
        components: Tensor::matrix(k, dim, components)?,
        coords,
        explained,
    })
}

impl Pca {
    /// Maps coordinates back to the original space.
    pub fn reconstruct(&self, coords: &Tensor) -> Result<Tensor> {
        let (k, dim) = (self.components.rows(), self.components.cols());
        if coords.cols() != k {
            return Err(Error::dim(
                "pca reconstruct",
                format!("{} columns vs {k} components", coords.cols()),
            ));
        }
        let mut out = Vec::with_capacity(coords.rows() * dim);
        for i in 0..coords.rows() {
            let c = coords.row(i);
            for j in 0..dim {
                out.push(
                    self.mean[j]
                        + (0..k)
                            .map(|a| c[a] * self.components.row(a)[j])
                            .sum::<f64>(),
                );
            }
        }
        Tensor::matrix(coords.rows(), dim, out)
    }
}
