//! Two-dimensional PCA export of pooled gated features.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::corpus::TextSample;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub label: String,
}

/// Principal axes of a set of row vectors, largest variance first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit axes, one per row.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

/// Top-`k` principal components of `rows`. Eigenpairs are ordered by
/// eigenvalue descending, then by eigensolver index; each axis is signed so
/// its largest-magnitude coordinate (first on ties) is positive.
pub fn pca(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two rows"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("PCA rows must share one width"));
    }
    if k > d {
        return Err(Error::invalid(format!(
            "cannot take {k} components of {d}-dimensional data"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let pivot = axis
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if v.abs() > axis[best].abs() { j } else { best });
        if axis[pivot] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
        variances.push(eig.eigenvalues[i].max(0.0));
    }
    Ok(Pca {
        mean,
        components,
        variances,
    })
}

impl Pca {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect()
    }
}

/// Pooled gated features of each sample under eval-mode forward.
pub fn pooled_features(model: &Model, samples: &[TextSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| Ok(model.trace_features(&model.features(s)?)?.g_pooled.to_vec()))
        .collect()
}

pub fn project_samples(model: &Model, samples: &[TextSample]) -> Result<Vec<ProjectedPoint>> {
    if samples.len() < 3 {
        return Err(Error::invalid("projection needs at least three samples"));
    }
    let feats = pooled_features(model, samples)?;
    let p = pca(&feats, 2)?;
    Ok(samples
        .iter()
        .zip(&feats)
        .map(|(s, f)| {
            let xy = p.project(f);
            ProjectedPoint {
                id: s.id.clone(),
                x: xy[0],
                y: xy[1],
                label: s.label.map_or("", |l| l.as_str()).to_string(),
            }
        })
        .collect())
}

/// Writes `id,x,y,label` rows for `samples`.
pub fn export_projection(model: &Model, samples: &[TextSample], path: impl AsRef<Path>) -> Result<Vec<ProjectedPoint>> {
    let points = project_samples(model, samples)?;
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in &points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(points)
}
