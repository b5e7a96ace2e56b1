//! 2-D (or k-D) PCA projection of embeddings for plotting elsewhere.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use taskvec::extractors::{EmbeddingKind, Method, TaskEmbedding};
use taskvec::{Error, Result};

/// Eigenvalues at or below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedRow {
    pub id: String,
    pub kind: EmbeddingKind,
    pub method: Method,
    pub source: String,
    pub coords: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Sorted by id.
    pub rows: Vec<ProjectedRow>,
    /// Eigenvalues of the kept components, descending.
    pub eigenvalues: Vec<f64>,
    pub requested: usize,
}

impl Projection {
    /// Fewer components than requested exist.
    pub fn rank_deficient(&self) -> bool {
        self.eigenvalues.len() < self.requested
    }

    /// `id kind method source pc1 … pck`, plus a `#` line when rank-deficient.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tkind\tmethod\tsource");
        for k in 0..self.eigenvalues.len() {
            let _ = write!(out, "\tpc{}", k + 1);
        }
        out.push('\n');
        for r in &self.rows {
            let kind = match r.kind {
                EmbeddingKind::Dte => "dte",
                EmbeddingKind::Mte => "mte",
            };
            let _ = write!(out, "{}\t{kind}\t{}\t{}", r.id, r.method, r.source);
            for c in &r.coords {
                let _ = write!(out, "\t{c:.9}");
            }
            out.push('\n');
        }
        if self.rank_deficient() {
            let _ = writeln!(out, "# rank {} < requested dims {}", self.eigenvalues.len(), self.requested);
        }
        out
    }
}

/// Mean-centered PCA through the `n × n` Gram matrix, which stays small
/// when there are far fewer embeddings than dimensions. Each component's
/// sign makes its largest-magnitude coordinate positive (first by id on
/// ties).
pub fn pca_project(embeddings: &[TaskEmbedding], dims: usize) -> Result<Projection> {
    if embeddings.len() < 2 {
        return Err(Error::Argument(format!("projection needs at least 2 embeddings, got {}", embeddings.len())));
    }
    if dims == 0 {
        return Err(Error::Argument("dims must be positive".into()));
    }
    for e in &embeddings[1..] {
        embeddings[0].check_compatible(e)?;
    }
    let mut sorted: Vec<&TaskEmbedding> = embeddings.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let (n, d) = (sorted.len(), sorted[0].dim());
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, e) in sorted.iter().enumerate() {
        for (j, &v) in e.values.iter().enumerate() {
            x[(i, j)] = v as f64;
        }
    }
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let gram = &x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&k| top > 0.0 && eig.eigenvalues[k] > RANK_TOL * top)
        .take(dims)
        .collect();
    let mut coords = vec![Vec::with_capacity(kept.len()); n];
    for &k in &kept {
        let scale = eig.eigenvalues[k].sqrt();
        let col: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, k)] * scale).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col.into_iter().enumerate() {
            // Adding 0.0 turns -0.0 into +0.0 so output text is stable.
            coords[i].push(sign * v + 0.0);
        }
    }
    Ok(Projection {
        rows: sorted
            .iter()
            .zip(coords)
            .map(|(e, coords)| ProjectedRow {
                id: e.id().to_owned(),
                kind: e.meta.kind,
                method: e.meta.method,
                source: e.meta.source.clone(),
                coords,
            })
            .collect(),
        eigenvalues: kept.iter().map(|&k| eig.eigenvalues[k]).collect(),
        requested: dims,
    })
}
