//! RNA and protein preprocessing.
//!
//! RNA: library-size normalization to the median library size, `ln(1 + x)`,
//! highly-variable-gene selection, then PCA truncated to as many components as
//! there are proteins. Protein: centered log-ratio with a +1 pseudo-count, then
//! a full-rank PCA rotation. Both fits are captured in a [`PreprocessState`]
//! so new data can be projected without refitting.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::SpatialOmicsDataset;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::scalar::Scalar;

/// Default number of highly variable genes kept before PCA.
pub const DEFAULT_N_HVG: usize = 4000;
const HVG_BINS: usize = 20;
const HVG_MIN_BIN_OCCUPANCY: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    RnaLognormPca,
    ProteinClrPca,
}

/// A fitted preprocessing pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessState<T> {
    pub transform_kind: TransformKind,
    /// Feature names consumed by the PCA, in column order of `pca_mean`.
    pub selected_names: Vec<String>,
    /// Target library size (median training row sum). Unused for protein.
    pub library_size: T,
    /// Training spots' scale factors `library_size / row_sum`. Empty for protein.
    pub per_spot_scale: Vec<T>,
    pub pca_mean: Array1<T>,
    /// D×P, orthonormal columns.
    pub pca_components: Array2<T>,
    pub explained_variance: Array1<T>,
}

/// Model-ready matrices for a paired training dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedDataset<T> {
    /// N×P normalized RNA principal component scores.
    pub x: Array2<T>,
    /// N×P protein target (PCA-rotated CLR values).
    pub y: Option<Array2<T>>,
    pub rna_pipeline: PreprocessState<T>,
    pub protein_pipeline: Option<PreprocessState<T>>,
}

/// Genes ranked by standardized variance, most variable first.
#[derive(Clone, Debug, PartialEq)]
pub struct HvgRanking<T> {
    pub gene_index: Vec<usize>,
    pub standardized_variance: Vec<T>,
}

/// Result of [`fit_pca`].
#[derive(Clone, Debug, PartialEq)]
pub struct PcaFit<T> {
    pub mean: Array1<T>,
    pub components: Array2<T>,
    pub explained_variance: Array1<T>,
}

impl<T: Scalar> PcaFit<T> {
    pub fn project(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        project(x, &self.mean, &self.components)
    }
}

fn project<T: Scalar>(x: ArrayView2<'_, T>, mean: &Array1<T>, components: &Array2<T>) -> Array2<T> {
    let centered = &x - &mean.view().insert_axis(Axis(0));
    centered.dot(components)
}

fn median<T: Scalar>(values: &[T]) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / T::of(2.0)
    }
}

fn row_sums<T: Scalar>(counts: ArrayView2<'_, f64>, column_order: &[usize]) -> Vec<T> {
    counts
        .rows()
        .into_iter()
        .map(|row| {
            let mut acc = T::zero();
            for &j in column_order {
                acc += T::of(row[j]);
            }
            acc
        })
        .collect()
}

fn lognorm_with_sums<T: Scalar>(
    counts: ArrayView2<'_, f64>,
    sums: &[T],
    library_size: T,
) -> Result<Array2<T>> {
    if let Some(spot) = sums.iter().position(|s| *s <= T::zero()) {
        return Err(Error::EmptyRow { spot });
    }
    let mut out = Array2::zeros(counts.dim());
    for ((row_out, row_in), &sum) in out.rows_mut().into_iter().zip(counts.rows()).zip(sums) {
        let scale = library_size / sum;
        for (o, &c) in row_out.into_iter().zip(row_in.iter()) {
            *o = (T::of(c) * scale).ln_1p();
        }
    }
    Ok(out)
}

/// `ln(1 + c · S / rowsum)` with `S` the median row sum.
pub fn lognorm_rna<T: Scalar>(counts: ArrayView2<'_, f64>) -> Result<Array2<T>> {
    let order: Vec<usize> = (0..counts.ncols()).collect();
    let sums = row_sums::<T>(counts, &order);
    if sums.is_empty() {
        return Ok(Array2::zeros(counts.dim()));
    }
    if let Some(spot) = sums.iter().position(|s| *s <= T::zero()) {
        return Err(Error::EmptyRow { spot });
    }
    lognorm_with_sums(counts, &sums, median(&sums))
}

/// Ranks genes by within-bin z-score of log variance.
///
/// Genes are sorted by `ln(1 + mean)` and cut into up to 20 equal-occupancy
/// bins (at least five genes per bin). Genes with zero variance rank last.
pub fn select_hvg<T: Scalar>(lognorm: ArrayView2<'_, T>, n_top: usize) -> Result<HvgRanking<T>> {
    let (n, g) = lognorm.dim();
    if g < 2 {
        return Err(Error::InvalidValue(format!(
            "highly variable gene selection needs at least 2 genes, got {g}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidValue(
            "highly variable gene selection needs at least 2 spots".into(),
        ));
    }
    let n_t = T::of_usize(n);
    let mut means = vec![T::zero(); g];
    let mut log_vars = vec![T::neg_infinity(); g];
    for j in 0..g {
        let col = lognorm.column(j);
        let mean = col.iter().fold(T::zero(), |a, &v| a + v) / n_t;
        let ss = col.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
        let var = ss / (n_t - T::one());
        means[j] = mean;
        if var > T::zero() {
            log_vars[j] = var.ln();
        }
    }

    let mut by_mean: Vec<usize> = (0..g).collect();
    by_mean.sort_by(|&a, &b| {
        means[a]
            .ln_1p()
            .partial_cmp(&means[b].ln_1p())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let n_bins = (g / HVG_MIN_BIN_OCCUPANCY).clamp(1, HVG_BINS);
    let mut standardized = vec![T::neg_infinity(); g];
    for b in 0..n_bins {
        let members = &by_mean[b * g / n_bins..(b + 1) * g / n_bins];
        let finite: Vec<T> = members
            .iter()
            .map(|&j| log_vars[j])
            .filter(|v| v.is_finite())
            .collect();
        if finite.is_empty() {
            continue;
        }
        let k = T::of_usize(finite.len());
        let mu = finite.iter().fold(T::zero(), |a, &v| a + v) / k;
        let sd = if finite.len() > 1 {
            (finite.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / (k - T::one())).sqrt()
        } else {
            T::zero()
        };
        for &j in members {
            if log_vars[j].is_finite() {
                standardized[j] = if sd > T::zero() {
                    (log_vars[j] - mu) / sd
                } else {
                    T::zero()
                };
            }
        }
    }

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        standardized[b]
            .partial_cmp(&standardized[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(n_top.min(g));
    Ok(HvgRanking {
        standardized_variance: order.iter().map(|&j| standardized[j]).collect(),
        gene_index: order,
    })
}

/// Principal components from an exact eigendecomposition of the covariance.
///
/// When there are fewer rows than columns the N×N Gram matrix is decomposed
/// instead; both give the same leading eigenpairs. Each component's largest
/// magnitude loading is made positive.
pub fn fit_pca<T: Scalar>(
    x: ArrayView2<'_, T>,
    n_components: usize,
) -> Result<(PcaFit<T>, Array2<T>)> {
    let (n, d) = x.dim();
    if n_components > n.min(d) {
        return Err(Error::InvalidValue(format!(
            "{n_components} components requested from a {n}x{d} matrix"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidValue("PCA of an empty matrix".into()));
    }
    let n_t = T::of_usize(n);
    let mean = x.sum_axis(Axis(0)) / n_t;
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let dof = if n > 1 { n_t - T::one() } else { T::one() };

    let mut components = Array2::<T>::zeros((d, n_components));
    let mut variance = Array1::<T>::zeros(n_components);
    if d <= n {
        let cov = centered.t().dot(&centered) / dof;
        let eig = symmetric_eigen(cov.view())?;
        for c in 0..n_components {
            components.column_mut(c).assign(&eig.vectors.column(c));
            variance[c] = eig.values[c].max(T::zero());
        }
    } else {
        let gram = centered.dot(&centered.t()) / dof;
        let eig = symmetric_eigen(gram.view())?;
        let top = eig.values.first().copied().unwrap_or(T::zero()).max(T::zero());
        let cutoff = top * T::epsilon() * T::of_usize(n.max(d));
        let mut filled = 0;
        for c in 0..n_components {
            let lambda = eig.values[c];
            if lambda <= cutoff || lambda <= T::zero() {
                break;
            }
            let v = centered.t().dot(&eig.vectors.column(c)) / (lambda * dof).sqrt();
            components.column_mut(c).assign(&v);
            variance[c] = lambda;
            filled += 1;
        }
        complete_orthonormal(&mut components, filled);
    }
    fix_signs(&mut components);
    let scores = centered.dot(&components);
    Ok((
        PcaFit {
            mean,
            components,
            explained_variance: variance,
        },
        scores,
    ))
}

/// Fills columns `filled..` with unit vectors orthogonal to the earlier ones.
fn complete_orthonormal<T: Scalar>(components: &mut Array2<T>, filled: usize) {
    let (d, p) = components.dim();
    let mut next_basis = 0;
    for c in filled..p {
        while next_basis < d {
            let mut v = Array1::<T>::zeros(d);
            v[next_basis] = T::one();
            next_basis += 1;
            for _ in 0..2 {
                for prev in 0..c {
                    let col = components.column(prev);
                    let proj = col.dot(&v);
                    v.scaled_add(-proj, &col);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > T::of(1e-6) {
                components.column_mut(c).assign(&(v / norm));
                break;
            }
        }
    }
}

fn fix_signs<T: Scalar>(components: &mut Array2<T>) {
    for mut col in components.columns_mut() {
        let mut best = T::zero();
        let mut best_abs = T::zero();
        for &v in col.iter() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = v;
            }
        }
        if best < T::zero() {
            col.mapv_inplace(|v| -v);
        }
    }
}

/// Centered log-ratio with a +1 pseudo-count: `ln(c) − mean_j ln(c)`.
pub fn clr_protein<T: Scalar>(counts: ArrayView2<'_, f64>) -> Array2<T> {
    let p = T::of_usize(counts.ncols().max(1));
    let mut out = counts.mapv(|c| T::of(c + 1.0).ln());
    for mut row in out.rows_mut() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / p;
        row.mapv_inplace(|v| v - mean);
    }
    out
}

fn column_lookup(
    available: &[String],
    wanted: &[String],
) -> std::result::Result<Vec<usize>, Vec<String>> {
    let index: HashMap<&str, usize> = available
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();
    let mut columns = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for name in wanted {
        match index.get(name.as_str()) {
            Some(&i) => columns.push(i),
            None => missing.push(name.clone()),
        }
    }
    if missing.is_empty() {
        Ok(columns)
    } else {
        Err(missing)
    }
}

/// Library sizes summed over genes in name order, so column order never
/// changes the rounding.
fn library_sizes<T: Scalar>(ds: &SpatialOmicsDataset) -> Vec<T> {
    let mut order: Vec<usize> = (0..ds.n_genes()).collect();
    order.sort_by(|&a, &b| ds.gene_names[a].cmp(&ds.gene_names[b]));
    row_sums(ds.rna_counts.view(), &order)
}

/// Fits both pipelines on a paired dataset and returns model-ready matrices.
pub fn preprocess_training_pair<T: Scalar>(
    ds: &SpatialOmicsDataset,
    n_hvg: usize,
) -> Result<ProcessedDataset<T>> {
    let (protein_counts, protein_names) = match (&ds.protein_counts, &ds.protein_names) {
        (Some(c), Some(n)) => (c, n),
        _ => return Err(Error::ProteinMissing),
    };
    let p = protein_names.len();
    if n_hvg < p {
        return Err(Error::Config(format!(
            "n_hvg ({n_hvg}) must be at least the number of proteins ({p})"
        )));
    }
    let n = ds.n_spots();
    if p == 0 || p > n || p > ds.n_genes() {
        return Err(Error::DimensionMismatch(format!(
            "{p} proteins cannot be matched by PCA of {n} spots x {} genes",
            ds.n_genes()
        )));
    }

    let sums = library_sizes::<T>(ds);
    if let Some(spot) = sums.iter().position(|s| *s <= T::zero()) {
        return Err(Error::EmptyRow { spot });
    }
    let library_size = median(&sums);
    let lognorm = lognorm_with_sums(ds.rna_counts.view(), &sums, library_size)?;
    let ranking = select_hvg(lognorm.view(), n_hvg)?;
    let mut selected = ranking.gene_index.clone();
    selected.sort_unstable();
    let restricted = lognorm.select(Axis(1), &selected);
    let (rna_fit, _) = fit_pca(restricted.view(), p)?;
    let rna_pipeline = PreprocessState {
        transform_kind: TransformKind::RnaLognormPca,
        selected_names: selected.iter().map(|&j| ds.gene_names[j].clone()).collect(),
        library_size,
        per_spot_scale: sums.iter().map(|&s| library_size / s).collect(),
        pca_mean: rna_fit.mean,
        pca_components: rna_fit.components,
        explained_variance: rna_fit.explained_variance,
    };
    let x = apply_rna_pipeline(&rna_pipeline, ds)?;

    let clr = clr_protein::<T>(protein_counts.view());
    let (protein_fit, _) = fit_pca(clr.view(), p)?;
    let protein_pipeline = PreprocessState {
        transform_kind: TransformKind::ProteinClrPca,
        selected_names: protein_names.clone(),
        library_size: T::zero(),
        per_spot_scale: Vec::new(),
        pca_mean: protein_fit.mean,
        pca_components: protein_fit.components,
        explained_variance: protein_fit.explained_variance,
    };
    let y = apply_protein_pipeline(&protein_pipeline, ds)?;
    Ok(ProcessedDataset {
        x,
        y: Some(y),
        rna_pipeline,
        protein_pipeline: Some(protein_pipeline),
    })
}

/// Projects a dataset's RNA through a stored pipeline, matching genes by name.
pub fn apply_rna_pipeline<T: Scalar>(
    state: &PreprocessState<T>,
    ds: &SpatialOmicsDataset,
) -> Result<Array2<T>> {
    if state.transform_kind != TransformKind::RnaLognormPca {
        return Err(Error::Config("pipeline is not an RNA pipeline".into()));
    }
    let columns = column_lookup(&ds.gene_names, &state.selected_names).map_err(Error::GeneMissing)?;
    let sums = library_sizes::<T>(ds);
    let lognorm = lognorm_with_sums(
        ds.rna_counts.select(Axis(1), &columns).view(),
        &sums,
        state.library_size,
    )?;
    Ok(project(lognorm.view(), &state.pca_mean, &state.pca_components))
}

/// Projects a dataset's protein table into the stored protein PCA space.
pub fn apply_protein_pipeline<T: Scalar>(
    state: &PreprocessState<T>,
    ds: &SpatialOmicsDataset,
) -> Result<Array2<T>> {
    if state.transform_kind != TransformKind::ProteinClrPca {
        return Err(Error::Config("pipeline is not a protein pipeline".into()));
    }
    let (counts, names) = match (&ds.protein_counts, &ds.protein_names) {
        (Some(c), Some(n)) => (c, n),
        _ => return Err(Error::ProteinMissing),
    };
    let columns = column_lookup(names, &state.selected_names).map_err(Error::GeneMissing)?;
    let clr = clr_protein::<T>(counts.select(Axis(1), &columns).view());
    Ok(project(clr.view(), &state.pca_mean, &state.pca_components))
}

/// Maps PCA-space protein values back to CLR space: `ŷ·Cᵀ + mean`.
pub fn invert_protein_pipeline<T: Scalar>(
    state: &PreprocessState<T>,
    y_hat: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if state.transform_kind != TransformKind::ProteinClrPca {
        return Err(Error::Config("pipeline is not a protein pipeline".into()));
    }
    if y_hat.ncols() != state.pca_components.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} columns, pipeline has {} components",
            y_hat.ncols(),
            state.pca_components.ncols()
        )));
    }
    Ok(y_hat.dot(&state.pca_components.t()) + &state.pca_mean.view().insert_axis(Axis(0)))
}

/// Projects CLR-space values into the protein PCA space.
pub fn project_protein_clr<T: Scalar>(
    state: &PreprocessState<T>,
    clr: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if clr.ncols() != state.pca_mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} CLR columns for a pipeline over {} proteins",
            clr.ncols(),
            state.pca_mean.len()
        )));
    }
    Ok(project(clr, &state.pca_mean, &state.pca_components))
}
