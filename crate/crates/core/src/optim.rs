//! Adam with decoupled weight decay, and the full-batch training loop.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{encode, forward_backward, LossWeights, Losses, ModelParams, ModelShape, Tying};
use crate::dataset::SpatialOmicsDataset;
use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, build_spatial_graph, FeatureGraph, GraphKind, DEFAULT_K, DEFAULT_RADIUS};
use crate::preprocess::{apply_rna_pipeline, invert_protein_pipeline, PreprocessState, DEFAULT_N_HVG};
use crate::scalar::Scalar;

/// Relative improvement the early-stopping window must achieve.
pub const PATIENCE_MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1_loss: f64,
    pub beta2_loss: f64,
    pub adam_b1: f64,
    pub adam_b2: f64,
    pub adam_eps: f64,
    pub heads: usize,
    pub hidden: (usize, usize),
    pub k_neighbors: usize,
    pub graph_kind: GraphKind,
    pub radius: f64,
    pub n_hvg: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Stop once total loss has not improved for this many epochs.
    pub patience: Option<usize>,
    pub tying: Tying,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 12000,
            beta1_loss: 5.0,
            beta2_loss: 3.0,
            adam_b1: 0.9,
            adam_b2: 0.999,
            adam_eps: 1e-8,
            heads: 1,
            hidden: (64, 64),
            k_neighbors: DEFAULT_K,
            graph_kind: GraphKind::Knn,
            radius: DEFAULT_RADIUS,
            n_hvg: DEFAULT_N_HVG,
            seed: 0,
            log_every: 100,
            patience: None,
            tying: Tying::Tied,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        self.loss_weights()?;
        if !(0.0..1.0).contains(&self.adam_b1) || !(0.0..1.0).contains(&self.adam_b2) {
            return bad(format!("adam betas must lie in [0, 1), got ({}, {})", self.adam_b1, self.adam_b2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.heads == 0 || self.hidden.0 == 0 || self.hidden.1 == 0 {
            return bad("heads and hidden widths must be positive".into());
        }
        if self.graph_kind == GraphKind::Knn && self.k_neighbors == 0 {
            return bad("k_neighbors must be at least 1".into());
        }
        if !(self.radius >= 0.0) {
            return bad(format!("radius must be non-negative, got {}", self.radius));
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.beta1_loss, self.beta2_loss)
    }

    pub fn model_shape(&self, features: usize) -> ModelShape {
        ModelShape::new(features, self.hidden.0, self.hidden.1, self.heads).with_tying(self.tying)
    }
}

/// Builds the feature graph the config asks for: KNN over `x` or a radius
/// graph over the spot coordinates.
pub fn build_graph<T: Scalar>(cfg: &TrainConfig, x: ArrayView2<'_, T>, coords: ArrayView2<'_, f64>) -> Result<FeatureGraph> {
    match cfg.graph_kind {
        GraphKind::Knn => build_knn_graph(x, cfg.k_neighbors),
        GraphKind::SpatialRadius => build_spatial_graph(coords, cfg.radius),
    }
}

/// First and second moment estimates, one buffer per distinct tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Number of completed steps.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update with decoupled weight decay.
///
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let grad_tensors = grads.named_tensors();
    if grad_tensors.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient tensors for {} optimizer slots",
            grad_tensors.len(),
            state.m.len()
        )));
    }
    for ((info, g), m) in grad_tensors.iter().zip(&state.m) {
        if g.len() != m.len() {
            return Err(Error::ShapeMismatch(format!("gradient {} has wrong size", info.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(info.name.clone()));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let lr = T::of(cfg.lr);
    let b1 = T::of(cfg.adam_b1);
    let b2 = T::of(cfg.adam_b2);
    let eps = T::of(cfg.adam_eps);
    let decay = T::one() - lr * T::of(cfg.weight_decay);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);

    for (((p, (_, g)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub l_rna: f64,
    pub l_protein: f64,
}

/// Per-epoch losses plus wall-clock timings.
///
/// Losses are fully determined by the inputs; `seconds` is the only
/// run-dependent column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub seconds: Vec<f64>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with header `epoch,total,l_rna,l_protein,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,l_rna,l_protein,seconds\n");
        for (r, s) in self.records.iter().zip(&self.seconds) {
            out.push_str(&format!("{},{:?},{:?},{:?},{:.6}\n", r.epoch, r.total, r.l_rna, r.l_protein, s));
        }
        out
    }
}

/// Trains from a fresh initialization. See [`train_with_observer`].
pub fn train<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    graph: &FeatureGraph,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainLog)> {
    train_with_observer(x, y, graph, cfg, |_, _, _| {})
}

/// Full-batch training; `observer` sees the epoch number, the parameters
/// after that epoch's update and the epoch's losses.
pub fn train_with_observer<T: Scalar, F>(
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    graph: &FeatureGraph,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(ModelParams<T>, TrainLog)>
where
    F: FnMut(usize, &ModelParams<T>, &Losses<T>),
{
    cfg.validate()?;
    if x.nrows() != graph.n_nodes || y.nrows() != x.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "x has {} rows, y has {}, graph has {} nodes",
            x.nrows(),
            y.nrows(),
            graph.n_nodes
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "x has {} columns but y has {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let weights = cfg.loss_weights()?;
    let neighbors = graph.neighbor_lists();
    let mut params = ModelParams::init(cfg.model_shape(x.ncols()), cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let (losses, grads) = forward_backward(&params, x, y, &neighbors, weights)?;
        adam_step(&mut params, &grads, &mut state, cfg)?;
        let total = losses.total.as_f64();
        log.records.push(EpochRecord {
            epoch,
            total,
            l_rna: losses.l_rna.as_f64(),
            l_protein: losses.l_protein.as_f64(),
        });
        log.seconds.push(started.elapsed().as_secs_f64());
        observer(epoch, &params, &losses);

        if let Some(patience) = cfg.patience {
            if total < best * (1.0 - PATIENCE_MIN_IMPROVEMENT) || epoch == 1 {
                best = total;
                best_epoch = epoch;
            } else if epoch - best_epoch >= patience {
                break;
            }
        }
    }
    Ok((params, log))
}

/// PCA-space protein prediction for an RNA-only dataset.
pub fn predict_embedding<T: Scalar>(
    params: &ModelParams<T>,
    rna_pipeline: &PreprocessState<T>,
    ds: &SpatialOmicsDataset,
    cfg: &TrainConfig,
) -> Result<Array2<T>> {
    let x = apply_rna_pipeline(rna_pipeline, ds)?;
    let graph = build_graph(cfg, x.view(), ds.coords.view())?;
    let (z, _) = encode(params, x.view(), &graph.neighbor_lists())?;
    Ok(z)
}

/// CLR-space protein prediction for an RNA-only dataset.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    rna_pipeline: &PreprocessState<T>,
    protein_pipeline: &PreprocessState<T>,
    ds: &SpatialOmicsDataset,
    cfg: &TrainConfig,
) -> Result<Array2<T>> {
    let z = predict_embedding(params, rna_pipeline, ds, cfg)?;
    invert_protein_pipeline(protein_pipeline, z.view())
}
