//! Multi-head GATv2 attention layer with hand-written reverse-mode gradients.
//!
//! Per head `k`, with `N(i)` the in-neighbors of node `i` (self included):
//!
//! ```text
//! z_j    = W h_j
//! e_ij   = a · LeakyReLU(W_a [h_i ‖ h_j])
//! α_ij   = softmax_{j ∈ N(i)} e_ij
//! out_i  = (1/H) Σ_k Σ_{j ∈ N(i)} α_ij z_j
//! ```
//!
//! `W_a [h_i ‖ h_j]` is evaluated as `W_a,left h_i + W_a,right h_j`, so every
//! per-edge quantity is an `F_out` vector and no concatenation is materialized.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NeighborLists;
use crate::scalar::Scalar;

/// Negative-branch slope of the LeakyReLU inside the attention score.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Parameters of one attention layer, one entry per head.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams<T> {
    /// `F_out × F_in` feature transforms.
    pub w: Vec<Array2<T>>,
    /// `F_out × 2·F_in` attention transforms applied to `[h_i ‖ h_j]`.
    pub w_a: Vec<Array2<T>>,
    /// Length-`F_out` attention vectors.
    pub a: Vec<Array1<T>>,
}

impl<T: Scalar> GatLayerParams<T> {
    /// Glorot-uniform initialization.
    pub fn init<R: Rng + ?Sized>(f_in: usize, f_out: usize, heads: usize, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(-bound..=bound)))
        };
        let mut w = Vec::with_capacity(heads);
        let mut w_a = Vec::with_capacity(heads);
        let mut a = Vec::with_capacity(heads);
        for _ in 0..heads {
            w.push(uniform(f_out, f_in, f_in, f_out));
            w_a.push(uniform(f_out, 2 * f_in, 2 * f_in, f_out));
            a.push(uniform(f_out, 1, f_out, 1).column(0).to_owned());
        }
        Self { w, w_a, a }
    }

    pub fn zeros(f_in: usize, f_out: usize, heads: usize) -> Self {
        Self {
            w: vec![Array2::zeros((f_out, f_in)); heads],
            w_a: vec![Array2::zeros((f_out, 2 * f_in)); heads],
            a: vec![Array1::zeros(f_out); heads],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.f_in(), self.f_out(), self.heads())
    }

    pub fn heads(&self) -> usize {
        self.w.len()
    }

    pub fn f_in(&self) -> usize {
        self.w.first().map_or(0, |w| w.ncols())
    }

    pub fn f_out(&self) -> usize {
        self.w.first().map_or(0, |w| w.nrows())
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (x, y) in self.w.iter_mut().zip(&other.w) {
            *x += y;
        }
        for (x, y) in self.w_a.iter_mut().zip(&other.w_a) {
            *x += y;
        }
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.w_a.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.a.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Everything the forward pass keeps for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivation<T> {
    /// `H × E` attention coefficients, edges in [`NeighborLists`] order.
    pub alpha: Array2<T>,
    /// `H × E` raw scores `e_ij`.
    pub pre_softmax: Array2<T>,
    /// Per head, `E × F_out` LeakyReLU inputs `W_a [h_i ‖ h_j]`.
    pub attention_input: Vec<Array2<T>>,
    /// Per head, `N × F_out` transformed features `W h_j`.
    pub transformed: Vec<Array2<T>>,
    /// `N × F_out` head-averaged output.
    pub output: Array2<T>,
}

#[inline]
fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x < T::zero() {
        slope * x
    } else {
        x
    }
}

#[inline]
fn leaky_relu_grad<T: Scalar>(x: T, slope: T) -> T {
    if x < T::zero() {
        slope
    } else {
        T::one()
    }
}

fn check_inputs<T: Scalar>(
    params: &GatLayerParams<T>,
    h: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
) -> Result<()> {
    if params.heads() == 0 {
        return Err(Error::ShapeMismatch("attention layer has no heads".into()));
    }
    if h.ncols() != params.f_in() {
        return Err(Error::ShapeMismatch(format!(
            "layer expects {} input features, got {}",
            params.f_in(),
            h.ncols()
        )));
    }
    if h.nrows() != neighbors.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for a graph of {} nodes",
            h.nrows(),
            neighbors.n_nodes()
        )));
    }
    if let Some(i) = (0..neighbors.n_nodes()).find(|&i| neighbors.of(i).is_empty()) {
        return Err(Error::ShapeMismatch(format!("node {i} has no in-neighbors")));
    }
    Ok(())
}

fn check_alpha<T: Scalar>(heads: usize, alpha: &Array2<T>, neighbors: &NeighborLists) -> Result<()> {
    if alpha.dim() != (heads, neighbors.n_edges()) {
        return Err(Error::AlphaMismatch(format!(
            "coefficients are {:?}, expected ({heads}, {})",
            alpha.dim(),
            neighbors.n_edges()
        )));
    }
    Ok(())
}

/// Full attention forward pass.
pub fn gat_forward<T: Scalar>(
    params: &GatLayerParams<T>,
    h: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
) -> Result<LayerActivation<T>> {
    check_inputs(params, h, neighbors)?;
    let heads = params.heads();
    let n = h.nrows();
    let f_in = params.f_in();
    let f_out = params.f_out();
    let n_edges = neighbors.n_edges();
    let slope = T::of(LEAKY_RELU_SLOPE);
    let inv_heads = T::one() / T::of_usize(heads);

    let mut alpha = Array2::<T>::zeros((heads, n_edges));
    let mut scores = Array2::<T>::zeros((heads, n_edges));
    let mut attention_input = Vec::with_capacity(heads);
    let mut transformed = Vec::with_capacity(heads);
    let mut output = Array2::<T>::zeros((n, f_out));

    for k in 0..heads {
        let z = h.dot(&params.w[k].t());
        let left = h.dot(&params.w_a[k].slice(s![.., ..f_in]).t());
        let right = h.dot(&params.w_a[k].slice(s![.., f_in..]).t());
        let a = &params.a[k];
        let mut pre = Array2::<T>::zeros((n_edges, f_out));
        for i in 0..n {
            let range = neighbors.range(i);
            let mut max_score = T::neg_infinity();
            for e in range.clone() {
                let j = neighbors.indices[e];
                let mut score = T::zero();
                for f in 0..f_out {
                    let v = left[[i, f]] + right[[j, f]];
                    pre[[e, f]] = v;
                    score += a[f] * leaky_relu(v, slope);
                }
                scores[[k, e]] = score;
                max_score = max_score.max(score);
            }
            let mut denom = T::zero();
            for e in range.clone() {
                let w = (scores[[k, e]] - max_score).exp();
                alpha[[k, e]] = w;
                denom += w;
            }
            for e in range.clone() {
                alpha[[k, e]] /= denom;
                let coef = alpha[[k, e]] * inv_heads;
                let j = neighbors.indices[e];
                for f in 0..f_out {
                    output[[i, f]] += coef * z[[j, f]];
                }
            }
        }
        attention_input.push(pre);
        transformed.push(z);
    }
    if output.iter().any(|v| !v.is_finite()) || scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("attention layer".into()));
    }
    Ok(LayerActivation {
        alpha,
        pre_softmax: scores,
        attention_input,
        transformed,
        output,
    })
}

/// Aggregation with externally supplied coefficients; only `W` is used.
pub fn gat_forward_with_fixed_alpha<T: Scalar>(
    params: &GatLayerParams<T>,
    h: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
    alpha: &Array2<T>,
) -> Result<Array2<T>> {
    check_inputs(params, h, neighbors)?;
    check_alpha(params.heads(), alpha, neighbors)?;
    let inv_heads = T::one() / T::of_usize(params.heads());
    let mut output = Array2::<T>::zeros((h.nrows(), params.f_out()));
    for (k, w) in params.w.iter().enumerate() {
        let z = h.dot(&w.t());
        aggregate(&z, neighbors, alpha.row(k), inv_heads, &mut output);
    }
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("fixed-coefficient layer".into()));
    }
    Ok(output)
}

fn aggregate<T: Scalar>(
    z: &Array2<T>,
    neighbors: &NeighborLists,
    alpha: ndarray::ArrayView1<'_, T>,
    scale: T,
    output: &mut Array2<T>,
) {
    let f_out = z.ncols();
    for i in 0..neighbors.n_nodes() {
        for e in neighbors.range(i) {
            let coef = alpha[e] * scale;
            let j = neighbors.indices[e];
            for f in 0..f_out {
                output[[i, f]] += coef * z[[j, f]];
            }
        }
    }
}

/// Scatters `α_ij · g_i` back onto the source nodes: returns `dz`.
fn scatter_to_sources<T: Scalar>(
    grad: &Array2<T>,
    neighbors: &NeighborLists,
    alpha: ndarray::ArrayView1<'_, T>,
) -> Array2<T> {
    let mut dz = Array2::<T>::zeros(grad.dim());
    let f_out = grad.ncols();
    for i in 0..neighbors.n_nodes() {
        for e in neighbors.range(i) {
            let j = neighbors.indices[e];
            let coef = alpha[e];
            for f in 0..f_out {
                dz[[j, f]] += coef * grad[[i, f]];
            }
        }
    }
    dz
}

fn check_grad_output<T: Scalar>(grad_output: &Array2<T>, n: usize, f_out: usize) -> Result<()> {
    if grad_output.dim() != (n, f_out) {
        return Err(Error::ShapeMismatch(format!(
            "output gradient is {:?}, expected ({n}, {f_out})",
            grad_output.dim()
        )));
    }
    Ok(())
}

/// Reverse pass of [`gat_forward`].
///
/// Returns parameter gradients and `∂L/∂h` given `∂L/∂output`. The LeakyReLU
/// derivative is the slope for negative inputs and 1 otherwise.
pub fn gat_backward<T: Scalar>(
    params: &GatLayerParams<T>,
    h: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
    activation: &LayerActivation<T>,
    grad_output: &Array2<T>,
) -> Result<(GatLayerParams<T>, Array2<T>)> {
    check_inputs(params, h, neighbors)?;
    check_alpha(params.heads(), &activation.alpha, neighbors)?;
    let n = h.nrows();
    let f_in = params.f_in();
    let f_out = params.f_out();
    check_grad_output(grad_output, n, f_out)?;
    let slope = T::of(LEAKY_RELU_SLOPE);
    let heads = params.heads();
    let head_grad = grad_output / T::of_usize(heads);

    let mut grads = params.zeros_like();
    let mut grad_h = Array2::<T>::zeros(h.dim());
    let mut d_alpha = vec![T::zero(); neighbors.n_edges()];
    for k in 0..heads {
        let alpha = activation.alpha.row(k);
        let z = &activation.transformed[k];
        let pre = &activation.attention_input[k];
        let a = &params.a[k];

        let dz = scatter_to_sources(&head_grad, neighbors, alpha);
        let mut d_left = Array2::<T>::zeros((n, f_out));
        let mut d_right = Array2::<T>::zeros((n, f_out));
        for i in 0..n {
            let range = neighbors.range(i);
            let mut weighted = T::zero();
            for e in range.clone() {
                let j = neighbors.indices[e];
                let mut dot = T::zero();
                for f in 0..f_out {
                    dot += head_grad[[i, f]] * z[[j, f]];
                }
                d_alpha[e] = dot;
                weighted += alpha[e] * dot;
            }
            for e in range {
                let j = neighbors.indices[e];
                let d_score = alpha[e] * (d_alpha[e] - weighted);
                for f in 0..f_out {
                    let v = pre[[e, f]];
                    grads.a[k][f] += d_score * leaky_relu(v, slope);
                    let d_pre = d_score * a[f] * leaky_relu_grad(v, slope);
                    d_left[[i, f]] += d_pre;
                    d_right[[j, f]] += d_pre;
                }
            }
        }
        grads.w[k] = dz.t().dot(&h);
        grads.w_a[k]
            .slice_mut(s![.., ..f_in])
            .assign(&d_left.t().dot(&h));
        grads.w_a[k]
            .slice_mut(s![.., f_in..])
            .assign(&d_right.t().dot(&h));
        grad_h += &dz.dot(&params.w[k]);
        grad_h += &d_left.dot(&params.w_a[k].slice(s![.., ..f_in]));
        grad_h += &d_right.dot(&params.w_a[k].slice(s![.., f_in..]));
    }
    Ok((grads, grad_h))
}

/// Reverse pass of [`gat_forward_with_fixed_alpha`]; the coefficients are
/// constants, so only `W` and `h` receive gradient (`w_a`, `a` stay zero).
pub fn gat_backward_with_fixed_alpha<T: Scalar>(
    params: &GatLayerParams<T>,
    h: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
    alpha: &Array2<T>,
    grad_output: &Array2<T>,
) -> Result<(GatLayerParams<T>, Array2<T>)> {
    check_inputs(params, h, neighbors)?;
    check_alpha(params.heads(), alpha, neighbors)?;
    check_grad_output(grad_output, h.nrows(), params.f_out())?;
    let head_grad = grad_output / T::of_usize(params.heads());
    let mut grads = params.zeros_like();
    let mut grad_h = Array2::<T>::zeros(h.dim());
    for k in 0..params.heads() {
        let dz = scatter_to_sources(&head_grad, neighbors, alpha.row(k));
        grads.w[k] = dz.t().dot(&h);
        grad_h += &dz.dot(&params.w[k]);
    }
    Ok((grads, grad_h))
}

/// Per-node sums of `alpha` for each head (each should be 1).
pub fn alpha_row_sums<T: Scalar>(alpha: &Array2<T>, neighbors: &NeighborLists) -> Array2<T> {
    let mut sums = Array2::<T>::zeros((alpha.nrows(), neighbors.n_nodes()));
    for (k, row) in alpha.axis_iter(Axis(0)).enumerate() {
        for i in 0..neighbors.n_nodes() {
            sums[[k, i]] = neighbors.range(i).map(|e| row[e]).fold(T::zero(), |a, b| a + b);
        }
    }
    sums
}
