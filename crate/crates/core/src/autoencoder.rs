//! Graph-attention autoencoder with a weight-tied decoder and a two-term loss.
//!
//! Encoder: `h1 = ReLU(GAT1(x))`, `h2 = ReLU(GAT2(h1))`, `z = W_fc h2 + b_fc`.
//! The embedding `z` is the predicted protein expression (PCA space).
//!
//! Decoder: `d1 = ReLU(GAT1'(z))`, `d2 = ReLU(GAT2'(d1))`, `x̂ = W̄_fc d2 + b̄_fc`.
//! With tying, `GAT1'`/`GAT2'` are the encoder layers themselves and their
//! attention coefficients are copied from the encoder in mirrored order
//! (`GAT1'` uses encoder layer 2's coefficients, `GAT2'` uses layer 1's).
//! Copied coefficients are constants for differentiation.
//!
//! Loss: `β1 Σ‖x − x̂‖² + β2 Σ‖y − z‖²`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    gat_backward, gat_backward_with_fixed_alpha, gat_forward, gat_forward_with_fixed_alpha,
    GatLayerParams, LayerActivation,
};
use crate::error::{Error, Result};
use crate::graph::NeighborLists;
use crate::scalar::Scalar;

/// How the decoder's attention layers relate to the encoder's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    /// Decoder layers are the encoder layers; coefficients are copied.
    Tied,
    /// Decoder layers own their weights but still copy the encoder coefficients.
    SharedAttention,
    /// Decoder layers own their weights and compute their own attention.
    Untied,
}

/// Layer widths and head count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Input and embedding width (the number of proteins).
    pub features: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub heads: usize,
    pub tying: Tying,
}

impl ModelShape {
    pub fn new(features: usize, hidden1: usize, hidden2: usize, heads: usize) -> Self {
        Self {
            features,
            hidden1,
            hidden2,
            heads,
            tying: Tying::Tied,
        }
    }

    pub fn with_tying(mut self, tying: Tying) -> Self {
        self.tying = tying;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden1 == 0 || self.hidden2 == 0 || self.heads == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Decoder attention layers that are not aliases of the encoder's.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayers<T> {
    pub layer1: GatLayerParams<T>,
    pub layer2: GatLayerParams<T>,
    /// Whether these layers compute their own attention coefficients.
    pub own_attention: bool,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub enc_layer1: GatLayerParams<T>,
    pub enc_layer2: GatLayerParams<T>,
    /// `P × F_h2`.
    pub enc_fc_w: Array2<T>,
    pub enc_fc_b: Array1<T>,
    /// `None` when the decoder is tied to the encoder layers.
    pub decoder: Option<DecoderLayers<T>>,
    /// `P × F_h2`.
    pub dec_fc_w: Array2<T>,
    pub dec_fc_b: Array1<T>,
}

/// Shape and name of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

fn layer_tensors<'a, T>(prefix: &str, layer: &'a GatLayerParams<T>, out: &mut Vec<(TensorInfo, &'a [T])>) {
    for (k, w) in layer.w.iter().enumerate() {
        out.push((TensorInfo { name: format!("{prefix}.w.{k}"), shape: w.shape().to_vec() }, w.as_slice().expect("standard layout")));
    }
    for (k, w) in layer.w_a.iter().enumerate() {
        out.push((TensorInfo { name: format!("{prefix}.w_a.{k}"), shape: w.shape().to_vec() }, w.as_slice().expect("standard layout")));
    }
    for (k, a) in layer.a.iter().enumerate() {
        out.push((TensorInfo { name: format!("{prefix}.a.{k}"), shape: a.shape().to_vec() }, a.as_slice().expect("standard layout")));
    }
}

fn layer_tensors_mut<'a, T>(layer: &'a mut GatLayerParams<T>, out: &mut Vec<&'a mut [T]>) {
    for w in layer.w.iter_mut() {
        out.push(w.as_slice_mut().expect("standard layout"));
    }
    for w in layer.w_a.iter_mut() {
        out.push(w.as_slice_mut().expect("standard layout"));
    }
    for a in layer.a.iter_mut() {
        out.push(a.as_slice_mut().expect("standard layout"));
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelShape {
            features: p,
            hidden1: h1,
            hidden2: h2,
            heads,
            tying,
        } = shape;
        let enc_layer1 = GatLayerParams::init(p, h1, heads, &mut rng);
        let enc_layer2 = GatLayerParams::init(h1, h2, heads, &mut rng);
        let fc = GatLayerParams::<T>::init(h2, p, 1, &mut rng);
        let enc_fc_w = fc.w.into_iter().next().expect("one head");
        let decoder = match tying {
            Tying::Tied => None,
            Tying::SharedAttention | Tying::Untied => Some(DecoderLayers {
                layer1: GatLayerParams::init(p, h1, heads, &mut rng),
                layer2: GatLayerParams::init(h1, h2, heads, &mut rng),
                own_attention: tying == Tying::Untied,
            }),
        };
        let dec_fc = GatLayerParams::<T>::init(h2, p, 1, &mut rng);
        Ok(Self {
            enc_layer1,
            enc_layer2,
            enc_fc_w,
            enc_fc_b: Array1::zeros(p),
            decoder,
            dec_fc_w: dec_fc.w.into_iter().next().expect("one head"),
            dec_fc_b: Array1::zeros(p),
        })
    }

    /// All-zero tensors with the given structure.
    pub fn zeros(shape: ModelShape) -> Self {
        let ModelShape { features: p, hidden1: h1, hidden2: h2, heads, tying } = shape;
        Self {
            enc_layer1: GatLayerParams::zeros(p, h1, heads),
            enc_layer2: GatLayerParams::zeros(h1, h2, heads),
            enc_fc_w: Array2::zeros((p, h2)),
            enc_fc_b: Array1::zeros(p),
            decoder: match tying {
                Tying::Tied => None,
                Tying::SharedAttention | Tying::Untied => Some(DecoderLayers {
                    layer1: GatLayerParams::zeros(p, h1, heads),
                    layer2: GatLayerParams::zeros(h1, h2, heads),
                    own_attention: tying == Tying::Untied,
                }),
            },
            dec_fc_w: Array2::zeros((p, h2)),
            dec_fc_b: Array1::zeros(p),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            features: self.enc_layer1.f_in(),
            hidden1: self.enc_layer1.f_out(),
            hidden2: self.enc_layer2.f_out(),
            heads: self.enc_layer1.heads(),
            tying: self.tying(),
        }
    }

    pub fn tying(&self) -> Tying {
        match &self.decoder {
            None => Tying::Tied,
            Some(d) if d.own_attention => Tying::Untied,
            Some(_) => Tying::SharedAttention,
        }
    }

    /// The attention layer the decoder applies first (an encoder alias when tied).
    pub fn decoder_layer1(&self) -> &GatLayerParams<T> {
        self.decoder.as_ref().map_or(&self.enc_layer1, |d| &d.layer1)
    }

    pub fn decoder_layer2(&self) -> &GatLayerParams<T> {
        self.decoder.as_ref().map_or(&self.enc_layer2, |d| &d.layer2)
    }

    /// A zero-valued tensor set with the same structure.
    pub fn zeros_like(&self) -> Self {
        Self {
            enc_layer1: self.enc_layer1.zeros_like(),
            enc_layer2: self.enc_layer2.zeros_like(),
            enc_fc_w: Array2::zeros(self.enc_fc_w.dim()),
            enc_fc_b: Array1::zeros(self.enc_fc_b.len()),
            decoder: self.decoder.as_ref().map(|d| DecoderLayers {
                layer1: d.layer1.zeros_like(),
                layer2: d.layer2.zeros_like(),
                own_attention: d.own_attention,
            }),
            dec_fc_w: Array2::zeros(self.dec_fc_w.dim()),
            dec_fc_b: Array1::zeros(self.dec_fc_b.len()),
        }
    }

    /// Every distinct tensor once, in a fixed order. Tied decoder layers are
    /// not listed separately because they are the encoder tensors.
    pub fn named_tensors(&self) -> Vec<(TensorInfo, &[T])> {
        let mut out = Vec::new();
        layer_tensors("enc1", &self.enc_layer1, &mut out);
        layer_tensors("enc2", &self.enc_layer2, &mut out);
        out.push((TensorInfo { name: "enc_fc.w".into(), shape: self.enc_fc_w.shape().to_vec() }, self.enc_fc_w.as_slice().expect("standard layout")));
        out.push((TensorInfo { name: "enc_fc.b".into(), shape: self.enc_fc_b.shape().to_vec() }, self.enc_fc_b.as_slice().expect("standard layout")));
        if let Some(d) = &self.decoder {
            layer_tensors("dec1", &d.layer1, &mut out);
            layer_tensors("dec2", &d.layer2, &mut out);
        }
        out.push((TensorInfo { name: "dec_fc.w".into(), shape: self.dec_fc_w.shape().to_vec() }, self.dec_fc_w.as_slice().expect("standard layout")));
        out.push((TensorInfo { name: "dec_fc.b".into(), shape: self.dec_fc_b.shape().to_vec() }, self.dec_fc_b.as_slice().expect("standard layout")));
        out
    }

    /// Mutable views in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        layer_tensors_mut(&mut self.enc_layer1, &mut out);
        layer_tensors_mut(&mut self.enc_layer2, &mut out);
        out.push(self.enc_fc_w.as_slice_mut().expect("standard layout"));
        out.push(self.enc_fc_b.as_slice_mut().expect("standard layout"));
        if let Some(d) = &mut self.decoder {
            layer_tensors_mut(&mut d.layer1, &mut out);
            layer_tensors_mut(&mut d.layer2, &mut out);
        }
        out.push(self.dec_fc_w.as_slice_mut().expect("standard layout"));
        out.push(self.dec_fc_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Non-negative loss weights, not both zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl LossWeights {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        if !(beta1 >= 0.0 && beta2 >= 0.0) || !beta1.is_finite() || !beta2.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({beta1}, {beta2})"
            )));
        }
        if beta1 == 0.0 && beta2 == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(Self { beta1, beta2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 5.0,
            beta2: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses<T> {
    pub total: T,
    pub l_rna: T,
    pub l_protein: T,
}

/// Intermediate values of the encoder.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    pub layer1: LayerActivation<T>,
    pub h1: Array2<T>,
    pub layer2: LayerActivation<T>,
    pub h2: Array2<T>,
}

/// Intermediate values of the decoder.
#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    /// Present when the decoder computes its own attention.
    pub layer1: Option<LayerActivation<T>>,
    pub pre1: Array2<T>,
    pub d1: Array2<T>,
    pub layer2: Option<LayerActivation<T>>,
    pub pre2: Array2<T>,
    pub d2: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub encoder: EncoderTrace<T>,
    pub decoder: DecoderTrace<T>,
    /// `N × P` embedding, the protein prediction.
    pub z: Array2<T>,
    /// `N × P` RNA reconstruction.
    pub x_hat: Array2<T>,
}

fn relu<T: Scalar>(m: &Array2<T>) -> Array2<T> {
    m.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

fn relu_backward<T: Scalar>(grad: &Array2<T>, pre: &Array2<T>) -> Array2<T> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    out
}

fn linear<T: Scalar>(h: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    h.dot(&w.t()) + &b.view().insert_axis(Axis(0))
}

/// Encoder pass; returns the embedding and the trace needed by the decoder.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
) -> Result<(Array2<T>, EncoderTrace<T>)> {
    if x.ncols() != params.shape().features {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} input features, got {}",
            params.shape().features,
            x.ncols()
        )));
    }
    let layer1 = gat_forward(&params.enc_layer1, x, neighbors)?;
    let h1 = relu(&layer1.output);
    let layer2 = gat_forward(&params.enc_layer2, h1.view(), neighbors)?;
    let h2 = relu(&layer2.output);
    let z = linear(&h2, &params.enc_fc_w, &params.enc_fc_b);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("encoder output".into()));
    }
    Ok((
        z,
        EncoderTrace {
            layer1,
            h1,
            layer2,
            h2,
        },
    ))
}

/// Decoder pass from the embedding back to RNA space.
pub fn decode<T: Scalar>(
    params: &ModelParams<T>,
    z: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
    encoder: &EncoderTrace<T>,
) -> Result<(Array2<T>, DecoderTrace<T>)> {
    let own_attention = params.decoder.as_ref().is_some_and(|d| d.own_attention);
    let (layer1, pre1) = if own_attention {
        let act = gat_forward(params.decoder_layer1(), z, neighbors)?;
        let pre = act.output.clone();
        (Some(act), pre)
    } else {
        let pre = gat_forward_with_fixed_alpha(
            params.decoder_layer1(),
            z,
            neighbors,
            &encoder.layer2.alpha,
        )?;
        (None, pre)
    };
    let d1 = relu(&pre1);
    let (layer2, pre2) = if own_attention {
        let act = gat_forward(params.decoder_layer2(), d1.view(), neighbors)?;
        let pre = act.output.clone();
        (Some(act), pre)
    } else {
        let pre = gat_forward_with_fixed_alpha(
            params.decoder_layer2(),
            d1.view(),
            neighbors,
            &encoder.layer1.alpha,
        )?;
        (None, pre)
    };
    let d2 = relu(&pre2);
    let x_hat = linear(&d2, &params.dec_fc_w, &params.dec_fc_b);
    if x_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("decoder output".into()));
    }
    Ok((
        x_hat,
        DecoderTrace {
            layer1,
            pre1,
            d1,
            layer2,
            pre2,
            d2,
        },
    ))
}

/// Encoder followed by decoder.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
) -> Result<ForwardTrace<T>> {
    let (z, encoder) = encode(params, x, neighbors)?;
    let (x_hat, decoder) = decode(params, z.view(), neighbors, &encoder)?;
    Ok(ForwardTrace {
        encoder,
        decoder,
        z,
        x_hat,
    })
}

fn squared_error<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&u, &v)| acc + (u - v) * (u - v))
}

/// `l_rna = Σ‖x − x̂‖²`, `l_protein = Σ‖y − z‖²`, `total = β1 l_rna + β2 l_protein`.
pub fn loss<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    x_hat: ArrayView2<'_, T>,
    z: ArrayView2<'_, T>,
    weights: LossWeights,
) -> Result<Losses<T>> {
    if x.dim() != x_hat.dim() || y.dim() != z.dim() {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs x {:?} / x̂ {:?}, y {:?} / z {:?}",
            x.dim(),
            x_hat.dim(),
            y.dim(),
            z.dim()
        )));
    }
    let l_rna = squared_error(x, x_hat);
    let l_protein = squared_error(y, z);
    Ok(Losses {
        total: T::of(weights.beta1) * l_rna + T::of(weights.beta2) * l_protein,
        l_rna,
        l_protein,
    })
}

/// Loss and exact gradients for every tensor.
///
/// Tied attention layers receive the sum of their encoder-use and decoder-use
/// gradients.
pub fn forward_backward<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
    weights: LossWeights,
) -> Result<(Losses<T>, ModelParams<T>)> {
    let trace = forward(params, x, neighbors)?;
    let losses = loss(x, y, trace.x_hat.view(), trace.z.view(), weights)?;
    let grads = backward(params, x, y, neighbors, weights, &trace)?;
    Ok((losses, grads))
}

/// Reverse pass over a recorded [`ForwardTrace`].
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    neighbors: &NeighborLists,
    weights: LossWeights,
    trace: &ForwardTrace<T>,
) -> Result<ModelParams<T>> {
    let two = T::of(2.0);
    let mut grads = params.zeros_like();
    let enc = &trace.encoder;
    let dec = &trace.decoder;

    // Decoder output layer.
    let d_xhat = (&trace.x_hat - &x) * (two * T::of(weights.beta1));
    grads.dec_fc_w = d_xhat.t().dot(&dec.d2);
    grads.dec_fc_b = d_xhat.sum_axis(Axis(0));
    let d_d2 = d_xhat.dot(&params.dec_fc_w);
    let d_pre2 = relu_backward(&d_d2, &dec.pre2);

    // Decoder attention layers.
    let (g_dec2, d_d1) = match &dec.layer2 {
        Some(act) => gat_backward(params.decoder_layer2(), dec.d1.view(), neighbors, act, &d_pre2)?,
        None => gat_backward_with_fixed_alpha(
            params.decoder_layer2(),
            dec.d1.view(),
            neighbors,
            &enc.layer1.alpha,
            &d_pre2,
        )?,
    };
    let d_pre1 = relu_backward(&d_d1, &dec.pre1);
    let (g_dec1, d_z_from_decoder) = match &dec.layer1 {
        Some(act) => gat_backward(params.decoder_layer1(), trace.z.view(), neighbors, act, &d_pre1)?,
        None => gat_backward_with_fixed_alpha(
            params.decoder_layer1(),
            trace.z.view(),
            neighbors,
            &enc.layer2.alpha,
            &d_pre1,
        )?,
    };

    // Embedding receives the protein term plus the decoder path.
    let mut d_z = (&trace.z - &y) * (two * T::of(weights.beta2));
    d_z += &d_z_from_decoder;

    grads.enc_fc_w = d_z.t().dot(&enc.h2);
    grads.enc_fc_b = d_z.sum_axis(Axis(0));
    let d_h2 = d_z.dot(&params.enc_fc_w);
    let d_pre_e2 = relu_backward(&d_h2, &enc.layer2.output);
    let (g_enc2, d_h1) = gat_backward(&params.enc_layer2, enc.h1.view(), neighbors, &enc.layer2, &d_pre_e2)?;
    let d_pre_e1 = relu_backward(&d_h1, &enc.layer1.output);
    let (g_enc1, _) = gat_backward(&params.enc_layer1, x, neighbors, &enc.layer1, &d_pre_e1)?;

    grads.enc_layer1 = g_enc1;
    grads.enc_layer2 = g_enc2;
    match &mut grads.decoder {
        Some(d) => {
            d.layer1 = g_dec1;
            d.layer2 = g_dec2;
        }
        None => {
            grads.enc_layer1.accumulate(&g_dec1);
            grads.enc_layer2.accumulate(&g_dec2);
        }
    }
    Ok(grads)
}
