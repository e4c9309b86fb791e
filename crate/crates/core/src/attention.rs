//! Attentional feature aggregation over a keypoint neighborhood graph.
//!
//! This is the numeric kernel behind learned keypoint refinement: each node
//! queries its k nearest model-space neighbors, takes a softmax-weighted
//! average of their values and applies a residual MLP update. The module
//! verifies the mechanism's math only; there is no training loop, so the
//! backward pass exists to be checked against finite differences rather
//! than to feed an optimizer.
//!
//! Logits are the raw dot products q'k without scaling; max-subtraction
//! inside the softmax is numerical stabilization only and does not change
//! the weights.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::Point3D;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("kNN graph needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("node {0} has an empty neighborhood")]
    EmptyNeighborhood(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("non-finite feature entry in node {0}")]
    NonFiniteFeature(usize),
    #[error("neighbor list of node {0} is invalid: {1}")]
    BadNeighbor(usize, &'static str),
}

/// Node features (one column per node) plus a fixed neighborhood graph.
#[derive(Debug, Clone)]
pub struct KeypointFeatureSet {
    features: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
}

impl KeypointFeatureSet {
    pub fn new(
        features: DMatrix<f64>,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Self, AttentionError> {
        let n = features.ncols();
        if neighbors.len() != n {
            return Err(AttentionError::ShapeMismatch("one neighbor list per node"));
        }
        for (i, col) in features.column_iter().enumerate() {
            if !col.iter().all(|x| x.is_finite()) {
                return Err(AttentionError::NonFiniteFeature(i));
            }
        }
        let k = neighbors.first().map_or(0, |l| l.len());
        for (i, list) in neighbors.iter().enumerate() {
            if list.len() != k {
                return Err(AttentionError::BadNeighbor(i, "ragged neighbor lists"));
            }
            if list.iter().any(|&j| j == i) {
                return Err(AttentionError::BadNeighbor(i, "self-loop"));
            }
            if list.iter().any(|&j| j >= n) {
                return Err(AttentionError::BadNeighbor(i, "index out of range"));
            }
        }
        Ok(Self { features, neighbors })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn node_count(&self) -> usize {
        self.features.ncols()
    }
}

/// Projection and MLP weights of one aggregation layer.
///
/// The MLP is two affine layers around a tanh: u = W2 tanh(W1 m + b1) + b2.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub mlp_w1: DMatrix<f64>,
    pub mlp_b1: DVector<f64>,
    pub mlp_w2: DMatrix<f64>,
    pub mlp_b2: DVector<f64>,
}

impl AttentionParams {
    /// All-zero parameters of dimension d (useful as a gradient accumulator
    /// and for the residual-identity case).
    pub fn zeros(d: usize) -> Self {
        Self {
            w_q: DMatrix::zeros(d, d),
            w_k: DMatrix::zeros(d, d),
            w_v: DMatrix::zeros(d, d),
            mlp_w1: DMatrix::zeros(d, d),
            mlp_b1: DVector::zeros(d),
            mlp_w2: DMatrix::zeros(d, d),
            mlp_b2: DVector::zeros(d),
        }
    }

    /// Gaussian init scaled by 1/sqrt(d), biases zero.
    pub fn random<R: rand::Rng>(d: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let mut mat = || {
            DMatrix::from_fn(d, d, |_, _| {
                let (x, _) = crate::rng::normal_pair(rng);
                scale * x
            })
        };
        Self {
            w_q: mat(),
            w_k: mat(),
            w_v: mat(),
            mlp_w1: mat(),
            mlp_b1: DVector::zeros(d),
            mlp_w2: mat(),
            mlp_b2: DVector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    fn check_dim(&self, d: usize) -> Result<(), AttentionError> {
        let square = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d;
        if square(&self.w_q)
            && square(&self.w_k)
            && square(&self.w_v)
            && square(&self.mlp_w1)
            && square(&self.mlp_w2)
            && self.mlp_b1.len() == d
            && self.mlp_b2.len() == d
        {
            Ok(())
        } else {
            Err(AttentionError::ShapeMismatch("parameter dimension differs from feature dimension"))
        }
    }
}

/// k nearest neighbors of each point by Euclidean distance, excluding the
/// point itself; distance ties resolved toward the smaller index.
pub fn knn_graph(points: &[Point3D], k: usize) -> Result<Vec<Vec<usize>>, AttentionError> {
    if points.len() <= k {
        return Err(AttentionError::TooFewPoints { needed: k + 1, got: points.len() });
    }
    let mut lists = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, q)| ((p - q).norm_squared(), j))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        lists.push(order[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(lists)
}

/// Softmax attention weights of node i over its neighbor list, in list
/// order. Weights sum to 1.
pub fn attention_weights(
    i: usize,
    set: &KeypointFeatureSet,
    params: &AttentionParams,
) -> Result<Vec<f64>, AttentionError> {
    params.check_dim(set.dim())?;
    let hood = &set.neighbors()[i];
    if hood.is_empty() {
        return Err(AttentionError::EmptyNeighborhood(i));
    }
    let q = &params.w_q * set.features.column(i);
    let logits: Vec<f64> =
        hood.iter().map(|&j| q.dot(&(&params.w_k * set.features.column(j)))).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Attention message for node i: the weight-averaged value vectors of its
/// neighbors.
pub fn attention_message(
    i: usize,
    set: &KeypointFeatureSet,
    params: &AttentionParams,
) -> Result<DVector<f64>, AttentionError> {
    let weights = attention_weights(i, set, params)?;
    let mut m = DVector::zeros(set.dim());
    for (&j, a) in set.neighbors()[i].iter().zip(&weights) {
        m += (&params.w_v * set.features.column(j)) * *a;
    }
    Ok(m)
}

/// One aggregation layer over all nodes: x_i <- x_i + MLP(message_i).
pub fn node_update(
    set: &KeypointFeatureSet,
    params: &AttentionParams,
) -> Result<DMatrix<f64>, AttentionError> {
    params.check_dim(set.dim())?;
    let mut out = set.features.clone();
    for i in 0..set.node_count() {
        let m = attention_message(i, set, params)?;
        let a = (&params.mlp_w1 * &m + &params.mlp_b1).map(f64::tanh);
        let u = &params.mlp_w2 * a + &params.mlp_b2;
        let mut col = out.column_mut(i);
        col += u;
    }
    Ok(out)
}

/// Parameter gradients of a scalar loss, same shapes as [`AttentionParams`].
pub type AttentionGradients = AttentionParams;

/// Backward pass of [`node_update`].
///
/// `upstream` is dL/dY for the layer output Y (d x N). Returns gradients
/// with respect to every parameter and to the input features. Follows the
/// chain rule through the residual, MLP, value average and softmax; the
/// softmax Jacobian enters as a_j (g_j - sum_j' a_j' g_j').
pub fn node_update_backward(
    set: &KeypointFeatureSet,
    params: &AttentionParams,
    upstream: &DMatrix<f64>,
) -> Result<(AttentionGradients, DMatrix<f64>), AttentionError> {
    params.check_dim(set.dim())?;
    if upstream.shape() != set.features.shape() {
        return Err(AttentionError::ShapeMismatch("upstream gradient shape differs from features"));
    }
    let d = set.dim();
    let mut grads = AttentionGradients::zeros(d);
    let mut d_x = upstream.clone();

    for i in 0..set.node_count() {
        let hood = &set.neighbors()[i];
        let x_i = set.features.column(i);
        let weights = attention_weights(i, set, params)?;
        let q = &params.w_q * x_i;
        let keys: Vec<DVector<f64>> =
            hood.iter().map(|&j| &params.w_k * set.features.column(j)).collect();
        let values: Vec<DVector<f64>> =
            hood.iter().map(|&j| &params.w_v * set.features.column(j)).collect();
        let mut m = DVector::zeros(d);
        for (v, a) in values.iter().zip(&weights) {
            m += v * *a;
        }
        let pre = &params.mlp_w1 * &m + &params.mlp_b1;
        let act = pre.map(f64::tanh);

        let g = upstream.column(i);
        // u = W2 act + b2
        grads.mlp_b2 += g;
        grads.mlp_w2 += g * act.transpose();
        let d_act = params.mlp_w2.transpose() * g;
        let d_pre = d_act.component_mul(&act.map(|t| 1.0 - t * t));
        grads.mlp_b1 += &d_pre;
        grads.mlp_w1 += &d_pre * m.transpose();
        let d_m = params.mlp_w1.transpose() * d_pre;

        // m = sum_j a_j v_j
        let d_alpha: Vec<f64> = values.iter().map(|v| v.dot(&d_m)).collect();
        for (&j, a) in hood.iter().zip(&weights) {
            let dv = &d_m * (*a);
            grads.w_v += &dv * set.features.column(j).transpose();
            let mut col = d_x.column_mut(j);
            col += params.w_v.transpose() * dv;
        }

        // softmax: dl_j = a_j (dalpha_j - sum a dalpha)
        let dot: f64 = weights.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
        let d_logit: Vec<f64> =
            weights.iter().zip(&d_alpha).map(|(a, g)| a * (g - dot)).collect();

        // l_j = q . k_j
        let mut d_q = DVector::zeros(d);
        for ((&j, k_j), dl) in hood.iter().zip(&keys).zip(&d_logit) {
            d_q += k_j * *dl;
            let dk = &q * *dl;
            grads.w_k += &dk * set.features.column(j).transpose();
            let mut col = d_x.column_mut(j);
            col += params.w_k.transpose() * dk;
        }
        grads.w_q += &d_q * x_i.transpose();
        let mut col = d_x.column_mut(i);
        col += params.w_q.transpose() * d_q;
    }
    Ok((grads, d_x))
}
