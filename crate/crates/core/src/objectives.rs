//! Contrastive and invariance losses.
//!
//! Every loss has two routes: plain `f64` functions used for evaluation and
//! as reference values, and graph builders used for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

/// Allowed deviation of an embedding row norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the invariance term.
    pub lambda: f64,
    /// Added to the positive-pair count in the invariance denominator.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.eps >= 0.0) {
            return Err(Error::Config(format!(
                "lambda {} and eps {} must be non-negative",
                self.lambda, self.eps
            )));
        }
        Ok(())
    }
}

/// Which loss terms are active. Disabling terms reproduces the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub v2t: bool,
    pub t2v: bool,
    pub inv: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::ALL
    }
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        v2t: true,
        t2v: true,
        inv: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.v2t || self.t2v || self.inv) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        Ok(())
    }

    /// Short label such as `V2T+T2V+INV`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.v2t {
            parts.push("V2T");
        }
        if self.t2v {
            parts.push("T2V");
        }
        if self.inv {
            parts.push("INV");
        }
        parts.join("+")
    }
}

/// Paired, unit-norm visual and text embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub v: Tensor,
    pub z: Tensor,
    pub labels: Vec<usize>,
    pub languages: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(v: Tensor, z: Tensor, labels: Vec<usize>, languages: Vec<String>) -> Result<Self> {
        if !v.is_matrix() || v.shape() != z.shape() {
            return Err(Error::Dimension(format!(
                "visual {:?} and text {:?} embeddings must be equal-shape matrices",
                v.shape(),
                z.shape()
            )));
        }
        let n = v.rows();
        if n < 2 || labels.len() != n || languages.len() != n {
            return Err(Error::Dimension(format!(
                "batch of {n} rows with {} labels and {} languages (need N >= 2)",
                labels.len(),
                languages.len()
            )));
        }
        check_unit_rows(&v)?;
        check_unit_rows(&z)?;
        Ok(EmbeddingBatch {
            v,
            z,
            labels,
            languages,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[V; Z]` and the duplicated labels.
    pub fn joint(&self) -> (Tensor, Vec<usize>) {
        let mut data = self.v.data().to_vec();
        data.extend_from_slice(self.z.data());
        let h = Tensor::new(vec![2 * self.len(), self.v.cols()], data).expect("same widths");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&self.labels);
        (h, labels)
    }
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let n = crate::numcore::norm(t.row(i));
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// `S[i][j] = v_i · z_j` for unit-norm rows.
pub fn similarity_matrix(v: &Tensor, z: &Tensor) -> Result<Tensor> {
    if !v.is_matrix() || !z.is_matrix() || v.cols() != z.cols() {
        return Err(Error::Dimension(format!(
            "similarity of {:?} and {:?}",
            v.shape(),
            z.shape()
        )));
    }
    check_unit_rows(v)?;
    check_unit_rows(z)?;
    let (n, m) = (v.rows(), z.rows());
    let mut s = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            s.push(crate::numcore::dot(v.row(i), z.row(j)));
        }
    }
    Tensor::matrix(n, m, s)
}

fn check_square(s: &Tensor) -> Result<usize> {
    if !s.is_matrix() || s.rows() != s.cols() {
        return Err(Error::Dimension(format!(
            "contrastive loss needs a square similarity matrix, got {:?}",
            s.shape()
        )));
    }
    Ok(s.rows())
}

/// `-log softmax(xs / tau)[target]`, shifted by the maximum for stability.
fn neg_log_softmax(xs: impl Iterator<Item = f64> + Clone, target: f64, tau: f64) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = m + xs.map(|x| (x / tau - m).exp()).sum::<f64>().ln();
    lse - target / tau
}

/// Image-to-text InfoNCE: mean over rows of `-log softmax(S_i / τ)[i]`.
pub fn loss_v2t(s: &Tensor, tau: f64) -> Result<f64> {
    let n = check_square(s)?;
    let total: f64 = (0..n)
        .map(|i| neg_log_softmax(s.row(i).iter().copied(), s.get(i, i), tau))
        .sum();
    Ok(total / n as f64)
}

/// Text-to-image InfoNCE: the same loss over the columns of `S`.
pub fn loss_t2v(s: &Tensor, tau: f64) -> Result<f64> {
    let n = check_square(s)?;
    let total: f64 = (0..n)
        .map(|j| neg_log_softmax((0..n).map(|i| s.get(i, j)), s.get(j, j), tau))
        .sum();
    Ok(total / n as f64)
}

pub fn loss_itc(s: &Tensor, tau: f64) -> Result<f64> {
    Ok(0.5 * (loss_v2t(s, tau)? + loss_t2v(s, tau)?))
}

/// `M[j][k] = 1` iff `labels[j] == labels[k]` and `j != k`.
pub fn semantic_mask(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut m = Tensor::zeros(&[n.max(1), n.max(1)]);
    if n == 0 {
        return m;
    }
    for j in 0..n {
        for k in 0..n {
            if j != k && labels[j] == labels[k] {
                m.row_mut(j)[k] = 1.0;
            }
        }
    }
    m
}

/// `1 - Σ M_jk h_j·h_k / (Σ M_jk + ε)` over every same-label pair of rows.
pub fn loss_inv(h: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    if !h.is_matrix() || h.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for embeddings {:?}",
            labels.len(),
            h.shape()
        )));
    }
    check_unit_rows(h)?;
    let (mut sim, mut count) = (0.0, 0.0);
    for j in 0..labels.len() {
        for k in 0..labels.len() {
            if j != k && labels[j] == labels[k] {
                sim += crate::numcore::dot(h.row(j), h.row(k));
                count += 1.0;
            }
        }
    }
    Ok(1.0 - sim / (count + eps))
}

/// Individual terms and their weighted combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub itc: f64,
    pub v2t: f64,
    pub t2v: f64,
    pub inv: f64,
}

/// Contrastive part under the active directions: the mean of both, or the
/// single enabled one, or zero.
pub fn combine_itc(v2t: f64, t2v: f64, terms: LossTerms) -> f64 {
    match (terms.v2t, terms.t2v) {
        (true, true) => 0.5 * (v2t + t2v),
        (true, false) => v2t,
        (false, true) => t2v,
        (false, false) => 0.0,
    }
}

pub fn loss_breakdown(
    batch: &EmbeddingBatch,
    tau: f64,
    cfg: &LossConfig,
    terms: LossTerms,
) -> Result<LossBreakdown> {
    let s = similarity_matrix(&batch.v, &batch.z)?;
    let v2t = loss_v2t(&s, tau)?;
    let t2v = loss_t2v(&s, tau)?;
    let (h, labels) = batch.joint();
    let inv = loss_inv(&h, &labels, cfg.eps)?;
    let itc = combine_itc(v2t, t2v, terms);
    let total = itc + if terms.inv { cfg.lambda * inv } else { 0.0 };
    Ok(LossBreakdown {
        total,
        itc,
        v2t,
        t2v,
        inv,
    })
}

/// `L_ITC + λ·L_INV` with every term enabled.
pub fn total_loss(batch: &EmbeddingBatch, tau: f64, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_breakdown(batch, tau, cfg, LossTerms::ALL)?.total)
}

/// Loss nodes built on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphLoss {
    pub total: NodeId,
    pub v2t: NodeId,
    pub t2v: NodeId,
    pub inv: NodeId,
}

/// Builds the weighted objective on unit-row embedding nodes `v`, `z`
/// (`[N, D]`) and a `[1]` log-temperature node.
pub fn graph_loss(
    g: &mut Graph,
    v: NodeId,
    z: NodeId,
    log_tau: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
    terms: LossTerms,
) -> Result<GraphLoss> {
    terms.validate()?;
    let n = g.value(v).rows();
    if labels.len() != n || g.value(z).rows() != n {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let zt = g.transpose(z)?;
    let s = g.matmul(v, zt)?;
    let neg_log_tau = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg_log_tau);
    let logits = g.mul_scalar(s, inv_tau)?;
    let v2t = g.diag_cross_entropy(logits)?;
    let logits_t = g.transpose(logits)?;
    let t2v = g.diag_cross_entropy(logits_t)?;

    let h = g.concat_rows(v, z)?;
    let ht = g.transpose(h)?;
    let gram = g.matmul(h, ht)?;
    let mut joint = labels.to_vec();
    joint.extend_from_slice(labels);
    let mask = semantic_mask(&joint);
    let count: f64 = mask.data().iter().sum();
    let mask = g.leaf(mask);
    let masked = g.mul(gram, mask)?;
    let pos = g.sum(masked);
    let inv = g.affine(pos, -1.0 / (count + cfg.eps), 1.0);

    let itc = match (terms.v2t, terms.t2v) {
        (true, true) => {
            let both = g.add(v2t, t2v)?;
            Some(g.scale(both, 0.5))
        }
        (true, false) => Some(v2t),
        (false, true) => Some(t2v),
        (false, false) => None,
    };
    let weighted_inv = terms.inv.then(|| g.scale(inv, cfg.lambda));
    let total = match (itc, weighted_inv) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("validated above"),
    };
    Ok(GraphLoss {
        total,
        v2t,
        t2v,
        inv,
    })
}
