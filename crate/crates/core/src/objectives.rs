//! Training objectives: the contrastive matching loss over quantized keys,
//! the straight-through codeword-selection (commitment) term, their sum as
//! the multinoulli contrastive loss, and the reconstruction-loss baseline.

use std::fmt;
use std::str::FromStr;

use crate::grad::{GradError, Graph, NodeId, Tensor};
use crate::quantizer::{CodebookSet, QuantError, SelectionVariant, SteAnchor, SteOutput};

/// How the backward pass of the codeword-selection term is defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CommitmentForm {
    /// `−log` of the straight-through one-hot probability. The forward
    /// probability is exactly 1, so the gradient is `−∇P(selected)`.
    #[default]
    Straight,
    /// Gradient of `−log P(selected)` on the soft path, i.e. `−∇P / P`,
    /// with the forward value still pinned to 0.
    SoftLog,
}

impl CommitmentForm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Straight => "ste",
            Self::SoftLog => "soft-log",
        }
    }
}

impl fmt::Display for CommitmentForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommitmentForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ste" => Ok(Self::Straight),
            "soft-log" => Ok(Self::SoftLog),
            _ => Err(format!("unknown commitment form '{s}' (expected ste or soft-log)")),
        }
    }
}

/// Forward values of one multinoulli contrastive loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Mean of `per_instance`, in nats.
    pub total: f64,
    /// Mean matching term.
    pub matching_term: f64,
    /// Mean commitment forward value; 0 by construction.
    pub commitment_forward: f64,
    pub per_instance: Vec<f64>,
}

/// Nodes of an [`mcl`] graph.
#[derive(Clone, Copy, Debug)]
pub struct Mcl {
    /// Scalar batch mean.
    pub total: NodeId,
    /// `B×1` per-instance losses.
    pub per_instance: NodeId,
    /// `B×1` matching terms.
    pub matching: NodeId,
    /// `B×1` commitment terms of each instance's own key.
    pub commitment: NodeId,
}

impl Mcl {
    pub fn report(&self, g: &Graph) -> LossReport {
        let mean = |id: NodeId| {
            let v = g.value(id).data();
            v.iter().sum::<f64>() / v.len() as f64
        };
        LossReport {
            total: g.value(self.total).data()[0],
            matching_term: mean(self.matching),
            commitment_forward: mean(self.commitment),
            per_instance: g.value(self.per_instance).data().to_vec(),
        }
    }
}

/// `B×K` constant with a single 1 per row at `targets[b]`.
fn target_mask(rows: usize, cols: usize, targets: &[usize]) -> Result<Tensor, GradError> {
    if targets.len() != rows {
        return Err(GradError::Usage(format!("{} targets for {rows} queries", targets.len())));
    }
    let mut data = vec![0.0; rows * cols];
    for (b, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(GradError::Usage(format!("target {t} out of range for {cols} keys")));
        }
        data[b * cols + t] = 1.0;
    }
    Tensor::new(rows, cols, data)
}

/// Per-query `−log softmax(⟨q, k⟩)[target]` over all rows of `keys`,
/// giving a `B×1` node for `B` query rows.
pub fn matching_losses(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    targets: &[usize],
) -> Result<NodeId, GradError> {
    let (b, k) = (g.value(queries).rows(), g.value(keys).rows());
    let mask = g.constant(target_mask(b, k, targets)?);
    let scores = g.matmul_t(queries, keys)?;
    let log_probs = g.row_log_softmax(scores)?;
    let picked = g.row_dot(log_probs, mask)?;
    g.negate(picked)
}

/// Scalar matching loss of a single `1×d` query.
pub fn matching_softmax_loss(g: &mut Graph, query: NodeId, keys: NodeId, target: usize) -> Result<NodeId, GradError> {
    if g.value(query).rows() != 1 {
        return Err(GradError::Usage("matching_softmax_loss takes a single query row".into()));
    }
    matching_losses(g, query, keys, &[target])
}

/// `K×1` commitment term of codebook `i` for every quantized row.
pub fn commitment_term(g: &mut Graph, ste: &SteOutput, i: usize, form: CommitmentForm) -> Result<NodeId, GradError> {
    let hard = ste.hard[i];
    let frozen = g.stop_gradient(hard)?;
    match form {
        CommitmentForm::Straight => {
            let p = g.row_dot(hard, frozen)?;
            let log_p = g.log(p)?;
            g.negate(log_p)
        }
        CommitmentForm::SoftLog => {
            let p = g.row_dot(ste.probs[i], frozen)?;
            let log_p = g.log(p)?;
            let value = g.negate(log_p)?;
            let pinned = g.stop_gradient(value)?;
            g.sub(value, pinned)
        }
    }
}

fn sum_nodes(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId, GradError> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// `K×1` commitment terms summed over all codebooks.
pub fn commitment_terms(g: &mut Graph, ste: &SteOutput, form: CommitmentForm) -> Result<NodeId, GradError> {
    let parts = (0..ste.hard.len())
        .map(|i| commitment_term(g, ste, i, form))
        .collect::<Result<Vec<_>, _>>()?;
    sum_nodes(g, &parts)
}

/// Detach-free counterpart of [`commitment_terms`] built on the output of
/// [`crate::quantizer::quantize_linearized`]: same value (0) and gradient at
/// the anchor point, so its finite differences check the straight-through
/// backward.
pub fn commitment_terms_linearized(
    g: &mut Graph,
    lin: &SteOutput,
    anchor: &SteAnchor,
    form: CommitmentForm,
) -> Result<NodeId, GradError> {
    let mut parts = Vec::with_capacity(lin.probs.len());
    for (i, (&probs, &hard)) in lin.probs.iter().zip(&lin.hard).enumerate() {
        let p = g.row_dot(probs, hard)?;
        let h = &anchor.hard[i];
        let p0: Vec<f64> = (0..h.rows())
            .map(|r| h.row_slice(r).iter().zip(anchor.probs[i].row_slice(r)).map(|(a, b)| a * b).sum())
            .collect();
        let term = match form {
            CommitmentForm::Straight => {
                let offset = g.constant(Tensor::new(p0.len(), 1, p0)?);
                let neg = g.negate(p)?;
                g.add(neg, offset)?
            }
            CommitmentForm::SoftLog => {
                let logs = p0.iter().map(|v| v.ln()).collect();
                let offset = g.constant(Tensor::new(h.rows(), 1, logs)?);
                let log_p = g.log(p)?;
                let neg = g.negate(log_p)?;
                g.add(neg, offset)?
            }
        };
        parts.push(term);
    }
    sum_nodes(g, &parts)
}

/// Picks `commitment[targets[b]]` for every query `b`, as `B×1`.
pub(crate) fn gather_rows(g: &mut Graph, column: NodeId, targets: &[usize]) -> Result<NodeId, GradError> {
    let k = g.value(column).rows();
    let select = g.constant(target_mask(targets.len(), k, targets)?);
    g.matmul(select, column)
}

/// Multinoulli contrastive loss of a batch: per instance, the matching term
/// against all quantized keys plus the commitment term of its own key;
/// the total is the batch mean.
pub fn mcl(
    g: &mut Graph,
    queries: NodeId,
    keys: &SteOutput,
    targets: &[usize],
    form: CommitmentForm,
) -> Result<Mcl, GradError> {
    let commitment = commitment_terms(g, keys, form)?;
    mcl_from_parts(g, queries, keys.quantized, commitment, targets)
}

/// [`mcl`] over the linearized quantization surrogate.
pub fn mcl_linearized(
    g: &mut Graph,
    queries: NodeId,
    lin: &SteOutput,
    anchor: &SteAnchor,
    targets: &[usize],
    form: CommitmentForm,
) -> Result<Mcl, GradError> {
    let commitment = commitment_terms_linearized(g, lin, anchor, form)?;
    mcl_from_parts(g, queries, lin.quantized, commitment, targets)
}

fn mcl_from_parts(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    commitment: NodeId,
    targets: &[usize],
) -> Result<Mcl, GradError> {
    let matching = matching_losses(g, queries, keys, targets)?;
    let own = gather_rows(g, commitment, targets)?;
    let per_instance = g.add(matching, own)?;
    let sum = g.sum(per_instance)?;
    let total = g.scale(sum, 1.0 / targets.len() as f64)?;
    Ok(Mcl {
        total,
        per_instance,
        matching,
        commitment: own,
    })
}

/// `Σ_k ‖z^k − z̃^k‖₂`, the distortion of hard quantization.
pub fn reconstruction_loss<K: AsRef<[f64]>>(
    keys: &[K],
    books: &CodebookSet,
    variant: &SelectionVariant,
) -> Result<f64, QuantError> {
    if keys.is_empty() {
        return Err(QuantError::Empty("reconstruction loss over no keys"));
    }
    let mut total = 0.0;
    for key in keys {
        let key = key.as_ref();
        let recon = books.reconstruct(&books.assign(key, variant)?);
        total += key.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total)
}
