//! Consensus-level representations and their fusion with instance-level ones.
//!
//! Each instance vector queries the concept matrix `Z` through a learned
//! `d×d` map; the softmax of the resulting logits (sharpened by `λ`) weights
//! the concept rows. On the text side the scores are mixed with a softmax
//! of the binary concept label. All functions operate on batches (one row
//! per item).

use serde::{Deserialize, Serialize};

use crate::error::{CvseError, Result};
use crate::numeric::{row_softmax, Matrix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    /// Softmax sharpness λ.
    pub lambda: f64,
    /// Weight of the label-derived distribution on the text side.
    pub alpha: f64,
    /// Weight of the instance-level vector in the fused embedding.
    pub beta: f64,
    /// Restrict the label softmax to the label's support.
    pub label_support_only: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            lambda: 10.0,
            alpha: 0.35,
            beta: 0.75,
            label_support_only: false,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(CvseError::Parameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CvseError::Parameter(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Label-derived concept distribution, one row per label.
///
/// By default this is the plain softmax of `λ·L`, which leaves some mass on
/// absent concepts. With `support_only` the mass is spread uniformly over
/// the label's support instead (uniform over all concepts for empty labels).
pub fn label_distribution(labels: &Matrix, lambda: f64, support_only: bool) -> Result<Matrix> {
    if !support_only {
        return row_softmax(labels, lambda);
    }
    let mut out = Matrix::zeros(labels.rows(), labels.cols());
    for r in 0..labels.rows() {
        let active = labels.row(r).iter().filter(|&&v| v > 0.0).count();
        let row = out.row_mut(r);
        if active == 0 {
            row.iter_mut().for_each(|v| *v = 1.0 / labels.cols() as f64);
        } else {
            for (o, &l) in row.iter_mut().zip(labels.row(r)) {
                *o = if l > 0.0 { 1.0 / active as f64 } else { 0.0 };
            }
        }
    }
    Ok(out)
}

/// Concept scores `softmax(λ · x W Zᵀ)` for a batch of instance vectors.
pub fn concept_scores(tape: &mut Tape, instances: Var, z: Var, query_map: Var, lambda: f64) -> Result<Var> {
    let queried = tape.matmul(instances, query_map)?;
    let logits = tape.matmul_t(queried, z)?;
    tape.row_softmax(logits, lambda)
}

/// Mixture `Σ aᵢ zᵢ` of concept rows, normalised per row.
pub fn mix_concepts(tape: &mut Tape, scores: Var, z: Var) -> Result<Var> {
    let mixed = tape.matmul(scores, z)?;
    tape.l2_normalize_rows(mixed)
}

/// Visual scores `a^v` and consensus vectors `v^C`.
pub fn visual_consensus(tape: &mut Tape, v_inst: Var, z: Var, wv: Var, lambda: f64) -> Result<(Var, Var)> {
    let scores = concept_scores(tape, v_inst, z, wv, lambda)?;
    let v_cons = mix_concepts(tape, scores, z)?;
    Ok((scores, v_cons))
}

/// Textual scores `a^t = α·label + (1−α)·query` and consensus vectors `t^C`.
pub fn textual_consensus(
    tape: &mut Tape,
    t_inst: Var,
    labels: &Matrix,
    z: Var,
    wt: Var,
    config: &ConsensusConfig,
) -> Result<(Var, Var)> {
    let (batch, q) = (tape.shape(t_inst).0, tape.shape(z).0);
    if labels.shape() != (batch, q) {
        return Err(CvseError::shape("textual_consensus", labels.shape(), (batch, q)));
    }
    let from_query = concept_scores(tape, t_inst, z, wt, config.lambda)?;
    let scores = if config.alpha == 0.0 {
        from_query
    } else {
        let from_label = label_distribution(labels, config.lambda, config.label_support_only)?;
        let from_label = tape.constant(from_label.scale(config.alpha));
        let weighted = tape.scale(from_query, 1.0 - config.alpha);
        tape.add(from_label, weighted)?
    };
    let t_cons = mix_concepts(tape, scores, z)?;
    Ok((scores, t_cons))
}

/// `normalize(β·instance + (1−β)·consensus)`.
pub fn fuse(tape: &mut Tape, instance: Var, consensus: Var, beta: f64) -> Result<Var> {
    let a = tape.scale(instance, beta);
    let b = tape.scale(consensus, 1.0 - beta);
    let sum = tape.add(a, b)?;
    tape.l2_normalize_rows(sum)
}
