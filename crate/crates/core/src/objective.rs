//! Bidirectional triplet ranking on three representation levels plus KL
//! alignment of the visual and textual concept distributions.

use serde::{Deserialize, Serialize};

use crate::error::{CvseError, Result};
use crate::numeric::{Matrix, Tape, Var};

/// Floor applied to `a^v` (and `a^t`) before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Only the most violating in-batch negative per anchor.
    #[default]
    Hardest,
    /// Every in-batch negative.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub fused: f64,
    pub instance: f64,
    pub consensus: f64,
    pub kl: f64,
    pub margin: f64,
    pub mode: RankingMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            fused: 3.0,
            instance: 5.0,
            consensus: 1.0,
            kl: 2.0,
            margin: 0.2,
            mode: RankingMode::Hardest,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.fused, self.instance, self.consensus, self.kl];
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(CvseError::Parameter("loss weights must be non-negative".into()));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(CvseError::Parameter("at least one loss weight must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(CvseError::Parameter(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fused: f64,
    pub instance: f64,
    pub consensus: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.fused * self.fused + w.instance * self.instance + w.consensus * self.consensus + w.kl * self.kl
    }
}

/// Hinge costs `max(0, γ − S_ii + S_ij)` for row anchors, zero on the diagonal.
fn anchor_costs(tape: &mut Tape, sims: Var, margin: f64, off_diagonal: Var) -> Result<Var> {
    let positives = tape.diag(sims)?;
    let shift = tape.scale(positives, -1.0);
    let shift = tape.add_scalar(shift, margin);
    let raw = tape.add_col(sims, shift)?;
    let hinge = tape.relu(raw);
    tape.mul(hinge, off_diagonal)
}

/// Bidirectional triplet ranking loss over a batch of aligned unit rows.
pub fn triplet_ranking(tape: &mut Tape, images: Var, texts: Var, margin: f64, mode: RankingMode) -> Result<Var> {
    let (batch, dim) = tape.shape(images);
    if tape.shape(texts) != (batch, dim) {
        return Err(CvseError::shape("triplet_ranking", (batch, dim), tape.shape(texts)));
    }
    if batch < 2 {
        return Err(CvseError::InsufficientBatch(batch));
    }
    let mut mask = Matrix::filled(batch, batch, 1.0);
    for i in 0..batch {
        mask[(i, i)] = 0.0;
    }
    let mask = tape.constant(mask);

    // rows: image anchors against text negatives
    let sims = tape.matmul_t(images, texts)?;
    let image_anchor = anchor_costs(tape, sims, margin, mask)?;
    // rows: text anchors against image negatives
    let sims_t = tape.transpose(sims);
    let text_anchor = anchor_costs(tape, sims_t, margin, mask)?;

    let (a, b) = match mode {
        RankingMode::Sum => (image_anchor, text_anchor),
        RankingMode::Hardest => (tape.row_max(image_anchor)?, tape.row_max(text_anchor)?),
    };
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    tape.add(sa, sb)
}

/// `Σ_rows Σ_i a^t_i · log(a^t_i / a^v_i)` with both sides floored at [`PROB_FLOOR`].
pub fn kl_concept_alignment(tape: &mut Tape, text_scores: Var, visual_scores: Var) -> Result<Var> {
    if tape.shape(text_scores) != tape.shape(visual_scores) {
        return Err(CvseError::shape(
            "kl_concept_alignment",
            tape.shape(text_scores),
            tape.shape(visual_scores),
        ));
    }
    let t_floor = tape.clamp_min(text_scores, PROB_FLOOR);
    let v_floor = tape.clamp_min(visual_scores, PROB_FLOOR);
    let log_t = tape.ln(t_floor)?;
    let log_v = tape.ln(v_floor)?;
    let log_ratio = tape.sub(log_t, log_v)?;
    let terms = tape.mul(text_scores, log_ratio)?;
    Ok(tape.sum(terms))
}

/// Representations of one batch at every level, as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutputs {
    pub v_inst: Var,
    pub t_inst: Var,
    pub v_cons: Var,
    pub t_cons: Var,
    pub v_fused: Var,
    pub t_fused: Var,
    pub a_v: Var,
    pub a_t: Var,
}

/// Weighted composite objective; terms with zero weight are still reported.
pub fn total_loss(tape: &mut Tape, out: &BatchOutputs, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let fused = triplet_ranking(tape, out.v_fused, out.t_fused, weights.margin, weights.mode)?;
    let instance = triplet_ranking(tape, out.v_inst, out.t_inst, weights.margin, weights.mode)?;
    let consensus = triplet_ranking(tape, out.v_cons, out.t_cons, weights.margin, weights.mode)?;
    let kl = kl_concept_alignment(tape, out.a_t, out.a_v)?;

    let terms = [
        tape.scale(fused, weights.fused),
        tape.scale(instance, weights.instance),
        tape.scale(consensus, weights.consensus),
        tape.scale(kl, weights.kl),
    ];
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let breakdown = LossBreakdown {
        fused: tape.scalar(fused)?,
        instance: tape.scalar(instance)?,
        consensus: tape.scalar(consensus)?,
        kl: tape.scalar(kl)?,
        total: tape.scalar(total)?,
    };
    log::debug!(
        "loss fused={:.5} instance={:.5} consensus={:.5} kl={:.5} total={:.5}",
        breakdown.fused,
        breakdown.instance,
        breakdown.consensus,
        breakdown.kl,
        breakdown.total
    );
    Ok((total, breakdown))
}
