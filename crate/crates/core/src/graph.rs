//! Concept correlation graph and the graph-convolutional concept encoder.
//!
//! Pipeline: co-occurrence counts `E`/`N` → conditional matrix `P` →
//! confidence-scaled `B = s^(P-u) - s^(-u)` → thresholded `G` → normalised
//! adjacency `Ã = D^-1/2 G' D^-1/2`, where `G'` is `G` symmetrised by
//! elementwise max with self-loops added.

use serde::{Deserialize, Serialize};

use crate::corpus::ConceptLabel;
use crate::error::{CvseError, Result};
use crate::numeric::{Matrix, ParamId, Tape, Var};

/// Which occurrence count divides `E_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `P_ij = E_ij / N_i`.
    #[default]
    Row,
    /// `P_ij = E_ij / N_j`.
    Column,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub s: f64,
    pub u: f64,
    pub epsilon: f64,
    pub denominator: Denominator,
    /// Count co-occurrence per caption instead of per image.
    pub per_caption: bool,
    /// Hidden widths of the graph encoder; the last layer always outputs `d`.
    pub gcn_hidden: Vec<usize>,
    /// Apply the ReLU after the final layer as well.
    pub final_activation: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            s: 5.0,
            u: 0.02,
            epsilon: 0.3,
            denominator: Denominator::Row,
            per_caption: false,
            gcn_hidden: vec![512],
            final_activation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationGraph {
    pub cooccurrence: Matrix,
    pub occurrence: Vec<f64>,
    pub conditional: Matrix,
    pub rescaled: Matrix,
    pub binary: Matrix,
    pub adjacency: Matrix,
}

impl CorrelationGraph {
    pub fn build(labels: &[ConceptLabel], config: &GraphConfig) -> Result<Self> {
        let (e, n) = count_cooccurrence(labels)?;
        let p = conditional_probability(&e, &n, config.denominator)?;
        let b = confidence_scale(&p, config.s, config.u)?;
        let g = binarize(&b, config.epsilon);
        let a = normalize_adjacency(&g)?;
        Ok(CorrelationGraph {
            cooccurrence: e,
            occurrence: n,
            conditional: p,
            rescaled: b,
            binary: g,
            adjacency: a,
        })
    }

    pub fn edge_count(&self) -> usize {
        self.binary.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Co-occurrence counts `E` (with `E_ii = N_i`) and occurrence counts `N`.
pub fn count_cooccurrence(labels: &[ConceptLabel]) -> Result<(Matrix, Vec<f64>)> {
    let q = labels
        .first()
        .map(ConceptLabel::len)
        .ok_or_else(|| CvseError::Degenerate("no labels to count".into()))?;
    let mut e = Matrix::zeros(q, q);
    let mut n = vec![0.0; q];
    for label in labels {
        if label.len() != q {
            return Err(CvseError::shape("count_cooccurrence", (1, q), (1, label.len())));
        }
        let support = label.support();
        for &i in &support {
            n[i] += 1.0;
            for &j in &support {
                e[(i, j)] += 1.0;
            }
        }
    }
    Ok((e, n))
}

pub fn conditional_probability(e: &Matrix, n: &[f64], denominator: Denominator) -> Result<Matrix> {
    let q = n.len();
    if e.shape() != (q, q) {
        return Err(CvseError::shape("conditional_probability", e.shape(), (q, q)));
    }
    let mut p = Matrix::zeros(q, q);
    for i in 0..q {
        if denominator == Denominator::Row && n[i] == 0.0 {
            log::debug!("concept {i} never occurs; its conditional row is zero");
        }
        for j in 0..q {
            let count = match denominator {
                Denominator::Row => n[i],
                Denominator::Column => n[j],
            };
            if count > 0.0 {
                p[(i, j)] = e[(i, j)] / count;
            }
        }
    }
    Ok(p)
}

/// The confidence-scaling function `s^(p-u) - s^(-u)`.
pub fn f_cs(p: f64, s: f64, u: f64) -> f64 {
    s.powf(p - u) - s.powf(-u)
}

pub fn confidence_scale(p: &Matrix, s: f64, u: f64) -> Result<Matrix> {
    if !(s > 1.0) || !s.is_finite() {
        return Err(CvseError::Parameter(format!("confidence scale base s must exceed 1, got {s}")));
    }
    if !u.is_finite() {
        return Err(CvseError::Parameter(format!("confidence scale offset u must be finite, got {u}")));
    }
    Ok(p.map(|v| if v == 0.0 { 0.0 } else { f_cs(v, s, u) }))
}

/// `1` where `b >= epsilon`, else `0`.
pub fn binarize(b: &Matrix, epsilon: f64) -> Matrix {
    b.map(|v| if v >= epsilon { 1.0 } else { 0.0 })
}

pub fn normalize_adjacency(g: &Matrix) -> Result<Matrix> {
    let q = g.rows();
    if g.cols() != q {
        return Err(CvseError::shape("normalize_adjacency", g.shape(), (q, q)));
    }
    let mut sym = Matrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            sym[(i, j)] = if i == j { 1.0 } else { g[(i, j)].max(g[(j, i)]) };
        }
    }
    let inv_sqrt: Vec<f64> = (0..q)
        .map(|i| 1.0 / sym.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..q {
        for j in 0..q {
            sym[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(sym)
}

/// Stacked graph convolution `H ← ρ(Ã H W)` starting from `H = Y`.
pub fn gcn_forward(
    tape: &mut Tape,
    y: Var,
    adjacency: Var,
    weights: &[Var],
    final_activation: bool,
) -> Result<Var> {
    let mut h = y;
    for (layer, &w) in weights.iter().enumerate() {
        let propagated = tape.matmul(adjacency, h)?;
        let mixed = tape.matmul(propagated, w)?;
        let last = layer + 1 == weights.len();
        h = if last && !final_activation {
            mixed
        } else {
            tape.relu(mixed)
        };
    }
    Ok(h)
}

/// Plain evaluation of the graph encoder for fixed weights.
pub fn gcn_eval(y: &Matrix, adjacency: &Matrix, weights: &[Matrix], final_activation: bool) -> Result<Matrix> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let av = tape.constant(adjacency.clone());
    let ws: Vec<Var> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| tape.param(ParamId(i), w))
        .collect();
    let z = gcn_forward(&mut tape, yv, av, &ws, final_activation)?;
    Ok(tape.value(z).clone())
}
