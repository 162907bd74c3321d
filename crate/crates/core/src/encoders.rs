//! Instance-level encoders for regions and captions, pooled by query-guided attention.
//!
//! Gated recurrent convention (one step, row vectors):
//!
//! ```text
//! z  = σ(x·Wz + h·Uz + bz)
//! r  = σ(x·Wr + h·Ur + br)
//! h̃ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! Word features average the forward and backward states at each position.
//! Attention is single-head scaled dot-product: the query is the mean
//! fragment, keys and values are per-fragment projections, no residual.

use rand::Rng;

use crate::error::{CvseError, Result};
use crate::numeric::{Matrix, ParamId, Tape, Var};

/// Parameter handles for one direction of the recurrent encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

impl GruParams {
    pub fn ids(&self) -> [ParamId; 9] {
        [self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wh, self.uh, self.bh]
    }

    pub fn bind(&self, tape: &mut Tape, values: &[Matrix]) -> GruVars {
        let mut p = |id: ParamId| tape.param(id, &values[id.0]);
        GruVars {
            wz: p(self.wz),
            uz: p(self.uz),
            bz: p(self.bz),
            wr: p(self.wr),
            ur: p(self.ur),
            br: p(self.br),
            wh: p(self.wh),
            uh: p(self.uh),
            bh: p(self.bh),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

impl AttentionParams {
    pub fn ids(&self) -> [ParamId; 3] {
        [self.query, self.key, self.value]
    }

    pub fn bind(&self, tape: &mut Tape, values: &[Matrix]) -> AttentionVars {
        AttentionVars {
            query: tape.param(self.query, &values[self.query.0]),
            key: tape.param(self.key, &values[self.key.0]),
            value: tape.param(self.value, &values[self.value.0]),
        }
    }
}

/// Row-wise affine map `O·W + b`.
pub fn project_regions(tape: &mut Tape, regions: Var, weight: Var, bias: Var) -> Result<Var> {
    let projected = tape.matmul(regions, weight)?;
    tape.add_row(projected, bias)
}

/// Inverted dropout; identity when `rng` is `None` or `rate` is zero.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (rows, cols) = tape.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Matrix::from_vec(rows, cols, mask).expect("mask shape"));
    tape.mul(x, mask).expect("mask shape matches input")
}

/// Embedding rows for the given token ids.
pub fn embed_tokens(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(CvseError::Degenerate("cannot encode an empty token sequence".into()));
    }
    tape.gather_rows(table, ids)
}

/// Runs one recurrent direction over `inputs` (L×in). States come back in
/// sequence order regardless of direction.
pub fn gru_run(tape: &mut Tape, inputs: Var, cell: &GruVars, reverse: bool) -> Result<Vec<Var>> {
    let steps = tape.shape(inputs).0;
    let hidden = tape.shape(cell.uz).0;
    // Input contributions for all steps at once.
    let xz = tape.matmul(inputs, cell.wz)?;
    let xz = tape.add_row(xz, cell.bz)?;
    let xr = tape.matmul(inputs, cell.wr)?;
    let xr = tape.add_row(xr, cell.br)?;
    let xh = tape.matmul(inputs, cell.wh)?;
    let xh = tape.add_row(xh, cell.bh)?;

    let mut h = tape.constant(Matrix::zeros(1, hidden));
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let xz_t = tape.gather_rows(xz, &[t])?;
        let xr_t = tape.gather_rows(xr, &[t])?;
        let xh_t = tape.gather_rows(xh, &[t])?;

        let hz = tape.matmul(h, cell.uz)?;
        let z_pre = tape.add(xz_t, hz)?;
        let z = tape.sigmoid(z_pre);

        let hr = tape.matmul(h, cell.ur)?;
        let r_pre = tape.add(xr_t, hr)?;
        let r = tape.sigmoid(r_pre);

        let rh = tape.mul(r, h)?;
        let hh = tape.matmul(rh, cell.uh)?;
        let cand_pre = tape.add(xh_t, hh)?;
        let cand = tape.tanh(cand_pre);

        // h' = h + z ⊙ (h̃ − h)
        let delta = tape.sub(cand, h)?;
        let gated = tape.mul(z, delta)?;
        h = tape.add(h, gated)?;
        states[t] = h;
    }
    Ok(states)
}

/// Word-level features `(h_fwd + h_bwd) / 2`, one row per token.
pub fn encode_words(tape: &mut Tape, embedded: Var, forward: &GruVars, backward: &GruVars) -> Result<Var> {
    if tape.shape(embedded).0 == 0 {
        return Err(CvseError::Degenerate("cannot encode an empty token sequence".into()));
    }
    let fwd = gru_run(tape, embedded, forward, false)?;
    let bwd = gru_run(tape, embedded, backward, true)?;
    let mut rows = Vec::with_capacity(fwd.len());
    for (f, b) in fwd.into_iter().zip(bwd) {
        let s = tape.add(f, b)?;
        rows.push(tape.scale(s, 0.5));
    }
    tape.stack_rows(&rows)
}

/// Attention pooling; returns the pooled `1×d` row and the `1×K` attention weights.
pub fn attention_pool_with_scores(tape: &mut Tape, fragments: Var, attn: &AttentionVars) -> Result<(Var, Var)> {
    let (k, _) = tape.shape(fragments);
    if k == 0 {
        return Err(CvseError::Degenerate("attention over zero fragments".into()));
    }
    let mean = tape.mean_rows(fragments)?;
    let query = tape.matmul(mean, attn.query)?;
    let keys = tape.matmul(fragments, attn.key)?;
    let values = tape.matmul(fragments, attn.value)?;
    let logits = tape.matmul_t(query, keys)?;
    let width = tape.shape(attn.key).1 as f64;
    let scores = tape.row_softmax(logits, 1.0 / width.sqrt())?;
    let pooled = tape.matmul(scores, values)?;
    Ok((pooled, scores))
}

pub fn attention_pool(tape: &mut Tape, fragments: Var, attn: &AttentionVars) -> Result<Var> {
    attention_pool_with_scores(tape, fragments, attn).map(|(pooled, _)| pooled)
}

/// Region projection, dropout, attention pooling and normalisation.
#[allow(clippy::too_many_arguments)]
pub fn encode_image_instance<R: Rng + ?Sized>(
    tape: &mut Tape,
    regions: Var,
    weight: Var,
    bias: Var,
    attn: &AttentionVars,
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let projected = project_regions(tape, regions, weight, bias)?;
    let projected = dropout(tape, projected, dropout_rate, rng);
    let pooled = attention_pool(tape, projected, attn)?;
    tape.l2_normalize_rows(pooled)
}

/// Word encoding, dropout, attention pooling and normalisation.
#[allow(clippy::too_many_arguments)]
pub fn encode_text_instance<R: Rng + ?Sized>(
    tape: &mut Tape,
    table: Var,
    ids: &[usize],
    forward: &GruVars,
    backward: &GruVars,
    attn: &AttentionVars,
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let embedded = embed_tokens(tape, table, ids)?;
    let words = encode_words(tape, embedded, forward, backward)?;
    let words = dropout(tape, words, dropout_rate, rng);
    let pooled = attention_pool(tape, words, attn)?;
    tape.l2_normalize_rows(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn gru_vars(tape: &mut Tape, m: &[Matrix; 9]) -> GruVars {
        let mut c = |i: usize| tape.constant(m[i].clone());
        GruVars {
            wz: c(0),
            uz: c(1),
            bz: c(2),
            wr: c(3),
            ur: c(4),
            br: c(5),
            wh: c(6),
            uh: c(7),
            bh: c(8),
        }
    }

    fn random_cell(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> [Matrix; 9] {
        let w = |r, c, rng: &mut ChaCha8Rng| Matrix::gaussian(r, c, 0.5, rng);
        [
            w(input, hidden, rng),
            w(hidden, hidden, rng),
            w(1, hidden, rng),
            w(input, hidden, rng),
            w(hidden, hidden, rng),
            w(1, hidden, rng),
            w(input, hidden, rng),
            w(hidden, hidden, rng),
            w(1, hidden, rng),
        ]
    }

    /// Plain-loop reference of one recurrent direction.
    fn gru_oracle(x: &Matrix, m: &[Matrix; 9], reverse: bool) -> Vec<Vec<f64>> {
        let hidden = m[1].rows();
        let mut h = vec![0.0; hidden];
        let mut out = vec![vec![]; x.rows()];
        let order: Vec<usize> = if reverse { (0..x.rows()).rev().collect() } else { (0..x.rows()).collect() };
        let lin = |xr: &[f64], w: &Matrix, hv: &[f64], u: &Matrix, b: &Matrix, j: usize| {
            let mut s = b[(0, j)];
            for (i, xi) in xr.iter().enumerate() {
                s += xi * w[(i, j)];
            }
            for (i, hi) in hv.iter().enumerate() {
                s += hi * u[(i, j)];
            }
            s
        };
        for t in order {
            let xr = x.row(t);
            let z: Vec<f64> = (0..hidden).map(|j| sigmoid(lin(xr, &m[0], &h, &m[1], &m[2], j))).collect();
            let r: Vec<f64> = (0..hidden).map(|j| sigmoid(lin(xr, &m[3], &h, &m[4], &m[5], j))).collect();
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let cand: Vec<f64> = (0..hidden).map(|j| lin(xr, &m[6], &rh, &m[7], &m[8], j).tanh()).collect();
            h = (0..hidden).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect();
            out[t] = h.clone();
        }
        out
    }

    #[test]
    fn zero_cell_yields_zero_states() {
        let mut tape = Tape::new();
        let zeros = [
            Matrix::zeros(3, 4),
            Matrix::zeros(4, 4),
            Matrix::zeros(1, 4),
            Matrix::zeros(3, 4),
            Matrix::zeros(4, 4),
            Matrix::zeros(1, 4),
            Matrix::zeros(3, 4),
            Matrix::zeros(4, 4),
            Matrix::zeros(1, 4),
        ];
        let cell = gru_vars(&mut tape, &zeros);
        let x = tape.constant(Matrix::filled(5, 3, 0.7));
        let words = encode_words(&mut tape, x, &cell, &cell).unwrap();
        assert!(tape.value(words).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrence_matches_plain_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fwd = random_cell(3, 4, &mut rng);
        let bwd = random_cell(3, 4, &mut rng);
        let x = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (fv, bv) = (gru_vars(&mut tape, &fwd), gru_vars(&mut tape, &bwd));
        let xv = tape.constant(x.clone());
        let words = encode_words(&mut tape, xv, &fv, &bv).unwrap();
        let (of, ob) = (gru_oracle(&x, &fwd, false), gru_oracle(&x, &bwd, true));
        let w = tape.value(words);
        for t in 0..4 {
            for j in 0..4 {
                assert!((w[(t, j)] - 0.5 * (of[t][j] + ob[t][j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_averages_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fwd = random_cell(2, 3, &mut rng);
        let bwd = random_cell(2, 3, &mut rng);
        let x = Matrix::gaussian(1, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (fv, bv) = (gru_vars(&mut tape, &fwd), gru_vars(&mut tape, &bwd));
        let xv = tape.constant(x.clone());
        let words = encode_words(&mut tape, xv, &fv, &bv).unwrap();
        let (hf, hb) = (&gru_oracle(&x, &fwd, false)[0], &gru_oracle(&x, &bwd, false)[0]);
        for j in 0..3 {
            assert!((tape.value(words)[(0, j)] - 0.5 * (hf[j] + hb[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn reversing_tokens_reverses_features_with_shared_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cell = random_cell(3, 4, &mut rng);
        let x = Matrix::gaussian(3, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let cv = gru_vars(&mut tape, &cell);
        let xv = tape.constant(x.clone());
        let xr = tape.constant(x.gather_rows(&[2, 1, 0]));
        let a = encode_words(&mut tape, xv, &cv, &cv).unwrap();
        let b = encode_words(&mut tape, xr, &cv, &cv).unwrap();
        let a_rev = tape.value(a).gather_rows(&[2, 1, 0]);
        assert!(a_rev.max_abs_diff(tape.value(b)) < 1e-12);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut tape = Tape::new();
        let table = tape.constant(Matrix::zeros(3, 2));
        assert!(matches!(embed_tokens(&mut tape, table, &[]), Err(CvseError::Degenerate(_))));
    }

    fn attn(tape: &mut Tape, q: Matrix, k: Matrix, v: Matrix) -> AttentionVars {
        AttentionVars {
            query: tape.constant(q),
            key: tape.constant(k),
            value: tape.constant(v),
        }
    }

    #[test]
    fn projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let w = Matrix::gaussian(4, 2, 1.0, &mut rng);
        let b = Matrix::gaussian(1, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (ov, wv, bv) = (tape.constant(o.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let p = project_regions(&mut tape, ov, wv, bv).unwrap();
        let mut oracle = o.matmul(&w).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                oracle[(r, c)] += b[(0, c)];
            }
        }
        assert!(tape.value(p).max_abs_diff(&oracle) < 1e-12);

        let (zw, zb) = (tape.constant(Matrix::zeros(4, 2)), tape.constant(Matrix::zeros(1, 2)));
        let p = project_regions(&mut tape, ov, zw, zb).unwrap();
        assert_eq!(tape.value(p), &Matrix::zeros(3, 2));

        let (iw, ib) = (tape.constant(Matrix::identity(4)), tape.constant(Matrix::zeros(1, 4)));
        let p = project_regions(&mut tape, ov, iw, ib).unwrap();
        assert_eq!(tape.value(p), &o);

        let bad = tape.constant(Matrix::zeros(3, 2));
        assert!(project_regions(&mut tape, ov, bad, zb).is_err());
    }

    #[test]
    fn singleton_and_constant_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Matrix::gaussian(3, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = attn(&mut tape, Matrix::gaussian(3, 3, 1.0, &mut rng), Matrix::gaussian(3, 3, 1.0, &mut rng), v.clone());
        let frag = Matrix::row_vector(&[0.2, -1.0, 0.5]);
        let single = tape.constant(frag.clone());
        let out = attention_pool(&mut tape, single, &a).unwrap();
        assert!(tape.value(out).max_abs_diff(&frag.matmul(&v).unwrap()) < 1e-12);

        let same = tape.constant(frag.gather_rows(&[0, 0, 0, 0]));
        let out = attention_pool(&mut tape, same, &a).unwrap();
        assert!(tape.value(out).max_abs_diff(&frag.matmul(&v).unwrap()) < 1e-12);

        let none = tape.constant(Matrix::zeros(0, 3));
        assert!(attention_pool(&mut tape, none, &a).is_err());
    }

    #[test]
    fn two_fragment_attention_by_hand() {
        // Identity query/key, value doubles. Fragments (1,0) and (0,1) ⇒ mean (0.5,0.5),
        // logits 0.5 each ⇒ weights ½,½ ⇒ output (1,1). Break symmetry with (2,0),(0,1):
        // mean (1,0.5), logits (2, 0.5)/√2.
        let mut tape = Tape::new();
        let a = attn(&mut tape, Matrix::identity(2), Matrix::identity(2), Matrix::identity(2).scale(2.0));
        let frags = tape.constant(Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]));
        let (out, scores) = attention_pool_with_scores(&mut tape, frags, &a).unwrap();
        let (l1, l2) = (2.0 / 2f64.sqrt(), 0.5 / 2f64.sqrt());
        let w1 = l1.exp() / (l1.exp() + l2.exp());
        let w2 = 1.0 - w1;
        assert!((tape.value(scores).sum() - 1.0).abs() < 1e-12);
        assert!((tape.value(out)[(0, 0)] - w1 * 4.0).abs() < 1e-12);
        assert!((tape.value(out)[(0, 1)] - w2 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn image_instance_is_unit_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let o = Matrix::gaussian(5, 6, 1.0, &mut rng);
        let w = Matrix::gaussian(6, 4, 0.5, &mut rng);
        let b = Matrix::gaussian(1, 4, 0.5, &mut rng);
        let (q, k, v) = (
            Matrix::gaussian(4, 4, 0.5, &mut rng),
            Matrix::gaussian(4, 4, 0.5, &mut rng),
            Matrix::gaussian(4, 4, 0.5, &mut rng),
        );
        let run = |regions: Matrix| {
            let mut tape = Tape::new();
            let a = attn(&mut tape, q.clone(), k.clone(), v.clone());
            let (ov, wv, bv) = (tape.constant(regions), tape.constant(w.clone()), tape.constant(b.clone()));
            let out = encode_image_instance(&mut tape, ov, wv, bv, &a, 0.0, None::<&mut NoRng>).unwrap();
            tape.value(out).clone()
        };
        let base = run(o.clone());
        assert!((crate::numeric::norm(base.data()) - 1.0).abs() < 1e-12);
        let permuted = run(o.gather_rows(&[3, 0, 4, 1, 2]));
        assert!(base.max_abs_diff(&permuted) < 1e-9);
    }

    #[test]
    fn zero_projection_is_rejected_by_normalisation() {
        let mut tape = Tape::new();
        let a = attn(&mut tape, Matrix::identity(2), Matrix::identity(2), Matrix::identity(2));
        let o = tape.constant(Matrix::filled(3, 2, 1.0));
        let (w, b) = (tape.constant(Matrix::zeros(2, 2)), tape.constant(Matrix::zeros(1, 2)));
        let err = encode_image_instance(&mut tape, o, w, b, &a, 0.0, None::<&mut NoRng>).unwrap_err();
        assert_eq!(err.code(), "E_DEGENERATE");
    }

    #[test]
    fn dropout_is_identity_without_rng_and_scales_kept_units() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(20, 20, 1.0));
        assert_eq!(dropout(&mut tape, x, 0.4, None::<&mut NoRng>), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = dropout(&mut tape, x, 0.4, Some(&mut rng));
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12));
        assert!((150..330).contains(&kept), "{kept}");
    }
}
