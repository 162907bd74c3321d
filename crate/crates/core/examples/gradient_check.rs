//! Finite-difference check of the full training loss against the tape's
//! reverse-mode gradients, one line per parameter tensor.
//!
//! cargo run --release --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cvse::graph::normalize_adjacency;
use cvse::model::{CvseModel, DataShape, ModelConfig, TextVocab};
use cvse::numeric::{Matrix, ParamId, Tape};
use cvse::objective::{total_loss, LossWeights};

fn main() -> cvse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, d, feat, word, batch) = (6, 8, 5, 4, 3);
    let vocab = TextVocab::from_tokens(["a", "dog", "cat", "runs", "sleeps"].map(String::from).to_vec());
    let config = ModelConfig { d, word_dim: word, dropout: 0.0, ..Default::default() };
    let mut g = Matrix::zeros(q, q);
    for i in 0..q - 1 {
        g[(i, i + 1)] = 1.0;
    }
    let shape = DataShape { feature_dim: feat, text_vocab: vocab.len(), concepts: q };
    let y = Matrix::gaussian(q, word, 1.0, &mut rng);
    let mut model = CvseModel::new(config, vec![d], true, shape, &vocab, None, y, normalize_adjacency(&g)?, 2)?;

    let regions: Vec<Matrix> = (0..batch).map(|_| Matrix::gaussian(3, feat, 1.0, &mut rng)).collect();
    let captions: Vec<Vec<usize>> = (0..batch).map(|_| (0..4).map(|_| rng.random_range(0..vocab.len())).collect()).collect();
    let mut labels = Matrix::zeros(batch, q);
    labels.data_mut().iter_mut().for_each(|v| *v = rng.random_bool(0.4) as u8 as f64);
    let weights = LossWeights::default();

    let loss = |m: &CvseModel, tape: &mut Tape| -> cvse::Result<_> {
        let r: Vec<&Matrix> = regions.iter().collect();
        let c: Vec<&[usize]> = captions.iter().map(Vec::as_slice).collect();
        let out = m.forward_batch(tape, &r, &c, &labels, None::<&mut ChaCha8Rng>)?;
        Ok(total_loss(tape, &out, &weights)?.0)
    };
    let mut tape = Tape::new();
    let l = loss(&model, &mut tape)?;
    println!("loss {:.6}", tape.scalar(l)?);
    let grads = tape.backward(l)?;

    let h = 1e-5;
    for i in 0..model.params.len() {
        let id = ParamId(i);
        let analytic = grads.param(id, model.params.get(id).shape());
        let mut worst = 0f64;
        for k in 0..analytic.len() {
            let orig = model.params.get(id).data()[k];
            let mut eval = |v: f64| -> cvse::Result<f64> {
                model.params.get_mut(id).data_mut()[k] = v;
                let mut t = Tape::new();
                let l = loss(&model, &mut t)?;
                t.scalar(l)
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            model.params.get_mut(id).data_mut()[k] = orig;
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{:<16} {:>4} entries  max rel err {worst:.2e}", model.params.name(id), analytic.len());
    }
    Ok(())
}
