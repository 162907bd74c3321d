//! End-to-end acceptance checks. Each test writes one `[acceptance NN] ... PASS|FAIL`
//! line straight to stderr (bypassing the test harness capture) and then asserts.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cvse::consensus::{textual_consensus, visual_consensus, ConsensusConfig};
use cvse::corpus::{read_corpus, read_lexicon, ConceptLabel, ConceptVocabulary};
use cvse::dataset::{Dataset, ImageItem, TextItem};
use cvse::eval::{evaluate, mean_recall, predict_concepts, ConceptGallery};
use cvse::graph::{f_cs, normalize_adjacency, CorrelationGraph, GraphConfig};
use cvse::model::{CvseModel, DataShape, ModelConfig, TextVocab};
use cvse::numeric::{Matrix, ParamId, Tape};
use cvse::objective::{kl_concept_alignment, total_loss, triplet_ranking, LossWeights, RankingMode};
use cvse::synthetic::{generate, SyntheticSpec};
use cvse::train::{train, Prepared, Trainer};

fn report(n: u32, name: &str, pass: bool, detail: impl std::fmt::Display) {
    let line = format!("[acceptance {n:02}] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::gaussian(rows, cols, 1.0, rng);
    for r in 0..rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn random_distribution(q: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // occasionally exactly zero entries, to exercise the floor
    let raw: Vec<f64> = (0..q).map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random::<f64>() }).collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        return vec![1.0 / q as f64; q];
    }
    raw.iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------- 01

#[test]
#[allow(clippy::needless_range_loop)]
fn graph_stages_match_counting_oracle() {
    let start = std::time::Instant::now();
    let records = read_corpus(&data_dir().join("toy_corpus.jsonl")).unwrap();
    let lexicon = read_lexicon(&data_dir().join("toy_lexicon.tsv")).unwrap();
    assert_eq!(records.len(), 20);
    let vocab = ConceptVocabulary::build(&records, &lexicon, 20).unwrap();
    let q = vocab.len();
    let config = GraphConfig { s: 5.0, u: 0.02, epsilon: 0.3, ..Default::default() };

    // oracle: independent tokenisation and plain loops over token sets
    let image_sets: Vec<BTreeSet<usize>> = records
        .iter()
        .map(|r| {
            let mut set = BTreeSet::new();
            for c in &r.captions {
                let lowered = c.to_lowercase();
                for w in lowered.split(|ch: char| !ch.is_alphanumeric()).filter(|w| !w.is_empty()) {
                    if let Some(i) = (0..q).find(|&i| vocab.token(i) == w) {
                        set.insert(i);
                    }
                }
            }
            set
        })
        .collect();
    let mut e_ref = vec![vec![0u64; q]; q];
    let mut n_ref = vec![0u64; q];
    for set in &image_sets {
        for i in 0..q {
            if set.contains(&i) {
                n_ref[i] += 1;
            }
            for j in 0..q {
                if set.contains(&i) && set.contains(&j) {
                    e_ref[i][j] += 1;
                }
            }
        }
    }
    let ln_s = 5f64.ln();
    let f = |p: f64| (ln_s * (p - 0.02)).exp() - (ln_s * -0.02).exp();

    let labels: Vec<ConceptLabel> = image_sets
        .iter()
        .map(|s| ConceptLabel::from_bits(&(0..q).map(|i| s.contains(&i) as u8).collect::<Vec<_>>()))
        .collect();
    let g = CorrelationGraph::build(&labels, &config).unwrap();

    let mut int_ok = true;
    let (mut p_err, mut b_err) = (0f64, 0f64);
    let mut g_ok = true;
    for i in 0..q {
        int_ok &= g.occurrence[i] == n_ref[i] as f64;
        for j in 0..q {
            int_ok &= g.cooccurrence[(i, j)] == e_ref[i][j] as f64;
            let p = if n_ref[i] == 0 { 0.0 } else { e_ref[i][j] as f64 / n_ref[i] as f64 };
            let b = f(p);
            p_err = p_err.max((g.conditional[(i, j)] - p).abs());
            b_err = b_err.max((g.rescaled[(i, j)] - b).abs());
            g_ok &= g.binary[(i, j)] == if b >= 0.3 { 1.0 } else { 0.0 };
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = int_ok && g_ok && p_err <= 1e-12 && b_err <= 1e-12 && elapsed < 1.0;
    report(
        1,
        "graph stages vs brute-force oracle",
        pass,
        format!("q={q}, edges={}, E/N exact={int_ok}, G exact={g_ok}, P err={p_err:.1e}, B err={b_err:.1e}, {elapsed:.3}s", g.edge_count()),
    );
}

// ---------------------------------------------------------------- 02

#[test]
fn confidence_scaling_spot_values() {
    // 40-digit reference: 5^0.28 - 5^-0.02
    const REFERENCE: f64 = 0.600_996_545_345_121_2;
    let zero = f_cs(0.0, 5.0, 0.02);
    let v = f_cs(0.3, 5.0, 0.02);
    let pass = zero == 0.0 && (v - 0.60101).abs() <= 1e-4 && (v - REFERENCE).abs() <= 1e-15;
    report(
        2,
        "confidence scaling spot values",
        pass,
        format!("f(0)={zero}, f(0.3)={v:.16}, |f-0.60101|={:.2e}, |f-ref|={:.1e}", (v - 0.60101).abs(), (v - REFERENCE).abs()),
    );
}

// ---------------------------------------------------------------- 03

struct GradFixture {
    model: CvseModel,
    regions: Vec<Matrix>,
    captions: Vec<Vec<usize>>,
    labels: Matrix,
    weights: LossWeights,
}

impl GradFixture {
    fn new() -> Self {
        let (q, d, m, feat, word, batch, len) = (8, 8, 2, 5, 6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let words: Vec<String> = ["dog", "cat", "runs", "sits", "grass", "red"].iter().map(|s| s.to_string()).collect();
        let text_vocab = TextVocab::from_tokens(words);
        let config = ModelConfig { d, word_dim: word, dropout: 0.0, ..Default::default() };
        let y = Matrix::gaussian(q, word, 1.0, &mut rng);
        let mut g = Matrix::zeros(q, q);
        for i in 0..q {
            for j in 0..q {
                if i != j && rng.random_bool(0.35) {
                    g[(i, j)] = 1.0;
                }
            }
        }
        let a = normalize_adjacency(&g).unwrap();
        let shape = DataShape { feature_dim: feat, text_vocab: text_vocab.len(), concepts: q };
        let model = CvseModel::new(config, vec![d], true, shape, &text_vocab, None, y, a, 5).unwrap();
        let regions = (0..batch).map(|_| Matrix::gaussian(m, feat, 1.0, &mut rng)).collect();
        let captions = (0..batch).map(|_| (0..len).map(|_| rng.random_range(0..text_vocab.len())).collect()).collect();
        let mut labels = Matrix::zeros(batch, q);
        for r in 0..batch {
            for c in 0..q {
                if rng.random_bool(0.3) {
                    labels[(r, c)] = 1.0;
                }
            }
        }
        GradFixture { model, regions, captions, labels, weights: LossWeights::default() }
    }

    fn loss(&self, tape: &mut Tape) -> cvse::numeric::Var {
        let r: Vec<&Matrix> = self.regions.iter().collect();
        let c: Vec<&[usize]> = self.captions.iter().map(Vec::as_slice).collect();
        let out = self.model.forward_batch(tape, &r, &c, &self.labels, None::<&mut ChaCha8Rng>).unwrap();
        total_loss(tape, &out, &self.weights).unwrap().0
    }

    fn loss_value(&self) -> f64 {
        let mut tape = Tape::new();
        let l = self.loss(&mut tape);
        tape.scalar(l).unwrap()
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let mut fx = GradFixture::new();
    let mut tape = Tape::new();
    let l = fx.loss(&mut tape);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Matrix> = (0..fx.model.params.len())
        .map(|i| grads.param(ParamId(i), fx.model.params.get(ParamId(i)).shape()))
        .collect();

    let h = 1e-5;
    // relative error with a small absolute floor so that near-zero entries
    // are judged by their absolute deviation
    let floor = 1e-6;
    let mut worst = 0f64;
    let mut worst_name = String::new();
    let mut groups = Vec::new();
    for (i, grad) in analytic.iter().enumerate() {
        let id = ParamId(i);
        let name = fx.model.params.name(id).to_owned();
        let mut group_worst = 0f64;
        for k in 0..grad.len() {
            let orig = fx.model.params.get(id).data()[k];
            fx.model.params.get_mut(id).data_mut()[k] = orig + h;
            let up = fx.loss_value();
            fx.model.params.get_mut(id).data_mut()[k] = orig - h;
            let down = fx.loss_value();
            fx.model.params.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            group_worst = group_worst.max(rel);
        }
        if group_worst > worst {
            worst = group_worst;
            worst_name = name.clone();
        }
        groups.push(name);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let nonzero = analytic.iter().filter(|g| g.data().iter().any(|&v| v != 0.0)).count();
    let pass = worst < 1e-4 && nonzero == analytic.len() && elapsed < 30.0;
    report(
        3,
        "full-model finite-difference gradient check",
        pass,
        format!(
            "{} groups ({} with nonzero gradient), max rel err {worst:.2e} in {worst_name}, {elapsed:.1}s",
            groups.len(),
            nonzero
        ),
    );
}

// ---------------------------------------------------------------- 04

#[test]
fn consensus_scores_are_distributions_and_linear_in_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum = 0f64;
    let mut min_entry = f64::INFINITY;
    let mut worst_linear = 0f64;
    for _ in 0..1000 {
        let batch = rng.random_range(1..6);
        let q = rng.random_range(2..12);
        let d = rng.random_range(2..10);
        let lambda = rng.random_range(0.5..20.0);
        let inst = unit_rows(batch, d, &mut rng);
        let z = Matrix::gaussian(q, d, 1.0, &mut rng);
        let w = Matrix::gaussian(d, d, 1.0, &mut rng);
        let mut labels = Matrix::zeros(batch, q);
        labels.data_mut().iter_mut().for_each(|v| *v = rng.random_bool(0.3) as u8 as f64);

        let mut tape = Tape::new();
        let (iv, zv, wv) = (tape.constant(inst), tape.constant(z), tape.constant(w));
        let (av, _) = visual_consensus(&mut tape, iv, zv, wv, lambda).unwrap();
        let mut at = Vec::new();
        for alpha in [0.0, 0.5, 1.0] {
            let cc = ConsensusConfig { lambda, alpha, ..Default::default() };
            let (a, _) = textual_consensus(&mut tape, iv, &labels, zv, wv, &cc).unwrap();
            at.push(tape.value(a).clone());
        }
        for m in std::iter::once(tape.value(av)).chain(&at) {
            for r in 0..m.rows() {
                worst_sum = worst_sum.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
                min_entry = min_entry.min(m.row(r).iter().cloned().fold(f64::INFINITY, f64::min));
            }
        }
        for k in 0..at[1].len() {
            let mid = 0.5 * at[0].data()[k] + 0.5 * at[2].data()[k];
            worst_linear = worst_linear.max((at[1].data()[k] - mid).abs());
        }
    }
    let pass = worst_sum <= 1e-6 && min_entry >= 0.0 && worst_linear <= 1e-9;
    report(
        4,
        "concept score distributions and alpha linearity",
        pass,
        format!("1000 draws, max |sum-1|={worst_sum:.1e}, min entry={min_entry:.1e}, max linearity err={worst_linear:.1e}"),
    );
}

// ---------------------------------------------------------------- 05

fn brute_force_sum(s: &Matrix, margin: f64) -> f64 {
    let b = s.rows();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                total += (margin - s[(i, i)] + s[(i, j)]).max(0.0);
                total += (margin - s[(i, i)] + s[(j, i)]).max(0.0);
            }
        }
    }
    total
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a.max(1e-12).ln() - b.max(1e-12).ln()) }).sum()
}

#[test]
fn ranking_and_alignment_losses_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum_err = 0f64;
    let mut ordering_ok = true;
    for _ in 0..50 {
        let b = rng.random_range(2..10);
        let d = rng.random_range(2..8);
        let margin = rng.random_range(0.05..0.6);
        let (im, tx) = (unit_rows(b, d, &mut rng), unit_rows(b, d, &mut rng));
        let oracle = brute_force_sum(&im.matmul_t(&tx).unwrap(), margin);
        let mut tape = Tape::new();
        let (iv, tv) = (tape.constant(im), tape.constant(tx));
        let sum = triplet_ranking(&mut tape, iv, tv, margin, RankingMode::Sum).unwrap();
        let hard = triplet_ranking(&mut tape, iv, tv, margin, RankingMode::Hardest).unwrap();
        let (sum, hard) = (tape.scalar(sum).unwrap(), tape.scalar(hard).unwrap());
        sum_err = sum_err.max((sum - oracle).abs());
        ordering_ok &= hard <= sum + 1e-12;
    }
    let mut min_kl = f64::INFINITY;
    let mut kl_err = 0f64;
    for _ in 0..100 {
        let q = rng.random_range(2..16);
        let (p, r) = (random_distribution(q, &mut rng), random_distribution(q, &mut rng));
        let mut tape = Tape::new();
        let pv = tape.constant(Matrix::row_vector(&p));
        let rv = tape.constant(Matrix::row_vector(&r));
        let kl = kl_concept_alignment(&mut tape, pv, rv).unwrap();
        let kl = tape.scalar(kl).unwrap();
        min_kl = min_kl.min(kl);
        kl_err = kl_err.max((kl - kl_oracle(&p, &r)).abs());
    }
    let pass = sum_err <= 1e-10 && ordering_ok && min_kl >= 0.0 && kl_err <= 1e-10;
    report(
        5,
        "ranking and alignment loss oracles",
        pass,
        format!("sum-mode max err={sum_err:.1e}, hardest<=sum on all 50={ordering_ok}, min KL={min_kl:.2e}, KL oracle err={kl_err:.1e}"),
    );
}

// ---------------------------------------------------------------- 06, 08, 09

fn synthetic_trainer(seed: u64, beta: Option<f64>) -> (Trainer, Prepared) {
    let set = generate(seed, &SyntheticSpec::default()).unwrap();
    let mut config = set.config.clone();
    if let Some(b) = beta {
        config.model.beta = b;
    }
    let lexicon: HashMap<_, _> = set.lexicon.clone().into_iter().collect();
    let prepared = Prepared::from_parts(&config, set.records, &set.features, &lexicon, Some(set.words)).unwrap();
    let mut trainer = Trainer::new(config.clone(), prepared.model(&config).unwrap());
    trainer.validate = false;
    for _ in 0..config.train.epochs {
        trainer.epoch(&prepared.data, None, |_, _| {}).unwrap();
    }
    (trainer, prepared)
}

#[test]
fn overfits_synthetic_pairs() {
    let start = std::time::Instant::now();
    let (trainer, prepared) = synthetic_trainer(7, None);
    let k = trainer.config.inference.k;
    let m = evaluate(&trainer.model, &prepared.data, &prepared.data, k).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = m.r1_t >= 0.9 && m.r1_i >= 0.9 && elapsed < 300.0;
    report(
        6,
        "synthetic overfit self-retrieval",
        pass,
        format!("64 pairs, q=32, d=64, batch 16, 200 epochs: R@1 image->text {:.4}, text->image {:.4}, mR {:.4}, {elapsed:.1}s", m.r1_t, m.r1_i, m.mr),
    );
}

#[test]
fn mean_recall_arithmetic() {
    let mr = mean_recall(&[74.8, 95.1, 98.3, 59.9, 89.4, 95.2]).unwrap();
    report(7, "mean recall arithmetic", (mr - 85.45).abs() <= 0.05, format!("mR={mr:.4}"));
}

#[test]
fn fused_embedding_beats_single_levels() {
    let seeds = [1u64, 2, 3];
    let mut means = Vec::new();
    for beta in [0.75, 1.0, 0.0] {
        let mrs: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let (trainer, prepared) = synthetic_trainer(s, Some(beta));
                evaluate(&trainer.model, &prepared.data, &prepared.data, trainer.config.inference.k).unwrap().mr
            })
            .collect();
        means.push(mrs.iter().sum::<f64>() / mrs.len() as f64);
    }
    let pass = means[0] >= means[1] && means[0] >= means[2];
    report(
        8,
        "fusion ablation ordering",
        pass,
        format!("mean mR over seeds 1-3: fused {:.4}, instance-only {:.4}, consensus-only {:.4}", means[0], means[1], means[2]),
    );
}

#[test]
fn training_is_byte_deterministic() {
    let set = generate(11, &SyntheticSpec::default()).unwrap();
    let root = tempfile::tempdir().unwrap();
    set.write(root.path()).unwrap();
    let config_path = root.path().join("config.json");
    let config = cvse::config::RunConfig::resolve(Some(&config_path), &[]).unwrap();
    let prepared = Prepared::load(&config).unwrap();
    let bytes: Vec<(Vec<u8>, Vec<u8>)> = ["a", "b"]
        .iter()
        .map(|run| {
            let dir = root.path().join(run);
            train(&config, &prepared, Some(&dir)).unwrap();
            (std::fs::read(dir.join("checkpoint.bin")).unwrap(), std::fs::read(dir.join("checkpoint.bin.json")).unwrap())
        })
        .collect();
    let pass = bytes[0] == bytes[1];
    report(
        9,
        "byte-identical checkpoints under a fixed seed",
        pass,
        format!("{} epochs, checkpoint {} bytes, sidecar {} bytes", config.train.epochs, bytes[0].0.len(), bytes[0].1.len()),
    );
}

// ---------------------------------------------------------------- 10

fn knn_oracle(query: &[f64], texts: &Matrix, images: &Matrix, labels: &[ConceptLabel], k: usize) -> Vec<bool> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let top = |q: &[f64], m: &Matrix, n: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..m.rows()).collect();
        idx.sort_by(|&a, &b| dot(q, m.row(b)).total_cmp(&dot(q, m.row(a))).then(a.cmp(&b)));
        idx.into_iter().take(n).collect()
    };
    let best_image = top(query, images, 1)[0];
    let mut chosen: BTreeSet<usize> = top(query, texts, k).into_iter().collect();
    chosen.extend(top(images.row(best_image), texts, k));
    let q = labels[0].len();
    (0..q).map(|c| chosen.iter().any(|&j| labels[j].get(c))).collect()
}

#[test]
fn concept_prediction_matches_knn_union_oracle() {
    let captions = [
        "a dog runs on the grass",
        "a red car on the road",
        "a cat sits on a bench",
        "a man rides a red bike on the road",
        "a dog and a cat on the grass",
    ];
    let concepts = ["dog", "grass", "car", "road", "cat", "bench", "man", "bike", "red", "runs"];
    let tokens: Vec<String> = captions.iter().flat_map(|c| c.split(' ').map(str::to_owned)).collect();
    let text_vocab = TextVocab::from_tokens(tokens);
    let q = concepts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let config = ModelConfig { d: 12, word_dim: 8, dropout: 0.0, ..Default::default() };
    let y = Matrix::gaussian(q, 8, 1.0, &mut rng);
    let a = normalize_adjacency(&Matrix::identity(q)).unwrap();
    let shape = DataShape { feature_dim: 6, text_vocab: text_vocab.len(), concepts: q };
    let model = CvseModel::new(config, vec![12], true, shape, &text_vocab, None, y, a, 3).unwrap();

    let mut gallery = Dataset::default();
    for (i, c) in captions.iter().enumerate() {
        let bits: Vec<u8> = concepts.iter().map(|t| c.split(' ').any(|w| w == *t) as u8).collect();
        let label = ConceptLabel::from_bits(&bits);
        gallery.images.push(ImageItem { id: format!("g{i}"), regions: Matrix::gaussian(3, 6, 1.0, &mut rng), label: label.clone() });
        gallery.texts.push(TextItem { image: i, caption: c.to_string(), tokens: text_vocab.encode(c), label });
    }
    let z = model.concept_matrix().unwrap();
    let g = ConceptGallery::build(&model, &z, &gallery).unwrap();
    let queries = ["a dog on the road", "a red cat", "a man on a bench", "grass", "unknown words only"];
    let encoded: Vec<Vec<usize>> = queries.iter().map(|s| text_vocab.encode(s)).collect();
    let refs: Vec<&[usize]> = encoded.iter().map(Vec::as_slice).collect();
    let predicted = predict_concepts(&model, &z, &refs, &g, 3).unwrap();

    let unlabeled = Matrix::zeros(refs.len(), q);
    let pass1 = model.embed_texts(&z, &refs, &unlabeled, 0.0).unwrap().fused;
    let mut matches = 0;
    for (r, p) in predicted.iter().enumerate() {
        if p.bits() == knn_oracle(pass1.row(r), &g.texts, &g.images, &g.labels, 3).as_slice() {
            matches += 1;
        }
    }
    report(
        10,
        "concept prediction vs KNN-union oracle",
        matches == queries.len(),
        format!("{matches}/{} queries match on a 5-sentence gallery, k=3", queries.len()),
    );
}
