//! Data preparation, the training loop and checkpoint round trips.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{read_corpus, read_lexicon, CaptionRecord, ConceptType, ConceptVocabulary, WordVectorTable};
use crate::dataset::Dataset;
use crate::error::{CvseError, Result};
use crate::eval::{evaluate, Metrics};
use crate::graph::CorrelationGraph;
use crate::io::{read_checkpoint, read_features, write_checkpoint, CheckpointMeta, FeatureSet};
use crate::model::{CvseModel, DataShape, TextVocab};
use crate::numeric::{Matrix, OptimizerState, Tape};
use crate::objective::{total_loss, LossBreakdown};

/// Everything derived from the raw inputs before a model exists.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub records: Vec<CaptionRecord>,
    pub vocab: ConceptVocabulary,
    pub text_vocab: TextVocab,
    pub words: Option<WordVectorTable>,
    pub graph: CorrelationGraph,
    pub data: Dataset,
    /// Initial concept vectors `Y`.
    pub y: Matrix,
}

impl Prepared {
    pub fn from_parts(
        config: &RunConfig,
        records: Vec<CaptionRecord>,
        features: &FeatureSet,
        lexicon: &HashMap<String, ConceptType>,
        words: Option<WordVectorTable>,
    ) -> Result<Self> {
        let vocab = ConceptVocabulary::build(&records, lexicon, config.vocab.q)?;
        let text_vocab = TextVocab::build(&records);
        let data = Dataset::assemble(&records, features, &vocab, &text_vocab, config.graph.per_caption)?;
        let graph = CorrelationGraph::build(&data.graph_labels(config.graph.per_caption), &config.graph)?;
        let wd = config.model.word_dim;
        let table = match &words {
            Some(w) if w.dim() != wd => {
                return Err(CvseError::Config {
                    key: "model.word_dim".into(),
                    msg: format!("word vectors have {} dims", w.dim()),
                })
            }
            Some(w) => w.clone(),
            None => WordVectorTable::new(wd),
        };
        let y = table.concept_matrix(&vocab, config.train.seed);
        Ok(Prepared { records, vocab, text_vocab, words, graph, data, y })
    }

    /// Reads every input named in `config.paths`.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let records = read_corpus(config.require(&config.paths.corpus, "paths.corpus")?)?;
        let features = read_features(config.require(&config.paths.features, "paths.features")?)?;
        let lexicon = match &config.paths.lexicon {
            Some(p) => read_lexicon(p)?,
            None => HashMap::new(),
        };
        let words = match &config.paths.word_vectors {
            Some(p) => Some(WordVectorTable::load(p, config.model.word_dim)?),
            None => None,
        };
        Self::from_parts(config, records, &features, &lexicon, words)
    }

    pub fn model(&self, config: &RunConfig) -> Result<CvseModel> {
        let feature_dim = self.data.images.first().map_or(0, |i| i.regions.cols());
        let shape = DataShape { feature_dim, text_vocab: self.text_vocab.len(), concepts: self.vocab.len() };
        CvseModel::new(
            config.model.clone(),
            config.graph.gcn_hidden.clone(),
            config.graph.final_activation,
            shape,
            &self.text_vocab,
            self.words.as_ref(),
            self.y.clone(),
            self.graph.adjacency.clone(),
            config.train.seed,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean per-term loss over the epoch's batches.
    pub loss: LossBreakdown,
    pub validation: Option<Metrics>,
}

/// Model plus optimiser state and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: CvseModel,
    pub optim: OptimizerState,
    pub epoch: usize,
    /// Validate after each epoch.
    pub validate: bool,
}

impl Trainer {
    pub fn new(config: RunConfig, model: CvseModel) -> Self {
        let optim = OptimizerState::new(config.train.adam(config.train.lr), model.params.values());
        Trainer { config, model, optim, epoch: 0, validate: true }
    }

    /// One optimiser update on the given texts (and their images).
    pub fn step(&mut self, data: &Dataset, texts: &[usize], rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let regions: Vec<&Matrix> = texts.iter().map(|&t| &data.images[data.texts[t].image].regions).collect();
        let captions: Vec<&[usize]> = texts.iter().map(|&t| data.texts[t].tokens.as_slice()).collect();
        let rows: Vec<Vec<f64>> = texts.iter().map(|&t| data.texts[t].label.to_f64()).collect();
        let labels = Matrix::stack(&rows)?;

        let mut tape = Tape::new();
        let out = self.model.forward_batch(&mut tape, &regions, &captions, &labels, Some(rng))?;
        let (loss, breakdown) = total_loss(&mut tape, &out, &self.config.loss)?;
        let grads = tape.backward(loss)?;
        let grads: Vec<Matrix> = self
            .model
            .params
            .values()
            .iter()
            .enumerate()
            .map(|(i, p)| grads.param(crate::numeric::ParamId(i), p.shape()))
            .collect();
        self.optim.step(self.model.params.values_mut(), &grads)?;
        Ok(breakdown)
    }

    /// Shuffled pass over `train`; trailing batches smaller than two are skipped.
    pub fn epoch(
        &mut self,
        train: &Dataset,
        val: Option<(&Dataset, &Dataset)>,
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<EpochReport> {
        if train.texts.len() < 2 {
            return Err(CvseError::InsufficientBatch(train.texts.len()));
        }
        self.epoch += 1;
        let lr = self.config.train.lr_for_epoch(self.epoch);
        self.optim.set_lr(lr);
        let seed = self.config.train.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..train.texts.len()).collect();
        order.shuffle(&mut rng);

        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for batch in order.chunks(self.config.train.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let b = self.step(train, batch, &mut rng)?;
            on_step(self.optim.step, &b);
            sum.fused += b.fused;
            sum.instance += b.instance;
            sum.consensus += b.consensus;
            sum.kl += b.kl;
            sum.total += b.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let loss = LossBreakdown {
            fused: sum.fused / n,
            instance: sum.instance / n,
            consensus: sum.consensus / n,
            kl: sum.kl / n,
            total: sum.total / n,
        };
        let validation = match val {
            Some((val, gallery)) if self.validate => Some(evaluate(&self.model, val, gallery, self.config.inference.k)?),
            _ => None,
        };
        match &validation {
            Some(m) => log::info!(
                "epoch {} lr {lr:e} loss {:.5} val R@1 t {:.3} i {:.3}",
                self.epoch,
                loss.total,
                m.r1_t,
                m.r1_i
            ),
            None => log::info!("epoch {} lr {lr:e} loss {:.5}", self.epoch, loss.total),
        }
        Ok(EpochReport { epoch: self.epoch, lr, steps, loss, validation })
    }

    /// Named sections: parameters, Adam moments, then the fixed graph inputs.
    pub fn sections(&self) -> Vec<(String, &Matrix)> {
        let p = &self.model.params;
        let mut out: Vec<(String, &Matrix)> = p.names().iter().cloned().zip(p.values()).collect();
        out.extend(p.names().iter().map(|n| format!("adam.m.{n}")).zip(&self.optim.first));
        out.extend(p.names().iter().map(|n| format!("adam.v.{n}")).zip(&self.optim.second));
        out.push(("graph.y".into(), &self.model.y));
        out.push(("graph.a_norm".into(), &self.model.adjacency));
        out
    }

    pub fn save(&self, path: &Path, text_vocab: &TextVocab, concepts: &ConceptVocabulary) -> Result<()> {
        let meta = CheckpointMeta {
            config_hash: self.config.hash(),
            epoch: self.epoch,
            step: self.optim.step,
            text_vocab: text_vocab.tokens().to_vec(),
            concepts: concepts.entries().to_vec(),
            config: serde_json::to_value(&self.config)?,
        };
        write_checkpoint(path, &self.sections(), &meta)
    }

    /// Restores a trainer, its text vocabulary and concept vocabulary.
    pub fn load(path: &Path) -> Result<(Self, TextVocab, ConceptVocabulary)> {
        let (sections, meta) = read_checkpoint(path)?;
        let fmt = |msg: String| CvseError::Format { path: path.display().to_string(), msg };
        let config: RunConfig = serde_json::from_value(meta.config.clone()).map_err(|e| fmt(e.to_string()))?;
        let named: HashMap<String, Matrix> = sections.into_iter().collect();
        let get = |name: &str| named.get(name).cloned().ok_or_else(|| fmt(format!("missing section `{name}`")));
        let y = get("graph.y")?;
        let adjacency = get("graph.a_norm")?;
        let feature_dim = get("img.proj.w")?.rows();
        let text_vocab = TextVocab::from_tokens(meta.text_vocab.clone());
        if text_vocab.tokens() != meta.text_vocab.as_slice() {
            return Err(fmt("text vocabulary is not in canonical order".into()));
        }
        let shape = DataShape { feature_dim, text_vocab: text_vocab.len(), concepts: y.rows() };
        let mut model = CvseModel::new(
            config.model.clone(),
            config.graph.gcn_hidden.clone(),
            config.graph.final_activation,
            shape,
            &text_vocab,
            None,
            y,
            adjacency,
            config.train.seed,
        )?;
        model.params.load_named(&named).map_err(|e| fmt(e.to_string()))?;
        let mut trainer = Trainer::new(config, model);
        for (i, name) in trainer.model.params.names().to_vec().iter().enumerate() {
            trainer.optim.first[i] = get(&format!("adam.m.{name}"))?;
            trainer.optim.second[i] = get(&format!("adam.v.{name}"))?;
        }
        trainer.optim.step = meta.step;
        trainer.epoch = meta.epoch;
        let concepts = ConceptVocabulary::from_entries(meta.concepts)?;
        if concepts.len() != trainer.model.concepts() {
            return Err(fmt("concept vocabulary disagrees with graph.y".into()));
        }
        Ok((trainer, text_vocab, concepts))
    }
}

/// Appends `step,L_F,L_I,L_C,D_KL,total` rows, writing the header for new files.
pub struct LossLog {
    path: PathBuf,
    out: fs::File,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut out = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| CvseError::io(path, e))?;
        if fresh {
            writeln!(out, "step,L_F,L_I,L_C,D_KL,total").map_err(|e| CvseError::io(path, e))?;
        }
        Ok(LossLog { path: path.to_owned(), out })
    }

    pub fn append(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{step},{},{},{},{},{}", b.fused, b.instance, b.consensus, b.kl, b.total)
            .map_err(|e| CvseError::io(&self.path, e))
    }
}

/// Summary of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<EpochReport>,
}

/// Trains for `config.train.epochs`. With `out_dir` a checkpoint
/// (`checkpoint.bin`) is written after every epoch and losses go to `loss_log.csv`.
pub fn train(config: &RunConfig, prepared: &Prepared, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let (train_set, val_set) = prepared.data.split(config.train.val_fraction, config.train.seed);
    let model = prepared.model(config)?;
    let mut trainer = Trainer::new(config.clone(), model);
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CvseError::io(dir, e))?;
            Some(LossLog::open(&dir.join("loss_log.csv"))?)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(config.train.epochs);
    for _ in 0..config.train.epochs {
        let mut log_err = None;
        let report = trainer.epoch(&train_set, Some((&val_set, &train_set)), |step, b| {
            if let Some(l) = log.as_mut() {
                if let Err(e) = l.append(step, b) {
                    log_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = log_err {
            return Err(e);
        }
        if let Some(dir) = out_dir {
            trainer.save(&dir.join("checkpoint.bin"), &prepared.text_vocab, &prepared.vocab)?;
        }
        history.push(report);
    }
    Ok(TrainOutcome { trainer, history })
}
