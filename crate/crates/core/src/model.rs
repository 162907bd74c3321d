//! Parameter store and the composed forward pass: graph encoder, both
//! instance encoders, consensus branches and fusion.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{fuse, textual_consensus, visual_consensus, ConsensusConfig};
use crate::corpus::{fallback_vector, tokenize, CaptionRecord, WordVectorTable};
use crate::encoders::{encode_image_instance, encode_text_instance, AttentionParams, GruParams};
use crate::error::{CvseError, Result};
use crate::graph::gcn_forward;
use crate::numeric::{Matrix, ParamId, Tape, Var};
use crate::objective::BatchOutputs;

pub const UNK: &str = "<unk>";

/// Caption vocabulary for the embedding table; index 0 is the shared unknown row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TextVocab {
    pub fn from_tokens(mut tokens: Vec<String>) -> Self {
        tokens.retain(|t| t != UNK);
        tokens.sort();
        tokens.dedup();
        tokens.insert(0, UNK.to_owned());
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TextVocab { tokens, index }
    }

    /// Every token seen in any caption of `records`.
    pub fn build(records: &[CaptionRecord]) -> Self {
        let tokens = records
            .iter()
            .flat_map(|r| r.captions.iter().flat_map(|c| tokenize(c)))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, caption: &str) -> Vec<usize> {
        tokenize(caption).iter().map(|t| self.id(t)).collect()
    }

    /// Rebuilds the lookup after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrites values by name; every stored name must be present with a matching shape.
    pub fn load_named(&mut self, named: &HashMap<String, Matrix>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let loaded = named
                .get(name)
                .ok_or_else(|| CvseError::Format { path: String::new(), msg: format!("missing parameter `{name}`") })?;
            if loaded.shape() != value.shape() {
                return Err(CvseError::shape("load parameter", value.shape(), loaded.shape()));
            }
            *value = loaded.clone();
        }
        Ok(())
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Joint embedding width.
    pub d: usize,
    /// Width of word vectors, embeddings and graph input.
    pub word_dim: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub label_support_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = ConsensusConfig::default();
        ModelConfig {
            d: 1024,
            word_dim: 300,
            dropout: 0.4,
            lambda: c.lambda,
            alpha: c.alpha,
            beta: c.beta,
            label_support_only: c.label_support_only,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.word_dim == 0 {
            return Err(CvseError::Parameter("model widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CvseError::Parameter(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.consensus().validate()
    }

    pub fn consensus(&self) -> ConsensusConfig {
        ConsensusConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            label_support_only: self.label_support_only,
        }
    }
}

/// Sizes fixed by the data rather than by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShape {
    pub feature_dim: usize,
    pub text_vocab: usize,
    pub concepts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub img_proj_w: ParamId,
    pub img_proj_b: ParamId,
    pub embed: ParamId,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub img_attn: AttentionParams,
    pub txt_attn: AttentionParams,
    pub gcn: Vec<ParamId>,
    pub wv: ParamId,
    pub wt: ParamId,
}

/// Full model: trainable parameters plus the fixed graph inputs `Y` and `Ã`.
#[derive(Debug, Clone)]
pub struct CvseModel {
    pub config: ModelConfig,
    pub gcn_hidden: Vec<usize>,
    pub final_activation: bool,
    pub params: ParamStore,
    pub layout: ParamLayout,
    pub y: Matrix,
    pub adjacency: Matrix,
}

fn gru(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GruParams {
    let mut w = |name: &str, rows, cols, rng: &mut ChaCha8Rng| {
        store.add(format!("{prefix}.{name}"), Matrix::xavier(rows, cols, rng))
    };
    let wz = w("wz", input, hidden, rng);
    let uz = w("uz", hidden, hidden, rng);
    let wr = w("wr", input, hidden, rng);
    let ur = w("ur", hidden, hidden, rng);
    let wh = w("wh", input, hidden, rng);
    let uh = w("uh", hidden, hidden, rng);
    let bz = store.add(format!("{prefix}.bz"), Matrix::zeros(1, hidden));
    let br = store.add(format!("{prefix}.br"), Matrix::zeros(1, hidden));
    let bh = store.add(format!("{prefix}.bh"), Matrix::zeros(1, hidden));
    GruParams { wz, uz, bz, wr, ur, br, wh, uh, bh }
}

fn attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
    AttentionParams {
        query: store.add(format!("{prefix}.wq"), Matrix::xavier(d, d, rng)),
        key: store.add(format!("{prefix}.wk"), Matrix::xavier(d, d, rng)),
        value: store.add(format!("{prefix}.wv"), Matrix::xavier(d, d, rng)),
    }
}

/// Tensors of one forward pass plus the concept matrix it used.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub inst: Matrix,
    pub cons: Matrix,
    pub fused: Matrix,
    pub scores: Matrix,
}

impl CvseModel {
    /// Fresh model with seeded initialisation. Embedding rows start from
    /// `words` when a vector is available.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: ModelConfig,
        gcn_hidden: Vec<usize>,
        final_activation: bool,
        shape: DataShape,
        text_vocab: &TextVocab,
        words: Option<&WordVectorTable>,
        y: Matrix,
        adjacency: Matrix,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (d, wd) = (config.d, config.word_dim);
        if y.shape() != (shape.concepts, wd) {
            return Err(CvseError::shape("concept matrix", (shape.concepts, wd), y.shape()));
        }
        if adjacency.shape() != (shape.concepts, shape.concepts) {
            return Err(CvseError::shape("adjacency", (shape.concepts, shape.concepts), adjacency.shape()));
        }
        if text_vocab.len() != shape.text_vocab {
            return Err(CvseError::Parameter("text vocabulary size disagrees with data shape".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();

        let img_proj_w = store.add("img.proj.w", Matrix::xavier(shape.feature_dim, d, &mut rng));
        let img_proj_b = store.add("img.proj.b", Matrix::zeros(1, d));

        let rows: Vec<Vec<f64>> = text_vocab
            .tokens()
            .iter()
            .map(|t| match words.and_then(|w| w.get(t)) {
                Some(v) if v.len() == wd => v.to_vec(),
                _ => fallback_vector(t, wd, seed),
            })
            .collect();
        let embed = store.add("txt.embed", Matrix::stack(&rows)?);
        let gru_fwd = gru(&mut store, "txt.gru.fwd", wd, d, &mut rng);
        let gru_bwd = gru(&mut store, "txt.gru.bwd", wd, d, &mut rng);
        let img_attn = attention(&mut store, "img.attn", d, &mut rng);
        let txt_attn = attention(&mut store, "txt.attn", d, &mut rng);

        let mut widths = vec![wd];
        widths.extend(gcn_hidden.iter().copied());
        widths.push(d);
        let gcn = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| store.add(format!("gcn.w{l}"), Matrix::xavier(w[0], w[1], &mut rng)))
            .collect();
        let wv = store.add("cons.wv", Matrix::xavier(d, d, &mut rng));
        let wt = store.add("cons.wt", Matrix::xavier(d, d, &mut rng));

        Ok(CvseModel {
            config,
            gcn_hidden,
            final_activation,
            params: store,
            layout: ParamLayout { img_proj_w, img_proj_b, embed, gru_fwd, gru_bwd, img_attn, txt_attn, gcn, wv, wt },
            y,
            adjacency,
        })
    }

    pub fn concepts(&self) -> usize {
        self.y.rows()
    }

    fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.params.get(id))
    }

    /// Concept representations `Z` recorded on `tape`.
    pub fn concept_vectors(&self, tape: &mut Tape) -> Result<Var> {
        let y = tape.constant(self.y.clone());
        let a = tape.constant(self.adjacency.clone());
        let ws: Vec<Var> = self.layout.gcn.iter().map(|&id| self.bind(tape, id)).collect();
        gcn_forward(tape, y, a, &ws, self.final_activation)
    }

    /// Plain evaluation of `Z`.
    pub fn concept_matrix(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let z = self.concept_vectors(&mut tape)?;
        Ok(tape.value(z).clone())
    }

    fn image_instances<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        regions: &[&Matrix],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let w = self.bind(tape, self.layout.img_proj_w);
        let b = self.bind(tape, self.layout.img_proj_b);
        let attn = self.layout.img_attn.bind(tape, self.params.values());
        let rate = self.config.dropout;
        let mut rows = Vec::with_capacity(regions.len());
        for o in regions {
            let ov = tape.constant((*o).clone());
            rows.push(encode_image_instance(tape, ov, w, b, &attn, rate, rng.as_deref_mut())?);
        }
        tape.stack_rows(&rows)
    }

    fn text_instances<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        captions: &[&[usize]],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let table = self.bind(tape, self.layout.embed);
        let fwd = self.layout.gru_fwd.bind(tape, self.params.values());
        let bwd = self.layout.gru_bwd.bind(tape, self.params.values());
        let attn = self.layout.txt_attn.bind(tape, self.params.values());
        let rate = self.config.dropout;
        let mut rows = Vec::with_capacity(captions.len());
        for ids in captions {
            rows.push(encode_text_instance(tape, table, ids, &fwd, &bwd, &attn, rate, rng.as_deref_mut())?);
        }
        tape.stack_rows(&rows)
    }

    /// Records the batch forward pass. Dropout is active only when `rng` is given.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        regions: &[&Matrix],
        captions: &[&[usize]],
        labels: &Matrix,
        mut rng: Option<&mut R>,
    ) -> Result<BatchOutputs> {
        if regions.len() != captions.len() {
            return Err(CvseError::shape("forward_batch", (regions.len(), 1), (captions.len(), 1)));
        }
        let z = self.concept_vectors(tape)?;
        let v_inst = self.image_instances(tape, regions, rng.as_deref_mut())?;
        let t_inst = self.text_instances(tape, captions, rng)?;
        let wv = self.bind(tape, self.layout.wv);
        let wt = self.bind(tape, self.layout.wt);
        let cc = &self.config.consensus();
        let (a_v, v_cons) = visual_consensus(tape, v_inst, z, wv, cc.lambda)?;
        let (a_t, t_cons) = textual_consensus(tape, t_inst, labels, z, wt, cc)?;
        let v_fused = fuse(tape, v_inst, v_cons, cc.beta)?;
        let t_fused = fuse(tape, t_inst, t_cons, cc.beta)?;
        Ok(BatchOutputs { v_inst, t_inst, v_cons, t_cons, v_fused, t_fused, a_v, a_t })
    }

    /// Inference embeddings for images, given a precomputed `Z`.
    pub fn embed_images(&self, z: &Matrix, regions: &[&Matrix]) -> Result<Embeddings> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let inst = self.image_instances(&mut tape, regions, None::<&mut ChaCha8Rng>)?;
        let wv = self.bind(&mut tape, self.layout.wv);
        let cc = &self.config.consensus();
        let (scores, cons) = visual_consensus(&mut tape, inst, zv, wv, cc.lambda)?;
        let fused = fuse(&mut tape, inst, cons, cc.beta)?;
        Ok(Embeddings {
            inst: tape.value(inst).clone(),
            cons: tape.value(cons).clone(),
            fused: tape.value(fused).clone(),
            scores: tape.value(scores).clone(),
        })
    }

    /// Inference embeddings for captions with the label branch weighted by `alpha`.
    pub fn embed_texts(&self, z: &Matrix, captions: &[&[usize]], labels: &Matrix, alpha: f64) -> Result<Embeddings> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let inst = self.text_instances(&mut tape, captions, None::<&mut ChaCha8Rng>)?;
        let wt = self.bind(&mut tape, self.layout.wt);
        let cc = ConsensusConfig { alpha, ..self.config.consensus() };
        let (scores, cons) = textual_consensus(&mut tape, inst, labels, zv, wt, &cc)?;
        let fused = fuse(&mut tape, inst, cons, cc.beta)?;
        Ok(Embeddings {
            inst: tape.value(inst).clone(),
            cons: tape.value(cons).clone(),
            fused: tape.value(fused).clone(),
            scores: tape.value(scores).clone(),
        })
    }
}
