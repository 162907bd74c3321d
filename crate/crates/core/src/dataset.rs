//! Images joined with their captions, token ids and concept labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{concept_label, tokenize, CaptionRecord, ConceptLabel, ConceptVocabulary};
use crate::error::{CvseError, Result};
use crate::io::FeatureSet;
use crate::model::TextVocab;
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TextItem {
    /// Index into [`Dataset::images`].
    pub image: usize,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub label: ConceptLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageItem {
    pub id: String,
    pub regions: Matrix,
    /// Union of the labels of every caption of the image.
    pub label: ConceptLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageItem>,
    pub texts: Vec<TextItem>,
}

impl Dataset {
    /// Joins captions with features by id. Every corpus id must have features.
    /// With `per_caption` each text keeps its own label instead of the image union.
    pub fn assemble(
        records: &[CaptionRecord],
        features: &FeatureSet,
        vocab: &ConceptVocabulary,
        text_vocab: &TextVocab,
        per_caption: bool,
    ) -> Result<Self> {
        let index = features.index();
        let missing: Vec<String> = records.iter().filter(|r| !index.contains_key(&r.id)).map(|r| r.id.clone()).collect();
        if !missing.is_empty() {
            return Err(CvseError::DataIntegrity(missing));
        }
        let mut data = Dataset::default();
        for r in records {
            let tokenized: Vec<Vec<String>> = r.captions.iter().map(|c| tokenize(c)).collect();
            let image = data.images.len();
            let union = concept_label(&tokenized, vocab);
            for (caption, toks) in r.captions.iter().zip(&tokenized) {
                if toks.is_empty() {
                    return Err(CvseError::DataIntegrity(vec![format!("`{}` has a caption without tokens", r.id)]));
                }
                let label = if per_caption { concept_label(std::slice::from_ref(toks), vocab) } else { union.clone() };
                data.texts.push(TextItem {
                    image,
                    caption: caption.clone(),
                    tokens: toks.iter().map(|t| text_vocab.id(t)).collect(),
                    label,
                });
            }
            data.images.push(ImageItem { id: r.id.clone(), regions: features.regions[index[&r.id]].clone(), label: union });
        }
        Ok(data)
    }

    pub fn region_refs(&self) -> Vec<&Matrix> {
        self.images.iter().map(|i| &i.regions).collect()
    }

    pub fn token_refs(&self) -> Vec<&[usize]> {
        self.texts.iter().map(|t| t.tokens.as_slice()).collect()
    }

    pub fn text_to_image(&self) -> Vec<usize> {
        self.texts.iter().map(|t| t.image).collect()
    }

    /// Labels used for co-occurrence counting.
    pub fn graph_labels(&self, per_caption: bool) -> Vec<ConceptLabel> {
        if per_caption {
            self.texts.iter().map(|t| t.label.clone()).collect()
        } else {
            self.images.iter().map(|i| i.label.clone()).collect()
        }
    }

    /// Subset of images (in the given order) with their captions.
    pub fn select(&self, images: &[usize]) -> Dataset {
        let mut remap = vec![None; self.images.len()];
        let mut out = Dataset::default();
        for &i in images {
            remap[i] = Some(out.images.len());
            out.images.push(self.images[i].clone());
        }
        for t in &self.texts {
            if let Some(ni) = remap[t.image] {
                out.texts.push(TextItem { image: ni, ..t.clone() });
            }
        }
        out
    }

    /// Seeded image-level split into (train, validation). A zero fraction
    /// returns the full set for both.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let n = self.images.len();
        let n_val = if val_fraction <= 0.0 || n < 2 {
            0
        } else {
            ((val_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        if n_val == 0 {
            return (self.clone(), self.clone());
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
        let (val, train) = order.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        (self.select(&train), self.select(&val))
    }
}
