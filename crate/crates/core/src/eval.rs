//! Retrieval metrics, two-view concept prediction and ranked retrieval.

use serde::{Deserialize, Serialize};

use crate::corpus::ConceptLabel;
use crate::dataset::Dataset;
use crate::error::{CvseError, Result};
use crate::model::CvseModel;
use crate::numeric::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image queries ranking texts.
    TextRetrieval,
    /// Text queries ranking images.
    ImageRetrieval,
}

/// Indices sorted by descending score; equal scores keep the lower index first.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Fraction of queries whose match appears in the top `k`.
/// `sims` is images × texts and `text_to_image[j]` is the image of text `j`.
/// An image query counts as a hit when any of its texts ranks in the top `k`.
pub fn recall_at_k(sims: &Matrix, text_to_image: &[usize], k: usize, direction: Direction) -> Result<f64> {
    let (n_img, n_txt) = sims.shape();
    if text_to_image.len() != n_txt {
        return Err(CvseError::shape("recall_at_k", (n_img, n_txt), (n_img, text_to_image.len())));
    }
    if let Some(&bad) = text_to_image.iter().find(|&&i| i >= n_img) {
        return Err(CvseError::Parameter(format!("ground-truth image {bad} outside gallery of {n_img}")));
    }
    let gallery = match direction {
        Direction::TextRetrieval => n_txt,
        Direction::ImageRetrieval => n_img,
    };
    if k == 0 || k > gallery {
        return Err(CvseError::Parameter(format!("k = {k} must lie in 1..={gallery}")));
    }
    let hits = match direction {
        Direction::TextRetrieval => (0..n_img)
            .filter(|&i| rank_desc(sims.row(i))[..k].iter().any(|&j| text_to_image[j] == i))
            .count(),
        Direction::ImageRetrieval => (0..n_txt)
            .filter(|&j| {
                let column: Vec<f64> = (0..n_img).map(|i| sims[(i, j)]).collect();
                rank_desc(&column)[..k].contains(&text_to_image[j])
            })
            .count(),
    };
    let queries = match direction {
        Direction::TextRetrieval => n_img,
        Direction::ImageRetrieval => n_txt,
    };
    Ok(hits as f64 / queries as f64)
}

/// Mean of R@{1,5,10} in both directions.
pub fn mean_recall(values: &[f64]) -> Result<f64> {
    if values.len() != 6 {
        return Err(CvseError::Parameter(format!("mean recall needs six values, got {}", values.len())));
    }
    Ok(values.iter().sum::<f64>() / 6.0)
}

/// Metrics report; `_t` is text retrieval (image queries), `_i` image retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r1_t: f64,
    pub r5_t: f64,
    pub r10_t: f64,
    pub r1_i: f64,
    pub r5_i: f64,
    pub r10_i: f64,
    pub mr: f64,
}

impl Metrics {
    /// All six recalls; cut-offs beyond the gallery size are clamped to it.
    pub fn compute(sims: &Matrix, text_to_image: &[usize]) -> Result<Self> {
        let at = |k: usize, dir: Direction| {
            let gallery = match dir {
                Direction::TextRetrieval => sims.cols(),
                Direction::ImageRetrieval => sims.rows(),
            };
            if k > gallery {
                log::warn!("R@{k} clamped to gallery size {gallery}");
            }
            recall_at_k(sims, text_to_image, k.min(gallery), dir)
        };
        let (r1_t, r5_t, r10_t) = (at(1, Direction::TextRetrieval)?, at(5, Direction::TextRetrieval)?, at(10, Direction::TextRetrieval)?);
        let (r1_i, r5_i, r10_i) = (at(1, Direction::ImageRetrieval)?, at(5, Direction::ImageRetrieval)?, at(10, Direction::ImageRetrieval)?);
        let mr = mean_recall(&[r1_t, r5_t, r10_t, r1_i, r5_i, r10_i])?;
        Ok(Metrics { r1_t, r5_t, r10_t, r1_i, r5_i, r10_i, mr })
    }
}

/// `k` nearest rows of `gallery` to `query` by inner product.
fn nearest(query: &[f64], gallery: &Matrix, k: usize) -> Vec<usize> {
    let scores: Vec<f64> = (0..gallery.rows()).map(|r| dot(query, gallery.row(r))).collect();
    let mut order = rank_desc(&scores);
    order.truncate(k);
    order
}

/// Two-view KNN label union. `gallery_texts` and `gallery_images` hold unit
/// fused embeddings; `labels[j]` belongs to gallery text `j`. `k` is capped
/// at the gallery size.
pub fn knn_union(
    query: &[f64],
    gallery_texts: &Matrix,
    gallery_images: &Matrix,
    labels: &[ConceptLabel],
    k: usize,
) -> Result<ConceptLabel> {
    if gallery_texts.rows() == 0 || gallery_images.rows() == 0 {
        return Err(CvseError::Degenerate("concept prediction needs a non-empty gallery".into()));
    }
    if labels.len() != gallery_texts.rows() {
        return Err(CvseError::shape("knn_union", gallery_texts.shape(), (labels.len(), 1)));
    }
    if k == 0 {
        return Err(CvseError::Parameter("k must be at least 1".into()));
    }
    let k = k.min(gallery_texts.rows());
    let by_text = nearest(query, gallery_texts, k);
    let image = nearest(query, gallery_images, 1)[0];
    let by_image = nearest(gallery_images.row(image), gallery_texts, k);

    let mut out = ConceptLabel::empty(labels[0].len());
    for &j in by_text.iter().chain(&by_image) {
        out.union_with(&labels[j]);
    }
    Ok(out)
}

/// Labelled sentences and images that concept prediction searches.
#[derive(Debug, Clone)]
pub struct ConceptGallery {
    /// Label-free (`α = 0`) fused sentence embeddings.
    pub texts: Matrix,
    pub images: Matrix,
    pub labels: Vec<ConceptLabel>,
}

impl ConceptGallery {
    pub fn build(model: &CvseModel, z: &Matrix, data: &Dataset) -> Result<Self> {
        let q = model.concepts();
        let images = model.embed_images(z, &data.region_refs())?.fused;
        let unlabeled = Matrix::zeros(data.texts.len(), q);
        let texts = model.embed_texts(z, &data.token_refs(), &unlabeled, 0.0)?.fused;
        let labels = data.texts.iter().map(|t| t.label.clone()).collect();
        Ok(ConceptGallery { texts, images, labels })
    }
}

/// Predicted labels for a batch of captions (pass 1 of inference).
pub fn predict_concepts(
    model: &CvseModel,
    z: &Matrix,
    captions: &[&[usize]],
    gallery: &ConceptGallery,
    k: usize,
) -> Result<Vec<ConceptLabel>> {
    let unlabeled = Matrix::zeros(captions.len(), model.concepts());
    let pass1 = model.embed_texts(z, captions, &unlabeled, 0.0)?.fused;
    (0..captions.len())
        .map(|r| knn_union(pass1.row(r), &gallery.texts, &gallery.images, &gallery.labels, k))
        .collect()
}

/// How text queries obtain their concept label.
#[derive(Debug, Clone, Copy)]
pub enum TextLabels<'a> {
    /// Ground-truth labels from the data (training view).
    Given,
    /// Predicted from a gallery, then re-embedded (inference view).
    Predicted { gallery: &'a ConceptGallery, k: usize },
    /// No label branch at all.
    Absent,
}

/// Similarity matrix and ranked lists between a dataset's images and texts.
#[derive(Debug, Clone)]
pub struct Retrieval {
    /// Images × texts cosine similarities of fused embeddings.
    pub sims: Matrix,
    pub image_embeddings: Matrix,
    pub text_embeddings: Matrix,
    pub text_labels: Vec<ConceptLabel>,
}

impl Retrieval {
    /// Texts ranked for image `i`.
    pub fn texts_for_image(&self, i: usize) -> Vec<usize> {
        rank_desc(self.sims.row(i))
    }

    /// Images ranked for text `j`.
    pub fn images_for_text(&self, j: usize) -> Vec<usize> {
        let column: Vec<f64> = (0..self.sims.rows()).map(|i| self.sims[(i, j)]).collect();
        rank_desc(&column)
    }
}

/// Embeds every image and caption in `data` and scores all pairs.
pub fn retrieve(model: &CvseModel, data: &Dataset, labels: TextLabels<'_>) -> Result<Retrieval> {
    let z = model.concept_matrix()?;
    retrieve_with(model, &z, data, labels)
}

pub fn retrieve_with(model: &CvseModel, z: &Matrix, data: &Dataset, labels: TextLabels<'_>) -> Result<Retrieval> {
    let q = model.concepts();
    let captions = data.token_refs();
    let (text_labels, alpha) = match labels {
        TextLabels::Given => (data.texts.iter().map(|t| t.label.clone()).collect(), model.config.alpha),
        TextLabels::Predicted { gallery, k } => (predict_concepts(model, z, &captions, gallery, k)?, model.config.alpha),
        TextLabels::Absent => (vec![ConceptLabel::empty(q); captions.len()], 0.0),
    };
    let label_rows: Vec<Vec<f64>> = text_labels.iter().map(ConceptLabel::to_f64).collect();
    let label_matrix = if label_rows.is_empty() { Matrix::zeros(0, q) } else { Matrix::stack(&label_rows)? };
    let texts = model.embed_texts(z, &captions, &label_matrix, alpha)?.fused;
    let images = model.embed_images(z, &data.region_refs())?.fused;
    let sims = images.matmul_t(&texts)?;
    Ok(Retrieval { sims, image_embeddings: images, text_embeddings: texts, text_labels })
}

/// Metrics for `data` under the inference protocol with `gallery` as the
/// concept-prediction source.
pub fn evaluate(model: &CvseModel, data: &Dataset, gallery: &Dataset, k: usize) -> Result<Metrics> {
    let z = model.concept_matrix()?;
    let g = ConceptGallery::build(model, &z, gallery)?;
    let r = retrieve_with(model, &z, data, TextLabels::Predicted { gallery: &g, k })?;
    Metrics::compute(&r.sims, &data.text_to_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_and_anti_diagonal() {
        let id = [0, 1];
        let s = Matrix::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        for dir in [Direction::TextRetrieval, Direction::ImageRetrieval] {
            assert_eq!(recall_at_k(&s, &id, 1, dir).unwrap(), 1.0);
        }
        let s = Matrix::from_rows(&[&[0.1, 0.9], &[0.8, 0.2]]);
        for dir in [Direction::TextRetrieval, Direction::ImageRetrieval] {
            assert_eq!(recall_at_k(&s, &id, 1, dir).unwrap(), 0.0);
            assert_eq!(recall_at_k(&s, &id, 2, dir).unwrap(), 1.0);
        }
        assert!(matches!(
            recall_at_k(&s, &id, 3, Direction::TextRetrieval),
            Err(CvseError::Parameter(_))
        ));
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        let s = Matrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        // image 1's own text (index 1) loses the tie to text 0
        assert_eq!(recall_at_k(&s, &[0, 1], 1, Direction::TextRetrieval).unwrap(), 0.5);
        assert_eq!(rank_desc(&[0.2, 0.7, 0.7, 0.1]), [1, 2, 0, 3]);
    }

    fn sort_oracle(s: &Matrix, gt: &[usize], k: usize, dir: Direction) -> f64 {
        let n = s.rows();
        let mut hits = 0;
        for qi in 0..n {
            let mut pairs: Vec<(f64, usize)> = (0..n)
                .map(|c| match dir {
                    Direction::TextRetrieval => (s[(qi, c)], c),
                    Direction::ImageRetrieval => (s[(c, qi)], c),
                })
                .collect();
            // stable sort keeps index order among equal scores
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let top: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            let hit = match dir {
                Direction::TextRetrieval => top.iter().any(|&j| gt[j] == qi),
                Direction::ImageRetrieval => top.contains(&gt[qi]),
            };
            hits += hit as usize;
        }
        hits as f64 / n as f64
    }

    #[test]
    fn random_permutations_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = Matrix::from_vec(10, 10, (0..100).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0).collect()).unwrap();
            let mut gt: Vec<usize> = (0..10).collect();
            gt.shuffle(&mut rng);
            let mut last = [0.0; 2];
            for k in 1..=10 {
                for (d, dir) in [Direction::TextRetrieval, Direction::ImageRetrieval].into_iter().enumerate() {
                    let r = recall_at_k(&s, &gt, k, dir).unwrap();
                    assert_eq!(r, sort_oracle(&s, &gt, k, dir));
                    assert!(r >= last[d]);
                    last[d] = r;
                }
            }
        }
    }

    #[test]
    fn mean_recall_cases() {
        assert_eq!(mean_recall(&[1.0; 6]).unwrap(), 1.0);
        let m = mean_recall(&[74.8, 95.1, 98.3, 59.9, 89.4, 95.2]).unwrap();
        assert!((m - 85.45).abs() < 1e-9);
        assert!(mean_recall(&[1.0; 5]).is_err());
    }

    #[test]
    fn singleton_gallery_forces_its_label() {
        let label = ConceptLabel::from_bits(&[1, 0, 1]);
        let g = Matrix::row_vector(&[1.0, 0.0]);
        let out = knn_union(&[0.0, 1.0], &g, &g, std::slice::from_ref(&label), 3).unwrap();
        assert_eq!(out, label);
        let empty = Matrix::zeros(0, 2);
        assert!(matches!(knn_union(&[0.0, 1.0], &empty, &g, &[], 3), Err(CvseError::Degenerate(_))));
    }

    #[test]
    fn self_retrieval_contains_own_label() {
        let texts = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let labels = [ConceptLabel::from_bits(&[1, 1, 0]), ConceptLabel::from_bits(&[0, 0, 1])];
        let out = knn_union(&[1.0, 0.0], &texts, &texts, &labels, 1).unwrap();
        assert!(labels[0].support().iter().all(|&i| out.get(i)));
    }

    #[test]
    fn metrics_clamp_small_galleries() {
        let s = Matrix::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let m = Metrics::compute(&s, &[0, 1]).unwrap();
        assert_eq!(m.mr, 1.0);
    }
}
