//! Train on the synthetic benchmark with a held-out split, then run
//! free-text queries against the image gallery and report recall.
//!
//! cargo run --release --example retrieval -- [epochs]

use std::collections::HashMap;

use cvse::eval::{evaluate, predict_concepts, rank_desc, ConceptGallery};
use cvse::numeric::Matrix;
use cvse::synthetic::{generate, SyntheticSpec};
use cvse::train::{train, Prepared};

fn main() -> cvse::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(60, |s| s.parse().expect("epochs"));
    let set = generate(7, &SyntheticSpec { pairs: 96, ..Default::default() })?;
    let mut config = set.config.clone();
    config.train.epochs = epochs;
    config.train.lr_decay_epoch = epochs / 2;
    config.train.val_fraction = 0.25;
    let lexicon: HashMap<_, _> = set.lexicon.clone().into_iter().collect();
    let prepared = Prepared::from_parts(&config, set.records, &set.features, &lexicon, Some(set.words))?;
    let model = train(&config, &prepared, None)?.trainer.model;

    let (train_split, held_out) = prepared.data.split(config.train.val_fraction, config.train.seed);
    let m = evaluate(&model, &held_out, &train_split, config.inference.k)?;
    println!("held-out ({} images): {}", held_out.images.len(), serde_json::to_string(&m)?);

    let z = model.concept_matrix()?;
    let gallery = ConceptGallery::build(&model, &z, &train_split)?;
    let images = model.embed_images(&z, &prepared.data.region_refs())?.fused;
    for query in ["a red bus on the street", "a dog running on the beach", "a wooden table in the kitchen"] {
        let tokens = prepared.text_vocab.encode(query);
        let label = predict_concepts(&model, &z, &[&tokens], &gallery, config.inference.k)?.remove(0);
        let text = model.embed_texts(&z, &[&tokens], &Matrix::row_vector(&label.to_f64()), model.config.alpha)?.fused;
        let scores = images.matmul_t(&text)?.into_data();
        println!("\n{query}");
        for i in rank_desc(&scores).into_iter().take(3) {
            println!("  {:.3}  {:<7} {}", scores[i], prepared.data.images[i].id, prepared.records[i].captions[0]);
        }
    }
    Ok(())
}
