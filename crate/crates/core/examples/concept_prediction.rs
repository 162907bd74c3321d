//! Two-pass inference: predict a concept label for unseen sentences from
//! their nearest gallery neighbours, then inspect the concept scores.
//!
//! cargo run --release --example concept_prediction -- [epochs]

use std::collections::HashMap;

use cvse::eval::{predict_concepts, ConceptGallery};
use cvse::eval::rank_desc;
use cvse::numeric::Matrix;
use cvse::synthetic::{generate, SyntheticSpec};
use cvse::train::{train, Prepared};

fn main() -> cvse::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(60, |s| s.parse().expect("epochs"));
    let set = generate(5, &SyntheticSpec::default())?;
    let mut config = set.config.clone();
    config.train.epochs = epochs;
    config.train.lr_decay_epoch = epochs / 2;
    let lexicon: HashMap<_, _> = set.lexicon.clone().into_iter().collect();
    let prepared = Prepared::from_parts(&config, set.records, &set.features, &lexicon, Some(set.words))?;
    let model = train(&config, &prepared, None)?.trainer.model;
    let z = model.concept_matrix()?;
    let gallery = ConceptGallery::build(&model, &z, &prepared.data)?;

    let sentences = ["a man riding past a bus", "a cat sleeping near the sink", "kids playing with a ball near the waves"];
    let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| prepared.text_vocab.encode(s)).collect();
    let refs: Vec<&[usize]> = encoded.iter().map(Vec::as_slice).collect();
    let labels = predict_concepts(&model, &z, &refs, &gallery, config.inference.k)?;
    let rows: Vec<Vec<f64>> = labels.iter().map(|l| l.to_f64()).collect();
    let scores = model.embed_texts(&z, &refs, &Matrix::stack(&rows)?, model.config.alpha)?.scores;

    for (r, s) in sentences.iter().enumerate() {
        let predicted: Vec<&str> = labels[r].support().into_iter().map(|i| prepared.vocab.token(i)).collect();
        println!("{s}\n  predicted: {}", predicted.join(" "));
        let top: Vec<String> = rank_desc(scores.row(r))
            .into_iter()
            .take(5)
            .map(|i| format!("{}={:.3}", prepared.vocab.token(i), scores[(r, i)]))
            .collect();
        println!("  top scores: {}", top.join(" "));
    }
    Ok(())
}
