//! Generates the seeded toy benchmark, trains on it and reports self-retrieval.
//!
//! cargo run --release --example train_synthetic -- [seed] [epochs] [lr]

use std::collections::HashMap;
use std::time::Instant;

use cvse::eval::evaluate;
use cvse::synthetic::{generate, SyntheticSpec};
use cvse::train::{train, Prepared};

fn main() -> cvse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CVSE_LOG", "info")).init();
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(7, |s| s.parse().expect("seed"));
    let set = generate(seed, &SyntheticSpec::default())?;
    let mut config = set.config.clone();
    if let Some(e) = args.next() {
        config.train.epochs = e.parse().expect("epochs");
        config.train.lr_decay_epoch = config.train.lr_decay_epoch.min(config.train.epochs);
    }
    if let Some(lr) = args.next() {
        config.train.lr = lr.parse().expect("lr");
        config.train.lr_after_decay = config.train.lr / 10.0;
    }
    let lexicon: HashMap<_, _> = set.lexicon.clone().into_iter().collect();
    let prepared = Prepared::from_parts(&config, set.records.clone(), &set.features, &lexicon, Some(set.words.clone()))?;
    println!(
        "{} pairs, q = {}, {} graph edges",
        prepared.data.texts.len(),
        prepared.vocab.len(),
        prepared.graph.edge_count()
    );

    let started = Instant::now();
    let out = train(&config, &prepared, None)?;
    let first = out.history.first().map_or(0.0, |r| r.loss.total);
    let last = out.history.last().map_or(0.0, |r| r.loss.total);
    println!("loss {first:.4} -> {last:.4} in {:.1}s", started.elapsed().as_secs_f64());

    let m = evaluate(&out.trainer.model, &prepared.data, &prepared.data, config.inference.k)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}
