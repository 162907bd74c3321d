//! Fusion-weight ablation on the synthetic benchmark: fused (β = 0.75) against
//! instance-only (β = 1) and consensus-only (β = 0), averaged over seeds.
//!
//! cargo run --release --example ablation -- [epochs] [seeds...]

use std::collections::HashMap;

use cvse::eval::evaluate;
use cvse::synthetic::{generate, SyntheticSpec};
use cvse::train::{Prepared, Trainer};

fn self_retrieval_mr(seed: u64, beta: f64, epochs: usize) -> cvse::Result<f64> {
    let set = generate(seed, &SyntheticSpec::default())?;
    let mut config = set.config.clone();
    config.model.beta = beta;
    config.train.epochs = epochs;
    config.train.lr_decay_epoch = config.train.lr_decay_epoch.min(epochs);
    let lexicon: HashMap<_, _> = set.lexicon.clone().into_iter().collect();
    let prepared = Prepared::from_parts(&config, set.records, &set.features, &lexicon, Some(set.words))?;
    let mut trainer = Trainer::new(config.clone(), prepared.model(&config)?);
    trainer.validate = false;
    for _ in 0..epochs {
        trainer.epoch(&prepared.data, None, |_, _| {})?;
    }
    Ok(evaluate(&trainer.model, &prepared.data, &prepared.data, config.inference.k)?.mr)
}

fn main() -> cvse::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(200, |s| s.parse().expect("epochs"));
    let mut seeds: Vec<u64> = args.map(|s| s.parse().expect("seed")).collect();
    if seeds.is_empty() {
        seeds = vec![1, 2, 3];
    }
    let betas = [0.75, 1.0, 0.0];
    let results: Vec<Vec<f64>> = std::thread::scope(|s| {
        let handles: Vec<Vec<_>> = betas
            .iter()
            .map(|&b| seeds.iter().map(|&seed| s.spawn(move || self_retrieval_mr(seed, b, epochs))).collect())
            .collect();
        handles
            .into_iter()
            .map(|hs| hs.into_iter().map(|h| h.join().expect("worker panicked")).collect::<cvse::Result<Vec<f64>>>())
            .collect::<cvse::Result<Vec<_>>>()
    })?;
    for (b, mrs) in betas.iter().zip(&results) {
        let mean = mrs.iter().sum::<f64>() / mrs.len() as f64;
        println!("beta {b:<4}  mR {mean:.4}  per seed {mrs:.4?}");
    }
    Ok(())
}
