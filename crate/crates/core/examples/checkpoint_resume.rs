//! Save a checkpoint mid-run, reload it and continue. Checkpoints hold
//! 32-bit reals, so the resumed run tracks an uninterrupted one up to that
//! rounding rather than bit for bit.
//!
//! cargo run --release --example checkpoint_resume

use std::collections::HashMap;

use cvse::synthetic::{generate, SyntheticSpec};
use cvse::train::{Prepared, Trainer};

fn main() -> cvse::Result<()> {
    let set = generate(3, &SyntheticSpec::default())?;
    let mut config = set.config.clone();
    config.train.epochs = 6;
    config.train.lr_decay_epoch = 3;
    let lexicon: HashMap<_, _> = set.lexicon.clone().into_iter().collect();
    let prepared = Prepared::from_parts(&config, set.records, &set.features, &lexicon, Some(set.words))?;

    let fresh = || -> cvse::Result<Trainer> {
        let mut t = Trainer::new(config.clone(), prepared.model(&config)?);
        t.validate = false;
        Ok(t)
    };
    let mut straight = fresh()?;
    for _ in 0..6 {
        straight.epoch(&prepared.data, None, |_, _| {})?;
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("checkpoint.bin");
    let mut first = fresh()?;
    for _ in 0..3 {
        first.epoch(&prepared.data, None, |_, _| {})?;
    }
    first.save(&path, &prepared.text_vocab, &prepared.vocab)?;
    let (mut resumed, _, concepts) = Trainer::load(&path)?;
    resumed.validate = false;
    println!("reloaded at epoch {} with {} concepts", resumed.epoch, concepts.len());
    for _ in 3..6 {
        let r = resumed.epoch(&prepared.data, None, |_, _| {})?;
        println!("epoch {} loss {:.5}", r.epoch, r.loss.total);
    }

    let drift = straight
        .model
        .params
        .values()
        .iter()
        .zip(resumed.model.params.values())
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    println!("max parameter difference from the uninterrupted run: {drift:.2e}");
    Ok(())
}
