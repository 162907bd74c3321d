//! Concept vocabulary and correlation graph for a caption corpus.
//!
//! cargo run --example build_graph -- [corpus.jsonl] [lexicon.tsv] [q]
//!
//! Without arguments the 20-image toy corpus under `tests/data` is used.

use std::collections::HashMap;
use std::path::PathBuf;

use cvse::corpus::{concept_label, read_corpus, read_lexicon, tokenize, ConceptType, ConceptVocabulary};
use cvse::graph::{CorrelationGraph, GraphConfig};

fn main() -> cvse::Result<()> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut args = std::env::args().skip(1);
    let corpus = args.next().map_or(data.join("toy_corpus.jsonl"), PathBuf::from);
    let lexicon_path = args.next().map_or(data.join("toy_lexicon.tsv"), PathBuf::from);
    let q: usize = args.next().map_or(20, |s| s.parse().expect("q"));

    let records = read_corpus(&corpus)?;
    let lexicon = if lexicon_path.exists() { read_lexicon(&lexicon_path)? } else { HashMap::new() };
    let vocab = ConceptVocabulary::build(&records, &lexicon, q)?;
    for kind in ConceptType::ALL {
        let tokens: Vec<&str> = vocab.entries().iter().filter(|e| e.kind == kind).map(|e| e.token.as_str()).collect();
        println!("{:<9} {}", kind.as_str(), tokens.join(" "));
    }

    let labels: Vec<_> = records
        .iter()
        .map(|r| concept_label(&r.captions.iter().map(|c| tokenize(c)).collect::<Vec<_>>(), &vocab))
        .collect();
    let config = GraphConfig::default();
    let graph = CorrelationGraph::build(&labels, &config)?;
    println!("\n{} images, {} binary edges at epsilon {}", labels.len(), graph.edge_count(), config.epsilon);

    // strongest conditional links, i -> j meaning "j given i"
    let mut links = Vec::new();
    for i in 0..q {
        for j in 0..q {
            if i != j && graph.binary[(i, j)] > 0.0 {
                links.push((graph.conditional[(i, j)], i, j));
            }
        }
    }
    links.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (p, i, j) in links.iter().take(12) {
        println!("  P({:<8} | {:<8}) = {p:.3}   rescaled {:.3}", vocab.token(*j), vocab.token(*i), graph.rescaled[(*i, *j)]);
    }
    Ok(())
}
