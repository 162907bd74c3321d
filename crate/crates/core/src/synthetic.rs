//! Seeded toy benchmark: captions drawn from four scene clusters so concept
//! co-occurrence has planted structure, region features built from concept
//! prototypes, and cluster-correlated word vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{write_corpus, write_lexicon, CaptionRecord, ConceptType, WordVectorTable};
use crate::error::{CvseError, Result};
use crate::io::{write_features, write_json, FeatureSet};
use crate::numeric::Matrix;

struct Scene {
    objects: &'static [&'static str],
    motions: &'static [&'static str],
    property: &'static str,
}

const SCENES: [Scene; 4] = [
    Scene {
        objects: &["car", "bus", "street", "building", "sign", "light"],
        motions: &["driving", "riding"],
        property: "red",
    },
    Scene {
        objects: &["table", "plate", "pizza", "kitchen", "knife"],
        motions: &["eating"],
        property: "wooden",
    },
    Scene {
        objects: &["surfboard", "wave", "ocean", "beach", "sand", "umbrella"],
        motions: &["surfing"],
        property: "blue",
    },
    Scene {
        objects: &["dog", "frisbee", "grass", "tree", "man"],
        motions: &["running", "playing"],
        property: "green",
    },
];

/// Single-use words that must never outrank a planted concept.
const DISTRACTORS: &[&str] = &[
    "photo", "picture", "image", "shot", "view", "scene", "moment", "snapshot", "frame", "sight", "glimpse", "capture",
    "still", "portrait", "closeup", "angle", "backdrop", "daylight", "evening", "morning", "weekend", "afternoon",
    "summer", "winter", "spring", "autumn", "sunset", "sunrise", "noon", "midday", "dusk", "dawn", "lens", "camera",
    "album", "postcard", "poster", "print", "sketch", "study", "record", "instance", "example", "sample", "specimen",
    "display", "exhibit", "showing", "depiction", "rendering", "outline", "silhouette", "profile", "panorama",
    "vista", "outlook", "prospect", "aspect", "detail", "fragment", "piece", "part", "section", "segment", "slice",
    "glance", "look", "peek", "recap",
];

const FILLERS: &[&str] = &["a", "the", "with", "near", "of", "and"];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub regions: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    /// Std-dev of per-region feature noise.
    pub noise: f64,
    /// Chance of borrowing one object from another scene.
    pub cross_scene: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { pairs: 64, regions: 6, feature_dim: 32, word_dim: 32, noise: 0.3, cross_scene: 0.2 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub records: Vec<CaptionRecord>,
    pub features: FeatureSet,
    pub lexicon: BTreeMap<String, ConceptType>,
    pub words: WordVectorTable,
    /// Concept tokens planted in each image, in caption order.
    pub planted: Vec<Vec<String>>,
    /// Scaled-down run configuration matching the generated files.
    pub config: RunConfig,
}

pub fn concept_lexicon() -> BTreeMap<String, ConceptType> {
    let mut lex = BTreeMap::new();
    for s in &SCENES {
        for o in s.objects {
            lex.insert(o.to_string(), ConceptType::Object);
        }
        for m in s.motions {
            lex.insert(m.to_string(), ConceptType::Motion);
        }
        lex.insert(s.property.to_string(), ConceptType::Property);
    }
    lex
}

fn caption(rng: &mut ChaCha8Rng, prop: Option<&str>, objects: &[&str], motion: Option<&str>, extra: Option<&str>) -> String {
    let mut words: Vec<&str> = vec!["a"];
    if let Some(p) = prop {
        words.push(p);
    }
    words.push(objects[0]);
    if let Some(m) = motion {
        words.push(m);
    }
    for o in &objects[1..] {
        words.push(*["with", "near", "and"].choose(rng).expect("non-empty"));
        words.push("the");
        words.push(o);
    }
    if let Some(x) = extra {
        words.extend(["of", x]);
    }
    words.join(" ")
}

type Drawn = (Vec<CaptionRecord>, Vec<Vec<String>>, Vec<usize>);

fn draw_captions(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, distractors: &mut Vec<&'static str>) -> Result<Drawn> {
    distractors.shuffle(rng);
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(spec.pairs);
    let mut planted = Vec::with_capacity(spec.pairs);
    let mut scenes = Vec::with_capacity(spec.pairs);
    let mut attempts = 0;
    while records.len() < spec.pairs {
        attempts += 1;
        if attempts > spec.pairs * 1000 {
            return Err(CvseError::Parameter("could not draw enough distinct concept sets".into()));
        }
        let si = records.len() % SCENES.len();
        let s = &SCENES[si];
        let n_obj = rng.random_range(2..=3);
        let mut objects: Vec<&str> = s.objects.choose_multiple(rng, n_obj).copied().collect();
        if rng.random::<f64>() < spec.cross_scene {
            let other = &SCENES[(si + rng.random_range(1..SCENES.len())) % SCENES.len()];
            objects.push(other.objects.choose(rng).expect("non-empty"));
        }
        let motion = (rng.random::<f64>() < 0.8).then(|| *s.motions.choose(rng).expect("non-empty"));
        let prop = (rng.random::<f64>() < 0.5).then_some(s.property);
        let mut set: Vec<&str> = objects.clone();
        set.extend(motion);
        set.extend(prop);
        let mut key = set.clone();
        key.sort_unstable();
        if !seen.insert(key) {
            continue;
        }
        let extra = if rng.random::<f64>() < 0.3 { distractors.pop() } else { None };
        let text = caption(rng, prop, &objects, motion, extra);
        records.push(CaptionRecord { id: format!("img{:03}", records.len()), captions: vec![text] });
        planted.push(set.iter().map(|t| t.to_string()).collect::<Vec<_>>());
        scenes.push(si);
    }
    Ok((records, planted, scenes))
}

/// First concept drawn fewer than twice, if any.
fn undercovered(lexicon: &BTreeMap<String, ConceptType>, planted: &[Vec<String>]) -> Option<String> {
    let mut freq: BTreeMap<&str, usize> = lexicon.keys().map(|k| (k.as_str(), 0)).collect();
    for t in planted.iter().flatten() {
        *freq.get_mut(t.as_str()).expect("planted tokens are concepts") += 1;
    }
    freq.into_iter().find(|&(_, n)| n < 2).map(|(t, _)| t.to_owned())
}

/// Draws a benchmark. Identical seeds give identical sets.
pub fn generate(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticSet> {
    if spec.pairs < 8 || spec.regions < 5 || spec.feature_dim == 0 || spec.word_dim == 0 {
        return Err(CvseError::Parameter("synthetic set needs >= 8 pairs, >= 5 regions and positive widths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distractors: Vec<&'static str> = DISTRACTORS.to_vec();

    let lexicon = concept_lexicon();
    let mut draws = 0;
    let (records, planted, scenes) = loop {
        draws += 1;
        let drawn = draw_captions(&mut rng, spec, &mut distractors)?;
        match undercovered(&lexicon, &drawn.1) {
            None => break drawn,
            Some(t) if draws >= 32 => {
                return Err(CvseError::Parameter(format!("concept `{t}` drawn fewer than twice; use more pairs")))
            }
            Some(_) => distractors = DISTRACTORS.to_vec(),
        }
    };

    // Features: prototype per concept, one region per planted concept, scene background in the rest.
    let proto: BTreeMap<&str, Vec<f64>> = lexicon
        .keys()
        .map(|k| (k.as_str(), Matrix::gaussian(1, spec.feature_dim, 1.0, &mut rng).into_data()))
        .collect();
    let backgrounds: Vec<Vec<f64>> =
        (0..SCENES.len()).map(|_| Matrix::gaussian(1, spec.feature_dim, 0.5, &mut rng).into_data()).collect();
    let mut regions = Vec::with_capacity(spec.pairs);
    for (set, &si) in planted.iter().zip(&scenes) {
        let mut rows = Vec::with_capacity(spec.regions);
        for r in 0..spec.regions {
            let base = set.get(r).map_or(&backgrounds[si], |t| &proto[t.as_str()]);
            let noise = Matrix::gaussian(1, spec.feature_dim, spec.noise, &mut rng);
            rows.push(base.iter().zip(noise.data()).map(|(b, n)| b + n).collect());
        }
        regions.push(Matrix::stack(&rows)?);
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let features = FeatureSet::new(ids, regions)?;

    // Word vectors: scene centre plus token noise; fillers and distractors get plain noise.
    let centres: Vec<Vec<f64>> =
        (0..SCENES.len()).map(|_| Matrix::gaussian(1, spec.word_dim, 0.3, &mut rng).into_data()).collect();
    let mut words = WordVectorTable::new(spec.word_dim);
    let mut vocab_tokens: BTreeSet<String> = BTreeSet::new();
    for r in &records {
        vocab_tokens.extend(crate::corpus::tokenize(&r.captions[0]));
    }
    vocab_tokens.extend(FILLERS.iter().map(|s| s.to_string()));
    for t in &vocab_tokens {
        let scene = SCENES.iter().position(|s| {
            s.objects.contains(&t.as_str()) || s.motions.contains(&t.as_str()) || s.property == t
        });
        let noise = Matrix::gaussian(1, spec.word_dim, 0.2, &mut rng).into_data();
        let v = match scene {
            Some(si) => centres[si].iter().zip(&noise).map(|(c, n)| c + n).collect(),
            None => noise,
        };
        words.insert(t, v)?;
    }

    let mut config = RunConfig::default();
    config.paths.corpus = Some("corpus.jsonl".into());
    config.paths.features = Some("features.bin".into());
    config.paths.lexicon = Some("lexicon.tsv".into());
    config.paths.word_vectors = Some("word_vectors.txt".into());
    config.paths.out_dir = Some("run".into());
    config.vocab.q = lexicon.len();
    config.model.d = 64;
    config.model.word_dim = spec.word_dim;
    config.graph.gcn_hidden = vec![64];
    config.train.batch_size = 16;
    config.train.epochs = 200;
    config.train.lr_decay_epoch = 100;
    config.train.lr = 2e-3;
    config.train.lr_after_decay = 2e-4;
    config.train.seed = seed;
    config.train.val_fraction = 0.0;

    Ok(SyntheticSet { records, features, lexicon, words, planted, config })
}

impl SyntheticSet {
    /// Writes `corpus.jsonl`, `features.bin(.json)`, `lexicon.tsv`,
    /// `word_vectors.txt` and `config.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CvseError::io(dir, e))?;
        write_corpus(&dir.join("corpus.jsonl"), &self.records)?;
        write_features(&dir.join("features.bin"), &self.features)?;
        write_lexicon(&dir.join("lexicon.tsv"), &self.lexicon)?;
        self.words.save(&dir.join("word_vectors.txt"))?;
        write_json(&dir.join("config.json"), &self.config)
    }
}
