//! Seeded synthetic NER corpora for offline runs, tests and benchmarks.
//!
//! Sentences are built from small per-type name lists and filler words.
//! Every sentence starts with a unique serial token, so texts never repeat
//! within a dataset.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{Dataset, GoldMention, Schema, Sentence};
use crate::seed;

const PER: &[&str] = &[
    "John Smith", "Mary", "Ahmed Khan", "Li Wei", "Olga", "Carlos Mendez", "Yuki Tanaka", "Ann",
    "Peter Brown", "Fatima", "Tom", "Ingrid Berg", "Raj Patel", "Chen", "Sara Lopez", "Ivan",
];
const ORG: &[&str] = &[
    "Acme Corp", "United Nations", "Reuters", "FIFA", "Bank of Tokyo", "Nokia", "Red Cross",
    "Toyota", "EU", "World Bank", "Siemens AG", "NASA", "Oxfam", "BBC",
];
const LOC: &[&str] = &[
    "Paris", "London", "China", "California", "New York", "Rome", "Nairobi", "Lima", "Oslo",
    "Texas", "Berlin", "Mount Kenya", "Danube", "Peru", "Sydney", "Cairo",
];
const MISC: &[&str] = &[
    "English", "World Cup", "Olympics", "Nobel Prize", "Christmas", "French", "Euro",
    "Grand Prix", "Islamic", "Tour de France",
];
const FILLER: &[&str] = &[
    "said", "on", "the", "in", "met", "with", "after", "reported", "that", "a", "new", "deal",
    "visited", "near", "during", "talks", "and", "from", "today", "officials",
];

/// The schema used by generated datasets (CoNLL2003 labels).
pub fn schema() -> Schema {
    Schema::conll2003()
}

fn vocab(etype: &str) -> &'static [&'static str] {
    match etype {
        "PER" => PER,
        "ORG" => ORG,
        "LOC" => LOC,
        _ => MISC,
    }
}

fn sentence(id: String, serial: usize, rng: &mut impl Rng) -> Sentence {
    let types = ["PER", "ORG", "LOC", "MISC"];
    let mut words: Vec<String> = vec![format!("#{serial}")];
    let mut gold = Vec::new();
    let mentions = rng.random_range(0..=3);
    for _ in 0..mentions {
        for _ in 0..rng.random_range(1..=3) {
            words.push(FILLER.choose(rng).expect("filler").to_string());
        }
        let etype = types[rng.random_range(0..types.len())];
        let surface = vocab(etype).choose(rng).expect("vocab");
        words.push(surface.to_string());
        gold.push(GoldMention::new(etype, *surface));
    }
    for _ in 0..rng.random_range(1..=3) {
        words.push(FILLER.choose(rng).expect("filler").to_string());
    }
    words.push(".".to_string());
    Sentence { id, text: words.join(" "), gold }
}

/// A dataset with `train` and `test` sentences, deterministic in `seed`.
pub fn dataset(train: usize, test: usize, seed: u64) -> Dataset {
    let mut rng = seed::rng_for(seed, "synthetic");
    let train_split = (0..train).map(|i| sentence(format!("train-{i}"), i, &mut rng)).collect();
    let test_split = (0..test).map(|i| sentence(format!("test-{i}"), train + i, &mut rng)).collect();
    Dataset { schema: schema(), train: train_split, test: test_split }
}
