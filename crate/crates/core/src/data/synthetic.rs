//! Seed-deterministic synthetic metaphor corpus.
//!
//! Words belong to semantic fields; every content word is `stem + suffix`,
//! and the stem names the field. A target is labeled metaphorical exactly
//! when the other content words of its clause come from a different field
//! than the target. Clauses outside the target's comma-delimited clause draw
//! from arbitrary fields and never affect the label.

use rand::Rng;

use super::Instance;
use crate::rng::{self, Domain, StreamRng};

const STEMS: [&str; 8] = ["bor", "kel", "mun", "sat", "vip", "dra", "fen", "lox"];
const GENRES: [&str; 4] = ["news", "academic", "fiction", "conversation"];

// Two disjoint suffix inventories: corpora built from different variants share
// the field stems but no surface word.
const NOUN_SUFFIXES: [[&str; 6]; 2] = [
    ["a", "o", "ix", "um", "el", "ot"],
    ["ar", "ep", "oo", "ux", "im", "ag"],
];
const VERB_SUFFIXES: [[&str; 6]; 2] = [
    ["es", "ap", "ik", "ate", "ul", "id"],
    ["ed", "op", "iz", "ute", "ax", "ob"],
];
const ADJ_SUFFIXES: [[&str; 6]; 2] = [
    ["y", "ish", "ous", "al", "ic", "en"],
    ["ly", "ist", "ine", "ant", "oid", "ev"],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of semantic fields, at most 8.
    pub n_fields: usize,
    /// Words per field and part of speech, at most 6.
    pub words_per_field: usize,
    /// Fraction of metaphorical instances; the count is rounded and exact.
    pub balance: f64,
    /// Which suffix inventory (0 or 1) builds the surface words.
    pub lexicon_variant: usize,
    /// Probability of an extra comma-separated clause.
    pub extra_clause_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_fields: 4,
            words_per_field: 4,
            balance: 0.5,
            lexicon_variant: 0,
            extra_clause_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Noun,
    Verb,
    Adj,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    // fields[f] = (nouns, verbs, adjectives)
    fields: Vec<[Vec<String>; 3]>,
}

impl Lexicon {
    pub fn new(spec: &SyntheticSpec) -> Self {
        assert!(spec.n_fields >= 2 && spec.n_fields <= STEMS.len(), "n_fields out of range");
        assert!(spec.words_per_field >= 1 && spec.words_per_field <= 6, "words_per_field out of range");
        assert!(spec.lexicon_variant < 2, "lexicon_variant must be 0 or 1");
        let v = spec.lexicon_variant;
        let make = |stem: &str, suffixes: &[&str; 6]| -> Vec<String> {
            suffixes[..spec.words_per_field].iter().map(|s| format!("{stem}{s}")).collect()
        };
        let fields = STEMS[..spec.n_fields]
            .iter()
            .map(|stem| {
                [
                    make(stem, &NOUN_SUFFIXES[v]),
                    make(stem, &VERB_SUFFIXES[v]),
                    make(stem, &ADJ_SUFFIXES[v]),
                ]
            })
            .collect();
        Lexicon { fields }
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    /// Field of a content word, `None` for function words.
    pub fn field_of(&self, word: &str) -> Option<usize> {
        self.fields
            .iter()
            .position(|roles| roles.iter().any(|ws| ws.iter().any(|w| w == word)))
    }

    fn pick(&self, field: usize, role: Role, rng: &mut StreamRng) -> String {
        let pool = &self.fields[field][role as usize];
        pool[rng.random_range(0..pool.len())].clone()
    }

    /// The generating rule: `Some(1.0)` when the target's clause context
    /// comes from another field, `Some(0.0)` when it matches, `None` when the
    /// instance was not produced by this lexicon.
    pub fn rule_label(&self, inst: &Instance) -> Option<f64> {
        let t = inst.target_index;
        let target_field = self.field_of(inst.target())?;
        let start = inst.tokens[..t].iter().rposition(|w| w == ",").map_or(0, |p| p + 1);
        let end = inst.tokens[t..].iter().position(|w| w == ",").map_or(inst.tokens.len(), |p| t + p);
        let mut ctx = (start..end)
            .filter(|&i| i != t)
            .filter_map(|i| self.field_of(&inst.tokens[i]));
        let first = ctx.next()?;
        Some(if first != target_field { 1.0 } else { 0.0 })
    }
}

/// Builds `n_sentences` single-target instances. Identical `(seed, spec)`
/// yields an identical corpus.
pub fn make_synthetic_corpus(seed: u64, n_sentences: usize, spec: &SyntheticSpec) -> Vec<Instance> {
    assert!(n_sentences > 0, "n_sentences must be positive");
    let lex = Lexicon::new(spec);
    let mut rng = rng::stream(seed, Domain::Synthetic, spec.lexicon_variant as u64, n_sentences as u64);

    let positives = (spec.balance * n_sentences as f64).round() as usize;
    let mut labels: Vec<bool> = (0..n_sentences).map(|i| i < positives).collect();
    rng::shuffle(&mut labels, &mut rng);

    let nf = lex.n_fields();
    labels
        .into_iter()
        .enumerate()
        .map(|(i, metaphor)| {
            let tf = rng.random_range(0..nf);
            let cf = if metaphor {
                (tf + rng.random_range(1..nf)) % nf
            } else {
                tf
            };
            let (mut words, mut target, pos) = match rng.random_range(0..3) {
                0 => {
                    let w = vec![
                        "the".to_string(),
                        lex.pick(cf, Role::Noun, &mut rng),
                        lex.pick(tf, Role::Verb, &mut rng),
                        "the".to_string(),
                        lex.pick(cf, Role::Noun, &mut rng),
                    ];
                    (w, 2, "VERB")
                }
                1 => {
                    let w = vec![
                        "a".to_string(),
                        lex.pick(cf, Role::Adj, &mut rng),
                        lex.pick(tf, Role::Noun, &mut rng),
                        lex.pick(cf, Role::Verb, &mut rng),
                        "it".to_string(),
                    ];
                    (w, 2, "NOUN")
                }
                _ => {
                    let w = vec![
                        "the".to_string(),
                        lex.pick(tf, Role::Adj, &mut rng),
                        lex.pick(cf, Role::Noun, &mut rng),
                        lex.pick(cf, Role::Verb, &mut rng),
                        "with".to_string(),
                        lex.pick(cf, Role::Noun, &mut rng),
                    ];
                    (w, 1, "ADJ")
                }
            };
            if rng.random::<f64>() < spec.extra_clause_rate {
                let of = rng.random_range(0..nf);
                let clause = vec![
                    "then".to_string(),
                    "the".to_string(),
                    lex.pick(of, Role::Noun, &mut rng),
                    lex.pick(of, Role::Verb, &mut rng),
                ];
                if rng.random::<bool>() {
                    words.push(",".to_string());
                    words.extend(clause);
                } else {
                    let mut pre = clause;
                    pre.push(",".to_string());
                    target += pre.len();
                    pre.extend(words);
                    words = pre;
                }
            }
            let genre = GENRES[rng.random_range(0..GENRES.len())];
            Instance {
                sentence_id: format!("syn{seed}v{}-{i}", spec.lexicon_variant),
                tokens: words,
                target_index: target,
                label: if metaphor { 1.0 } else { 0.0 },
                pos_tag: pos.to_string(),
                genre: Some(genre.to_string()),
            }
        })
        .collect()
}
