//! Corpus ingestion, dataset statistics and sentence-level k-fold splits.
//!
//! The on-disk format is a UTF-8 TSV whose header names the columns
//! `sentence_id`, `tokens`, `target_index`, `label`, `pos` and `genre`, with
//! one labeled target word per row. `tokens` holds the space-joined surface words.

mod synthetic;

pub use synthetic::{make_synthetic_corpus, Lexicon, SyntheticSpec};

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

pub const TSV_HEADER: &str = "sentence_id\ttokens\ttarget_index\tlabel\tpos\tgenre";
const COLUMNS: [&str; 6] = ["sentence_id", "tokens", "target_index", "label", "pos", "genre"];

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub target_index: usize,
    /// `0.0`/`1.0` for classification, a real novelty score for regression.
    pub label: f64,
    pub pos_tag: String,
    pub genre: Option<String>,
}

impl Instance {
    pub fn target(&self) -> &str {
        &self.tokens[self.target_index]
    }

    pub fn is_metaphor(&self) -> bool {
        self.label >= 0.5
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::contract("instance has no tokens"));
        }
        if self.target_index >= self.tokens.len() {
            return Err(Error::contract(format!(
                "target_index {} out of range for {} tokens",
                self.target_index,
                self.tokens.len()
            )));
        }
        if self.tokens[self.target_index].is_empty() {
            return Err(Error::contract("target word is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Binary,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    /// Rows that failed validation; they are reported, never silently dropped.
    pub errors: Vec<RowError>,
}

pub fn parse_corpus(text: &str, origin: &str, mode: LabelMode) -> Result<Corpus> {
    let mut lines = text.split_terminator('\n').enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim_end_matches('\r'))
        .ok_or_else(|| Error::format(origin, 1, "missing header"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    for (i, want) in COLUMNS.iter().enumerate() {
        if cols.get(i) != Some(want) {
            return Err(Error::format(
                origin,
                1,
                format!("missing column `{want}` (header must be `{TSV_HEADER}`)"),
            ));
        }
    }

    let mut corpus = Corpus::default();
    for (i, raw) in lines {
        let line = i + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        match parse_row(row, mode) {
            Ok(inst) => corpus.instances.push(inst),
            Err(message) => corpus.errors.push(RowError { line, message }),
        }
    }
    Ok(corpus)
}

fn parse_row(row: &str, mode: LabelMode) -> std::result::Result<Instance, String> {
    let f: Vec<&str> = row.split('\t').collect();
    if f.len() != COLUMNS.len() {
        return Err(format!("expected {} columns, found {}", COLUMNS.len(), f.len()));
    }
    let tokens: Vec<String> = f[1].split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect();
    let target_index: usize = f[2]
        .parse()
        .map_err(|_| format!("target_index {:?} is not a non-negative integer", f[2]))?;
    let label: f64 = f[3].parse().map_err(|_| format!("label {:?} is not a number", f[3]))?;
    if mode == LabelMode::Binary && label != 0.0 && label != 1.0 {
        return Err(format!("label {:?} must be 0 or 1", f[3]));
    }
    if !label.is_finite() {
        return Err(format!("label {:?} is not finite", f[3]));
    }
    let inst = Instance {
        sentence_id: f[0].to_string(),
        tokens,
        target_index,
        label,
        pos_tag: f[4].to_string(),
        genre: (!f[5].is_empty()).then(|| f[5].to_string()),
    };
    inst.validate().map_err(|e| e.to_string())?;
    Ok(inst)
}

pub fn load_corpus(path: &Path, mode: LabelMode) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string(), mode)
}

pub fn corpus_to_tsv(instances: &[Instance]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for inst in instances {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            inst.sentence_id,
            inst.tokens.join(" "),
            inst.target_index,
            inst.label,
            inst.pos_tag,
            inst.genre.as_deref().unwrap_or("")
        );
    }
    out
}

pub fn save_corpus(path: &Path, instances: &[Instance]) -> Result<()> {
    std::fs::write(path, corpus_to_tsv(instances)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    /// Number of labeled target tokens (rows).
    pub token_count: usize,
    pub metaphor_pct: f64,
    pub sentence_count: usize,
    /// Mean word count over distinct sentences.
    pub avg_sentence_len: f64,
}

impl DatasetSummary {
    /// One-decimal rendering used in dataset tables.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{name}\t{}\t{:.1}\t{}\t{:.1}",
            self.token_count, self.metaphor_pct, self.sentence_count, self.avg_sentence_len
        )
    }
}

pub fn summarize(dataset: &[Instance]) -> Result<DatasetSummary> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot summarize an empty dataset"));
    }
    let positives = dataset.iter().filter(|i| i.is_metaphor()).count();
    let mut seen = HashSet::new();
    let mut total_len = 0usize;
    for inst in dataset {
        if seen.insert(inst.sentence_id.as_str()) {
            total_len += inst.tokens.len();
        }
    }
    Ok(DatasetSummary {
        token_count: dataset.len(),
        metaphor_pct: 100.0 * positives as f64 / dataset.len() as f64,
        sentence_count: seen.len(),
        avg_sentence_len: total_len as f64 / seen.len() as f64,
    })
}

/// Instance indices for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Splits by sentence id so no sentence straddles two folds. Sentences are
/// shuffled under `seed`, then dealt round-robin, so fold sizes (in
/// sentences) differ by at most one.
pub fn kfold_split(dataset: &[Instance], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, inst) in dataset.iter().enumerate() {
        let g = groups.entry(inst.sentence_id.as_str()).or_default();
        if g.is_empty() {
            order.push(inst.sentence_id.as_str());
        }
        g.push(i);
    }
    if k > order.len() {
        return Err(Error::config(format!(
            "k = {k} exceeds the number of sentences ({})",
            order.len()
        )));
    }
    let mut r = rng::stream(seed, Domain::Folds, k as u64, 0);
    rng::shuffle(&mut order, &mut r);

    let mut fold_of = vec![0usize; dataset.len()];
    for (pos, sid) in order.iter().enumerate() {
        for &i in &groups[sid] {
            fold_of[i] = pos % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (heldout, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| fold_of[i] == f);
            Fold { train, heldout }
        })
        .collect())
}

pub fn select(dataset: &[Instance], idx: &[usize]) -> Vec<Instance> {
    idx.iter().map(|&i| dataset[i].clone()).collect()
}
