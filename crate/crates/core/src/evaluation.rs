//! Confusion-count metrics, breakdowns, seed statistics, significance tests,
//! correlations and the zero-shot transfer harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{corpus_to_tsv, Instance};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::UNK_ID;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when TP+FP = 0 and precision was reported as 0.
    pub precision_undefined: bool,
    /// Set when TP+FN = 0 and recall was reported as 0.
    pub recall_undefined: bool,
    /// Set when P+R = 0 and F1 was reported as 0.
    pub f1_undefined: bool,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let (f1, f1_undefined) = if precision + recall == 0.0 {
            (0.0, true)
        } else {
            (2.0 * precision * recall / (precision + recall), false)
        };
        MetricsReport {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
            f1_undefined,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `Prec / Rec / F1` as percentages with one decimal.
    pub fn prf_row(&self) -> String {
        format_prf(self.precision, self.recall, self.f1)
    }
}

pub fn format_prf(precision: f64, recall: f64, f1: f64) -> String {
    format!("{:.1} / {:.1} / {:.1}", 100.0 * precision, 100.0 * recall, 100.0 * f1)
}

pub fn score(predictions: &[bool], golds: &[bool]) -> Result<MetricsReport> {
    if predictions.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in predictions.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BreakdownKey {
    Genre,
    Pos,
}

impl std::str::FromStr for BreakdownKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "genre" => Ok(BreakdownKey::Genre),
            "pos" => Ok(BreakdownKey::Pos),
            _ => Err(Error::config(format!("unknown breakdown key `{s}` (expected genre or pos)"))),
        }
    }
}

impl BreakdownKey {
    pub fn of(self, inst: &Instance) -> Option<&str> {
        let v = match self {
            BreakdownKey::Genre => inst.genre.as_deref(),
            BreakdownKey::Pos => Some(inst.pos_tag.as_str()),
        };
        v.filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Breakdown {
    pub buckets: BTreeMap<String, MetricsReport>,
    /// Indices of instances without the key; excluded from every bucket.
    pub missing: Vec<usize>,
}

/// Micro-averaged scoring per key value; empty buckets never appear.
pub fn breakdown(predictions: &[bool], golds: &[bool], keys: &[Option<&str>]) -> Result<Breakdown> {
    if predictions.len() != golds.len() || golds.len() != keys.len() {
        return Err(Error::contract("breakdown inputs differ in length"));
    }
    let mut groups: BTreeMap<&str, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    let mut missing = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        match key {
            Some(k) => {
                let g = groups.entry(k).or_default();
                g.0.push(predictions[i]);
                g.1.push(golds[i]);
            }
            None => missing.push(i),
        }
    }
    let buckets = groups
        .into_iter()
        .map(|(k, (p, g))| Ok((k.to_string(), score(&p, &g)?)))
        .collect::<Result<_>>()?;
    Ok(Breakdown { buckets, missing })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStats {
    pub seeds: Vec<u64>,
    pub f1: Vec<f64>,
    pub f1_mean: f64,
    /// Sample standard deviation.
    pub f1_std: f64,
    pub precision_mean: f64,
    pub recall_mean: f64,
}

impl SeedStats {
    pub fn new(seeds: &[u64], reports: &[MetricsReport]) -> Result<Self> {
        if seeds.len() != reports.len() || reports.is_empty() {
            return Err(Error::contract("seed statistics need one report per seed"));
        }
        let f1: Vec<f64> = reports.iter().map(|r| r.f1).collect();
        let (f1_mean, f1_std) = mean_std(&f1);
        let p: Vec<f64> = reports.iter().map(|r| r.precision).collect();
        let r: Vec<f64> = reports.iter().map(|r| r.recall).collect();
        Ok(SeedStats {
            seeds: seeds.to_vec(),
            f1,
            f1_mean,
            f1_std,
            precision_mean: mean_std(&p).0,
            recall_mean: mean_std(&r).0,
        })
    }
}

/// Welch two-sample, two-tailed t-test p-value.
pub fn ttest_two_tailed(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract("each sample needs at least two values"));
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sa * sa / na, sb * sb / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::contract(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Ranks starting at 1; ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlations {
    /// `None` when either series is constant.
    pub spearman_rho: Option<f64>,
    pub pearson_r: Option<f64>,
    pub constant_input: bool,
}

pub fn regression_score(predictions: &[f64], targets: &[f64]) -> Result<Correlations> {
    if predictions.len() != targets.len() {
        return Err(Error::contract("prediction and target counts differ"));
    }
    if predictions.len() < 3 {
        return Err(Error::contract("correlation needs at least three pairs"));
    }
    let pearson_r = pearson_raw(predictions, targets);
    let spearman_rho = pearson_raw(&average_ranks(predictions), &average_ranks(targets));
    Ok(Correlations {
        spearman_rho,
        pearson_r,
        constant_input: pearson_r.is_none(),
    })
}

/// SHA-256 of the canonical TSV rendering.
pub fn dataset_hash(instances: &[Instance]) -> String {
    let digest = Sha256::digest(corpus_to_tsv(instances).as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub overall: MetricsReport,
    pub by_genre: Option<BTreeMap<String, MetricsReport>>,
    pub by_pos: Option<BTreeMap<String, MetricsReport>>,
    pub seeds: Option<SeedStats>,
    pub dataset_hash: String,
    pub instances: usize,
    /// Share of sentence sub-tokens mapped to `[UNK]`.
    pub unk_rate: f64,
    /// Share of targets containing at least one `[UNK]` sub-token.
    pub target_unk_rate: f64,
    pub warnings: Vec<String>,
    pub config: Value,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant {}  instances {}  dataset {}", self.variant, self.instances, &self.dataset_hash[..12]);
        let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}", "bucket", "TP", "FP", "FN", "TN", "Prec", "Rec", "F1");
        let mut row = |name: &str, m: &MetricsReport| {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>6}  {:>6.1} {:>6.1} {:>6.1}",
                name,
                m.tp,
                m.fp,
                m.fn_,
                m.tn,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1
            );
        };
        row("overall", &self.overall);
        for (label, map) in [("genre", &self.by_genre), ("pos", &self.by_pos)] {
            if let Some(map) = map {
                for (k, m) in map {
                    row(&format!("{label}={k}"), m);
                }
            }
        }
        if let Some(s) = &self.seeds {
            let _ = writeln!(out, "seeds {:?}: F1 {:.1} ± {:.1}", s.seeds, 100.0 * s.f1_mean, 100.0 * s.f1_std);
        }
        if self.unk_rate > 0.0 {
            let _ = writeln!(out, "unk rate {:.3} (targets {:.3})", self.unk_rate, self.target_unk_rate);
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Sub-token and target-level `[UNK]` shares of `instances` under `model`.
pub fn unk_rates(model: &Model, instances: &[Instance]) -> (f64, f64) {
    let (mut unk, mut total, mut bad_targets) = (0usize, 0usize, 0usize);
    for inst in instances {
        for (i, w) in inst.tokens.iter().enumerate() {
            let ids = model.vocab.encode_word(w, i == 0);
            let n_unk = ids.iter().filter(|&&id| id == UNK_ID).count();
            unk += n_unk;
            total += ids.len();
            if i == inst.target_index && n_unk > 0 {
                bad_targets += 1;
            }
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (rate(unk, total), rate(bad_targets, instances.len()))
}

/// Scores already computed for `instances` turned into a full report.
pub fn report_from_scores(
    model: &Model,
    instances: &[Instance],
    scores: &[f64],
    threshold: f64,
    keys: &[BreakdownKey],
    config: Value,
) -> Result<EvalReport> {
    if scores.len() != instances.len() {
        return Err(Error::contract("one score per instance is required"));
    }
    let preds: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let golds: Vec<bool> = instances.iter().map(Instance::is_metaphor).collect();
    let overall = score(&preds, &golds)?;
    let mut warnings = Vec::new();
    let mut by = |key: BreakdownKey| -> Result<Option<BTreeMap<String, MetricsReport>>> {
        if !keys.contains(&key) {
            return Ok(None);
        }
        let ks: Vec<Option<&str>> = instances.iter().map(|i| key.of(i)).collect();
        let b = breakdown(&preds, &golds, &ks)?;
        if !b.missing.is_empty() {
            warnings.push(format!("{} instances lack a {key:?} key and were excluded from that breakdown", b.missing.len()));
        }
        Ok((!b.buckets.is_empty()).then_some(b.buckets))
    };
    let by_genre = by(BreakdownKey::Genre)?;
    let by_pos = by(BreakdownKey::Pos)?;
    let (unk_rate, target_unk_rate) = unk_rates(model, instances);
    Ok(EvalReport {
        variant: model.variant().to_string(),
        overall,
        by_genre,
        by_pos,
        seeds: None,
        dataset_hash: dataset_hash(instances),
        instances: instances.len(),
        unk_rate,
        target_unk_rate,
        warnings,
        config,
    })
}

pub fn evaluate(model: &Model, instances: &[Instance], keys: &[BreakdownKey], config: Value) -> Result<EvalReport> {
    let scores = model.predict(instances)?;
    report_from_scores(model, instances, &scores, model.config.threshold, keys, config)
}

/// Scores corpus `b` with a model trained elsewhere; no parameter changes.
/// Unknown surface forms map to `[UNK]` and show up in the UNK rates.
pub fn zero_shot_eval(model: &Model, corpus_b: &[Instance]) -> Result<EvalReport> {
    evaluate(model, corpus_b, &[], Value::Null)
}
