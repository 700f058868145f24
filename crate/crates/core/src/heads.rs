//! Metaphor identification heads, their combination, and the losses.
//!
//! * MIP: `h_MIP = f([v_{S,t}; v_t])`
//! * SPV: `h_SPV = g([v_S; v_{S,t}])`
//! * score: `ŷ = σ(Wᵀ [h_MIP; h_SPV] + b)`
//!
//! `f` and `g` are one affine layer followed by GELU and dropout. The
//! ablations drop one branch and shrink `W` to `h` entries. The two baselines
//! put an affine + sigmoid classifier on a single encoder vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, normal_tensor, EncoderConfig};
use crate::error::{Error, Result};
use crate::input::{SentenceInput, TargetInput};
use crate::params::{ParamStore, Session};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor, Var, BCE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MELBERT")]
    Melbert,
    #[serde(rename = "NO_MIP")]
    NoMip,
    #[serde(rename = "NO_SPV")]
    NoSpv,
    #[serde(rename = "BASE_ALL2ALL")]
    BaseAll2All,
    #[serde(rename = "SEQ")]
    Seq,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Melbert,
        Variant::NoMip,
        Variant::NoSpv,
        Variant::BaseAll2All,
        Variant::Seq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Melbert => "MELBERT",
            Variant::NoMip => "NO_MIP",
            Variant::NoSpv => "NO_SPV",
            Variant::BaseAll2All => "BASE_ALL2ALL",
            Variant::Seq => "SEQ",
        }
    }

    pub fn uses_mip(self) -> bool {
        matches!(self, Variant::Melbert | Variant::NoSpv)
    }

    pub fn uses_spv(self) -> bool {
        matches!(self, Variant::Melbert | Variant::NoMip)
    }

    /// Whether the isolated target encoder runs.
    pub fn needs_target(self) -> bool {
        self.uses_mip()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

const MIP: &str = "head.mip";
const SPV: &str = "head.spv";
const OUT: &str = "head.out";
const CLS_HEAD: &str = "head.cls";
const TOK_HEAD: &str = "head.tok";

/// Declared shapes of the head parameters for `variant` with encoder width
/// `d` and head width `h`.
pub fn head_shapes(variant: Variant, d: usize, h: usize) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut mlp = |name: &str| {
        shapes.push((format!("{name}.w"), vec![2 * d, h]));
        shapes.push((format!("{name}.b"), vec![h]));
    };
    if variant.uses_mip() {
        mlp(MIP);
    }
    if variant.uses_spv() {
        mlp(SPV);
    }
    match variant {
        Variant::Melbert => {
            shapes.push((format!("{OUT}.w"), vec![2 * h, 1]));
            shapes.push((format!("{OUT}.b"), vec![1]));
        }
        Variant::NoMip | Variant::NoSpv => {
            shapes.push((format!("{OUT}.w"), vec![h, 1]));
            shapes.push((format!("{OUT}.b"), vec![1]));
        }
        Variant::BaseAll2All => {
            shapes.push((format!("{CLS_HEAD}.w"), vec![d, 1]));
            shapes.push((format!("{CLS_HEAD}.b"), vec![1]));
        }
        Variant::Seq => {
            shapes.push((format!("{TOK_HEAD}.w"), vec![d, 1]));
            shapes.push((format!("{TOK_HEAD}.b"), vec![1]));
        }
    }
    shapes
}

pub fn head_param_count(variant: Variant, d: usize, h: usize) -> usize {
    head_shapes(variant, d, h)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

pub fn init_heads(variant: Variant, d: usize, h: usize, store: &mut ParamStore, rng: &mut StreamRng) {
    for (name, shape) in head_shapes(variant, d, h) {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            normal_tensor(&shape, rng)
        };
        store.insert(name, t);
    }
}

fn mlp(s: &mut Session<'_>, name: &str, a: Var, b: Var, dropout_p: f64) -> Result<Var> {
    let (da, db) = (s.tape.value(a).shape().to_vec(), s.tape.value(b).shape().to_vec());
    if da != db || da.len() != 2 || da[0] != 1 {
        return Err(Error::contract(format!("head inputs must be matching [1×d] rows, got {da:?} and {db:?}")));
    }
    let x = s.tape.concat(&[a, b], 1)?;
    let y = s.linear(x, &format!("{name}.w"), &format!("{name}.b"))?;
    let y = s.tape.gelu(y);
    s.dropout(y, dropout_p)
}

/// `f([v_{S,t}; v_t])` on `[1×d]` rows.
pub fn mip_head(s: &mut Session<'_>, v_st: Var, v_t: Var, dropout_p: f64) -> Result<Var> {
    mlp(s, MIP, v_st, v_t, dropout_p)
}

/// `g([v_S; v_{S,t}])` on `[1×d]` rows.
pub fn spv_head(s: &mut Session<'_>, v_s: Var, v_st: Var, dropout_p: f64) -> Result<Var> {
    mlp(s, SPV, v_s, v_st, dropout_p)
}

/// `σ(Wᵀ [parts…] + b)` as a `[1×1]` score.
pub fn combine(s: &mut Session<'_>, parts: &[Var]) -> Result<Var> {
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        s.tape.concat(parts, 1)?
    };
    let z = s.linear(x, &format!("{OUT}.w"), &format!("{OUT}.b"))?;
    Ok(s.tape.sigmoid(z))
}

fn row(s: &mut Session<'_>, v: &Tensor) -> Result<Var> {
    let t = v.reshape(&[1, v.len()])?;
    Ok(s.tape.constant(t))
}

/// Eval-mode `mip_head` on plain vectors.
pub fn mip_head_value(params: &ParamStore, v_st: &Tensor, v_t: &Tensor) -> Result<Tensor> {
    let mut s = Session::eval(params);
    let (a, b) = (row(&mut s, v_st)?, row(&mut s, v_t)?);
    let h = mip_head(&mut s, a, b, 0.0)?;
    s.tape.value(h).reshape(&[s.tape.value(h).len()])
}

/// Eval-mode `spv_head` on plain vectors.
pub fn spv_head_value(params: &ParamStore, v_s: &Tensor, v_st: &Tensor) -> Result<Tensor> {
    let mut s = Session::eval(params);
    let (a, b) = (row(&mut s, v_s)?, row(&mut s, v_st)?);
    let h = spv_head(&mut s, a, b, 0.0)?;
    s.tape.value(h).reshape(&[s.tape.value(h).len()])
}

/// Eval-mode `combine` on plain hidden vectors.
pub fn combine_value(params: &ParamStore, parts: &[&Tensor]) -> Result<f64> {
    let mut s = Session::eval(params);
    let vars = parts.iter().map(|p| row(&mut s, p)).collect::<Result<Vec<_>>>()?;
    let y = combine(&mut s, &vars)?;
    Ok(s.tape.value(y).item())
}

fn loss_weights(labels: &[f64], pos_weight: f64) -> Result<Vec<f64>> {
    if pos_weight < 1.0 {
        return Err(Error::config(format!("pos_weight must be >= 1, got {pos_weight}")));
    }
    Ok(labels
        .iter()
        .map(|&y| if y >= 0.5 { pos_weight } else { 1.0 })
        .collect())
}

/// Weighted binary cross-entropy on the tape; metaphors weigh `pos_weight`.
pub fn bce_loss(tape: &mut Tape, scores: Var, labels: &[f64], pos_weight: f64) -> Result<Var> {
    let w = loss_weights(labels, pos_weight)?;
    tape.bce(scores, labels, &w)
}

pub fn mse_loss(tape: &mut Tape, scores: Var, targets: &[f64]) -> Result<Var> {
    tape.mse(scores, targets)
}

/// Scalar BCE value without a tape.
pub fn bce_value(scores: &[f64], labels: &[f64], pos_weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![scores.len()], scores.to_vec())?);
    let l = bce_loss(&mut tape, p, labels, pos_weight)?;
    Ok(tape.value(l).item())
}

pub fn mse_value(scores: &[f64], targets: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![scores.len()], scores.to_vec())?);
    let l = mse_loss(&mut tape, p, targets)?;
    Ok(tape.value(l).item())
}

/// Lowest probability the loss treats as distinct from zero.
pub const PROB_CLAMP: f64 = BCE_EPS;

/// Shape-independent inputs for one instance under any variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Sentence input, or the joint pair input for `BASE_ALL2ALL`.
    pub sentence: SentenceInput,
    /// Present when the variant runs the target encoder.
    pub target: Option<TargetInput>,
    pub label: f64,
}

/// Runs the target encoder and pools `v_t` as a `[1×d]` row.
pub fn encode_target(s: &mut Session<'_>, cfg: &EncoderConfig, target: &TargetInput) -> Result<Var> {
    let enc = encoder::encode(s, cfg, target.into())?;
    encoder::pool_target(s, cfg, &enc, target.target_span())
}

/// Score `ŷ` (`[1×1]`) for one instance. `v_t`, when given, replaces the
/// target-encoder pass (cached or shared within a batch).
pub fn forward_variant(
    s: &mut Session<'_>,
    variant: Variant,
    cfg: &EncoderConfig,
    input: &ModelInput,
    v_t: Option<Var>,
) -> Result<Var> {
    let p = cfg.dropout_p;
    let enc = encoder::encode(s, cfg, (&input.sentence).into())?;
    let (ts, te) = input.sentence.target_span;
    match variant {
        Variant::BaseAll2All => {
            let cls = s.tape.slice_rows(enc.hidden, 0, 1)?;
            let cls = s.dropout(cls, p)?;
            let z = s.linear(cls, &format!("{CLS_HEAD}.w"), &format!("{CLS_HEAD}.b"))?;
            Ok(s.tape.sigmoid(z))
        }
        Variant::Seq => {
            let v_st = s.tape.mean_rows(enc.hidden, ts, te)?;
            let v_st = s.dropout(v_st, p)?;
            let z = s.linear(v_st, &format!("{TOK_HEAD}.w"), &format!("{TOK_HEAD}.b"))?;
            Ok(s.tape.sigmoid(z))
        }
        Variant::Melbert | Variant::NoMip | Variant::NoSpv => {
            let v_s = s.tape.slice_rows(enc.hidden, 0, 1)?;
            let v_st = s.tape.mean_rows(enc.hidden, ts, te)?;
            let mut parts = Vec::with_capacity(2);
            if variant.uses_mip() {
                let v_t = match v_t {
                    Some(v) => v,
                    None => {
                        let target = input
                            .target
                            .as_ref()
                            .ok_or_else(|| Error::contract(format!("{variant} needs a target input")))?;
                        encode_target(s, cfg, target)?
                    }
                };
                parts.push(mip_head(s, v_st, v_t, p)?);
            }
            if variant.uses_spv() {
                parts.push(spv_head(s, v_s, v_st, p)?);
            }
            combine(s, &parts)
        }
    }
}
