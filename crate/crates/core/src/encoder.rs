//! Post-LN transformer encoder shared by the sentence and target sides.
//!
//! Each layer is `x = LN(x + Drop(MHSA(x)))` followed by
//! `x = LN(x + Drop(W2 · GELU(W1 · x)))`. Sentence inputs embed as
//! token + position + segment; target inputs embed tokens only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::input::{Segment, SentenceInput, TargetInput, NUM_SEGMENTS};
use crate::params::{ParamStore, Session};
use crate::rng::{truncated_normal, StreamRng};
use crate::tensor::{Tensor, Var};
use crate::tokenizer::TokenId;

pub const LN_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

/// How `v_t` is pooled from the target encoder's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over the target sub-token positions.
    Mean,
    /// The `[CLS]` vector.
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            _ => Err(Error::config(format!("unknown pooling `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub target_pooling: Pooling,
}

impl EncoderConfig {
    /// Two layers, two heads, 64 dimensions.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 64,
            ffn_dim: 128,
            max_positions: 150,
            vocab_size,
            dropout_p: 0.2,
            target_pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

pub(crate) fn normal_tensor(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut StreamRng) {
    store.insert(format!("{name}.w"), normal_tensor(&[fan_in, fan_out], rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn init_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
}

/// Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains.
pub fn init_encoder(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    store.insert("emb.token", normal_tensor(&[cfg.vocab_size, d], rng));
    store.insert("emb.position", normal_tensor(&[cfg.max_positions, d], rng));
    store.insert("emb.segment", normal_tensor(&[NUM_SEGMENTS, d], rng));
    init_norm(store, "emb.ln", d);
    for l in 0..cfg.num_layers {
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("layer{l}.attn.{proj}"), d, d, rng);
        }
        init_norm(store, &format!("layer{l}.attn.ln"), d);
        init_linear(store, &format!("layer{l}.ffn.in"), d, cfg.ffn_dim, rng);
        init_linear(store, &format!("layer{l}.ffn.out"), cfg.ffn_dim, d, rng);
        init_norm(store, &format!("layer{l}.ffn.ln"), d);
    }
    Ok(())
}

/// Token ids plus optional position and segment ids.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub ids: &'a [TokenId],
    pub positions: Option<&'a [usize]>,
    pub segments: Option<&'a [Segment]>,
}

impl<'a> From<&'a SentenceInput> for EncoderInput<'a> {
    fn from(s: &'a SentenceInput) -> Self {
        EncoderInput {
            ids: &s.ids,
            positions: Some(&s.positions),
            segments: Some(&s.segments),
        }
    }
}

impl<'a> From<&'a TargetInput> for EncoderInput<'a> {
    fn from(t: &'a TargetInput) -> Self {
        EncoderInput {
            ids: &t.ids,
            positions: None,
            segments: None,
        }
    }
}

/// Tape handles for one encoder pass.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    /// `[L×d]` contextual vectors; row 0 is `[CLS]`.
    pub hidden: Var,
    /// Attention probabilities, one `[L×L]` matrix per layer and head.
    pub attention: Vec<Var>,
}

pub fn encode(s: &mut Session<'_>, cfg: &EncoderConfig, input: EncoderInput<'_>) -> Result<EncodedVars> {
    let len = input.ids.len();
    if len == 0 {
        return Err(Error::contract("encoder input is empty"));
    }
    if len > cfg.max_positions {
        return Err(Error::contract(format!(
            "input length {len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Vocab(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
    }

    let table = s.param("emb.token")?;
    let mut x = s.tape.gather_rows(table, &ids)?;
    if let Some(pos) = input.positions {
        let table = s.param("emb.position")?;
        let p = s.tape.gather_rows(table, pos)?;
        x = s.tape.add(x, p)?;
    }
    if let Some(seg) = input.segments {
        let table = s.param("emb.segment")?;
        let seg: Vec<usize> = seg.iter().map(|&g| g as usize).collect();
        let e = s.tape.gather_rows(table, &seg)?;
        x = s.tape.add(x, e)?;
    }
    x = norm(s, x, "emb.ln")?;
    x = s.dropout(x, cfg.dropout_p)?;

    let mut attention = Vec::with_capacity(cfg.num_layers * cfg.num_heads);
    for l in 0..cfg.num_layers {
        let a = self_attention(s, cfg, x, l, &mut attention)?;
        let a = s.dropout(a, cfg.dropout_p)?;
        let r = s.tape.add(x, a)?;
        x = norm(s, r, &format!("layer{l}.attn.ln"))?;

        let h = s.linear(x, &format!("layer{l}.ffn.in.w"), &format!("layer{l}.ffn.in.b"))?;
        let h = s.tape.gelu(h);
        let f = s.linear(h, &format!("layer{l}.ffn.out.w"), &format!("layer{l}.ffn.out.b"))?;
        let f = s.dropout(f, cfg.dropout_p)?;
        let r = s.tape.add(x, f)?;
        x = norm(s, r, &format!("layer{l}.ffn.ln"))?;
    }
    Ok(EncodedVars { hidden: x, attention })
}

fn norm(s: &mut Session<'_>, x: Var, name: &str) -> Result<Var> {
    let g = s.param(&format!("{name}.gamma"))?;
    let b = s.param(&format!("{name}.beta"))?;
    s.tape.layer_norm(x, g, b, LN_EPS)
}

fn self_attention(
    s: &mut Session<'_>,
    cfg: &EncoderConfig,
    x: Var,
    layer: usize,
    trace: &mut Vec<Var>,
) -> Result<Var> {
    let p = |proj: &str, part: &str| format!("layer{layer}.attn.{proj}.{part}");
    let q = s.linear(x, &p("q", "w"), &p("q", "b"))?;
    let k = s.linear(x, &p("k", "w"), &p("k", "b"))?;
    let v = s.linear(x, &p("v", "w"), &p("v", "b"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            let (a, b) = (h * dh, (h + 1) * dh);
            (
                s.tape.slice_cols(q, a, b)?,
                s.tape.slice_cols(k, a, b)?,
                s.tape.slice_cols(v, a, b)?,
            )
        };
        let scores = s.tape.matmul_nt(qh, kh)?;
        let scores = s.tape.scale(scores, scale);
        let probs = s.tape.softmax(scores, 1)?;
        trace.push(probs);
        heads.push(s.tape.matmul(probs, vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        s.tape.concat(&heads, 1)?
    };
    s.linear(ctx, &p("o", "w"), &p("o", "b"))
}

/// Plain-value result of an eval-mode encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `v_S`, shape `[d]`.
    pub cls: Tensor,
    /// `[L×d]`, row 0 is `[CLS]`.
    pub positions: Tensor,
}

pub fn encode_eval(params: &ParamStore, cfg: &EncoderConfig, input: EncoderInput<'_>) -> Result<EncoderOutput> {
    let mut s = Session::eval(params);
    let out = encode(&mut s, cfg, input)?;
    let hidden = s.tape.value(out.hidden).clone();
    let cls = Tensor::vector(hidden.row(0).to_vec());
    Ok(EncoderOutput { cls, positions: hidden })
}

/// Mean of the position vectors over `span`.
pub fn extract_target_vectors(out: &EncoderOutput, span: (usize, usize)) -> Result<Tensor> {
    let (a, b) = span;
    if a >= b || b > out.positions.rows() {
        return Err(Error::contract(format!(
            "target span {a}..{b} empty or outside length {}",
            out.positions.rows()
        )));
    }
    let d = out.positions.cols();
    let mut acc = vec![0.0; d];
    for r in a..b {
        for (x, v) in acc.iter_mut().zip(out.positions.row(r)) {
            *x += v;
        }
    }
    let n = (b - a) as f64;
    Ok(Tensor::vector(acc.into_iter().map(|v| v / n).collect()))
}

/// `v_t` on the tape: pooled target-encoder output as a `[1×d]` row.
pub fn pool_target(s: &mut Session<'_>, cfg: &EncoderConfig, enc: &EncodedVars, span: (usize, usize)) -> Result<Var> {
    match cfg.target_pooling {
        Pooling::Mean => s.tape.mean_rows(enc.hidden, span.0, span.1),
        Pooling::Cls => s.tape.slice_rows(enc.hidden, 0, 1),
    }
}
