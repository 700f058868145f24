//! Versioned text checkpoints.
//!
//! ```text
//! melbert-ckpt v1
//! num_layers 2            encoder and head configuration, one key per line
//! ...
//! train {…}               training configuration as JSON
//! history […]             per-epoch records as JSON
//! meta {…}                free-form run echo as JSON
//! vocab <bytes>           followed by the raw tokenizer text
//! param <name> <shape>    followed by one line of row-major values
//! adam.m <name> <shape>
//! adam.v <name> <shape>
//! end
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a load
//! reproduces every double bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::heads::Variant;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;
use crate::training::{AdamState, TrainConfig, TrainState};

pub const HEADER: &str = "melbert-ckpt v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
    /// Run echo: config file contents, data hashes, paths.
    pub meta: Value,
}

fn pooling_name(p: Pooling) -> &'static str {
    match p {
        Pooling::Mean => "mean",
        Pooling::Cls => "cls",
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn write_tensor(out: &mut String, tag: &str, name: &str, t: &Tensor) {
    let _ = writeln!(out, "{tag} {name} {}", shape_text(t.shape()));
    let mut first = true;
    for v in t.data() {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn to_text(&self) -> Result<String> {
        let st = &self.state;
        let mc = &st.model.config;
        let e = &mc.encoder;
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "num_layers {}", e.num_layers);
        let _ = writeln!(out, "num_heads {}", e.num_heads);
        let _ = writeln!(out, "hidden_dim {}", e.hidden_dim);
        let _ = writeln!(out, "ffn_dim {}", e.ffn_dim);
        let _ = writeln!(out, "max_positions {}", e.max_positions);
        let _ = writeln!(out, "vocab_size {}", e.vocab_size);
        let _ = writeln!(out, "dropout_p {}", e.dropout_p);
        let _ = writeln!(out, "target_pooling {}", pooling_name(e.target_pooling));
        let _ = writeln!(out, "head_dim {}", mc.head_dim);
        let _ = writeln!(out, "variant {}", mc.variant);
        let _ = writeln!(out, "max_len {}", mc.max_len);
        let _ = writeln!(out, "threshold {}", mc.threshold);
        let _ = writeln!(out, "seed {}", st.seed);
        let _ = writeln!(out, "step {}", st.step);
        let _ = writeln!(out, "adam_t {}", st.adam.t);
        let _ = writeln!(out, "epoch_loss {} {}", st.epoch_loss.0, st.epoch_loss.1);
        let _ = writeln!(out, "train {}", serde_json::to_string(&self.train)?);
        let _ = writeln!(out, "history {}", serde_json::to_string(&st.history)?);
        let _ = writeln!(out, "meta {}", serde_json::to_string(&self.meta)?);
        let vocab = st.model.vocab.to_text();
        let _ = writeln!(out, "vocab {}", vocab.len());
        out.push_str(&vocab);
        for (name, t) in st.model.params.iter() {
            write_tensor(&mut out, "param", name, t);
        }
        for (name, t) in &st.adam.m {
            write_tensor(&mut out, "adam.m", name, t);
        }
        for (name, t) in &st.adam.v {
            write_tensor(&mut out, "adam.v", name, t);
        }
        out.push_str("end\n");
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Checkpoint> {
        let mut r = Reader { text, pos: 0, line: 0, origin };
        if r.line()? != HEADER {
            return Err(r.err(format!("expected header `{HEADER}`")));
        }
        let encoder = EncoderConfig {
            num_layers: r.field("num_layers")?,
            num_heads: r.field("num_heads")?,
            hidden_dim: r.field("hidden_dim")?,
            ffn_dim: r.field("ffn_dim")?,
            max_positions: r.field("max_positions")?,
            vocab_size: r.field("vocab_size")?,
            dropout_p: r.field("dropout_p")?,
            target_pooling: r.field("target_pooling")?,
        };
        let config = ModelConfig {
            encoder,
            head_dim: r.field("head_dim")?,
            variant: r.field::<Variant>("variant")?,
            max_len: r.field("max_len")?,
            threshold: r.field("threshold")?,
        };
        let seed = r.field("seed")?;
        let step = r.field("step")?;
        let adam_t = r.field("adam_t")?;
        let acc = r.value("epoch_loss")?;
        let (sum, count) = acc
            .split_once(' ')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| r.err("expected `epoch_loss <sum> <count>`".into()))?;
        let train: TrainConfig = serde_json::from_str(r.value("train")?).map_err(|e| r.err(e.to_string()))?;
        let history = serde_json::from_str(r.value("history")?).map_err(|e| r.err(e.to_string()))?;
        let meta = serde_json::from_str(r.value("meta")?).map_err(|e| r.err(e.to_string()))?;
        let vocab_len: usize = r.field("vocab")?;
        let vocab_text = r.take(vocab_len)?;
        let vocab = Vocab::from_text(vocab_text, origin)?;

        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        loop {
            let head = r.line()?;
            if head == "end" {
                break;
            }
            let mut parts = head.split(' ');
            let (tag, name, shape) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(n), Some(s), None) => (t, n, s),
                _ => return Err(r.err(format!("malformed block header {head:?}"))),
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| r.err(format!("bad shape {shape:?}")))?;
            let data: Vec<f64> = r
                .line()?
                .split(' ')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| r.err(format!("bad values for `{name}`")))?;
            let t = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
            match tag {
                "param" => params.insert(name, t),
                "adam.m" => {
                    m.insert(name.to_string(), t);
                }
                "adam.v" => {
                    v.insert(name.to_string(), t);
                }
                _ => return Err(r.err(format!("unknown block `{tag}`"))),
            }
        }
        if r.pos != text.len() {
            return Err(r.err("trailing data after `end`".into()));
        }
        config.validate()?;
        if vocab.len() != config.encoder.vocab_size {
            return Err(Error::format(origin, 0, "vocab size disagrees with the encoder config"));
        }
        Ok(Checkpoint {
            state: TrainState {
                model: Model { config, vocab, params },
                adam: AdamState { t: adam_t, m, v },
                seed,
                step,
                history,
                epoch_loss: (sum, count),
            },
            train,
            meta,
        })
    }
}

struct Reader<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: String) -> Error {
        Error::format(self.origin, self.line, msg)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.text[self.pos..];
        let end = rest.find('\n').ok_or_else(|| Error::format(self.origin, self.line + 1, "unexpected end of file"))?;
        self.pos += end + 1;
        self.line += 1;
        Ok(&rest[..end])
    }

    fn take(&mut self, n: usize) -> Result<&'a str> {
        let s = self
            .text
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err("embedded section runs past end of file".into()))?;
        self.pos += n;
        self.line += s.matches('\n').count();
        Ok(s)
    }

    fn value(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(self.err(format!("expected `{key} <value>`, found {line:?}"))),
        }
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.value(key)?;
        v.parse().map_err(|_| self.err(format!("bad value {v:?} for `{key}`")))
    }
}
