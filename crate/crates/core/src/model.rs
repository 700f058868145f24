//! A tokenizer, an encoder, and one head variant bundled as a scorer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{self, forward_variant, ModelInput, Variant};
use crate::input::{build_pair_input, build_sentence_input, build_target_input, TargetInput};
use crate::params::{ParamStore, Session};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, Vocab};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width `h` of the MIP/SPV hidden vectors.
    pub head_dim: usize,
    pub variant: Variant,
    pub max_len: usize,
    pub threshold: f64,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, variant: Variant) -> Self {
        let encoder = EncoderConfig::desk(vocab_size);
        ModelConfig {
            head_dim: encoder.hidden_dim,
            max_len: encoder.max_positions,
            encoder,
            variant,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_dim == 0 {
            return Err(Error::config("head_dim must be positive"));
        }
        if self.max_len < 4 || self.max_len > self.encoder.max_positions {
            return Err(Error::config(format!(
                "max_len {} must lie in 4..={}",
                self.max_len, self.encoder.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from the `Init` stream of `seed`.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        config.validate()?;
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "encoder vocab_size {} differs from tokenizer size {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamStore::new();
        encoder::init_encoder(&config.encoder, &mut params, &mut rng::stream(seed, Domain::Init, 0, 0))?;
        heads::init_heads(
            config.variant,
            config.encoder.hidden_dim,
            config.head_dim,
            &mut params,
            &mut rng::stream(seed, Domain::Init, 1, 0),
        );
        Ok(Model { config, vocab, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn param_count(&self) -> usize {
        self.params.count("")
    }

    pub fn head_param_count(&self) -> usize {
        self.params.count("head.")
    }

    /// Builds the variant's encoder inputs for one instance.
    pub fn prepare(&self, inst: &Instance) -> Result<ModelInput> {
        let v = self.config.variant;
        let sentence = if v == Variant::BaseAll2All {
            build_pair_input(inst, &self.vocab, self.config.max_len)?
        } else {
            build_sentence_input(inst, &self.vocab, self.config.max_len)?
        };
        let target = if v.needs_target() {
            Some(build_target_input(inst, &self.vocab)?)
        } else {
            None
        };
        Ok(ModelInput {
            sentence,
            target,
            label: inst.label,
        })
    }

    pub fn prepare_all(&self, instances: &[Instance]) -> Result<Vec<ModelInput>> {
        instances.iter().map(|i| self.prepare(i)).collect()
    }

    /// Eval-mode `v_t` for one target input, shape `[1×d]`.
    pub fn target_vector(&self, target: &TargetInput) -> Result<Tensor> {
        let mut s = Session::eval(&self.params);
        let v = heads::encode_target(&mut s, &self.config.encoder, target)?;
        Ok(s.tape.value(v).clone())
    }

    /// Eval-mode score for one prepared input, reusing `cache` for `v_t`.
    pub fn score_input(&self, input: &ModelInput, cache: &mut TargetCache) -> Result<f64> {
        let v_t = match (&input.target, self.config.variant.needs_target()) {
            (Some(t), true) => Some(cache.get(self, t)?),
            _ => None,
        };
        let mut s = Session::eval(&self.params);
        let v_t = v_t.map(|t| s.tape.constant(t));
        let y = forward_variant(&mut s, self.config.variant, &self.config.encoder, input, v_t)?;
        Ok(s.tape.value(y).item())
    }

    pub fn score_inputs(&self, inputs: &[ModelInput], cache: &mut TargetCache) -> Result<Vec<f64>> {
        inputs.iter().map(|i| self.score_input(i, cache)).collect()
    }

    /// Scores `ŷ` for every instance, with a fresh target cache.
    pub fn predict(&self, instances: &[Instance]) -> Result<Vec<f64>> {
        let inputs = self.prepare_all(instances)?;
        self.score_inputs(&inputs, &mut TargetCache::new())
    }

    pub fn label(&self, score: f64) -> u8 {
        u8::from(score > self.config.threshold)
    }
}

/// Memoized eval-mode `v_t`, keyed by the target's sub-token ids. Entries are
/// dropped whenever the parameters change.
#[derive(Debug, Clone, Default)]
pub struct TargetCache {
    map: HashMap<Vec<TokenId>, Tensor>,
    version: Option<u64>,
    forward_passes: usize,
}

impl TargetCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, model: &Model, target: &TargetInput) -> Result<Tensor> {
        let version = model.params.version();
        if self.version != Some(version) {
            self.map.clear();
            self.version = Some(version);
        }
        if let Some(v) = self.map.get(target.target_ids()) {
            return Ok(v.clone());
        }
        let v = model.target_vector(target)?;
        self.forward_passes += 1;
        self.map.insert(target.target_ids().to_vec(), v.clone());
        Ok(v)
    }

    /// Target-encoder passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.version = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_corpus, SyntheticSpec};
    use crate::encoder::Pooling;
    use crate::tokenizer::train_bpe;

    fn tiny_model(variant: Variant) -> (Model, Vec<Instance>) {
        let data = make_synthetic_corpus(2, 40, &SyntheticSpec::default());
        let text: Vec<String> = data.iter().map(|i| i.tokens.join(" ")).collect();
        let vocab = train_bpe(&text, 80).unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                num_layers: 1,
                num_heads: 2,
                hidden_dim: 8,
                ffn_dim: 16,
                max_positions: 32,
                vocab_size: vocab.len(),
                dropout_p: 0.2,
                target_pooling: Pooling::Mean,
            },
            head_dim: 8,
            variant,
            max_len: 32,
            threshold: 0.5,
        };
        (Model::init(cfg, vocab, 7).unwrap(), data)
    }

    #[test]
    fn scores_in_open_unit_interval_for_all_variants() {
        for v in Variant::ALL {
            let (m, data) = tiny_model(v);
            for y in m.predict(&data).unwrap() {
                assert!(y > 0.0 && y < 1.0, "{v}: {y}");
            }
        }
    }

    #[test]
    fn head_params_match_declared_shapes() {
        for v in Variant::ALL {
            let (m, _) = tiny_model(v);
            assert_eq!(m.head_param_count(), heads::head_param_count(v, 8, 8));
        }
    }

    #[test]
    fn cache_invalidates_on_update() {
        let (mut m, data) = tiny_model(Variant::Melbert);
        let target = m.prepare(&data[0]).unwrap().target.unwrap();
        let mut cache = TargetCache::new();
        let a = cache.get(&m, &target).unwrap();
        cache.get(&m, &target).unwrap();
        assert_eq!(cache.forward_passes(), 1);
        m.params.get_mut("emb.token").unwrap().data_mut()[0] += 1.0;
        let b = cache.get(&m, &target).unwrap();
        assert_eq!(cache.forward_passes(), 2);
        assert_eq!(b, m.target_vector(&target).unwrap());
        let _ = a;
    }

    #[test]
    fn vocab_size_mismatch_rejected() {
        let (m, _) = tiny_model(Variant::Seq);
        let mut cfg = m.config.clone();
        cfg.encoder.vocab_size += 1;
        assert!(Model::init(cfg, m.vocab.clone(), 1).is_err());
    }
}
