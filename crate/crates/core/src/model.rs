//! The composed vision-language model: encoder, sampler and decoder sharing
//! one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Vocab;
use crate::decoder::{Decoder, DecoderConfig, SequenceBatch};
use crate::error::{Error, Result};
use crate::sampler::{MgSampler, SamplerConfig};
use crate::tensor::{Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::vision::{EncoderConfig, VisionEncoder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub decoder: DecoderConfig,
    pub bins: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self::desk_with_bins(crate::codec::DEFAULT_BINS)
    }

    pub fn desk_with_bins(bins: u32) -> Self {
        let vocab = Vocab::new(bins).expect("bins >= 2");
        ModelConfig {
            encoder: EncoderConfig::desk(),
            sampler: SamplerConfig::desk(),
            decoder: DecoderConfig::desk(vocab.size()),
            bins,
        }
    }

    /// Documentation-only preset; far too large to instantiate here.
    pub fn full_scale() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full_scale(),
            sampler: SamplerConfig::full_scale(),
            decoder: DecoderConfig::full_scale(),
            bins: crate::codec::DEFAULT_BINS,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.bins)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sampler.validate()?;
        self.decoder.validate()?;
        if self.sampler.decoder_dim != self.decoder.hidden {
            return Err(Error::Config(format!(
                "sampler width {} differs from decoder width {}",
                self.sampler.decoder_dim, self.decoder.hidden
            )));
        }
        let v = self.vocab()?.size();
        if v != self.decoder.vocab_size {
            return Err(Error::Config(format!(
                "{} coordinate bins imply vocabulary {v}, decoder has {}",
                self.bins, self.decoder.vocab_size
            )));
        }
        if self.sampler.prefix_len() >= self.decoder.max_seq {
            return Err(Error::Config("visual prefix fills the whole sequence".into()));
        }
        Ok(())
    }

    /// Canonical JSON: fixed field order, no whitespace.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// One training item. `image` is `[S, S, 3]` in `[0, 1]`; `None` for pure
/// text. Prompt and response are token ids without `<bos>`/`<eos>`.
#[derive(Debug, Clone)]
pub struct Example<R> {
    pub image: Option<Tensor<R>>,
    pub prompt_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
}

/// Loss over a batch together with the logits and targets it was computed
/// from, for accuracy bookkeeping.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: Var,
    pub logits: Var,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model<R: Real> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<R>,
    pub encoder: VisionEncoder,
    pub sampler: MgSampler,
    pub decoder: Decoder,
}

impl<R: Real> Model<R> {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = VisionEncoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let dims = config.encoder.stage_dims;
        let sampler = MgSampler::new(config.sampler.clone(), dims[2], dims[3], &mut store, &mut rng)?;
        let decoder = Decoder::new(config.decoder.clone(), &mut store, &mut rng)?;
        Ok(Model { config, vocab, store, encoder, sampler, decoder })
    }

    /// Visual prefix `[2Q, D]` for one image.
    pub fn prefix(&self, tape: &mut Tape<R>, p: &Bound, image: &Tensor<R>) -> Result<Var> {
        let (s3, s4) = self.encoder.encode(tape, p, image)?;
        self.sampler.forward(tape, p, &s3, &s4)
    }

    pub fn sequence(&self, example: &Example<R>) -> SequenceBatch {
        SequenceBatch::from_parts(self.vocab.bos(), &example.prompt_ids, &example.response_ids, self.vocab.eos())
    }

    /// Total length of an example on the decoder, prefix included.
    pub fn sequence_len(&self, example: &Example<R>) -> usize {
        let plen = if example.image.is_some() { self.config.sampler.prefix_len() } else { 0 };
        plen + example.prompt_ids.len() + example.response_ids.len() + 1
    }

    /// Token-averaged next-token loss over every response position of the
    /// batch. Logits are only produced at scored positions.
    pub fn batch_loss(&self, tape: &mut Tape<R>, p: &Bound, examples: &[Example<R>]) -> Result<BatchOutput> {
        if examples.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        for ex in examples {
            let prefix = match &ex.image {
                Some(img) => Some(self.prefix(tape, p, img)?),
                None => None,
            };
            let (inputs, tgt, mask) = self.sequence(ex).shifted();
            let (h, t) = self.decoder.loss_rows(tape, p, prefix, &inputs, &tgt, &mask)?;
            rows.push(h);
            targets.extend(t);
        }
        let h = if rows.len() == 1 { rows[0] } else { tape.concat(&rows)? };
        let logits = self.decoder.lm_head.forward(tape, p, h)?;
        let all = vec![true; targets.len()];
        let loss = tape.cross_entropy(logits, &targets, &all)?;
        Ok(BatchOutput { loss, logits, targets })
    }

    /// `(correct, total)` argmax predictions for a batch output.
    pub fn token_hits(&self, tape: &Tape<R>, out: &BatchOutput) -> (usize, usize) {
        let v = self.config.decoder.vocab_size;
        let correct = tape
            .data(out.logits)
            .chunks(v)
            .zip(&out.targets)
            .filter(|(row, &t)| crate::decoder::argmax(row) == t)
            .count();
        (correct, out.targets.len())
    }

    /// Greedy response ids for a prompt (without `<bos>`), stopping at `<eos>`.
    pub fn generate(&self, image: Option<&Tensor<R>>, prompt_ids: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let prefix = match image {
            Some(img) => Some(self.prefix(&mut tape, &p, img)?),
            None => None,
        };
        let mut ids = Vec::with_capacity(prompt_ids.len() + 1);
        ids.push(self.vocab.bos());
        ids.extend_from_slice(prompt_ids);
        self.decoder.generate(&mut tape, &p, prefix, &ids, max_new, self.vocab.eos())
    }

    /// Teacher-forced logits rows for one example, as plain data.
    pub fn example_logits(&self, example: &Example<R>) -> Result<Vec<R>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let out = self.batch_loss(&mut tape, &p, std::slice::from_ref(example))?;
        Ok(tape.data(out.logits).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_text, Vocab};
    use crate::tensor::{grad_check_sampled, weighted_sum};

    pub(crate) fn tiny_config() -> ModelConfig {
        let bins = 4;
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 16,
                patch_size: 2,
                window_size: 2,
                stage_depths: [2, 1, 1, 1],
                stage_dims: [4, 8, 16, 32],
                num_heads: [1, 2, 2, 4],
                ffn_mult: 2,
            },
            sampler: SamplerConfig { queries_per_stage: 2, depth: 1, decoder_dim: 8, heads: 2, ffn_mult: 2, shared_resampler: false },
            decoder: DecoderConfig {
                layers: 1,
                heads: 2,
                hidden: 8,
                ffn_mult: 2,
                max_seq: 24,
                vocab_size: Vocab::new(bins).unwrap().size(),
            },
            bins,
        }
    }

    #[test]
    fn desk_config_is_valid_and_round_trips() {
        let c = ModelConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.decoder.vocab_size, 2261);
        assert_eq!(c.sampler.prefix_len(), 16);
        let back: ModelConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let mut bad = c.clone();
        bad.bins = 10;
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::full_scale().sampler.prefix_len(), 512);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::new(tiny_config(), 5).unwrap();
        let b = Model::<f32>::new(tiny_config(), 5).unwrap();
        let c = Model::<f32>::new(tiny_config(), 6).unwrap();
        let w = a.encoder.patch_proj.w.index();
        assert_eq!(a.store.tensors()[w].data(), b.store.tensors()[w].data());
        assert_ne!(a.store.tensors()[w].data(), c.store.tensors()[w].data());
    }

    #[test]
    fn batch_loss_mixes_image_and_text_examples() {
        let m = Model::<f64>::new(tiny_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::randn(&[16, 16, 3], 0.2, &mut rng);
        let exs = vec![
            Example { image: Some(img), prompt_ids: encode_text("ab"), response_ids: encode_text("cd") },
            Example { image: None, prompt_ids: vec![], response_ids: encode_text("xyz") },
        ];
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape);
        let out = m.batch_loss(&mut tape, &p, &exs).unwrap();
        // 2 + 1 targets for the first, 3 + 1 for the second
        assert_eq!(out.targets.len(), 7);
        let l = tape.value(out.loss).item();
        assert!(l.is_finite() && l > 0.0);
        let (hits, total) = m.token_hits(&tape, &out);
        assert!(hits <= total && total == 7);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let m = Model::<f64>::new(tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = Example {
            image: Some(Tensor::<f64>::randn(&[16, 16, 3], 0.3, &mut rng)),
            prompt_ids: encode_text("q"),
            response_ids: vec![m.vocab.control(crate::codec::Control::Ref), 97, 262],
        };
        let err = grad_check_sampled(
            |t, v| {
                let p = Bound::from_vars(v.to_vec());
                let out = m.batch_loss(t, &p, std::slice::from_ref(&ex))?;
                let h = m.prefix(t, &p, ex.image.as_ref().unwrap())?;
                let w = weighted_sum(t, h, 8)?;
                t.add(out.loss, w)
            },
            m.store.tensors(),
            1e-5,
            Some(4),
            17,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
