//! Causal transformer decoder over `[visual prefix ‖ tokens]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attend, FeedForward, LayerNorm, Linear, MultiHeadAttention, MASKED};
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
}

impl DecoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        DecoderConfig { layers: 2, heads: 4, hidden: 64, ffn_mult: 4, max_seq: 512, vocab_size }
    }

    pub fn full_scale() -> Self {
        DecoderConfig { layers: 24, heads: 16, hidden: 2048, ffn_mult: 4, max_seq: 4096, vocab_size: 160_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ffn_mult == 0 || self.max_seq == 0 || self.vocab_size == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        Ok(())
    }
}

/// One training sequence: `ids` is `[bos][prompt][response][eos]` and
/// `loss_mask[t]` marks the tokens that are prediction targets (response and
/// eos). Token `t` is predicted from position `t - 1`, so `loss_mask[0]`
/// must be false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl SequenceBatch {
    pub fn new(ids: Vec<u32>, loss_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != loss_mask.len() {
            return Err(Error::dim(format!("{} ids with {} mask entries", ids.len(), loss_mask.len())));
        }
        if loss_mask.first() == Some(&true) {
            return Err(Error::Contract("the first token has no preceding position to predict it".into()));
        }
        Ok(SequenceBatch { ids, loss_mask })
    }

    /// `[bos] prompt response [eos]`, with targets on response and eos.
    pub fn from_parts(bos: u32, prompt: &[u32], response: &[u32], eos: u32) -> Self {
        let mut ids = Vec::with_capacity(prompt.len() + response.len() + 2);
        ids.push(bos);
        ids.extend_from_slice(prompt);
        ids.extend_from_slice(response);
        ids.push(eos);
        let mut loss_mask = vec![false; 1 + prompt.len()];
        loss_mask.resize(ids.len(), true);
        SequenceBatch { ids, loss_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(input ids, targets, mask)` for next-token prediction.
    pub fn shifted(&self) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
        if self.ids.is_empty() {
            return (Vec::new(), Vec::new(), Vec::new());
        }
        let n = self.ids.len() - 1;
        (self.ids[..n].to_vec(), self.ids[1..].to_vec(), self.loss_mask[1..].to_vec())
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Per-layer keys and values of every position processed so far.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Var>,
    values: Vec<Var>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    layers: Vec<DecoderLayer>,
    pub ln_f: LayerNorm,
    pub lm_head: Linear,
}

/// Additive causal mask `[n, n]`.
pub fn causal_mask<R: Real>(n: usize) -> Tensor<R> {
    let mut data = vec![R::zero(); n * n];
    for i in 0..n {
        for v in &mut data[i * n + i + 1..(i + 1) * n] {
            *v = R::of(MASKED);
        }
    }
    Tensor::new(&[n, n], data).expect("square mask")
}

impl Decoder {
    pub fn new<R: Real>(config: DecoderConfig, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let tok_emb = store.randn("dec.tok_emb", &[config.vocab_size, d], 1.0, rng);
        let pos_emb = store.randn("dec.pos_emb", &[config.max_seq, d], 0.02, rng);
        let layers = (0..config.layers)
            .map(|i| {
                let name = format!("dec.l{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                    attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, config.heads),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, config.ffn_mult),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "dec.ln_f", d);
        let lm_head = Linear::new(store, rng, "dec.lm_head", d, config.vocab_size, true);
        Ok(Decoder { config, tok_emb, pos_emb, layers, ln_f, lm_head })
    }

    fn prefix_len<R: Real>(&self, tape: &Tape<R>, prefix: Option<Var>) -> Result<usize> {
        match prefix {
            None => Ok(0),
            Some(v) => {
                let s = tape.shape(v);
                if s.len() != 2 || s[1] != self.config.hidden {
                    return Err(Error::dim(format!("prefix must be [P, {}], got {s:?}", self.config.hidden)));
                }
                Ok(s[0])
            }
        }
    }

    /// Input rows for `ids` placed at absolute positions `start..`.
    fn embed<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, ids: &[u32], start: usize) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Vocabulary { id: bad, size: self.config.vocab_size });
        }
        tape.embedding(p.var(self.tok_emb), &idx)
            .and_then(|e| {
                let rows: Vec<usize> = (start..start + ids.len()).collect();
                let pos = tape.gather_rows(p.var(self.pos_emb), &rows)?;
                tape.add(e, pos)
            })
    }

    /// Runs the stack over `x` `[n, D]` at positions `start..start + n`,
    /// attending to the cache plus `x` itself. Extends the cache.
    fn run_layers<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, mut x: Var, cache: &mut KvCache) -> Result<Var> {
        let n = tape.shape(x)[0];
        let d = self.config.hidden;
        let past = cache.len;
        let total = past + n;
        let mask = if n > 1 {
            let mut m = vec![R::zero(); n * total];
            for i in 0..n {
                for v in &mut m[i * total + past + i + 1..(i + 1) * total] {
                    *v = R::of(MASKED);
                }
            }
            Some(tape.constant(Tensor::new(&[n, total], m)?))
        } else {
            None
        };
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.ln1.forward(tape, p, x)?;
            let q = layer.attn.q.forward(tape, p, h)?;
            let k = layer.attn.k.forward(tape, p, h)?;
            let v = layer.attn.v.forward(tape, p, h)?;
            let (k, v) = if past > 0 {
                (tape.concat(&[cache.keys[li], k])?, tape.concat(&[cache.values[li], v])?)
            } else {
                (k, v)
            };
            if li < cache.keys.len() {
                cache.keys[li] = k;
                cache.values[li] = v;
            } else {
                cache.keys.push(k);
                cache.values.push(v);
            }
            let q3 = tape.reshape(q, &[1, n, d])?;
            let k3 = tape.reshape(k, &[1, total, d])?;
            let v3 = tape.reshape(v, &[1, total, d])?;
            let (a, _) = attend(tape, q3, k3, v3, self.config.heads, mask)?;
            let a = tape.reshape(a, &[n, d])?;
            let a = layer.attn.o.forward(tape, p, a)?;
            x = tape.add(x, a)?;
            let h = layer.ln2.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, h)?;
            x = tape.add(x, f)?;
        }
        cache.len = total;
        self.ln_f.forward(tape, p, x)
    }

    /// Final hidden states `[P + T, D]` over prefix and tokens.
    pub fn hidden<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, prefix: Option<Var>, ids: &[u32]) -> Result<Var> {
        let plen = self.prefix_len(tape, prefix)?;
        let len = plen + ids.len();
        if len > self.config.max_seq {
            return Err(Error::SequenceLength { len, max: self.config.max_seq });
        }
        if len == 0 {
            return Err(Error::dim("empty decoder input"));
        }
        let x = match prefix {
            Some(pre) if plen > 0 => {
                let rows: Vec<usize> = (0..plen).collect();
                let pos = tape.gather_rows(p.var(self.pos_emb), &rows)?;
                let pre = tape.add(pre, pos)?;
                if ids.is_empty() {
                    pre
                } else {
                    let tok = self.embed(tape, p, ids, plen)?;
                    tape.concat(&[pre, tok])?
                }
            }
            _ => self.embed(tape, p, ids, 0)?,
        };
        self.run_layers(tape, p, x, &mut KvCache::default())
    }

    /// Logits `[T, V]` for every token position.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, prefix: Option<Var>, ids: &[u32]) -> Result<Var> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.logits_at(tape, p, prefix, ids, &positions)
    }

    /// Logits `[positions.len(), V]` for selected token positions only.
    pub fn logits_at<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        prefix: Option<Var>,
        ids: &[u32],
        positions: &[usize],
    ) -> Result<Var> {
        let plen = self.prefix_len(tape, prefix)?;
        let h = self.hidden(tape, p, prefix, ids)?;
        let rows: Vec<usize> = positions.iter().map(|&t| plen + t).collect();
        let h = tape.gather_rows(h, &rows)?;
        self.lm_head.forward(tape, p, h)
    }

    /// Hidden rows at the loss positions of one sequence, with targets.
    pub fn loss_rows<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        prefix: Option<Var>,
        inputs: &[u32],
        targets: &[u32],
        mask: &[bool],
    ) -> Result<(Var, Vec<usize>)> {
        if inputs.len() != targets.len() || inputs.len() != mask.len() {
            return Err(Error::dim("inputs, targets and mask must have equal length"));
        }
        let positions: Vec<usize> = (0..inputs.len()).filter(|&t| mask[t]).collect();
        if positions.is_empty() {
            return Err(Error::DegenerateBatch("no response positions to score".into()));
        }
        let plen = self.prefix_len(tape, prefix)?;
        let h = self.hidden(tape, p, prefix, inputs)?;
        let rows: Vec<usize> = positions.iter().map(|&t| plen + t).collect();
        let h = tape.gather_rows(h, &rows)?;
        Ok((h, positions.iter().map(|&t| targets[t] as usize).collect()))
    }

    /// Mean next-token cross-entropy over masked-in positions.
    pub fn loss_with_targets<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        prefix: Option<Var>,
        inputs: &[u32],
        targets: &[u32],
        mask: &[bool],
    ) -> Result<Var> {
        let (h, tgt) = self.loss_rows(tape, p, prefix, inputs, targets, mask)?;
        let logits = self.lm_head.forward(tape, p, h)?;
        let all = vec![true; tgt.len()];
        tape.cross_entropy(logits, &tgt, &all)
    }

    pub fn loss<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, prefix: Option<Var>, batch: &SequenceBatch) -> Result<Var> {
        let (inputs, targets, mask) = batch.shifted();
        self.loss_with_targets(tape, p, prefix, &inputs, &targets, &mask)
    }

    /// Greedy decoding. Stops at `stop_id` (not included in the output),
    /// after `max_new` tokens, or when the sequence fills `max_seq`.
    pub fn generate<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        prefix: Option<Var>,
        prompt_ids: &[u32],
        max_new: usize,
        stop_id: u32,
    ) -> Result<Vec<u32>> {
        let plen = self.prefix_len(tape, prefix)?;
        if prompt_ids.is_empty() {
            return Err(Error::Generation("generation needs at least one prompt token".into()));
        }
        let len = plen + prompt_ids.len();
        if len > self.config.max_seq {
            return Err(Error::SequenceLength { len, max: self.config.max_seq });
        }
        let mut cache = KvCache::default();
        let tok = self.embed(tape, p, prompt_ids, plen)?;
        let x = match prefix {
            Some(pre) if plen > 0 => {
                let rows: Vec<usize> = (0..plen).collect();
                let pos = tape.gather_rows(p.var(self.pos_emb), &rows)?;
                let pre = tape.add(pre, pos)?;
                tape.concat(&[pre, tok])?
            }
            _ => tok,
        };
        let mut h = self.run_layers(tape, p, x, &mut cache)?;
        let mut out = Vec::new();
        while out.len() < max_new {
            let n = tape.shape(h)[0];
            let last = tape.slice_rows(h, n - 1, n)?;
            let logits = self.lm_head.forward(tape, p, last)?;
            let next = argmax(tape.data(logits)) as u32;
            if next == stop_id {
                break;
            }
            out.push(next);
            if cache.len >= self.config.max_seq {
                break;
            }
            let x = self.embed(tape, p, &[next], cache.len)?;
            h = self.run_layers(tape, p, x, &mut cache)?;
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax<R: Real>(xs: &[R]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_sampled, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> DecoderConfig {
        DecoderConfig { layers: 2, heads: 2, hidden: 8, ffn_mult: 2, max_seq: 32, vocab_size: vocab }
    }

    fn build(seed: u64) -> (ParamStore<f64>, Decoder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(tiny(11), &mut store, &mut rng).unwrap();
        (store, dec, rng)
    }

    #[test]
    fn logits_shape_for_any_prefix() {
        let (store, dec, mut rng) = build(1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        for plen in [0, 1, 5] {
            let pre = (plen > 0).then(|| tape.constant(Tensor::randn(&[plen, 8], 1.0, &mut rng)));
            let l = dec.forward(&mut tape, &p, pre, &[1, 2, 3]).unwrap();
            assert_eq!(tape.shape(l), &[3, 11]);
        }
        let long: Vec<u32> = vec![1; 33];
        assert!(matches!(dec.forward(&mut tape, &p, None, &long), Err(Error::SequenceLength { .. })));
        assert!(matches!(dec.forward(&mut tape, &p, None, &[11]), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn earlier_logits_are_bitwise_unchanged_by_later_tokens() {
        let (store, dec, mut rng) = build(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let pre = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let a = dec.forward(&mut tape, &p, Some(pre), &[1, 2, 3, 4, 5]).unwrap();
        let b = dec.forward(&mut tape, &p, Some(pre), &[1, 2, 3, 9, 0]).unwrap();
        let (da, db) = (tape.data(a), tape.data(b));
        assert_eq!(&da[..3 * 11], &db[..3 * 11]);
        assert_ne!(&da[3 * 11..], &db[3 * 11..]);
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask::<f64>(3);
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[1], MASKED);
        assert_eq!(m.data()[3], 0.0);
        assert_eq!(m.data()[8], 0.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (mut store, dec, _) = build(3);
        for v in store.get_mut(dec.lm_head.w).data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let batch = SequenceBatch::from_parts(0, &[], &[], 4);
        let l = dec.loss(&mut tape, &p, None, &batch).unwrap();
        assert!((tape.value(l).item() - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_targets_do_not_matter() {
        let (store, dec, _) = build(4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let inputs = [0, 3, 4, 5];
        let mask = [false, false, true, true];
        let a = dec.loss_with_targets(&mut tape, &p, None, &inputs, &[3, 4, 5, 6], &mask).unwrap();
        let b = dec.loss_with_targets(&mut tape, &p, None, &inputs, &[9, 1, 5, 6], &mask).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
        assert!(matches!(
            dec.loss_with_targets(&mut tape, &p, None, &inputs, &[1, 2, 3, 4], &[false; 4]),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn sequence_layout_masks_prompt() {
        let b = SequenceBatch::from_parts(7, &[1, 2], &[3], 8);
        assert_eq!(b.ids, vec![7, 1, 2, 3, 8]);
        assert_eq!(b.loss_mask, vec![false, false, false, true, true]);
        let (i, t, m) = b.shifted();
        assert_eq!(i, vec![7, 1, 2, 3]);
        assert_eq!(t, vec![1, 2, 3, 8]);
        assert_eq!(m, vec![false, false, true, true]);
        assert!(SequenceBatch::new(vec![1], vec![true]).is_err());
    }

    #[test]
    fn stop_favoring_model_generates_nothing() {
        let (mut store, dec, _) = build(5);
        for v in store.get_mut(dec.lm_head.w).data_mut() {
            *v = 0.0;
        }
        store.get_mut(dec.lm_head.b.unwrap()).data_mut()[4] = 10.0;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        assert!(dec.generate(&mut tape, &p, None, &[0], 10, 4).unwrap().is_empty());
    }

    #[test]
    fn cached_generation_equals_step_by_step_argmax() {
        let (store, dec, mut rng) = build(6);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let pre = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let got = dec.generate(&mut tape, &p, Some(pre), &[0, 1], 12, 99).unwrap();
        assert_eq!(got.len(), 12);
        let mut ids = vec![0u32, 1];
        for _ in 0..12 {
            let l = dec.forward(&mut tape, &p, Some(pre), &ids).unwrap();
            let d = tape.data(l);
            ids.push(argmax(&d[(ids.len() - 1) * 11..]) as u32);
        }
        assert_eq!(&ids[2..], got.as_slice());
        let again = dec.generate(&mut tape, &p, Some(pre), &[0, 1], 12, 99).unwrap();
        assert_eq!(got, again);
    }

    #[test]
    fn generation_stops_at_max_seq() {
        let (store, dec, _) = build(7);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let got = dec.generate(&mut tape, &p, None, &[0; 30], 100, 99).unwrap();
        assert!(got.len() <= 3);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let (store, dec, mut rng) = build(8);
        let pre = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let mut inputs = vec![pre];
        inputs.extend(store.tensors().iter().cloned());
        let batch = SequenceBatch::from_parts(0, &[1, 2], &[3, 5], 4);
        let err = grad_check_sampled(
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let l = dec.loss(t, &p, Some(v[0]), &batch)?;
                let h = dec.hidden(t, &p, Some(v[0]), &[1, 2])?;
                let w = weighted_sum(t, h, 2)?;
                t.add(l, w)
            },
            &inputs,
            1e-5,
            Some(8),
            3,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
