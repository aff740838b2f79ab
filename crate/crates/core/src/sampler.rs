//! Learnable-query resampling of stage-3 and stage-4 encoder features into a
//! fixed-length visual prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Var};
use crate::vision::StageFeatures;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub queries_per_stage: usize,
    pub depth: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// One set of resampler blocks for both stages instead of one per stage.
    /// Input projections and query banks stay per stage either way.
    #[serde(default)]
    pub shared_resampler: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SamplerConfig {
    pub fn desk() -> Self {
        SamplerConfig { queries_per_stage: 8, depth: 2, decoder_dim: 64, heads: 4, ffn_mult: 4, shared_resampler: false }
    }

    pub fn full_scale() -> Self {
        SamplerConfig {
            queries_per_stage: 256,
            depth: 2,
            decoder_dim: 2048,
            heads: 16,
            ffn_mult: 4,
            shared_resampler: false,
        }
    }

    pub fn prefix_len(&self) -> usize {
        2 * self.queries_per_stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries_per_stage == 0 || self.depth == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("sampler queries, depth and ffn multiple must be positive".into()));
        }
        if self.heads == 0 || self.decoder_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "sampler width {} not divisible by {} heads",
                self.decoder_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Learned queries `[Q, D]`, one independent bank per stage.
#[derive(Debug, Clone)]
pub struct QueryBank {
    pub stage3: ParamId,
    pub stage4: ParamId,
}

#[derive(Debug, Clone)]
pub struct ResamplerBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl ResamplerBlock {
    fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, name: &str, c: &SamplerConfig) -> Self {
        let d = c.decoder_dim;
        ResamplerBlock {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d),
            cross: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, c.heads),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, c.heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, c.ffn_mult),
        }
    }

    /// `x` `[1, Q, D]`, `feats` `[1, N, D]`. Also returns the cross-attention
    /// weights `[H, 1, Q, N]`.
    fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var, feats: Var) -> Result<(Var, Var)> {
        let q = self.ln_q.forward(tape, p, x)?;
        let kv = self.ln_kv.forward(tape, p, feats)?;
        let (c, weights) = self.cross.forward(tape, p, q, kv, None)?;
        let x = tape.add(x, c)?;
        let h = self.ln_self.forward(tape, p, x)?;
        let (s, _) = self.self_attn.forward(tape, p, h, h, None)?;
        let x = tape.add(x, s)?;
        let h = self.ln_ffn.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, h)?;
        Ok((tape.add(x, f)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct MgSampler {
    pub config: SamplerConfig,
    pub queries: QueryBank,
    pub proj3: Linear,
    pub proj4: Linear,
    blocks3: Vec<ResamplerBlock>,
    blocks4: Vec<ResamplerBlock>,
}

/// Stage selector for [`MgSampler::resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Three,
    Four,
}

impl MgSampler {
    pub fn new<R: Real>(
        config: SamplerConfig,
        stage3_dim: usize,
        stage4_dim: usize,
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (q, d) = (config.queries_per_stage, config.decoder_dim);
        let queries = QueryBank {
            stage3: store.randn("smp.query3", &[q, d], 1.0, rng),
            stage4: store.randn("smp.query4", &[q, d], 1.0, rng),
        };
        let proj3 = Linear::new(store, rng, "smp.proj3", stage3_dim, d, true);
        let proj4 = Linear::new(store, rng, "smp.proj4", stage4_dim, d, true);
        let make = |store: &mut ParamStore<R>, rng: &mut _, tag: &str| -> Vec<ResamplerBlock> {
            (0..config.depth)
                .map(|i| ResamplerBlock::new(store, rng, &format!("smp.{tag}.b{i}"), &config))
                .collect()
        };
        let blocks3 = make(store, rng, if config.shared_resampler { "shared" } else { "s3" });
        let blocks4 = if config.shared_resampler { blocks3.clone() } else { make(store, rng, "s4") };
        Ok(MgSampler { config, queries, proj3, proj4, blocks3, blocks4 })
    }

    /// Resamples one stage to `[Q, D]`; also returns the cross-attention
    /// weights of every block.
    pub fn resample<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        features: &StageFeatures,
        stage: Stage,
    ) -> Result<(Var, Vec<Var>)> {
        let (proj, queries, blocks) = match stage {
            Stage::Three => (&self.proj3, self.queries.stage3, &self.blocks3),
            Stage::Four => (&self.proj4, self.queries.stage4, &self.blocks4),
        };
        let (q, d) = (self.config.queries_per_stage, self.config.decoder_dim);
        let f = proj.forward(tape, p, features.data)?;
        let f = tape.reshape(f, &[1, features.tokens(), d])?;
        let mut x = tape.reshape(p.var(queries), &[1, q, d])?;
        let mut weights = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (nx, w) = b.forward(tape, p, x, f)?;
            x = nx;
            weights.push(w);
        }
        Ok((tape.reshape(x, &[q, d])?, weights))
    }

    /// Visual prefix `[2Q, D]`: stage-3 tokens followed by stage-4 tokens.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        stage3: &StageFeatures,
        stage4: &StageFeatures,
    ) -> Result<Var> {
        let (a, _) = self.resample(tape, p, stage3, Stage::Three)?;
        let (b, _) = self.resample(tape, p, stage4, Stage::Four)?;
        fuse(tape, a, b)
    }
}

/// Concatenates two token sequences of equal width along the token axis.
pub fn fuse<R: Real>(tape: &mut Tape<R>, stage3: Var, stage4: Var) -> Result<Var> {
    let (a, b) = (tape.shape(stage3), tape.shape(stage4));
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(Error::dim(format!("cannot fuse {a:?} with {b:?}")));
    }
    tape.concat(&[stage3, stage4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_sampled, weighted_sum, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SamplerConfig {
        SamplerConfig { queries_per_stage: 3, depth: 2, decoder_dim: 8, heads: 2, ffn_mult: 2, shared_resampler: false }
    }

    fn feats(tape: &mut Tape<f64>, n: usize, c: usize, rng: &mut ChaCha8Rng) -> StageFeatures {
        let data = tape.constant(Tensor::randn(&[n, c], 1.0, rng));
        StageFeatures { grid_h: 1, grid_w: n, channels: c, data }
    }

    #[test]
    fn output_length_is_fixed_and_weights_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = SamplerConfig::desk();
        cfg.decoder_dim = 16;
        let s = MgSampler::new(cfg, 64, 128, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        for n in [1, 4, 16, 37] {
            let f = feats(&mut tape, n, 64, &mut rng);
            let (out, ws) = s.resample(&mut tape, &p, &f, Stage::Three).unwrap();
            assert_eq!(tape.shape(out), &[8, 16]);
            for w in ws {
                for row in tape.data(w).chunks(n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
        let f3 = feats(&mut tape, 16, 64, &mut rng);
        let f4 = feats(&mut tape, 4, 128, &mut rng);
        let prefix = s.forward(&mut tape, &p, &f3, &f4).unwrap();
        assert_eq!(tape.shape(prefix), &[16, 16]);
    }

    #[test]
    fn identical_features_give_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let att = MultiHeadAttention::new(&mut store, &mut rng, "x", 8, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let row = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let rep: Vec<f64> = (0..5).flat_map(|_| row.data().to_vec()).collect();
        let kv = tape.constant(Tensor::new(&[1, 5, 8], rep).unwrap());
        let q = tape.constant(Tensor::randn(&[1, 3, 8], 1.0, &mut rng));
        let (out, _) = att.forward(&mut tape, &p, q, kv, None).unwrap();
        let f = tape.constant(row);
        let v = att.v.forward(&mut tape, &p, f).unwrap();
        let want = att.o.forward(&mut tape, &p, v).unwrap();
        let want = tape.data(want).to_vec();
        for got in tape.data(out).chunks(8) {
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_orders_stage3_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::randn(&[8, 4], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(&[8, 4], 1.0, &mut rng));
        let f = fuse(&mut tape, a, b).unwrap();
        assert_eq!(tape.shape(f), &[16, 4]);
        assert_eq!(&tape.data(f)[..32], tape.data(a));
        let c = tape.constant(Tensor::zeros(&[8, 5]));
        assert!(matches!(fuse(&mut tape, a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_attention_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let s = MgSampler::new(small(), 6, 12, &mut store, &mut rng).unwrap();
        for b in &s.blocks3 {
            for id in [b.cross.q.w, b.cross.k.w] {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let order = [3, 0, 4, 1, 2];
        let perm: Vec<f64> = order.iter().flat_map(|&r| x.data()[r * 6..(r + 1) * 6].to_vec()).collect();
        let run = |tape: &mut Tape<f64>, t: Tensor<f64>| {
            let data = tape.constant(t);
            let f = StageFeatures { grid_h: 1, grid_w: 5, channels: 6, data };
            let (o, _) = s.resample(tape, &p, &f, Stage::Three).unwrap();
            tape.data(o).to_vec()
        };
        let a = run(&mut tape, x);
        let b = run(&mut tape, Tensor::new(&[5, 6], perm).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_reaches_both_banks_and_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for shared in [false, true] {
            let mut store = ParamStore::<f64>::new();
            let s = MgSampler::new(SamplerConfig { shared_resampler: shared, ..small() }, 6, 12, &mut store, &mut rng)
                .unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let f3 = feats(&mut tape, 4, 6, &mut rng);
            let f4 = feats(&mut tape, 2, 12, &mut rng);
            let out = s.forward(&mut tape, &p, &f3, &f4).unwrap();
            let loss = weighted_sum(&mut tape, out, 9).unwrap();
            tape.backward(loss).unwrap();
            store.pull_grads(&tape, &p);
            for id in [s.queries.stage3, s.queries.stage4, s.proj3.w, s.proj4.w] {
                let g = store.get(id).grad().expect("gradient present");
                assert!(g.iter().any(|v| v.abs() > 0.0), "{}", store.name(id));
            }
            let expected_blocks = if shared { 1 } else { 2 };
            let block_sets = store.iter().filter(|(n, _)| n.ends_with("b0.ln_q.gamma")).count();
            assert_eq!(block_sets, expected_blocks);
        }
    }

    #[test]
    fn sampler_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let s = MgSampler::new(small(), 6, 12, &mut store, &mut rng).unwrap();
        let x3 = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let x4 = Tensor::<f64>::randn(&[2, 12], 1.0, &mut rng);
        let err = grad_check_sampled(
            |t, v| {
                let p = Bound::from_vars(v.to_vec());
                let a = t.constant(x3.clone());
                let b = t.constant(x4.clone());
                let f3 = StageFeatures { grid_h: 2, grid_w: 2, channels: 6, data: a };
                let f4 = StageFeatures { grid_h: 1, grid_w: 2, channels: 12, data: b };
                let out = s.forward(t, &p, &f3, &f4)?;
                weighted_sum(t, out, 4)
            },
            store.tensors(),
            1e-5,
            Some(8),
            7,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
