//! Hierarchical shifted-window image encoder.
//!
//! Four stages of pre-norm transformer blocks over a square token grid, with
//! 2×2 patch merging between stages. Attention inside a stage is restricted
//! to non-overlapping windows; odd-indexed blocks shift the window grid by
//! half a window using a cyclic row permutation plus a region mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, MASKED};
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    pub num_heads: [usize; 4],
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 64 px input; stage grids 16, 8, 4, 2.
    pub fn desk() -> Self {
        EncoderConfig {
            input_size: 64,
            patch_size: 4,
            window_size: 4,
            stage_depths: [1, 1, 2, 1],
            stage_dims: [16, 32, 64, 128],
            num_heads: [1, 2, 4, 8],
            ffn_mult: 4,
        }
    }

    /// Swin-Large widths and depths at 1600 px; stage grids 400, 200, 100, 50.
    pub fn full_scale() -> Self {
        EncoderConfig {
            input_size: 1600,
            patch_size: 4,
            window_size: 10,
            stage_depths: [2, 2, 18, 2],
            stage_dims: [192, 384, 768, 1536],
            num_heads: [6, 12, 24, 48],
            ffn_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.window_size == 0 || self.ffn_mult == 0 {
            return bad("patch, window and ffn sizes must be positive".into());
        }
        if self.input_size == 0 || self.input_size % (self.patch_size * 8) != 0 {
            return bad(format!(
                "input size {} must be a positive multiple of {}",
                self.input_size,
                self.patch_size * 8
            ));
        }
        for s in 0..4 {
            let (d, h) = (self.stage_dims[s], self.num_heads[s]);
            if d == 0 || h == 0 || d % h != 0 {
                return bad(format!("stage {} width {d} not divisible by {h} heads", s + 1));
            }
            if s > 0 && d != 2 * self.stage_dims[s - 1] {
                return bad(format!("stage {} width {d} must double the previous width", s + 1));
            }
        }
        self.check_size(self.input_size).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that an image side is usable: a multiple of `patch_size * 8`
    /// no larger than `input_size`, with every stage grid tiled by windows.
    pub fn check_size(&self, size: usize) -> Result<()> {
        if size == 0 || size > self.input_size || size % (self.patch_size * 8) != 0 {
            return Err(Error::dim(format!(
                "image side {size} must be a multiple of {} and at most {}",
                self.patch_size * 8,
                self.input_size
            )));
        }
        for s in 1..=4 {
            let g = self.grid_side(size, s);
            let w = self.window_for(g);
            if g % w != 0 {
                return Err(Error::dim(format!("stage {s} grid {g} not divisible by window {w}")));
            }
        }
        Ok(())
    }

    /// Grid side of stage `stage` (1-based) for an image of side `size`.
    pub fn grid_side(&self, size: usize, stage: usize) -> usize {
        size / (self.patch_size << (stage - 1))
    }

    /// Window side used on a grid of side `grid`: grids smaller than the
    /// window are covered by a single window.
    pub fn window_for(&self, grid: usize) -> usize {
        self.window_size.min(grid)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * IMAGE_CHANNELS
    }
}

/// Token grid produced by one encoder stage; `data` is `[grid_h * grid_w, channels]`.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub data: Var,
}

impl StageFeatures {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Gather order that lists tokens window by window after a cyclic shift of
/// `(-shift, -shift)`. Entry `k` is the original row-major index placed at
/// position `k`.
pub fn window_order(grid: usize, window: usize, shift: usize) -> Vec<usize> {
    let per_side = grid / window;
    let mut order = Vec::with_capacity(grid * grid);
    for wi in 0..per_side {
        for wj in 0..per_side {
            for a in 0..window {
                for b in 0..window {
                    let r = (wi * window + a + shift) % grid;
                    let c = (wj * window + b + shift) % grid;
                    order.push(r * grid + c);
                }
            }
        }
    }
    order
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Additive mask `[num_windows, T, T]` separating tokens that share a
/// shifted window but came from different regions of the unshifted grid.
pub fn shift_mask<R: Real>(grid: usize, window: usize, shift: usize) -> Tensor<R> {
    let region = |c: usize| {
        if c < grid - window {
            0
        } else if c < grid - shift {
            1
        } else {
            2
        }
    };
    let per_side = grid / window;
    let t = window * window;
    let mut data = Vec::with_capacity(per_side * per_side * t * t);
    for wi in 0..per_side {
        for wj in 0..per_side {
            let labels: Vec<usize> = (0..t)
                .map(|k| 3 * region(wi * window + k / window) + region(wj * window + k % window))
                .collect();
            for &p in &labels {
                for &q in &labels {
                    data.push(if p == q { R::zero() } else { R::of(MASKED) });
                }
            }
        }
    }
    Tensor::new(&[per_side * per_side, t, t], data).expect("mask shape")
}

/// Self-attention within windows of side `window` on a `grid × grid` token
/// map `x` of shape `[grid², C]`. Returns the output in original token order
/// and the attention weights `[H, num_windows, T, T]`.
pub fn window_attention<R: Real>(
    tape: &mut Tape<R>,
    p: &Bound,
    attn: &MultiHeadAttention,
    x: Var,
    grid: usize,
    window: usize,
    shift: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != grid * grid {
        return Err(Error::dim(format!("window attention expects [{}, C], got {shape:?}", grid * grid)));
    }
    if window == 0 || grid % window != 0 {
        return Err(Error::dim(format!("grid {grid} not divisible by window {window}")));
    }
    if shift >= window {
        return Err(Error::dim(format!("shift {shift} must be smaller than window {window}")));
    }
    let c = shape[1];
    let order = window_order(grid, window, shift);
    let nw = (grid / window) * (grid / window);
    let xw = tape.gather_rows(x, &order)?;
    let xw = tape.reshape(xw, &[nw, window * window, c])?;
    let mask = (shift > 0).then(|| tape.constant(shift_mask(grid, window, shift)));
    let (out, probs) = attn.forward(tape, p, xw, xw, mask)?;
    let out = tape.reshape(out, &[grid * grid, c])?;
    let out = tape.gather_rows(out, &inverse_permutation(&order))?;
    Ok((out, probs))
}

/// Splits a `[H, W, 3]` image into flattened patches `[(H/p)·(W/p), p·p·3]`,
/// standardizing pixels with `(x - 0.5) / 0.5`.
pub fn patchify<R: Real>(image: &Tensor<R>, patch: usize) -> Result<Tensor<R>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != IMAGE_CHANNELS || s[0] != s[1] || s[0] % patch != 0 {
        return Err(Error::dim(format!("expected square [H, W, 3] image tiled by {patch}, got {s:?}")));
    }
    let side = s[0];
    let g = side / patch;
    let half = R::of(0.5);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gi in 0..g {
        for gj in 0..g {
            for py in 0..patch {
                let row = (gi * patch + py) * side + gj * patch;
                for v in &src[row * IMAGE_CHANNELS..(row + patch) * IMAGE_CHANNELS] {
                    out.push((*v - half) / half);
                }
            }
        }
    }
    Tensor::new(&[g * g, patch * patch * IMAGE_CHANNELS], out)
}

#[derive(Debug, Clone)]
struct SwinBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    shifted: bool,
}

impl SwinBlock {
    fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var, grid: usize, window: usize) -> Result<Var> {
        // A single window covering the grid has nothing to shift across.
        let shift = if self.shifted && window < grid { window / 2 } else { 0 };
        let h = self.ln1.forward(tape, p, x)?;
        let (a, _) = window_attention(tape, p, &self.attn, h, grid, window, shift)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, h)?;
        tape.add(x, f)
    }
}

/// 2×2 neighbourhood concatenation followed by `LayerNorm(4C)` and a
/// bias-free projection to `2C`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl PatchMerge {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: StageFeatures) -> Result<StageFeatures> {
        if x.grid_h % 2 != 0 || x.grid_w % 2 != 0 {
            return Err(Error::dim(format!("cannot merge odd grid {}x{}", x.grid_h, x.grid_w)));
        }
        let (h2, w2) = (x.grid_h / 2, x.grid_w / 2);
        let mut rows = Vec::with_capacity(x.tokens());
        for i in 0..h2 {
            for j in 0..w2 {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    rows.push((2 * i + di) * x.grid_w + 2 * j + dj);
                }
            }
        }
        let g = tape.gather_rows(x.data, &rows)?;
        let g = tape.reshape(g, &[h2 * w2, 4 * x.channels])?;
        let g = self.norm.forward(tape, p, g)?;
        let data = self.proj.forward(tape, p, g)?;
        Ok(StageFeatures { grid_h: h2, grid_w: w2, channels: 2 * x.channels, data })
    }
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    pub patch_proj: Linear,
    pub pos: ParamId,
    pub patch_norm: LayerNorm,
    stages: Vec<Vec<SwinBlock>>,
    merges: Vec<PatchMerge>,
}

impl VisionEncoder {
    pub fn new<R: Real>(config: EncoderConfig, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c0 = config.stage_dims[0];
        let g = config.grid_side(config.input_size, 1);
        let patch_proj = Linear::new(store, rng, "enc.patch", config.patch_dim(), c0, true);
        let pos = store.randn("enc.pos", &[g * g, c0], 0.02, rng);
        let patch_norm = LayerNorm::new(store, "enc.patch_norm", c0);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..4 {
            let d = config.stage_dims[s];
            let blocks = (0..config.stage_depths[s])
                .map(|b| {
                    let name = format!("enc.s{}.b{b}", s + 1);
                    SwinBlock {
                        ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                        attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, config.num_heads[s]),
                        ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                        ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, config.ffn_mult),
                        shifted: b % 2 == 1,
                    }
                })
                .collect();
            stages.push(blocks);
            if s < 3 {
                merges.push(PatchMerge::new(store, rng, &format!("enc.merge{}", s + 1), d));
            }
        }
        Ok(VisionEncoder { config, patch_proj, pos, patch_norm, stages, merges })
    }

    /// Linear projection of non-overlapping patches, without position
    /// information.
    pub fn patch_embed<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, image: &Tensor<R>) -> Result<StageFeatures> {
        let s = image.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::dim(format!("expected square [H, W, 3] image, got {s:?}")));
        }
        self.config.check_size(s[0])?;
        let patches = tape.constant(patchify(image, self.config.patch_size)?);
        let data = self.patch_proj.forward(tape, p, patches)?;
        let g = s[0] / self.config.patch_size;
        Ok(StageFeatures { grid_h: g, grid_w: g, channels: self.config.stage_dims[0], data })
    }

    /// Position-table rows for a `grid × grid` map, nearest-neighbour
    /// resampled from the full-size table.
    pub fn position_rows(&self, grid: usize) -> Vec<usize> {
        let full = self.config.grid_side(self.config.input_size, 1);
        let src = |i: usize| ((2 * i + 1) * full) / (2 * grid);
        let mut rows = Vec::with_capacity(grid * grid);
        for i in 0..grid {
            for j in 0..grid {
                rows.push(src(i) * full + src(j));
            }
        }
        rows
    }

    /// Runs all four stages and returns the outputs of stages 3 and 4.
    pub fn encode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        image: &Tensor<R>,
    ) -> Result<(StageFeatures, StageFeatures)> {
        let mut x = self.patch_embed(tape, p, image)?;
        let pos = tape.gather_rows(p.var(self.pos), &self.position_rows(x.grid_h))?;
        let h = tape.add(x.data, pos)?;
        x.data = self.patch_norm.forward(tape, p, h)?;
        let mut stage3 = None;
        for (s, blocks) in self.stages.iter().enumerate() {
            let window = self.config.window_for(x.grid_h);
            for block in blocks {
                x.data = block.forward(tape, p, x.data, x.grid_h, window)?;
            }
            if s == 2 {
                stage3 = Some(x);
            }
            if let Some(m) = self.merges.get(s) {
                x = m.forward(tape, p, x)?;
            }
        }
        Ok((stage3.expect("four stages"), x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attend;
    use crate::tensor::{grad_check, grad_check_sampled, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            input_size: 16,
            patch_size: 2,
            window_size: 2,
            stage_depths: [2, 1, 1, 1],
            stage_dims: [4, 8, 16, 32],
            num_heads: [1, 2, 2, 4],
            ffn_mult: 2,
        }
    }

    /// Dense attention over explicitly gathered windows of the original
    /// grid. Row group of `r` is `floor((r + window - shift) / window)`,
    /// which reproduces the shifted partition without any wrap-around.
    fn gathered_window_oracle(
        tape: &mut Tape<f64>,
        p: &Bound,
        attn: &MultiHeadAttention,
        x: Var,
        grid: usize,
        window: usize,
        shift: usize,
    ) -> Vec<f64> {
        let c = tape.shape(x)[1];
        let key = |v: usize| (v + window - shift) / window;
        let mut groups: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
        for r in 0..grid {
            for col in 0..grid {
                groups.entry((key(r), key(col))).or_default().push(r * grid + col);
            }
        }
        let mut out = vec![0.0; grid * grid * c];
        for members in groups.values() {
            let g = tape.gather_rows(x, members).unwrap();
            let g = tape.reshape(g, &[1, members.len(), c]).unwrap();
            let (o, _) = attn.forward(tape, p, g, g, None).unwrap();
            let od = tape.data(o).to_vec();
            for (k, &m) in members.iter().enumerate() {
                out[m * c..(m + 1) * c].copy_from_slice(&od[k * c..(k + 1) * c]);
            }
        }
        out
    }

    fn setup(c: usize, heads: usize, grid: usize, seed: u64) -> (Tape<f64>, Bound, MultiHeadAttention, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", c, heads);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::randn(&[grid * grid, c], 1.0, &mut rng));
        (tape, p, attn, x)
    }

    #[test]
    fn desk_and_full_grids() {
        let d = EncoderConfig::desk();
        d.validate().unwrap();
        assert_eq!((1..=4).map(|s| d.grid_side(64, s)).collect::<Vec<_>>(), vec![16, 8, 4, 2]);
        let f = EncoderConfig::full_scale();
        f.validate().unwrap();
        assert_eq!((1..=4).map(|s| f.grid_side(1600, s)).collect::<Vec<_>>(), vec![400, 200, 100, 50]);
        assert!(d.check_size(32).is_ok());
        assert!(d.check_size(40).is_err());
        assert!(d.check_size(128).is_err());
        let mut bad = d.clone();
        bad.input_size = 60;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_order_is_a_permutation() {
        for (g, w, s) in [(8, 4, 0), (8, 4, 2), (6, 3, 1), (4, 4, 0)] {
            let mut o = window_order(g, w, s);
            let inv = inverse_permutation(&o);
            for (k, &v) in o.iter().enumerate() {
                assert_eq!(inv[v], k);
            }
            o.sort_unstable();
            assert_eq!(o, (0..g * g).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_window_equals_dense_attention() {
        let (mut tape, p, attn, x) = setup(8, 2, 4, 1);
        let (out, _) = window_attention(&mut tape, &p, &attn, x, 4, 4, 0).unwrap();
        let xx = tape.reshape(x, &[1, 16, 8]).unwrap();
        let (dense, _) = attn.forward(&mut tape, &p, xx, xx, None).unwrap();
        let diff = tape.value(out).data().iter().zip(tape.data(dense)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn unshifted_windows_match_gathered_oracle() {
        let (mut tape, p, attn, x) = setup(8, 2, 8, 2);
        let (out, _) = window_attention(&mut tape, &p, &attn, x, 8, 4, 0).unwrap();
        let got = tape.data(out).to_vec();
        let want = gathered_window_oracle(&mut tape, &p, &attn, x, 8, 4, 0);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn shifted_windows_match_gathered_oracle() {
        for (grid, window, seed) in [(8, 4, 3), (8, 2, 4), (6, 2, 5)] {
            let (mut tape, p, attn, x) = setup(8, 2, grid, seed);
            let shift = window / 2;
            let (out, _) = window_attention(&mut tape, &p, &attn, x, grid, window, shift).unwrap();
            let got = tape.data(out).to_vec();
            let want = gathered_window_oracle(&mut tape, &p, &attn, x, grid, window, shift);
            let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-5, "grid {grid} window {window}: {diff}");
        }
    }

    #[test]
    fn masked_pairs_get_no_weight() {
        let (mut tape, p, attn, x) = setup(4, 1, 8, 6);
        let (_, probs) = window_attention(&mut tape, &p, &attn, x, 8, 4, 2).unwrap();
        let mask = shift_mask::<f64>(8, 4, 2);
        let pd = tape.data(probs);
        let mut masked = 0;
        for (w, m) in pd.iter().zip(mask.data()) {
            if *m < 0.0 {
                masked += 1;
                assert!(*w < 1e-8);
            }
        }
        assert!(masked > 0);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let (mut tape, p, attn, x) = setup(4, 1, 6, 7);
        assert!(matches!(
            window_attention(&mut tape, &p, &attn, x, 6, 4, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn attention_helper_agrees_with_module_on_one_group() {
        let (mut tape, p, attn, x) = setup(4, 2, 2, 8);
        let xx = tape.reshape(x, &[1, 4, 4]).unwrap();
        let q = attn.q.forward(&mut tape, &p, xx).unwrap();
        let k = attn.k.forward(&mut tape, &p, xx).unwrap();
        let v = attn.v.forward(&mut tape, &p, xx).unwrap();
        let (o, _) = attend(&mut tape, q, k, v, 2, None).unwrap();
        let o = attn.o.forward(&mut tape, &p, o).unwrap();
        let (m, _) = window_attention(&mut tape, &p, &attn, x, 2, 2, 0).unwrap();
        assert_eq!(tape.data(o), tape.data(m));
    }

    #[test]
    fn patch_embed_shapes_and_zero_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let enc = VisionEncoder::new(EncoderConfig::desk(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = Tensor::<f32>::zeros(&[64, 64, 3]);
        let f = enc.patch_embed(&mut tape, &p, &img).unwrap();
        assert_eq!((f.grid_h, f.grid_w, f.tokens()), (16, 16, 256));
        let d = tape.data(f.data);
        let first = &d[..16];
        assert!(d.chunks(16).all(|row| row == first));
        assert!(enc.patch_embed(&mut tape, &p, &Tensor::<f32>::zeros(&[60, 60, 3])).is_err());
        assert!(enc.patch_embed(&mut tape, &p, &Tensor::<f32>::zeros(&[64, 64, 1])).is_err());
    }

    #[test]
    fn encode_desk_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f32>::new();
        let enc = VisionEncoder::new(EncoderConfig::desk(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = Tensor::<f32>::randn(&[64, 64, 3], 0.3, &mut rng);
        let (s3, s4) = enc.encode(&mut tape, &p, &img).unwrap();
        assert_eq!((s3.grid_h, s3.tokens(), s3.channels), (4, 16, 64));
        assert_eq!((s4.grid_h, s4.tokens(), s4.channels), (2, 4, 128));
        assert_eq!(tape.shape(s4.data), &[4, 128]);
        // Half-resolution input runs on smaller grids with the same weights.
        let small = Tensor::<f32>::randn(&[32, 32, 3], 0.3, &mut rng);
        let (s3, s4) = enc.encode(&mut tape, &p, &small).unwrap();
        assert_eq!((s3.grid_h, s4.grid_h), (2, 1));
    }

    #[test]
    fn position_rows_resample_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let enc = VisionEncoder::new(EncoderConfig::desk(), &mut store, &mut rng).unwrap();
        assert_eq!(enc.position_rows(16), (0..256).collect::<Vec<_>>());
        let half = enc.position_rows(8);
        assert_eq!(half[0], 16 + 1);
        assert_eq!(half[9], 3 * 16 + 3);
    }

    #[test]
    fn merge_shapes_constant_input_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f64>::new();
        let merge = PatchMerge::new(&mut store, &mut rng, "m", 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let row = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let rows: Vec<f64> = (0..16).flat_map(|_| row.data().to_vec()).collect();
        let x = tape.constant(Tensor::new(&[16, 4], rows).unwrap());
        let out = merge
            .forward(&mut tape, &p, StageFeatures { grid_h: 4, grid_w: 4, channels: 4, data: x })
            .unwrap();
        assert_eq!((out.grid_h, out.channels), (2, 8));
        let d = tape.data(out.data);
        assert!(d.chunks(8).all(|r| r == &d[..8]));
        let odd = tape.constant(Tensor::zeros(&[9, 4]));
        assert!(merge.forward(&mut tape, &p, StageFeatures { grid_h: 3, grid_w: 3, channels: 4, data: odd }).is_err());

        let mut inputs = vec![Tensor::randn(&[16, 4], 1.0, &mut rng)];
        inputs.extend(store.tensors().iter().cloned());
        let err = grad_check(
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let o = merge.forward(t, &p, StageFeatures { grid_h: 4, grid_w: 4, channels: 4, data: v[0] })?;
                weighted_sum(t, o.data, 3)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn encoder_gradient_on_toy_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::<f64>::new();
        let enc = VisionEncoder::new(toy_config(), &mut store, &mut rng).unwrap();
        let img = Tensor::<f64>::randn(&[16, 16, 3], 0.3, &mut rng);
        let err = grad_check_sampled(
            |t, v| {
                let p = Bound::from_vars(v.to_vec());
                let (s3, s4) = enc.encode(t, &p, &img)?;
                let a = weighted_sum(t, s3.data, 1)?;
                let b = weighted_sum(t, s4.data, 2)?;
                t.add(a, b)
            },
            store.tensors(),
            1e-5,
            Some(6),
            21,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
