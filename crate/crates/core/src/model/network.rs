//! Forward and backward passes of the detector.
//!
//! Data flow for one clip:
//!
//! ```text
//! frames (n,H,W,3) -E-> T (n,g,g,d_t) -W,E_pos-> tokens (n*g*g, d_z) -V-> z (d_z)
//! z -L_d-> h -L_c-> logits (2)
//! z or h -R-> T* (n,g,g,d_t)
//! ```

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};
use rand::Rng;

use super::config::ModelConfig;
use super::params::{Block, ParameterStore};
use crate::error::{Error, Result};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, AttentionCache, Conv3x3Cache, LayerNormCache,
    MlpCache, Real,
};

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    convs: Vec<Conv3x3Cache<T>>,
    /// Post-ReLU activations of each convolution.
    acts: Vec<Array4<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

#[derive(Debug, Clone)]
pub struct TransformerCache<T> {
    blocks: Vec<BlockCache<T>>,
    n_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct ReconstructorCache<T> {
    conv: Conv3x3Cache<T>,
}

/// Everything the backbone produces for one clip, with caches for backprop.
#[derive(Debug, Clone)]
pub struct BackboneTrace<T> {
    pub features: Array4<T>,
    pub tokens: Array2<T>,
    pub z: Array1<T>,
    pub encoder: EncoderCache<T>,
    pub transformer: TransformerCache<T>,
}

/// The full network: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LastModel<T> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
}

impl<T: Real> LastModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ParameterStore::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParameterStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    fn check_clip(&self, clip: &ArrayView4<T>) -> Result<()> {
        let want = self.config.clip_shape();
        if clip.dim() != want {
            return Err(Error::Shape(format!(
                "clip has shape {:?}, model expects {:?}",
                clip.dim(),
                want
            )));
        }
        Ok(())
    }

    /// Per-frame CNN features `T`, shape `(n, g, g, d_t)`.
    pub fn encode_frames(&self, clip: ArrayView4<T>) -> Result<Array4<T>> {
        self.check_clip(&clip)?;
        let mut x = clip.to_owned();
        for conv in &self.params.encoder {
            x = conv.forward_no_cache(x.view());
            x.mapv_inplace(|v| v.max(T::zero()));
        }
        Ok(adaptive_avg_pool(x.view(), self.config.feature_grid))
    }

    pub fn encode_frames_traced(&self, clip: ArrayView4<T>) -> Result<(Array4<T>, EncoderCache<T>)> {
        self.check_clip(&clip)?;
        let mut convs = Vec::with_capacity(self.params.encoder.len());
        let mut acts: Vec<Array4<T>> = Vec::with_capacity(self.params.encoder.len());
        for conv in &self.params.encoder {
            let input = acts.last().map(|a| a.view()).unwrap_or(clip);
            let (mut y, cache) = conv.forward(input);
            y.mapv_inplace(|v| v.max(T::zero()));
            convs.push(cache);
            acts.push(y);
        }
        let features = adaptive_avg_pool(acts.last().expect("encoder has layers").view(), self.config.feature_grid);
        Ok((features, EncoderCache { convs, acts }))
    }

    /// Backpropagates `dL/dT` through the encoder into `grads`.
    pub fn encoder_backward(&self, cache: &EncoderCache<T>, d_features: ArrayView4<T>, grads: &mut ParameterStore<T>) {
        let last = cache.acts.last().expect("encoder has layers");
        let mut dy = adaptive_avg_pool_backward(d_features, last.dim());
        for i in (0..self.params.encoder.len()).rev() {
            dy.zip_mut_with(&cache.acts[i], |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            let dx = self.params.encoder[i].backward(&cache.convs[i], dy.view(), &mut grads.encoder[i], i > 0);
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
    }

    /// One token per grid cell per frame: `token = W t + E_pos[position]`.
    pub fn tokenize(&self, features: ArrayView4<T>) -> Result<Array2<T>> {
        let want = self.config.feature_shape();
        if features.dim() != want {
            return Err(Error::Shape(format!(
                "features have shape {:?}, expected {:?}",
                features.dim(),
                want
            )));
        }
        let flat = features.as_standard_layout();
        let flat = flat
            .view()
            .into_shape_with_order((self.config.num_tokens(), self.config.feature_dim))
            .expect("token reshape");
        Ok(flat.dot(&self.params.projection.weight) + &self.params.projection.pos)
    }

    /// Returns `dL/dT` and accumulates projection gradients.
    pub fn tokenize_backward(&self, features: ArrayView4<T>, d_tokens: ArrayView2<T>, grads: &mut ParameterStore<T>) -> Array4<T> {
        let flat = features.as_standard_layout();
        let flat = flat
            .view()
            .into_shape_with_order((self.config.num_tokens(), self.config.feature_dim))
            .expect("token reshape");
        ndarray::linalg::general_mat_mul(T::one(), &flat.t(), &d_tokens, T::one(), &mut grads.projection.weight);
        grads.projection.pos += &d_tokens;
        d_tokens
            .dot(&self.params.projection.weight.t())
            .into_shape_with_order(self.config.feature_shape())
            .expect("feature reshape")
    }

    /// Pre-norm transformer stack followed by mean pooling over tokens.
    pub fn transform(&self, tokens: ArrayView2<T>) -> Array1<T> {
        let mut x = tokens.to_owned();
        for block in &self.params.transformer {
            x = block_forward(block, x.view()).0;
        }
        mean_rows(x.view())
    }

    pub fn transform_traced(&self, tokens: ArrayView2<T>) -> (Array1<T>, TransformerCache<T>) {
        let mut x = tokens.to_owned();
        let mut blocks = Vec::with_capacity(self.params.transformer.len());
        for block in &self.params.transformer {
            let (y, cache) = block_forward(block, x.view());
            blocks.push(cache);
            x = y;
        }
        let n_tokens = x.nrows();
        (mean_rows(x.view()), TransformerCache { blocks, n_tokens })
    }

    /// Returns `dL/dtokens` given `dL/dz`.
    pub fn transform_backward(&self, cache: &TransformerCache<T>, dz: ArrayView1<T>, grads: &mut ParameterStore<T>) -> Array2<T> {
        let inv = T::one() / T::from_usize(cache.n_tokens).expect("count");
        let row = dz.mapv(|v| v * inv);
        let mut dx = row
            .insert_axis(Axis(0))
            .broadcast((cache.n_tokens, dz.len()))
            .expect("broadcast")
            .to_owned();
        for (k, block) in self.params.transformer.iter().enumerate().rev() {
            dx = block_backward(block, &cache.blocks[k], dx.view(), &mut grads.transformer[k]);
        }
        dx
    }

    pub fn adapt_project(&self, z: ArrayView1<T>) -> Array1<T> {
        self.params.adaptive.forward_vec(z)
    }

    pub fn classify(&self, h: ArrayView1<T>) -> Array1<T> {
        self.params.classifier.forward_vec(h)
    }

    /// Rebuilds the spatial feature sequence from a latent vector: the latent
    /// is tiled over every `(frame, row, col)` cell, a learned positional
    /// embedding is added, and one 3x3 convolution maps to `d_t` channels.
    pub fn reconstruct(&self, h: ArrayView1<T>) -> Array4<T> {
        self.reconstruct_traced(h).0
    }

    pub fn reconstruct_traced(&self, h: ArrayView1<T>) -> (Array4<T>, ReconstructorCache<T>) {
        let c = &self.config;
        let mut input = self.params.reconstructor.pos.clone();
        input += &h;
        let input = input
            .into_shape_with_order((c.clip_len, c.feature_grid, c.feature_grid, c.token_dim))
            .expect("reconstructor input shape");
        let (out, conv) = self.params.reconstructor.conv.forward(input.view());
        (out, ReconstructorCache { conv })
    }

    /// Returns `dL/dh` and accumulates reconstructor gradients.
    pub fn reconstruct_backward(&self, cache: &ReconstructorCache<T>, d_out: ArrayView4<T>, grads: &mut ParameterStore<T>) -> Array1<T> {
        let dx = self
            .params
            .reconstructor
            .conv
            .backward(&cache.conv, d_out, &mut grads.reconstructor.conv, true)
            .expect("input gradient requested");
        let dx = dx
            .into_shape_with_order((self.config.num_tokens(), self.config.token_dim))
            .expect("reshape");
        grads.reconstructor.pos += &dx;
        dx.sum_axis(Axis(0))
    }

    /// Encoder, tokenizer and transformer for one clip, without caches.
    pub fn backbone(&self, clip: ArrayView4<T>) -> Result<(Array4<T>, Array1<T>)> {
        let features = self.encode_frames(clip)?;
        let tokens = self.tokenize(features.view())?;
        let z = self.transform(tokens.view());
        Ok((features, z))
    }

    pub fn backbone_traced(&self, clip: ArrayView4<T>) -> Result<BackboneTrace<T>> {
        let (features, encoder) = self.encode_frames_traced(clip)?;
        let tokens = self.tokenize(features.view())?;
        let (z, transformer) = self.transform_traced(tokens.view());
        Ok(BackboneTrace {
            features,
            tokens,
            z,
            encoder,
            transformer,
        })
    }

    /// Backpropagates `dL/dz` (and optionally a direct `dL/dT`) to every
    /// backbone parameter.
    pub fn backbone_backward(
        &self,
        trace: &BackboneTrace<T>,
        dz: ArrayView1<T>,
        d_features_direct: Option<ArrayView4<T>>,
        grads: &mut ParameterStore<T>,
    ) {
        let d_tokens = self.transform_backward(&trace.transformer, dz, grads);
        let mut d_features = self.tokenize_backward(trace.features.view(), d_tokens.view(), grads);
        if let Some(direct) = d_features_direct {
            d_features += &direct;
        }
        self.encoder_backward(&trace.encoder, d_features.view(), grads);
    }

    /// Class logits `(real, fake)` for a clip.
    pub fn logits(&self, clip: ArrayView4<T>) -> Result<Array1<T>> {
        let (_, z) = self.backbone(clip)?;
        let h = self.adapt_project(z.view());
        Ok(self.classify(h.view()))
    }
}

fn mean_rows<T: Real>(x: ArrayView2<T>) -> Array1<T> {
    let n = T::from_usize(x.nrows()).expect("count");
    x.sum_axis(Axis(0)) / n
}

fn block_forward<T: Real>(block: &Block<T>, x: ArrayView2<T>) -> (Array2<T>, BlockCache<T>) {
    let (a, ln1) = block.ln1.forward(x);
    let (attn_out, attn) = block.attn.forward(a.view());
    let x1 = &x + &attn_out;
    let (b, ln2) = block.ln2.forward(x1.view());
    let (mlp_out, mlp) = block.mlp.forward(b.view());
    let x2 = x1 + mlp_out;
    (x2, BlockCache { ln1, attn, ln2, mlp })
}

fn block_backward<T: Real>(block: &Block<T>, cache: &BlockCache<T>, dy: ArrayView2<T>, grad: &mut Block<T>) -> Array2<T> {
    let db = block.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
    let mut dx1 = block.ln2.backward(&cache.ln2, db.view(), &mut grad.ln2);
    dx1 += &dy;
    let da = block.attn.backward(&cache.attn, dx1.view(), &mut grad.attn);
    let mut dx = block.ln1.backward(&cache.ln1, da.view(), &mut grad.ln1);
    dx += &dx1;
    dx
}

/// Softmax over a logit vector.
pub fn softmax<T: Real>(logits: ArrayView1<T>) -> Array1<T> {
    let max = logits.fold(T::neg_infinity(), |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Probability of the fake class.
pub fn fake_probability<T: Real>(logits: ArrayView1<T>) -> T {
    softmax(logits)[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            clip_len: 3,
            image_size: 16,
            encoder_channels: vec![4, 6, 8],
            feature_grid: 2,
            feature_dim: 8,
            token_dim: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            ..ModelConfig::desk_reduced()
        }
    }

    fn random_clip(cfg: &ModelConfig, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(cfg.clip_shape(), |_| rng.random::<f64>())
    }

    #[test]
    fn desk_preset_feature_shape() {
        let cfg = ModelConfig::desk_reduced();
        let model = LastModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let clip = Array4::<f32>::from_elem(cfg.clip_shape(), 0.5);
        let t = model.encode_frames(clip.view()).unwrap();
        assert_eq!(t.dim(), (20, 4, 4, 32));
        let tokens = model.tokenize(t.view()).unwrap();
        assert_eq!(tokens.dim(), (320, 64));
        let z = model.transform(tokens.view());
        assert_eq!(z.len(), 64);
        let r = model.reconstruct(z.view());
        assert_eq!(r.dim(), (20, 4, 4, 32));
    }

    #[test]
    fn encoder_is_frame_local() {
        let cfg = tiny_config();
        let model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let clip = random_clip(&cfg, 2);
        let base = model.encode_frames(clip.view()).unwrap();
        let mut changed = clip.clone();
        changed.slice_mut(s![1, .., .., ..]).mapv_inplace(|v| 1.0 - v);
        let out = model.encode_frames(changed.view()).unwrap();
        assert_eq!(base.slice(s![0, .., .., ..]), out.slice(s![0, .., .., ..]));
        assert_eq!(base.slice(s![2, .., .., ..]), out.slice(s![2, .., .., ..]));
        assert_ne!(base.slice(s![1, .., .., ..]), out.slice(s![1, .., .., ..]));
        // permuting frames permutes features
        let mut perm = clip.clone();
        perm.slice_mut(s![0, .., .., ..]).assign(&clip.slice(s![2, .., .., ..]));
        perm.slice_mut(s![2, .., .., ..]).assign(&clip.slice(s![0, .., .., ..]));
        let pf = model.encode_frames(perm.view()).unwrap();
        assert_eq!(pf.slice(s![0, .., .., ..]), base.slice(s![2, .., .., ..]));
        assert_eq!(pf.slice(s![2, .., .., ..]), base.slice(s![0, .., .., ..]));
    }

    #[test]
    fn zero_projection_gives_zero_tokens() {
        let cfg = tiny_config();
        let mut model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        model.params.projection.weight.fill(0.0);
        model.params.projection.pos.fill(0.0);
        let t = model.encode_frames(random_clip(&cfg, 3).view()).unwrap();
        let tokens = model.tokenize(t.view()).unwrap();
        assert!(tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokens_outside_changed_frame_are_identical() {
        let cfg = tiny_config();
        let model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut t = Array4::from_shape_fn(cfg.feature_shape(), |(a, b, c, d)| (a + 2 * b + 3 * c + d) as f64 * 0.1);
        let base = model.tokenize(t.view()).unwrap();
        t.slice_mut(s![1, .., .., ..]).mapv_inplace(|v| v + 1.0);
        let moved = model.tokenize(t.view()).unwrap();
        let per_frame = cfg.feature_grid * cfg.feature_grid;
        for row in 0..cfg.num_tokens() {
            let same = base.row(row) == moved.row(row);
            assert_eq!(same, row / per_frame != 1, "row {row}");
        }
    }

    #[test]
    fn empty_block_stack_is_token_mean() {
        let cfg = ModelConfig {
            blocks: 0,
            ..tiny_config()
        };
        let model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let tokens = Array2::from_shape_fn((cfg.num_tokens(), cfg.token_dim), |(i, j)| (i * 7 + j) as f64);
        let z = model.transform(tokens.view());
        let mean = tokens.mean_axis(Axis(0)).unwrap();
        assert_eq!(z, mean);
    }

    #[test]
    fn attention_pooling_is_permutation_invariant() {
        let cfg = tiny_config();
        let model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = Array2::from_shape_fn((cfg.num_tokens(), cfg.token_dim), |_| rng.random::<f64>() - 0.5);
        let n = tokens.nrows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = tokens.select(Axis(0), &perm);
        let a = model.transform(tokens.view());
        let b = model.transform(permuted.view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_degenerate_cases() {
        let cfg = tiny_config();
        let mut model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let z = Array1::from_iter((0..cfg.token_dim).map(|i| i as f64 - 2.5));
        assert_eq!(model.adapt_project(z.view()), z);
        model.params.adaptive.weight.fill(0.0);
        model.params.adaptive.bias.fill(0.25);
        assert!(model.adapt_project(z.view()).iter().all(|&v| v == 0.25));
        model.params.classifier.weight.fill(0.0);
        model.params.classifier.bias = ndarray::arr1(&[0.3, -0.7]);
        assert_eq!(model.classify(z.view()), ndarray::arr1(&[0.3, -0.7]));
        let p = softmax(ndarray::arr1(&[2.0f64, -1.0]).view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstructor_zero_weights_yield_bias() {
        let cfg = tiny_config();
        let mut model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        model.params.reconstructor.conv.weight.fill(0.0);
        model.params.reconstructor.conv.bias = Array1::from_iter((0..cfg.feature_dim).map(|i| i as f64));
        let out = model.reconstruct(Array1::from_elem(cfg.token_dim, 3.0).view());
        for ((_, _, _, c), &v) in out.indexed_iter() {
            assert_eq!(v, c as f64);
        }
    }

    #[test]
    fn reconstructor_distinguishes_latents() {
        let cfg = tiny_config();
        let model = LastModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let a = model.reconstruct(Array1::from_elem(cfg.token_dim, 0.1).view());
        let b = model.reconstruct(Array1::from_iter((0..cfg.token_dim).map(|i| i as f64 * 0.1)).view());
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_wrong_clip_shape() {
        let cfg = tiny_config();
        let model = LastModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let clip = Array4::<f64>::zeros((2, 16, 16, 3));
        assert!(matches!(model.encode_frames(clip.view()), Err(Error::Shape(_))));
    }
}
