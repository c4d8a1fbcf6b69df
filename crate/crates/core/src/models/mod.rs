//! The three networks: grapheme durations, frame pitch, and mel frames.
//!
//! All three share one shape: a token embedding, optionally spread to frame
//! rate by Gaussian upsampling (and, for the mel generator, offset by a
//! projected pitch value), then a separable-convolution trunk and a 1x1 head.

pub mod config;
pub mod duration;
pub mod gradcheck;
pub mod loss;
pub mod mel;
pub mod pitch;

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::TrunkCache;
use crate::nn::{rng_from_seed, Ctx, Embedding, GaussianUpsample, ParamStore, Pointwise, Real, ResidualBlock, SeqMask, Stage, SubBlock, Trunk};
use crate::text::TokenSeq;

pub use config::{BlockConfig, ModelConfig, ModelKind};
pub use duration::DurationModel;
pub use loss::{decode_durations, duration_loss, mel_loss, pitch_loss};
pub use mel::MelModel;
pub use pitch::PitchModel;

/// Pitch values are fed to the mel generator in units of this many Hz.
pub const PITCH_INPUT_SCALE: f64 = 100.0;

/// Right-padded token ids with their mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Array2<u32>,
    pub mask: SeqMask,
}

impl TokenBatch {
    pub fn new(seqs: &[&TokenSeq]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.ids.is_empty()) {
            return Err(Error::EmptyInput);
        }
        let mask = SeqMask::new(seqs.iter().map(|s| s.ids.len()).collect());
        let mut ids = Array2::<u32>::zeros((seqs.len(), mask.max_len()));
        for (b, s) in seqs.iter().enumerate() {
            ids.slice_mut(s![b, ..s.ids.len()]).assign(&ndarray::ArrayView1::from(&s.ids[..]));
        }
        Ok(Self { ids, mask })
    }

    pub fn single(seq: &TokenSeq) -> Result<Self> {
        Self::new(&[seq])
    }

    pub fn batch(&self) -> usize {
        self.mask.batch()
    }
}

/// Frame-rate conditioning for the networks that work on frames.
pub struct FrameInput<'a, F> {
    /// Per-token durations of every sequence, valid tokens only.
    pub durations: &'a [Vec<u32>],
    /// `[B, T]` pitch in Hz, zero where unvoiced; only used with pitch conditioning.
    pub pitch: Option<&'a Array2<F>>,
}

/// Embedding, optional upsampling and pitch projection, trunk, head.
#[derive(Debug, Clone)]
pub struct Network<F> {
    pub store: ParamStore<F>,
    pub config: ModelConfig,
    embed: Embedding,
    pitch_proj: Option<Pointwise>,
    trunk: Trunk,
    head: Pointwise,
}

pub struct NetCache<F> {
    ids: Array2<u32>,
    token_mask: SeqMask,
    frame_mask: SeqMask,
    upsample: Option<GaussianUpsample<F>>,
    pitch_in: Option<Array3<F>>,
    trunk: TrunkCache<F>,
    trunk_out: Array3<F>,
}

impl<F> NetCache<F> {
    /// Mask of the positions the network's outputs live on.
    pub fn mask(&self) -> &SeqMask {
        &self.frame_mask
    }
}

impl<F: Real> Network<F> {
    pub fn build(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::ConfigInvalid(format!("vocabulary of {vocab_size} symbols is too small")));
        }
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let embed_dim = config.embed_width();
        let embed = Embedding::new(&mut store, "embed", vocab_size, embed_dim, &mut rng);
        let pitch_proj = config
            .pitch_conditioning
            .then(|| Pointwise::new(&mut store, "pitch_proj", 1, embed_dim, true, &mut rng));
        let trunk = build_trunk(&mut store, config, embed_dim, &mut rng);
        let head = Pointwise::new(&mut store, "head", trunk.out_channels(), config.head_channels, true, &mut rng);
        Ok(Self { store, config: config.clone(), embed, pitch_proj, trunk, head })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            store: self.store.cast(),
            config: self.config.clone(),
            embed: self.embed.clone(),
            pitch_proj: self.pitch_proj.clone(),
            trunk: self.trunk.clone(),
            head: self.head.clone(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.vocab
    }

    /// Trainable scalars: kernels, biases, batch-norm affine, embeddings.
    pub fn count_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Trainable scalars inside the convolutional trunk only.
    pub fn trunk_params(&self) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| e.trainable() && !["embed.", "pitch_proj.", "head."].iter().any(|p| e.name.starts_with(p)))
            .map(|e| e.value.len())
            .sum()
    }

    /// One-sided receptive radius of the trunk and head, in input positions.
    pub fn receptive_radius(&self) -> usize {
        self.trunk.radius()
    }

    pub fn embed_tokens(&self, tokens: &TokenBatch) -> Result<Array3<F>> {
        self.embed.forward(&self.store, &tokens.ids, &tokens.mask)
    }

    /// Trunk and head applied to already-embedded positions `[E, B, T]`.
    pub fn forward_features(&self, x: Array3<F>, mask: &SeqMask, ctx: &mut Ctx<F>) -> (Array3<F>, TrunkCache<F>, Array3<F>) {
        let (h, trunk_cache) = if ctx.training {
            self.trunk.forward(&self.store, x, mask, ctx)
        } else {
            self.trunk.infer(&self.store, x, mask)
        };
        let mut out = self.head.forward(&self.store, &h);
        mask.apply(&mut out);
        (out, trunk_cache, h)
    }

    /// `[head, B, positions]`, zero at padding. Positions are tokens for the
    /// duration network and frames otherwise.
    pub fn forward(&self, tokens: &TokenBatch, frames: Option<&FrameInput<'_, F>>, ctx: &mut Ctx<F>) -> Result<(Array3<F>, NetCache<F>)> {
        let emb = self.embed_tokens(tokens)?;
        let (x, frame_mask, upsample, pitch_in) = match frames {
            None => (emb, tokens.mask.clone(), None, None),
            Some(fi) => {
                let up = GaussianUpsample::new(fi.durations, &tokens.mask)?;
                let mut x = up.forward(&emb);
                let frame_mask = up.frame_mask().clone();
                let pitch_in = match &self.pitch_proj {
                    Some(proj) => {
                        let pitch = fi.pitch.ok_or_else(|| Error::ConfigInvalid("mel network needs pitch input".into()))?;
                        if pitch.dim() != (frame_mask.batch(), frame_mask.max_len()) {
                            return Err(Error::ShapeMismatch(format!(
                                "pitch is {:?}, frames are {:?}",
                                pitch.dim(),
                                (frame_mask.batch(), frame_mask.max_len())
                            )));
                        }
                        let scale = F::of(1.0 / PITCH_INPUT_SCALE);
                        let mut p = pitch.mapv(|v| v * scale).insert_axis(Axis(0));
                        frame_mask.apply(&mut p);
                        x += &proj.forward(&self.store, &p);
                        frame_mask.apply(&mut x);
                        Some(p)
                    }
                    None => None,
                };
                (x, frame_mask, Some(up), pitch_in)
            }
        };
        let (out, trunk, trunk_out) = self.forward_features(x, &frame_mask, ctx);
        let cache = NetCache { ids: tokens.ids.clone(), token_mask: tokens.mask.clone(), frame_mask, upsample, pitch_in, trunk, trunk_out };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for `dout`, the gradient of the loss
    /// with respect to the output of [`Network::forward`].
    pub fn backward(&mut self, cache: NetCache<F>, dout: &Array3<F>) {
        let mut dout = dout.clone();
        cache.frame_mask.apply(&mut dout);
        let dh = self.head.backward(&mut self.store, &cache.trunk_out, &dout);
        let mut dx = self.trunk.backward(&mut self.store, cache.trunk, dh, &cache.frame_mask);
        let demb = match &cache.upsample {
            Some(up) => {
                if let (Some(proj), Some(p)) = (&self.pitch_proj, &cache.pitch_in) {
                    cache.frame_mask.apply(&mut dx);
                    proj.backward(&mut self.store, p, &dx);
                }
                up.backward(&dx)
            }
            None => dx,
        };
        self.embed.backward(&mut self.store, &cache.ids, &cache.token_mask, &demb);
    }
}

fn build_trunk<F: Real>(store: &mut ParamStore<F>, config: &ModelConfig, embed_dim: usize, rng: &mut impl Rng) -> Trunk {
    let mut stages = Vec::new();
    let mut c_in = embed_dim;
    for block in &config.blocks {
        let c_out = config.width(block.channels);
        if block.residual {
            stages.push(Stage::Residual(ResidualBlock::new(
                store,
                &block.name,
                block.sub_blocks,
                c_in,
                c_out,
                block.kernel,
                block.dropout,
                rng,
            )));
        } else {
            for i in 0..block.sub_blocks {
                let cin = if i == 0 { c_in } else { c_out };
                let name = format!("{}.sub{i}", block.name);
                stages.push(Stage::Plain(SubBlock::new(store, &name, cin, c_out, block.kernel, block.dropout, rng)));
            }
        }
        c_in = c_out;
    }
    Trunk { stages }
}
