//! The instrumented toy text-to-video network.
//!
//! A small image U-Net stands in for the frozen text-to-image model. Around it
//! sit the trainable parts: temporal attention layers, the mapping network in
//! front of the U-Net, the frame-wise token generator and the projection head
//! on bottleneck features. Every trainable output layer starts at zero, so a
//! freshly built model in video mode computes exactly what the image U-Net
//! computes frame by frame.

mod blocks;
mod config;
mod mapping;
mod projection;
mod tokens;
mod unet;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{ModelConfig, Precision};

use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::nn::{Init, Param, ParamGroup, ParamStore};
use blocks::CrossContext;
use mapping::MappingNetwork;
use projection::ProjectionHead;
use tokens::FrameTokenGenerator;
use unet::{SpatialUNet, TemporalStack};

/// Which network a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Mapping network, spatial layers interleaved with temporal layers,
    /// text plus frame-wise tokens.
    Full,
    /// Mapping network and spatial layers only; text tokens repeated per
    /// frame.
    ImageOnly,
}

/// Per-frame conditioning tokens for one batch.
#[derive(Debug, Clone)]
pub struct TokenBundle {
    /// `(B*F, M+K, D)` in full mode, `(B*F, M, D)` in image-only mode.
    pub per_frame: Tensor,
    /// `(B, M, D)`.
    pub source_text: Tensor,
    pub mode: Mode,
    pub frames: usize,
    pub text_len: usize,
}

impl TokenBundle {
    pub fn tokens_per_frame(&self) -> usize {
        self.per_frame.dims()[1]
    }

    pub fn batch(&self) -> usize {
        self.source_text.dims()[0]
    }
}

/// Captured attention maps and bottleneck features of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Decoder self-attention, index `i-1` for layer `i = 1..N` (layer 1
    /// nearest the bottleneck); each `(B, F, heads, q, q)`.
    pub self_attn: Vec<Tensor>,
    /// Decoder cross-attention in the same order, `(B, F, heads, q, tokens)`.
    pub cross_attn: Vec<Tensor>,
    /// Bottleneck features `(B, F, c_h, h_h, w_h)`.
    pub h: Tensor,
}

pub struct T2VModel {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    vocab: Vocab,
    text_embedding: Param,
    unet: SpatialUNet,
    temporal: TemporalStack,
    mapping: MappingNetwork,
    token_gen: FrameTokenGenerator,
    projection: ProjectionHead,
}

impl T2VModel {
    /// Deterministic construction: the same `(config, seed)` gives
    /// bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::synthetic();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dtype = config.precision.dtype();
        let mut ini = Init::new(&mut store, &mut rng, dtype);
        ini.group(ParamGroup::Spatial, "text");
        let text_embedding = ini.normal("embedding", &[vocab.len(), config.token_dim], 1.0)?;
        let unet = SpatialUNet::new(&mut ini, &config)?;
        let temporal = TemporalStack::new(&mut ini, &config)?;
        let mapping = MappingNetwork::new(&mut ini, &config)?;
        let token_gen = FrameTokenGenerator::new(&mut ini, &config, unet.transformer_count())?;
        let projection = ProjectionHead::new(&mut ini, &config)?;
        Ok(Self {
            config,
            seed,
            store,
            vocab,
            text_embedding,
            unet,
            temporal,
            mapping,
            token_gen,
            projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Marks the spatial U-Net frozen; from then on it receives no gradients.
    pub fn freeze_spatial(&self) {
        self.store.set_frozen(ParamGroup::Spatial, true);
    }

    pub fn is_spatial_frozen(&self) -> bool {
        self.store.is_frozen(ParamGroup::Spatial)
    }

    /// Parameters updated while training the inflated model.
    pub fn inflation_params(&self) -> Vec<(String, Var)> {
        self.store.trainable(&ParamGroup::TRAINABLE)
    }

    /// Parameters updated during spatial pretraining.
    pub fn spatial_params(&self) -> Vec<(String, Var)> {
        self.store.trainable(&[ParamGroup::Spatial])
    }

    /// Keeps frame-token gates non-negative after an optimizer update.
    pub fn project_constraints(&self) -> Result<()> {
        for gate in self.token_gen.gates() {
            let v = gate.var();
            let clamped = v.as_tensor().clamp(0f64, f64::MAX)?;
            v.set(&clamped)?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw bytes of every spatial parameter.
    pub fn spatial_hash(&self) -> Result<String> {
        group_hash(&self.store, ParamGroup::Spatial)
    }

    /// Caption embeddings `(B, M, D)`; empty captions give the unconditional
    /// all-EOS stream.
    pub fn embed_captions<S: AsRef<str>>(&self, captions: &[S]) -> Result<Tensor> {
        let m = self.config.max_tokens;
        let mut ids = Vec::with_capacity(captions.len() * m);
        for c in captions {
            ids.extend(self.vocab.encode(c.as_ref(), m)?);
        }
        let ids = Tensor::from_vec(ids, (captions.len() * m,), &Device::Cpu)?;
        let table = self.text_embedding.t();
        let emb = table.embedding(&ids)?;
        Ok(emb.reshape((captions.len(), m, self.config.token_dim))?)
    }

    /// One caption as a `(1, M, D)` token stream.
    pub fn tokenize_caption(&self, caption: &str) -> Result<Tensor> {
        self.embed_captions(&[caption])
    }

    pub fn generate_frame_tokens(&self, text: &Tensor, mode: Mode) -> Result<TokenBundle> {
        let (b, m, d) = text.dims3()?;
        if m != self.config.max_tokens || d != self.config.token_dim {
            return Err(Error::shape(format!(
                "text tokens must be (B, {}, {}), got {:?}",
                self.config.max_tokens,
                self.config.token_dim,
                text.dims()
            )));
        }
        let f = self.config.frames;
        let repeated = text.unsqueeze(1)?.broadcast_as((b, f, m, d))?;
        let fw = match mode {
            Mode::Full => self.token_gen.forward(text)?,
            Mode::ImageOnly => None,
        };
        let per_frame = match fw {
            Some(fw) => {
                let k = fw.dim(2)?;
                Tensor::cat(&[&repeated.contiguous()?, &fw], 2)?.reshape((b * f, m + k, d))?
            }
            None => repeated.contiguous()?.reshape((b * f, m, d))?,
        };
        Ok(TokenBundle {
            per_frame,
            source_text: text.clone(),
            mode,
            frames: f,
            text_len: m,
        })
    }

    fn check_video(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let cfg = &self.config;
        let dims = x.dims5().map_err(|_| Error::shape(format!("expected (B,F,C,H,W), got {:?}", x.dims())))?;
        let (_, f, c, h, w) = dims;
        if f != cfg.frames || c != cfg.channels || h != cfg.height || w != cfg.width {
            return Err(Error::shape(format!(
                "video must be (B, {}, {}, {}, {}), got {:?}",
                cfg.frames,
                cfg.channels,
                cfg.height,
                cfg.width,
                x.dims()
            )));
        }
        Ok(dims)
    }

    /// Mapping network on a `(B, F, C, H, W)` batch; same shape out.
    pub fn mapping_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_video(x)?;
        let cl = x.permute((0, 1, 3, 4, 2))?.contiguous()?;
        Ok(self.mapping.forward(&cl)?.permute((0, 1, 4, 2, 3))?.contiguous()?)
    }

    fn expand_timesteps(&self, timesteps: &[usize], batch: usize) -> Result<Vec<usize>> {
        let f = self.config.frames;
        match timesteps.len() {
            1 => Ok(vec![timesteps[0]; batch * f]),
            n if n == batch => Ok(timesteps.iter().flat_map(|&t| std::iter::repeat_n(t, f)).collect()),
            n => Err(Error::param(format!(
                "expected 1 or {batch} timesteps, got {n}"
            ))),
        }
    }

    /// Noise prediction for a `(B, F, C, H, W)` batch.
    ///
    /// `timesteps` holds either one timestep for the whole batch or one per
    /// video. With `capture` the decoder attention maps and bottleneck
    /// features are returned as well.
    pub fn forward(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        tokens: &TokenBundle,
        mode: Mode,
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        let (b, f, c, h, w) = self.check_video(x_t)?;
        if tokens.mode != mode {
            return Err(Error::param(format!(
                "token bundle was built for {:?} mode, forward requested {mode:?}",
                tokens.mode
            )));
        }
        if tokens.batch() != b || tokens.frames != f {
            return Err(Error::param(format!(
                "token bundle covers {} videos of {} frames, input has {b} of {f}",
                tokens.batch(),
                tokens.frames
            )));
        }
        let ts = self.expand_timesteps(timesteps, b)?;
        let cl = x_t.permute((0, 1, 3, 4, 2))?.contiguous()?;
        let mapped = self.mapping.forward(&cl)?.reshape((b * f, h, w, c))?;
        let ctx = CrossContext {
            tokens: &tokens.per_frame,
            text_len: tokens.text_len,
            gates: Some(self.token_gen.gates()),
        };
        let temporal = match mode {
            Mode::Full => Some((&self.temporal, f)),
            Mode::ImageOnly => None,
        };
        let (out, cap) = self.unet.forward(&mapped, &ts, &ctx, temporal, capture)?;
        let eps = out.reshape((b, f, h, w, c))?.permute((0, 1, 4, 2, 3))?.contiguous()?;
        let record = match cap {
            Some(cap) => {
                let split = |t: &Tensor| -> Result<Tensor> {
                    let d = t.dims();
                    Ok(t.reshape((b, f, d[1], d[2], d[3]))?)
                };
                let mut self_attn = Vec::with_capacity(cap.decoder.len());
                let mut cross_attn = Vec::with_capacity(cap.decoder.len());
                for layer in &cap.decoder {
                    self_attn.push(split(&layer.self_attn)?);
                    cross_attn.push(split(&layer.cross_attn)?);
                }
                let (_, hh, hw, hc) = cap.h.dims4()?;
                let hfeat = cap.h.reshape((b, f, hh, hw, hc))?.permute((0, 1, 4, 2, 3))?.contiguous()?;
                Some(AttentionRecord {
                    self_attn,
                    cross_attn,
                    h: hfeat,
                })
            }
            None => None,
        };
        Ok((eps, record))
    }

    /// The image U-Net alone on independent frames: `(N, C, H, W)` frames,
    /// one timestep per frame, `(N, M, D)` text tokens.
    pub fn spatial_forward(&self, frames: &Tensor, timesteps: &[usize], text: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = frames.dims4()?;
        if timesteps.len() != n {
            return Err(Error::param(format!("expected {n} timesteps, got {}", timesteps.len())));
        }
        if text.dims() != [n, self.config.max_tokens, self.config.token_dim] {
            return Err(Error::shape(format!("text tokens {:?} do not match {n} frames", text.dims())));
        }
        let cl = frames.permute((0, 2, 3, 1))?.contiguous()?;
        let ctx = CrossContext {
            tokens: text,
            text_len: self.config.max_tokens,
            gates: None,
        };
        let (out, _) = self.unet.forward(&cl, timesteps, &ctx, None, false)?;
        debug_assert_eq!(out.dims(), &[n, h, w, c]);
        Ok(out.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Projection of one frame's bottleneck features `(c_h, h_h, w_h)` to a
    /// vector of length `c_h`.
    pub fn project_h(&self, h: &Tensor) -> Result<Tensor> {
        Ok(self.project_h_batch(&h.unsqueeze(0)?)?.squeeze(0)?)
    }

    /// Batched projection, `(N, c_h, h_h, w_h) -> (N, c_h)`.
    pub fn project_h_batch(&self, h: &Tensor) -> Result<Tensor> {
        let (hh, hw) = self.config.bottleneck_hw();
        let c = self.config.bottleneck_channels();
        let dims = h.dims();
        if dims.len() != 4 || dims[1..] != [c, hh, hw] {
            return Err(Error::shape(format!(
                "bottleneck features must be (N, {c}, {hh}, {hw}), got {dims:?}"
            )));
        }
        self.projection.forward(&h.permute((0, 2, 3, 1))?.contiguous()?)
    }
}

pub(crate) fn group_hash(store: &ParamStore, group: ParamGroup) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, var) in store.group(group) {
        hasher.update(name.as_bytes());
        let flat = var.as_tensor().flatten_all()?;
        match flat.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
