//! Modality encoders, the fusion transformer and the LiDAR decoder.
//!
//! All forward functions work on batches and record onto a [`Forward`]
//! pass. Images enter the encoders as patch matrices `[B, N, C * p * p]`
//! (see [`patchify`]); the decoder output is transposed into raster layout
//! `[B, rows, cols]` with rows along elevation.

mod config;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DecoderConfig, EncoderConfig, FusionConfig, ModelConfig, Modality};
pub use params::{encoder_prefix, init_params, param_count, param_specs, Init, ParamSpec, INIT_STD};

use crate::error::{shape_err, Error, Result};
use crate::geometry::PolarRaster;
use crate::tensor::{
    multi_head_self_attention, AttentionParams, BatchNormState, Binder, Graph, Mode, ParamStore, Tensor, Var,
};

const LN_EPS: f64 = 1e-5;

/// One forward pass: the graph, parameter bindings, dropout randomness and
/// the batch-norm running statistics it produced.
pub struct Forward<'s> {
    pub graph: Graph<f32>,
    binder: Binder,
    store: &'s ParamStore,
    mode: Mode,
    rng: ChaCha8Rng,
    running_stats: Vec<(String, Vec<f32>)>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            binder: Binder::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            running_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.binder.get(&mut self.graph, self.store, name)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn binder(&self) -> &Binder {
        &self.binder
    }

    /// Graph, bindings, and updated running statistics to write back with
    /// [`apply_running_stats`].
    pub fn finish(self) -> (Graph<f32>, Binder, Vec<(String, Vec<f32>)>) {
        (self.graph, self.binder, self.running_stats)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, gain, bias, LN_EPS)
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let training = self.mode == Mode::Train;
        self.graph.dropout(x, p, training, &mut self.rng)
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        let (mean_name, var_name) = (format!("{prefix}.running_mean"), format!("{prefix}.running_var"));
        let mut state = BatchNormState::new(self.graph.shape(gain)[0]);
        state.running_mean = self.store.value(&mean_name)?.data().to_vec();
        state.running_var = self.store.value(&var_name)?.data().to_vec();
        let y = self.graph.batch_norm2d(x, gain, bias, &mut state, self.mode)?;
        if self.mode == Mode::Train {
            self.running_stats.push((mean_name, state.running_mean));
            self.running_stats.push((var_name, state.running_var));
        }
        Ok(y)
    }

    /// Pre-norm transformer encoder layer; returns the output and the
    /// attention weights.
    fn encoder_layer(&mut self, x: Var, prefix: &str, n_heads: usize, dropout: f64) -> Result<(Var, Var)> {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        let mut names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
            .into_iter()
            .map(|n| self.param(&format!("{prefix}.attn.{n}")));
        let mut next = || names.next().unwrap();
        let p = AttentionParams {
            wq: next()?,
            bq: next()?,
            wk: next()?,
            bk: next()?,
            wv: next()?,
            bv: next()?,
            wo: next()?,
            bo: next()?,
        };
        drop(names);
        let att = multi_head_self_attention(&mut self.graph, h, &p, n_heads)?;
        let a = self.dropout(att.output, dropout)?;
        let x = self.graph.add(x, a)?;

        let h = self.layer_norm(x, &format!("{prefix}.ln2"))?;
        let h = self.linear(h, &format!("{prefix}.ffn.fc1"))?;
        let h = self.graph.relu(h);
        let h = self.linear(h, &format!("{prefix}.ffn.fc2"))?;
        let h = self.dropout(h, dropout)?;
        Ok((self.graph.add(x, h)?, att.weights))
    }
}

/// Copies running statistics collected during a training pass into `store`.
pub fn apply_running_stats(store: &mut ParamStore, stats: Vec<(String, Vec<f32>)>) -> Result<()> {
    for (name, data) in stats {
        store.set_value(&name, data)?;
    }
    Ok(())
}

/// Splits a `[C, H, W]` image into row-major patches of `C * p * p` values
/// (channel, then row, then column inside each patch).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Vec<f32>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(shape_err!("image must be [C, H, W], got {:?}", image.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err!("image {h}x{w} not divisible into {patch}-pixel patches"));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..h / patch {
        for pc in 0..w / patch {
            for ch in 0..c {
                for y in 0..patch {
                    let start = (ch * h + pr * patch + y) * w + pc * patch;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Ok(out)
}

/// Stacks images into the `[B, N, C * p * p]` encoder input.
pub fn patch_batch(cfg: &EncoderConfig, images: &[&Tensor]) -> Result<Tensor> {
    let want = [cfg.channels, cfg.image_h, cfg.image_w];
    let mut data = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.patch_len());
    for img in images {
        if img.shape() != want {
            return Err(shape_err!("image {:?} but encoder expects {want:?}", img.shape()));
        }
        data.extend(patchify(img, cfg.patch_size)?);
    }
    Tensor::new(&[images.len(), cfg.n_patches(), cfg.patch_len()], data)
}

/// Encodes `[B, N, P]` patches into `[B, d_model]` embeddings.
pub fn encode(f: &mut Forward, cfg: &EncoderConfig, prefix: &str, patches: Tensor) -> Result<Var> {
    let shape = patches.shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.n_patches() || shape[2] != cfg.patch_len() {
        return Err(shape_err!(
            "encoder input {shape:?}, expected [B, {}, {}]",
            cfg.n_patches(),
            cfg.patch_len()
        ));
    }
    let b = shape[0];
    let x = f.graph.constant(patches);
    let tokens = f.linear(x, &format!("{prefix}.patch"))?;
    // Broadcast the classification token over the batch: ones[B,1,1] x cls[1,w].
    let ones = f.graph.constant(Tensor::full(&[b, 1, 1], 1.0));
    let cls = f.param(&format!("{prefix}.cls"))?;
    let cls = f.graph.linear(ones, cls, None)?;
    let x = f.graph.concat(&[cls, tokens], 1)?;
    let pos = f.param(&format!("{prefix}.pos"))?;
    let mut x = f.graph.add_trailing(x, pos)?;
    for i in 0..cfg.depth {
        x = f.encoder_layer(x, &format!("{prefix}.layer{i}"), cfg.n_heads, 0.0)?.0;
    }
    let c = f.graph.narrow(x, 1, 0, 1)?;
    let c = f.graph.reshape(c, &[b, cfg.width])?;
    f.linear(c, &format!("{prefix}.proj"))
}

pub struct Fused {
    /// `[B, latent_dim]`.
    pub latent: Var,
    /// Per fusion layer, `[B * heads, 4, 4]`.
    pub attention: Vec<Var>,
}

/// Fuses four `[B, d_model]` embeddings (camera, depth, range-angle,
/// range-velocity) into a `[B, latent_dim]` latent.
pub fn fuse(f: &mut Forward, cfg: &FusionConfig, embeddings: [Var; 4]) -> Result<Fused> {
    let b = f.graph.shape(embeddings[0])[0];
    let d = cfg.d_model;
    let mut tokens = Vec::with_capacity(4);
    for e in embeddings {
        if f.graph.shape(e) != [b, d] {
            return Err(shape_err!("embedding {:?}, expected [{b}, {d}]", f.graph.shape(e)));
        }
        tokens.push(f.graph.reshape(e, &[b, 1, d])?);
    }
    let mut x = f.graph.concat(&tokens, 1)?;
    let mut attention = Vec::new();
    if !cfg.bypass {
        let types = f.param("fusion.type")?;
        x = f.graph.add_trailing(x, types)?;
        for i in 0..cfg.n_layers {
            let (y, w) = f.encoder_layer(x, &format!("fusion.layer{i}"), cfg.n_heads, cfg.dropout)?;
            x = y;
            attention.push(w);
        }
    }
    let flat = f.graph.reshape(x, &[b, 4 * d])?;
    let latent = f.linear(flat, "fusion.proj")?;
    Ok(Fused { latent, attention })
}

/// Decodes `[B, latent_dim]` into `[B, 1, azimuth, elevation]`.
pub fn decode(f: &mut Forward, cfg: &DecoderConfig, latent: Var) -> Result<Var> {
    let b = f.graph.shape(latent)[0];
    let x = f.linear(latent, "decoder.fc")?;
    let mut x = f.graph.reshape(x, &[b, 1, cfg.seed_h, cfg.seed_w])?;
    let n_conv = cfg.filters.len() + 1;
    for i in 0..n_conv {
        let w = f.param(&format!("decoder.conv{i}.weight"))?;
        let bias = f.param(&format!("decoder.conv{i}.bias"))?;
        x = f.graph.conv_transpose2d(x, w, Some(bias), cfg.stride, cfg.padding)?;
        if i + 1 < n_conv {
            x = f.batch_norm(x, &format!("decoder.bn{i}"))?;
        }
        x = f.graph.relu(x);
    }
    Ok(x)
}

/// Encoder input for one modality of a batch.
#[derive(Debug, Clone)]
pub enum ModalityInput {
    /// `[B, N, P]` patches, encoded inside the pass.
    Patches(Tensor),
    /// `[B, d_model]` precomputed embeddings (frozen encoders).
    Embeddings(Tensor),
}

pub struct Prediction {
    /// `[B, rows, cols]` in raster layout.
    pub raster: Var,
    pub attention: Vec<Var>,
}

/// Full pipeline: encode each modality, fuse, decode, and transpose into
/// raster layout.
pub fn forward_batch(f: &mut Forward, cfg: &ModelConfig, inputs: [ModalityInput; 4]) -> Result<Prediction> {
    let mut embeddings = Vec::with_capacity(4);
    for (m, input) in Modality::ALL.into_iter().zip(inputs) {
        let e = match input {
            ModalityInput::Patches(p) => encode(f, cfg.encoder(m), &encoder_prefix(m), p)?,
            ModalityInput::Embeddings(t) => f.graph.constant(t),
        };
        embeddings.push(e);
    }
    let embeddings: [Var; 4] = embeddings.try_into().unwrap();
    let fused = fuse(f, &cfg.fusion, embeddings)?;
    let out = decode(f, &cfg.decoder, fused.latent)?;
    let b = f.graph.shape(out)[0];
    let t = f.graph.transpose(out)?;
    let raster = f.graph.reshape(t, &[b, cfg.grid.n_rows(), cfg.grid.n_cols()])?;
    Ok(Prediction { raster, attention: fused.attention })
}

/// A configuration together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Validates `config` and initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config, config.seed)?;
        Ok(Self { config, params })
    }

    /// Pairs a configuration with existing parameters, checking that every
    /// expected parameter is present with the right shape.
    pub fn from_parts(config: ModelConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let p = params
                .get_mut(&spec.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", spec.name)))?;
            if p.value.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    p.value.shape(),
                    spec.shape
                )));
            }
            p.trainable = spec.trainable;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    /// Evaluation-mode embeddings `[B, d_model]` for one modality.
    pub fn embed(&self, m: Modality, images: &[&Tensor]) -> Result<Tensor> {
        let cfg = self.config.encoder(m);
        let patches = patch_batch(cfg, images)?;
        let mut f = Forward::new(&self.params, Mode::Eval, 0);
        let e = encode(&mut f, cfg, &encoder_prefix(m), patches)?;
        Ok(f.graph.value(e).clone())
    }

    /// Evaluation-mode prediction for one sample, images ordered camera,
    /// depth, range-angle, range-velocity.
    pub fn predict(&self, images: [&Tensor; 4]) -> Result<PolarRaster> {
        let mut inputs = Vec::with_capacity(4);
        for (m, img) in Modality::ALL.into_iter().zip(images) {
            inputs.push(ModalityInput::Patches(patch_batch(self.config.encoder(m), &[img])?));
        }
        self.predict_inputs(inputs.try_into().unwrap()).map(|mut v| v.remove(0))
    }

    /// Evaluation-mode predictions for a prepared batch, clamped to the
    /// grid range.
    pub fn predict_inputs(&self, inputs: [ModalityInput; 4]) -> Result<Vec<PolarRaster>> {
        let out = self.predict_raw(inputs)?;
        let per = self.config.grid.n_rows() * self.config.grid.n_cols();
        out.data()
            .chunks_exact(per)
            .map(|c| PolarRaster::from_clamped(self.config.grid.clone(), c.to_vec()))
            .collect()
    }

    /// Unclamped evaluation-mode output `[B, rows, cols]`.
    pub fn predict_raw(&self, inputs: [ModalityInput; 4]) -> Result<Tensor> {
        let mut f = Forward::new(&self.params, Mode::Eval, 0);
        let pred = forward_batch(&mut f, &self.config, inputs)?;
        let out = f.graph.value(pred.raster);
        if !out.all_finite() {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        Ok(out.clone())
    }
}
