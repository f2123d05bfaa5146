use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{EncoderConfig, FusionConfig, ModelConfig, Modality};
use crate::error::Result;
use crate::tensor::{ParamStore, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal { mean: f64, std: f64 },
    Const(f32),
}

impl Init {
    const WEIGHT: Init = Init::Normal { mean: 0.0, std: INIT_STD };
    const GAIN: Init = Init::Normal { mean: 1.0, std: INIT_STD };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// False for frozen encoders and batch-norm running statistics.
    pub trainable: bool,
    /// False for running statistics, which are state rather than weights.
    pub learnable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Specs {
    out: Vec<ParamSpec>,
    trainable: bool,
}

impl Specs {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let trainable = self.trainable;
        self.out.push(ParamSpec { name, shape: shape.to_vec(), init, trainable, learnable: true });
    }

    fn linear(&mut self, prefix: &str, i: usize, o: usize) {
        self.add(format!("{prefix}.weight"), &[i, o], Init::WEIGHT);
        self.add(format!("{prefix}.bias"), &[o], Init::Const(0.0));
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.gain"), &[d], Init::Const(1.0));
        self.add(format!("{prefix}.bias"), &[d], Init::Const(0.0));
    }

    fn encoder_layer(&mut self, prefix: &str, d: usize, ffn: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        for p in ["q", "k", "v", "o"] {
            self.add(format!("{prefix}.attn.w{p}"), &[d, d], Init::WEIGHT);
            self.add(format!("{prefix}.attn.b{p}"), &[d], Init::Const(0.0));
        }
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.ffn.fc1"), d, ffn);
        self.linear(&format!("{prefix}.ffn.fc2"), ffn, d);
    }
}

pub fn encoder_prefix(m: Modality) -> String {
    format!("encoder.{}", m.name())
}

fn encoder_specs(s: &mut Specs, prefix: &str, cfg: &EncoderConfig) {
    s.trainable = !cfg.frozen;
    let w = cfg.width;
    s.linear(&format!("{prefix}.patch"), cfg.patch_len(), w);
    s.add(format!("{prefix}.cls"), &[1, w], Init::WEIGHT);
    s.add(format!("{prefix}.pos"), &[cfg.n_patches() + 1, w], Init::WEIGHT);
    for i in 0..cfg.depth {
        s.encoder_layer(&format!("{prefix}.layer{i}"), w, cfg.ffn_dim);
    }
    s.linear(&format!("{prefix}.proj"), w, cfg.d_model);
}

fn fusion_specs(s: &mut Specs, cfg: &FusionConfig) {
    s.trainable = true;
    let d = cfg.d_model;
    if !cfg.bypass {
        s.add("fusion.type".into(), &[4, d], Init::WEIGHT);
        for i in 0..cfg.n_layers {
            s.encoder_layer(&format!("fusion.layer{i}"), d, cfg.ffn_dim);
        }
    }
    s.linear("fusion.proj", 4 * d, cfg.latent_dim);
}

/// Every parameter of the model, in store order, without allocating.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs { out: Vec::new(), trainable: true };
    for m in Modality::ALL {
        encoder_specs(&mut s, &encoder_prefix(m), cfg.encoder(m));
    }
    fusion_specs(&mut s, &cfg.fusion);

    s.trainable = true;
    let dec = &cfg.decoder;
    s.linear("decoder.fc", cfg.fusion.latent_dim, dec.seed_h * dec.seed_w);
    let chain = dec.channel_chain();
    for (i, pair) in chain.windows(2).enumerate() {
        let (cin, cout) = (pair[0], pair[1]);
        s.add(format!("decoder.conv{i}.weight"), &[cin, cout, dec.kernel, dec.kernel], Init::WEIGHT);
        s.add(format!("decoder.conv{i}.bias"), &[cout], Init::Const(0.0));
        if i + 2 < chain.len() {
            s.add(format!("decoder.bn{i}.gain"), &[cout], Init::GAIN);
            s.add(format!("decoder.bn{i}.bias"), &[cout], Init::Const(0.0));
            for (stat, v) in [("running_mean", 0.0), ("running_var", 1.0)] {
                s.out.push(ParamSpec {
                    name: format!("decoder.bn{i}.{stat}"),
                    shape: vec![cout],
                    init: Init::Const(v),
                    trainable: false,
                    learnable: false,
                });
            }
        }
    }
    s.out
}

/// Number of learnable weights (running statistics excluded).
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().filter(|p| p.learnable).map(ParamSpec::numel).sum()
}

/// Fresh parameters drawn deterministically from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let n = spec.numel();
        let data = match spec.init {
            Init::Const(v) => vec![v; n],
            Init::Normal { mean, std } => {
                let dist = Normal::new(mean, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
        };
        store.insert(&spec.name, Tensor::new(&spec.shape, data)?, spec.trainable)?;
    }
    Ok(store)
}
