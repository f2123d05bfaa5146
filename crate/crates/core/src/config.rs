//! The `key = value` run configuration shared by every command.
//!
//! A file starts from a preset (`preset = default | legacy | toy`,
//! `default` when absent) and overrides individual keys. Every key is listed by
//! [`RunConfig::to_text`] with its current value.

use crate::error::{config_err, Error, Result};
use crate::geometry::{GridSpec, PhiRegion};
use crate::model::{EncoderConfig, Modality, ModelConfig};
use crate::synth::{RadarConfig, SynthConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Default,
    Legacy,
    Toy,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::Legacy => "legacy",
            Preset::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "legacy" => Ok(Preset::Legacy),
            "toy" => Ok(Preset::Toy),
            _ => Err(config_err!("unknown preset {s:?} (default, legacy, toy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub radar: RadarConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Default)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err!("{key}: expected true or false, got {v:?}")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_regions(key: &str, v: &str) -> Result<Vec<PhiRegion>> {
    v.split(',')
        .map(|r| {
            let parts: Vec<&str> = r.trim().split(':').collect();
            let [lo, hi, step] = parts[..] else {
                return Err(config_err!("{key}: region {r:?} is not lo:hi:step"));
            };
            Ok(PhiRegion::new(parse_num(key, lo)?, parse_num(key, hi)?, parse_num(key, step)?))
        })
        .collect()
}

fn encoder_keys(prefix: &str, e: &EncoderConfig, out: &mut Vec<(String, String)>) {
    let fields: [(&str, String); 10] = [
        ("image_h", e.image_h.to_string()),
        ("image_w", e.image_w.to_string()),
        ("channels", e.channels.to_string()),
        ("patch_size", e.patch_size.to_string()),
        ("depth", e.depth.to_string()),
        ("n_heads", e.n_heads.to_string()),
        ("width", e.width.to_string()),
        ("ffn_dim", e.ffn_dim.to_string()),
        ("d_model", e.d_model.to_string()),
        ("frozen", e.frozen.to_string()),
    ];
    out.extend(fields.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
}

fn set_encoder(e: &mut EncoderConfig, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "image_h" => e.image_h = parse_num(key, v)?,
        "image_w" => e.image_w = parse_num(key, v)?,
        "channels" => e.channels = parse_num(key, v)?,
        "patch_size" => e.patch_size = parse_num(key, v)?,
        "depth" => e.depth = parse_num(key, v)?,
        "n_heads" => e.n_heads = parse_num(key, v)?,
        "width" => e.width = parse_num(key, v)?,
        "ffn_dim" => e.ffn_dim = parse_num(key, v)?,
        "d_model" => e.d_model = parse_num(key, v)?,
        "frozen" => e.frozen = parse_bool(key, v)?,
        _ => return Err(config_err!("unknown key {key:?}")),
    }
    Ok(())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Keys that describe the model; a checkpoint is compatible with a
/// configuration when these agree.
fn is_model_key(key: &str) -> bool {
    ["model.", "grid.", "encoder.", "fusion.", "decoder."].iter().any(|p| key.starts_with(p))
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Default => Self { preset: p, model: ModelConfig::default(), train: TrainConfig::default(), radar: RadarConfig::default() },
            Preset::Legacy => Self { preset: p, model: ModelConfig::legacy(), train: TrainConfig::default(), radar: RadarConfig::default() },
            Preset::Toy => Self {
                preset: p,
                model: ModelConfig::toy(),
                train: TrainConfig { normalize_range: true, ..TrainConfig::default() },
                radar: RadarConfig::toy(),
            },
        }
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let g = &m.grid;
        let t = &self.train;
        let r = &self.radar;
        let mut out: Vec<(String, String)> = vec![("preset".into(), self.preset.name().into())];
        let mut push = |k: &str, v: String| out.push((k.to_owned(), v));
        push("model.seed", m.seed.to_string());
        push("grid.theta_lo", g.theta_lo.to_string());
        push("grid.theta_hi", g.theta_hi.to_string());
        push("grid.theta_step", g.theta_step.to_string());
        let regions: Vec<String> = g.phi_regions.iter().map(|p| format!("{}:{}:{}", p.lo, p.hi, p.step)).collect();
        push("grid.phi_regions", regions.join(","));
        push("grid.max_range", g.max_range.to_string());
        for mo in Modality::ALL {
            encoder_keys(&format!("encoder.{}", mo.name()), m.encoder(mo), &mut out);
        }
        let mut push = |k: &str, v: String| out.push((k.to_owned(), v));
        let f = &m.fusion;
        push("fusion.d_model", f.d_model.to_string());
        push("fusion.n_heads", f.n_heads.to_string());
        push("fusion.ffn_dim", f.ffn_dim.to_string());
        push("fusion.dropout", f.dropout.to_string());
        push("fusion.n_layers", f.n_layers.to_string());
        push("fusion.latent_dim", f.latent_dim.to_string());
        push("fusion.bypass", f.bypass.to_string());
        let d = &m.decoder;
        push("decoder.seed_h", d.seed_h.to_string());
        push("decoder.seed_w", d.seed_w.to_string());
        push("decoder.filters", join(&d.filters));
        push("decoder.kernel", d.kernel.to_string());
        push("decoder.stride", d.stride.to_string());
        push("decoder.padding", d.padding.to_string());
        push("train.batch_size", t.batch_size.to_string());
        push("train.epochs", t.epochs.to_string());
        push("train.lr", t.lr.to_string());
        push("train.lr_late", t.lr_late.to_string());
        push("train.lr_switch_epoch", t.lr_switch_epoch.to_string());
        push("train.beta1", t.adam.beta1.to_string());
        push("train.beta2", t.adam.beta2.to_string());
        push("train.eps", t.adam.eps.to_string());
        push("train.seed", t.seed.to_string());
        push("train.band_lo", t.band.0.to_string());
        push("train.band_hi", t.band.1.to_string());
        push("train.alpha", t.alpha.to_string());
        push("train.normalize_range", t.normalize_range.to_string());
        push("train.split_train", t.split.train.to_string());
        push("train.split_val", t.split.val.to_string());
        push("train.split_test", t.split.test.to_string());
        push("radar.n_rx", r.n_rx.to_string());
        push("radar.n_samples", r.n_samples.to_string());
        push("radar.n_chirps", r.n_chirps.to_string());
        push("radar.r_max", r.r_max.to_string());
        push("radar.v_max", r.v_max.to_string());
        out
    }

    /// Overrides one key. `preset` cannot be set this way since it resets
    /// every other key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, r) = (&mut self.model, &mut self.train, &mut self.radar);
        if let Some(rest) = key.strip_prefix("encoder.") {
            let (name, field) = rest.split_once('.').ok_or_else(|| config_err!("unknown key {key:?}"))?;
            let mo = Modality::ALL
                .into_iter()
                .find(|mo| mo.name() == name)
                .ok_or_else(|| config_err!("unknown key {key:?}"))?;
            return set_encoder(&mut m.encoders[mo.index()], field, key, v);
        }
        match key {
            "model.seed" => m.seed = parse_num(key, v)?,
            "grid.theta_lo" => m.grid.theta_lo = parse_num(key, v)?,
            "grid.theta_hi" => m.grid.theta_hi = parse_num(key, v)?,
            "grid.theta_step" => m.grid.theta_step = parse_num(key, v)?,
            "grid.phi_regions" => m.grid.phi_regions = parse_regions(key, v)?,
            "grid.max_range" => m.grid.max_range = parse_num(key, v)?,
            "fusion.d_model" => m.fusion.d_model = parse_num(key, v)?,
            "fusion.n_heads" => m.fusion.n_heads = parse_num(key, v)?,
            "fusion.ffn_dim" => m.fusion.ffn_dim = parse_num(key, v)?,
            "fusion.dropout" => m.fusion.dropout = parse_num(key, v)?,
            "fusion.n_layers" => m.fusion.n_layers = parse_num(key, v)?,
            "fusion.latent_dim" => m.fusion.latent_dim = parse_num(key, v)?,
            "fusion.bypass" => m.fusion.bypass = parse_bool(key, v)?,
            "decoder.seed_h" => m.decoder.seed_h = parse_num(key, v)?,
            "decoder.seed_w" => m.decoder.seed_w = parse_num(key, v)?,
            "decoder.filters" => m.decoder.filters = parse_list(key, v)?,
            "decoder.kernel" => m.decoder.kernel = parse_num(key, v)?,
            "decoder.stride" => m.decoder.stride = parse_num(key, v)?,
            "decoder.padding" => m.decoder.padding = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.lr_late" => t.lr_late = parse_num(key, v)?,
            "train.lr_switch_epoch" => t.lr_switch_epoch = parse_num(key, v)?,
            "train.beta1" => t.adam.beta1 = parse_num(key, v)?,
            "train.beta2" => t.adam.beta2 = parse_num(key, v)?,
            "train.eps" => t.adam.eps = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.band_lo" => t.band.0 = parse_num(key, v)?,
            "train.band_hi" => t.band.1 = parse_num(key, v)?,
            "train.alpha" => t.alpha = parse_num(key, v)?,
            "train.normalize_range" => t.normalize_range = parse_bool(key, v)?,
            "train.split_train" => t.split.train = parse_num(key, v)?,
            "train.split_val" => t.split.val = parse_num(key, v)?,
            "train.split_test" => t.split.test = parse_num(key, v)?,
            "radar.n_rx" => r.n_rx = parse_num(key, v)?,
            "radar.n_samples" => r.n_samples = parse_num(key, v)?,
            "radar.n_chirps" => r.n_chirps = parse_num(key, v)?,
            "radar.r_max" => r.r_max = parse_num(key, v)?,
            "radar.v_max" => r.v_max = parse_num(key, v)?,
            _ => return Err(config_err!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses and validates a configuration file body.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unvalidated(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model.grid)?;
        self.radar.validate()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Only the model keys, used to judge checkpoint compatibility.
    pub fn model_text(&self) -> String {
        self.entries().into_iter().filter(|(k, _)| is_model_key(k)).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Synthesis sizes: the camera and depth images at their encoder
    /// resolution.
    pub fn synth_config(&self) -> SynthConfig {
        let enc = |m| {
            let e = self.model.encoder(m);
            (e.image_h, e.image_w)
        };
        SynthConfig {
            camera: enc(Modality::Camera),
            depth: enc(Modality::Depth),
            radar: self.radar.clone(),
            grid: self.model.grid.clone(),
        }
    }
}

/// A grid description: either a full run configuration or a file holding
/// only `grid.*` keys (and optionally `preset`).
pub fn parse_grid(text: &str) -> Result<GridSpec> {
    let cfg = RunConfig::parse_unvalidated(text)?;
    cfg.model.grid.validate()?;
    Ok(cfg.model.grid)
}

impl RunConfig {
    fn parse_unvalidated(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        let mut body = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected `key = value`", i + 1))?;
            let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
            if seen.contains(&k) {
                return Err(config_err!("line {}: duplicate key {k:?}", i + 1));
            }
            seen.push(k.clone());
            if k == "preset" {
                cfg = Self::preset(Preset::parse(&v)?);
            } else {
                body.push((i + 1, k, v));
            }
        }
        for (line, k, v) in body {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(msg) => config_err!("line {line}: {msg}"),
                other => other,
            })?;
        }
        Ok(cfg)
    }
}
