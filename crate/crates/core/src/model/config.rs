use crate::error::{config_err, Result};
use crate::geometry::GridSpec;
use crate::tensor::conv_output_len;

/// The four input modalities in fusion-slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Camera,
    Depth,
    RangeAngle,
    RangeVelocity,
}

impl Modality {
    pub const ALL: [Modality; 4] =
        [Modality::Camera, Modality::Depth, Modality::RangeAngle, Modality::RangeVelocity];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Camera => "camera",
            Modality::Depth => "depth",
            Modality::RangeAngle => "range_angle",
            Modality::RangeVelocity => "range_velocity",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Patch transformer that turns one modality image into a `d_model` vector.
///
/// Tokens have an internal width `width`; the classification token is
/// projected to `d_model` at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub width: usize,
    pub ffn_dim: usize,
    pub d_model: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_h: 224,
            image_w: 224,
            channels: 1,
            patch_size: 16,
            depth: 2,
            n_heads: 3,
            width: 192,
            ffn_dim: 768,
            d_model: 768,
            frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            patch_size: 8,
            depth: 1,
            n_heads: 4,
            width: 64,
            ffn_dim: 128,
            ..Self::default()
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_h, self.image_w, self.channels, self.patch_size];
        if dims.contains(&0) || self.width == 0 || self.d_model == 0 {
            return Err(config_err!("encoder dimensions must be positive"));
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return Err(config_err!(
                "image {}x{} not divisible by patch size {}",
                self.image_h,
                self.image_w,
                self.patch_size
            ));
        }
        if self.depth > 0 && (self.n_heads == 0 || !self.width.is_multiple_of(self.n_heads) || self.ffn_dim == 0) {
            return Err(config_err!(
                "encoder width {} not divisible by {} heads",
                self.width,
                self.n_heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub n_layers: usize,
    pub latent_dim: usize,
    /// Skip the transformer layers and type embeddings: the concatenated
    /// embeddings go straight to the latent projection.
    pub bypass: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            ffn_dim: 2048,
            dropout: 0.1,
            n_layers: 1,
            latent_dim: 1024,
            bypass: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.latent_dim == 0 {
            return Err(config_err!("fusion dimensions must be positive"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err!(
                "fusion width {} not divisible by {} heads",
                self.d_model,
                self.n_heads
            ));
        }
        if self.ffn_dim == 0 {
            return Err(config_err!("fusion ffn_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Seed layer plus one transposed convolution per filter and a final one to
/// a single channel. `seed_h` runs along azimuth, `seed_w` along elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub seed_h: usize,
    pub seed_w: usize,
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { seed_h: 45, seed_w: 34, filters: vec![256, 128, 64, 64], kernel: 4, stride: 2, padding: 1 }
    }
}

impl DecoderConfig {
    pub fn legacy() -> Self {
        Self { seed_w: 30, ..Self::default() }
    }

    pub fn toy() -> Self {
        Self { seed_h: 6, seed_w: 4, filters: vec![8, 8, 4, 4], ..Self::default() }
    }

    /// Channel count entering each transposed convolution, then the output.
    pub fn channel_chain(&self) -> Vec<usize> {
        let mut chain = vec![1];
        chain.extend(&self.filters);
        chain.push(1);
        chain
    }

    /// Spatial size after each transposed convolution, `(azimuth, elevation)`.
    pub fn spatial_chain(&self) -> Result<Vec<(usize, usize)>> {
        let mut dims = vec![(self.seed_h, self.seed_w)];
        for _ in 0..=self.filters.len() {
            let (h, w) = *dims.last().unwrap();
            let next = |n| conv_output_len(n, self.kernel, self.stride, self.padding);
            match (next(h), next(w)) {
                (Some(a), Some(b)) => dims.push((a, b)),
                _ => return Err(config_err!("decoder collapses spatial size {h}x{w}")),
            }
        }
        Ok(dims)
    }

    /// Output size `(azimuth, elevation)`.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        Ok(*self.spatial_chain()?.last().unwrap())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed_h == 0 || self.seed_w == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(config_err!("decoder dimensions must be positive"));
        }
        if self.filters.contains(&0) {
            return Err(config_err!("decoder filters must be positive"));
        }
        self.spatial_chain().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Camera, depth, range-angle, range-velocity.
    pub encoders: [EncoderConfig; 4],
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoders: std::array::from_fn(|_| EncoderConfig::default()),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            grid: GridSpec::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 45x30 seed with its 960-row grid.
    pub fn legacy() -> Self {
        Self { decoder: DecoderConfig::legacy(), grid: GridSpec::legacy(), ..Self::default() }
    }

    /// Desk-scale model: depth-1 encoders on 64x64 inputs, filters
    /// {8, 8, 4, 4}, 128 x 192 grid.
    pub fn toy() -> Self {
        Self {
            encoders: std::array::from_fn(|_| EncoderConfig::toy()),
            decoder: DecoderConfig::toy(),
            grid: GridSpec::toy(),
            ..Self::default()
        }
    }

    pub fn encoder(&self, m: Modality) -> &EncoderConfig {
        &self.encoders[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (m, enc) in Modality::ALL.iter().zip(&self.encoders) {
            enc.validate().map_err(|e| config_err!("{} encoder: {e}", m.name()))?;
            if enc.d_model != self.fusion.d_model {
                return Err(config_err!(
                    "{} encoder emits {} but fusion expects {}",
                    m.name(),
                    enc.d_model,
                    self.fusion.d_model
                ));
            }
        }
        self.fusion.validate()?;
        self.decoder.validate()?;
        let (az, el) = self.decoder.output_dims()?;
        if (el, az) != (self.grid.n_rows(), self.grid.n_cols()) {
            return Err(config_err!(
                "decoder emits {az}x{el} (azimuth x elevation) but the grid is {}x{}",
                self.grid.n_cols(),
                self.grid.n_rows()
            ));
        }
        Ok(())
    }
}
