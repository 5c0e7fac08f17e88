//! Toy ViT: 14-pixel tiles, per-patch full attention, 2x2 pixel shuffle and
//! a linear projection into the language model's embedding space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::composite::{slot_view, Patch, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::layer::layer_madds;
use crate::nn::ops::{self, AttnOptions};
use crate::nn::params::{init_layer, seeded_tensor};
use crate::nn::{DecoderLayer, Meter, ParamSet, Tensor};

pub const VIT_ROLE: &str = "vit.";
pub const TILE: usize = 14;
pub const TILE_GRID: usize = PATCH_SIZE / TILE;
pub const TILES_PER_PATCH: usize = TILE_GRID * TILE_GRID;
pub const TILE_DIM: usize = 3 * TILE * TILE;
pub const SHUFFLE: usize = 2;
pub const TOKEN_GRID: usize = TILE_GRID / SHUFFLE;
pub const TOKENS_PER_PATCH: usize = TOKEN_GRID * TOKEN_GRID;
/// Side of the pixel square a post-shuffle token covers.
pub const TOKEN_FOOTPRINT: usize = TILE * SHUFFLE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Width of the aligned tokens handed to the language model.
    pub d_out: usize,
    pub seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, n_layers: 4, d_ff: 256, d_out: 64, seed: 0 }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "vision d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.d_out == 0 {
            return Err(Error::Config("vision d_ff and d_out must be positive".into()));
        }
        Ok(())
    }

    /// Multiply-adds to encode one patch: tile embedding, the layers,
    /// the shuffle projection and the alignment projection.
    pub fn patch_madds(&self) -> u64 {
        let n = TILES_PER_PATCH as u64;
        let d = self.d_model as u64;
        n * TILE_DIM as u64 * d
            + self.n_layers as u64 * layer_madds(n, n * n, d, self.d_ff as u64)
            + TOKENS_PER_PATCH as u64 * 4 * d * d
            + TOKENS_PER_PATCH as u64 * d * self.d_out as u64
    }
}

pub fn vision_init(config: &VisionConfig) -> Result<ParamSet> {
    config.validate()?;
    let (d, seed, r) = (config.d_model, config.seed, VIT_ROLE);
    let mut p = ParamSet::new();
    let t = |path: &str, shape: &[usize], scale: f32| seeded_tensor(seed, r, path, shape, scale);
    p.insert(format!("{r}tile_w"), t("tile_w", &[TILE_DIM, d], (1.0 / TILE_DIM as f32).sqrt()));
    p.insert(format!("{r}tile_b"), Tensor::zeros(&[d]));
    p.insert(format!("{r}pos_emb"), t("pos_emb", &[TILES_PER_PATCH, d], 0.1));
    for i in 0..config.n_layers {
        init_layer(&mut p, seed, r, &format!("layer{i}."), d, config.d_ff);
    }
    p.insert(format!("{r}ln_f.g"), Tensor::full(&[d], 1.0));
    p.insert(format!("{r}ln_f.b"), Tensor::zeros(&[d]));
    p.insert(format!("{r}shuffle_w"), t("shuffle_w", &[4 * d, d], (1.0 / (4 * d) as f32).sqrt()));
    p.insert(format!("{r}shuffle_b"), Tensor::zeros(&[d]));
    p.insert(
        format!("{r}align_w"),
        t("align_w", &[d, config.d_out], (1.0 / d as f32).sqrt()),
    );
    p.insert(format!("{r}align_b"), Tensor::zeros(&[config.d_out]));
    Ok(p)
}

/// Where a visual token came from: composite slot, view, the patch within
/// the view, and the token's cell in the 16x16 post-shuffle grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOrigin {
    pub slot: u8,
    pub view_id: u8,
    pub patch_index: u8,
    pub row: u8,
    pub col: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    /// `[n_patches * 256, d_out]`
    pub tokens: Tensor,
    pub origin: Vec<TokenOrigin>,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    config: VisionConfig,
    tile_w: Tensor,
    tile_b: Tensor,
    pos_emb: Tensor,
    layers: Vec<DecoderLayer>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    shuffle_w: Tensor,
    shuffle_b: Tensor,
    align_w: Tensor,
    align_b: Tensor,
}

impl VisionEncoder {
    pub fn from_params(config: &VisionConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let get = |n: &str| params.get(&format!("{VIT_ROLE}{n}")).cloned();
        let layers = (0..config.n_layers)
            .map(|i| DecoderLayer::from_params(params, &format!("{VIT_ROLE}layer{i}."), config.n_heads))
            .collect::<Result<Vec<_>>>()?;
        let align_w = get("align_w")?;
        if align_w.shape() != [config.d_model, config.d_out] {
            return Err(Error::Config(format!(
                "vit.align_w has shape {:?}, config wants [{}, {}]",
                align_w.shape(),
                config.d_model,
                config.d_out
            )));
        }
        Ok(Self {
            config: *config,
            tile_w: get("tile_w")?,
            tile_b: get("tile_b")?,
            pos_emb: get("pos_emb")?,
            layers,
            ln_f_g: get("ln_f.g")?,
            ln_f_b: get("ln_f.b")?,
            shuffle_w: get("shuffle_w")?,
            shuffle_b: get("shuffle_b")?,
            align_w,
            align_b: get("align_b")?,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.config
    }

    /// Encodes one patch to `[256, d_out]` aligned tokens.
    pub fn encode_patch(&self, pixels: &Tensor, meter: &Meter) -> Result<Tensor> {
        let mut x = ops::linear(&tiles(pixels)?, &self.tile_w, Some(&self.tile_b), meter)?;
        x.add_assign(&self.pos_emb)?;
        for layer in &self.layers {
            x = layer.forward(&x, None, AttnOptions::full(), meter)?.0;
        }
        let x = ops::layer_norm(&x, &self.ln_f_g, &self.ln_f_b)?;
        let x = pixel_shuffle_reduce(&x, SHUFFLE, &self.shuffle_w, Some(&self.shuffle_b), meter)?;
        ops::linear(&x, &self.align_w, Some(&self.align_b), meter)
    }
}

/// Flattens a `[3, 448, 448]` patch into `[1024, 588]` tile rows,
/// each row ordered channel, then tile row, then tile column.
pub fn tiles(pixels: &Tensor) -> Result<Tensor> {
    if pixels.shape() != [3, PATCH_SIZE, PATCH_SIZE] {
        return Err(Error::Shape(format!("patch {:?}, expected [3, 448, 448]", pixels.shape())));
    }
    let src = pixels.data();
    let mut out = Vec::with_capacity(TILES_PER_PATCH * TILE_DIM);
    for ty in 0..TILE_GRID {
        for tx in 0..TILE_GRID {
            for c in 0..3 {
                for dy in 0..TILE {
                    let start = (c * PATCH_SIZE + ty * TILE + dy) * PATCH_SIZE + tx * TILE;
                    out.extend_from_slice(&src[start..start + TILE]);
                }
            }
        }
    }
    Ok(Tensor::from_rows(TILES_PER_PATCH, TILE_DIM, out))
}

/// Merges each `factor x factor` neighbourhood of a square token grid by
/// channel concatenation (row-major within the neighbourhood).
pub fn pixel_shuffle(tokens: &Tensor, factor: usize) -> Result<Tensor> {
    let n = tokens.rows();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || factor == 0 || !side.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "{n} tokens do not form a square grid divisible by {factor}"
        )));
    }
    let d = tokens.cols();
    let out_side = side / factor;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..out_side {
        for j in 0..out_side {
            for di in 0..factor {
                for dj in 0..factor {
                    out.extend_from_slice(tokens.row((i * factor + di) * side + j * factor + dj));
                }
            }
        }
    }
    Ok(Tensor::from_rows(out_side * out_side, d * factor * factor, out))
}

/// Pixel shuffle followed by a linear projection `w: [factor² · d, d_out]`.
pub fn pixel_shuffle_reduce(
    tokens: &Tensor,
    factor: usize,
    w: &Tensor,
    b: Option<&Tensor>,
    meter: &Meter,
) -> Result<Tensor> {
    ops::linear(&pixel_shuffle(tokens, factor)?, w, b, meter)
}

/// Encodes patches independently (in parallel) and concatenates their
/// tokens in the given slot order.
pub fn vit_encode(patches: &[Patch], encoder: &VisionEncoder, meter: &Meter) -> Result<VisualTokens> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("no patches to encode".into()));
    }
    let blocks = patches
        .par_iter()
        .map(|p| encoder.encode_patch(&p.pixels, meter))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = blocks.iter().collect();
    let tokens = Tensor::vstack(&refs)?;
    let mut origin = Vec::with_capacity(tokens.rows());
    for p in patches {
        let (view, patch_index) = slot_view(p.slot);
        for t in 0..TOKENS_PER_PATCH {
            origin.push(TokenOrigin {
                slot: p.slot as u8,
                view_id: view as u8,
                patch_index: patch_index as u8,
                row: (t / TOKEN_GRID) as u8,
                col: (t % TOKEN_GRID) as u8,
            });
        }
    }
    Ok(VisualTokens { tokens, origin })
}
