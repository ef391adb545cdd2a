//! ViT-style image encoder: 16-pixel patches, learned 2-d positional
//! embeddings, pre-norm transformer blocks. Output is the 1/16-resolution
//! feature grid the classifier and segmenter consume.

use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, LayerNorm, Linear, Mlp, Module, Param};
use crate::numerics::real::Real;
use crate::numerics::{Graph, Tensor, Var};

pub const PATCH_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Fixed at 16; the pipeline's resolution arithmetic assumes it.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Positional embeddings cover a max_grid × max_grid patch grid; smaller
    /// images use the top-left sub-grid.
    pub max_grid: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { patch_size: PATCH_SIZE, embed_dim: 128, depth: 4, heads: 4, max_grid: 8 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size != PATCH_SIZE {
            return Err(Error::config(format!("patch_size must be {PATCH_SIZE}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// The 1/16 feature grid: tokens are stored row-major over the patch grid as
/// an (h·w, D) matrix, so row y·w + x is patch (y, x).
pub struct FeatureGrid<T: Real> {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub tokens: Var<T>,
}

struct EncoderBlock<T: Real> {
    norm1: LayerNorm<T>,
    attn: Attention<T>,
    norm2: LayerNorm<T>,
    mlp: Mlp<T>,
}

impl<T: Real> EncoderBlock<T> {
    fn new(b: &mut Builder<T>, name: &str, dim: usize, heads: usize) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), dim),
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(b, &format!("{name}.mlp"), dim, dim * 4, dim),
        }
    }

    fn forward(&self, g: &Graph<T>, x: &Var<T>) -> Var<T> {
        let h = self.norm1.forward(g, x);
        let x = x.add(&self.attn.forward(g, &h, &h, None));
        let h = self.norm2.forward(g, &x);
        x.add(&self.mlp.forward(g, &h))
    }
}

impl<T: Real> Module<T> for EncoderBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.mlp.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

pub struct VitEncoder<T: Real> {
    pub cfg: EncoderConfig,
    patch_proj: Linear<T>,
    pub pos_embed: Param<T>,
    blocks: Vec<EncoderBlock<T>>,
    final_norm: LayerNorm<T>,
}

impl<T: Real> VitEncoder<T> {
    pub fn new(b: &mut Builder<T>, name: &str, cfg: EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        let in_dim = 3 * cfg.patch_size * cfg.patch_size;
        VitEncoder {
            patch_proj: Linear::new(b, &format!("{name}.patch_proj"), in_dim, d),
            pos_embed: b.uniform(
                format!("{name}.pos_embed"),
                d,
                vec![cfg.max_grid * cfg.max_grid, d],
            ),
            blocks: (0..cfg.depth)
                .map(|i| EncoderBlock::new(b, &format!("{name}.block{i}"), d, cfg.heads))
                .collect(),
            final_norm: LayerNorm::new(b, &format!("{name}.final_norm"), d),
            cfg,
        }
    }

    fn grid_dims(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("expected a 3×H×W image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "image dims {h}×{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        if gh > self.cfg.max_grid || gw > self.cfg.max_grid {
            return Err(Error::shape(format!(
                "patch grid {gh}×{gw} exceeds configured maximum {}",
                self.cfg.max_grid
            )));
        }
        Ok((gh, gw))
    }

    /// Cut the image into 16×16 patches (row-major over the grid) and apply
    /// the shared linear projection. No positional information is added here.
    pub fn patchify(&self, g: &Graph<T>, image: &Tensor<T>) -> Result<Var<T>> {
        let (gh, gw) = self.grid_dims(image)?;
        let p = self.cfg.patch_size;
        let (h, w) = (gh * p, gw * p);
        let mut raw = Vec::with_capacity(gh * gw * 3 * p * p);
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    for dy in 0..p {
                        let row = c * h * w + (py * p + dy) * w + px * p;
                        raw.extend_from_slice(&image.data()[row..row + p]);
                    }
                }
            }
        }
        let patches = g.constant(Tensor::raw(vec![gh * gw, 3 * p * p], raw));
        Ok(self.patch_proj.forward(g, &patches))
    }

    pub fn encode(&self, g: &Graph<T>, image: &Tensor<T>) -> Result<FeatureGrid<T>> {
        let (gh, gw) = self.grid_dims(image)?;
        let tokens = self.patchify(g, image)?;
        let idx: Vec<usize> =
            (0..gh).flat_map(|r| (0..gw).map(move |c| r * self.cfg.max_grid + c)).collect();
        let pos = self.pos_embed.var(g).gather_rows(&idx);
        let mut x = tokens.add(&pos);
        for block in &self.blocks {
            x = block.forward(g, &x);
        }
        let x = self.final_norm.forward(g, &x);
        Ok(FeatureGrid { h: gh, w: gw, dim: self.cfg.embed_dim, tokens: x })
    }
}

impl<T: Real> Module<T> for VitEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.patch_proj.visit(f);
        f(&self.pos_embed);
        for b in &self.blocks {
            b.visit(f);
        }
        self.final_norm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_proj.visit_mut(f);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
    }
}
