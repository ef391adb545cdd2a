//! Multi-scale feature pyramid {F4, F8, F16, F32} built from the single 1/16
//! grid with per-level heads: nearest upsampling + 3×3 convs upward, a 1×1
//! projection at 1/16, and a stride-2 3×3 conv downward. No top-down fusion.

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::nn::{Builder, Module, Param};
use crate::numerics::real::Real;
use crate::numerics::{Graph, Var};

pub const SCALES: [usize; 4] = [4, 8, 16, 32];

pub struct ConvLayer<T: Real> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            kernel: b.uniform(format!("{name}.kernel"), c_in * k * k, vec![c_out, c_in, k, k]),
            bias: b.zeros(format!("{name}.bias"), vec![c_out]),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: &Var<T>) -> Var<T> {
        x.conv2d(&self.kernel.var(g), Some(&self.bias.var(g)), self.stride, self.padding)
    }

    /// Overwrite with an identity-preserving kernel (center tap on the
    /// channel diagonal, zero bias). Test hook for degenerate configurations.
    pub fn set_identity(&mut self) {
        let s = self.kernel.value.shape().to_vec();
        let (o, c, k) = (s[0], s[1], s[2]);
        assert_eq!(o, c, "identity kernel needs matching channels");
        let data = self.kernel.value.data_mut();
        for v in data.iter_mut() {
            *v = T::zero();
        }
        let mid = k / 2;
        for ch in 0..o {
            data[((ch * c + ch) * k + mid) * k + mid] = T::one();
        }
        for v in self.bias.value.data_mut() {
            *v = T::zero();
        }
    }
}

impl<T: Real> Module<T> for ConvLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.kernel);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

/// One pyramid level in (D, H/scale, W/scale) conv layout.
pub struct PyramidLevel<T: Real> {
    pub scale: usize,
    pub h: usize,
    pub w: usize,
    pub map: Var<T>,
}

pub struct FeaturePyramid<T: Real> {
    /// Levels ordered by scale: 4, 8, 16, 32.
    pub levels: Vec<PyramidLevel<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn level(&self, scale: usize) -> &PyramidLevel<T> {
        self.levels.iter().find(|l| l.scale == scale).expect("pyramid has all four scales")
    }
}

pub struct FeaturePyramidNet<T: Real> {
    pub f4_stage1: ConvLayer<T>,
    pub f4_stage2: ConvLayer<T>,
    pub f8_stage: ConvLayer<T>,
    pub f16_proj: ConvLayer<T>,
    pub f32_conv: ConvLayer<T>,
    /// Shared-dimension 1×1 output projections, one per level (scale order).
    pub out_proj: Vec<ConvLayer<T>>,
}

impl<T: Real> FeaturePyramidNet<T> {
    pub fn new(b: &mut Builder<T>, name: &str, dim: usize) -> Self {
        FeaturePyramidNet {
            f4_stage1: ConvLayer::new(b, &format!("{name}.f4_stage1"), dim, dim, 3, 1),
            f4_stage2: ConvLayer::new(b, &format!("{name}.f4_stage2"), dim, dim, 3, 1),
            f8_stage: ConvLayer::new(b, &format!("{name}.f8_stage"), dim, dim, 3, 1),
            f16_proj: ConvLayer::new(b, &format!("{name}.f16_proj"), dim, dim, 1, 1),
            f32_conv: ConvLayer::new(b, &format!("{name}.f32_conv"), dim, dim, 3, 2),
            out_proj: SCALES
                .iter()
                .map(|s| ConvLayer::new(b, &format!("{name}.out_proj{s}"), dim, dim, 1, 1))
                .collect(),
        }
    }

    pub fn build_pyramid(&self, g: &Graph<T>, f16: &FeatureGrid<T>) -> Result<FeaturePyramid<T>> {
        let (h, w, d) = (f16.h, f16.w, f16.dim);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "1/16 grid {h}×{w} must have even dims for the 1/32 level"
            )));
        }
        // (N,D) tokens → (D,N) → (D,h,w) conv layout.
        let base = f16.tokens.transpose2d().reshape(vec![d, h, w]);

        let f8_pre = self.f8_stage.forward(g, &base.upsample2());
        let f4_mid = self.f4_stage1.forward(g, &base.upsample2());
        let f4_pre = self.f4_stage2.forward(g, &f4_mid.upsample2());
        let f16_pre = self.f16_proj.forward(g, &base);
        let f32_pre = self.f32_conv.forward(g, &base);

        let maps = [f4_pre, f8_pre, f16_pre, f32_pre];
        let mut levels = Vec::with_capacity(4);
        for ((scale, pre), proj) in SCALES.iter().zip(maps).zip(&self.out_proj) {
            let map = proj.forward(g, &pre);
            let s = map.shape().to_vec();
            levels.push(PyramidLevel { scale: *scale, h: s[1], w: s[2], map });
        }
        Ok(FeaturePyramid { levels })
    }
}

impl<T: Real> Module<T> for FeaturePyramidNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.f4_stage1.visit(f);
        self.f4_stage2.visit(f);
        self.f8_stage.visit(f);
        self.f16_proj.visit(f);
        self.f32_conv.visit(f);
        for p in &self.out_proj {
            p.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.f4_stage1.visit_mut(f);
        self.f4_stage2.visit_mut(f);
        self.f8_stage.visit_mut(f);
        self.f16_proj.visit_mut(f);
        self.f32_conv.visit_mut(f);
        for p in &mut self.out_proj {
            p.visit_mut(f);
        }
    }
}
