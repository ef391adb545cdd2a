//! Patch-aware classifier: a global authenticity prediction, one prediction
//! per 16×16 patch, and a learned fusion of both, trained with the poly
//! focal + binary cross-entropy objective.

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, Mlp, Module, Param};
use crate::numerics::real::{lit, Real};
use crate::numerics::{Graph, Tensor, Var};

/// Poly focal loss coefficients. Stage-1 patch loss uses α=0.85; the stage-2
/// mask loss uses α=0.8 (both with γ=2, ε=1).
#[derive(Debug, Clone, Copy)]
pub struct PolyFocalParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl PolyFocalParams {
    pub const STAGE1: PolyFocalParams = PolyFocalParams { alpha: 0.85, gamma: 2.0, epsilon: 1.0 };
    pub const STAGE2_MASK: PolyFocalParams = PolyFocalParams { alpha: 0.8, gamma: 2.0, epsilon: 1.0 };
}

const PROB_CLAMP: f64 = 1e-7;

/// Poly focal loss over probabilities of the forged class.
///
/// Per element, with t the target and q the clamped probability:
///   p = t·q + (1−t)·(1−q)          (probability of the true class)
///   a = α·t + (1−α)·(1−t)          (class weighting)
///   ℓ = −a·(1−p)^γ·log p + ε·(1−p)^{γ+1}
/// Returns the mean over all elements. Targets may be soft (in [0,1]); the
/// binary case is the usual α_t focal form plus the polynomial term.
pub fn poly_focal_loss<T: Real>(
    g: &Graph<T>,
    probs: &Var<T>,
    targets: &Tensor<T>,
    params: PolyFocalParams,
) -> Var<T> {
    assert_eq!(probs.shape(), targets.shape(), "poly focal loss shape mismatch");
    let q = probs.clamp(lit::<T>(PROB_CLAMP), lit::<T>(1.0 - PROB_CLAMP));
    // p = (2t−1)·q + (1−t) elementwise.
    let two_t_minus_1 =
        g.constant(Tensor::raw(targets.shape().to_vec(), targets.data().iter().map(|&t| lit::<T>(2.0) * t - T::one()).collect()));
    let one_minus_t =
        g.constant(Tensor::raw(targets.shape().to_vec(), targets.data().iter().map(|&t| T::one() - t).collect()));
    let p = q.mul(&two_t_minus_1).add(&one_minus_t);
    let weight = g.constant(Tensor::raw(
        targets.shape().to_vec(),
        targets
            .data()
            .iter()
            .map(|&t| lit::<T>(params.alpha) * t + lit::<T>(1.0 - params.alpha) * (T::one() - t))
            .collect(),
    ));
    let one_minus_p = p.neg().add_scalar(T::one());
    let focal = one_minus_p
        .powf(lit::<T>(params.gamma))
        .mul(&p.ln())
        .mul(&weight)
        .neg();
    let poly = one_minus_p.powf(lit::<T>(params.gamma + 1.0)).scale(lit::<T>(params.epsilon));
    focal.add(&poly).mean_all()
}

/// Patch-level ground truth: a patch is forged iff it contains at least one
/// forged pixel.
pub fn patch_targets_from_mask<T: Real>(mask: &[u8], h: usize, w: usize, patch: usize) -> Result<Tensor<T>> {
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("mask dims {h}×{w} not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut grid = vec![T::zero(); gh * gw];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != 0 {
                grid[(y / patch) * gw + x / patch] = T::one();
            }
        }
    }
    Ok(Tensor::raw(vec![gh * gw, 1], grid))
}

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    /// Table-2 style ablation switch: off = global prediction only.
    pub patch_prediction: bool,
}

pub struct ClassifierOutput<T: Real> {
    pub global_logit: Var<T>,
    /// (h·w, 1) patch logits; absent when patch prediction is ablated.
    pub patch_logits: Option<Var<T>>,
    pub patch_probs: Option<Var<T>>,
    pub fused_logit: Var<T>,
    /// ŷ, the fused authenticity probability (1 = forged).
    pub fused_prob: Var<T>,
    pub grid: (usize, usize),
}

pub struct PatchClassifier<T: Real> {
    pub cfg: ClassifierConfig,
    global_head: Mlp<T>,
    patch_head: Option<Mlp<T>>,
    pub fusion: Linear<T>,
}

impl<T: Real> PatchClassifier<T> {
    pub fn new(b: &mut Builder<T>, name: &str, cfg: ClassifierConfig) -> Self {
        let d = cfg.embed_dim;
        let fusion_in = if cfg.patch_prediction { 3 } else { 1 };
        PatchClassifier {
            global_head: Mlp::new(b, &format!("{name}.global_head"), d, d, 1),
            patch_head: if cfg.patch_prediction {
                Some(Mlp::new(b, &format!("{name}.patch_head"), d, d, 1))
            } else {
                None
            },
            fusion: Linear::new(b, &format!("{name}.fusion"), fusion_in, 1),
            cfg,
        }
    }

    pub fn classify(&self, g: &Graph<T>, features: &FeatureGrid<T>) -> ClassifierOutput<T> {
        let pooled = features.tokens.mean_axis0();
        let global_logit = self.global_head.forward(g, &pooled);

        let (patch_logits, patch_probs, fusion_in) = match &self.patch_head {
            Some(head) => {
                let logits = head.forward(g, &features.tokens);
                let probs = logits.sigmoid();
                let mean = logits.mean_all().reshape(vec![1, 1]);
                let max = logits.max_all().reshape(vec![1, 1]);
                let fin = Var::concat_cols(&[global_logit.clone(), mean, max]);
                (Some(logits), Some(probs), fin)
            }
            None => (None, None, global_logit.clone()),
        };
        let fused_logit = self.fusion.forward(g, &fusion_in);
        let fused_prob = fused_logit.sigmoid();
        ClassifierOutput {
            global_logit,
            patch_logits,
            patch_probs,
            fused_logit,
            fused_prob,
            grid: (features.h, features.w),
        }
    }
}

impl<T: Real> Module<T> for PatchClassifier<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.global_head.visit(f);
        if let Some(p) = &self.patch_head {
            p.visit(f);
        }
        self.fusion.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.global_head.visit_mut(f);
        if let Some(p) = &mut self.patch_head {
            p.visit_mut(f);
        }
        self.fusion.visit_mut(f);
    }
}

/// L_cls = L_patch (poly focal over the patch grid) + L_global (binary
/// cross-entropy between ŷ and the image label, through stable log-sigmoid).
pub fn classification_loss<T: Real>(
    g: &Graph<T>,
    output: &ClassifierOutput<T>,
    label: u8,
    patch_targets: Option<&Tensor<T>>,
    params: PolyFocalParams,
) -> Var<T> {
    let y = lit::<T>(label as f64);
    let z = &output.fused_logit;
    // −[y·logσ(z) + (1−y)·logσ(−z)]
    let global = z
        .log_sigmoid()
        .scale(y)
        .add(&z.neg().log_sigmoid().scale(T::one() - y))
        .neg()
        .mean_all();
    match (&output.patch_probs, patch_targets) {
        (Some(probs), Some(targets)) => {
            let patch = poly_focal_loss(g, probs, targets, params);
            patch.add(&global)
        }
        _ => global,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FeatureGrid;
    use crate::numerics::fdcheck::check_gradients;
    use crate::numerics::rng::{stream, uniform_fan_in};
    use rand::Rng;

    fn grid_of(g: &Graph<f64>, tokens: Tensor<f64>, h: usize, w: usize) -> FeatureGrid<f64> {
        let d = tokens.shape()[1];
        FeatureGrid { h, w, dim: d, tokens: g.constant(tokens) }
    }

    #[test]
    fn poly_focal_frozen_scalar_case() {
        // Single forged element at q = 0.5 with stage-1 coefficients:
        // 0.85·0.25·ln2 + 0.125 = 0.2722937758689884
        let g = Graph::no_grad();
        let probs = g.constant(Tensor::scalar(0.5f64));
        let target = Tensor::scalar(1.0f64);
        let loss = poly_focal_loss(&g, &probs, &target, PolyFocalParams::STAGE1);
        assert!((loss.item() - 0.2722937758689884).abs() < 1e-12);
    }

    #[test]
    fn poly_focal_vanishes_on_perfect_predictions() {
        let g = Graph::no_grad();
        let probs = g.constant(Tensor::from_vec(vec![4], vec![1.0f64, 1.0, 0.0, 0.0]).unwrap());
        let targets = Tensor::from_vec(vec![4], vec![1.0f64, 1.0, 0.0, 0.0]).unwrap();
        let loss = poly_focal_loss(&g, &probs, &targets, PolyFocalParams::STAGE1);
        assert!(loss.item() <= 1e-5);
    }

    #[test]
    fn poly_focal_strictly_decreasing_in_p() {
        let mut prev = f64::INFINITY;
        for i in 1..10 {
            let q = i as f64 * 0.1;
            let g = Graph::no_grad();
            let probs = g.constant(Tensor::scalar(q));
            let loss = poly_focal_loss(&g, &probs, &Tensor::scalar(1.0), PolyFocalParams::STAGE1);
            assert!(loss.item() < prev, "not decreasing at q={q}");
            prev = loss.item();
        }
    }

    #[test]
    fn poly_focal_reduces_to_scaled_bce() {
        // γ=0, ε=0, α=0.5 → 0.5 × mean binary cross-entropy.
        let params = PolyFocalParams { alpha: 0.5, gamma: 0.0, epsilon: 0.0 };
        let mut rng = stream(31, "focal-bce");
        for _ in 0..100 {
            let n = 1 + (rng.random::<u64>() % 8) as usize;
            let qs: Vec<f64> = (0..n).map(|_| 0.02 + 0.96 * rng.random::<f64>()).collect();
            let ts: Vec<f64> = (0..n).map(|_| (rng.random::<u64>() % 2) as f64).collect();
            let g = Graph::no_grad();
            let probs = g.constant(Tensor::raw(vec![n], qs.clone()));
            let loss = poly_focal_loss(&g, &probs, &Tensor::raw(vec![n], ts.clone()), params);
            let bce = qs
                .iter()
                .zip(&ts)
                .map(|(&q, &t)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
                .sum::<f64>()
                / n as f64;
            assert!((loss.item() - 0.5 * bce).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_targets_any_pixel_rule() {
        let (h, w) = (64, 64);
        let zeros = vec![0u8; h * w];
        let t: Tensor<f64> = patch_targets_from_mask(&zeros, h, w, 16).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let ones = vec![1u8; h * w];
        let t: Tensor<f64> = patch_targets_from_mask(&ones, h, w, 16).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));

        // Single forged pixel at (row 17, col 3) → exactly patch (1,0).
        let mut m = vec![0u8; h * w];
        m[17 * w + 3] = 1;
        let t: Tensor<f64> = patch_targets_from_mask(&m, h, w, 16).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if (r, c) == (1, 0) { 1.0 } else { 0.0 };
                assert_eq!(t.data()[r * 4 + c], want);
            }
        }

        assert!(patch_targets_from_mask::<f64>(&[0u8; 60 * 64], 60, 64, 16).is_err());
    }

    fn test_classifier(seed: u64, patch: bool) -> PatchClassifier<f64> {
        let mut b = Builder::new(stream(seed, "cls"));
        PatchClassifier::new(&mut b, "classifier", ClassifierConfig { embed_dim: 8, patch_prediction: patch })
    }

    #[test]
    fn classify_shapes_and_weight_sharing() {
        let cls = test_classifier(40, true);
        let g = Graph::no_grad();
        // All tokens identical → identical patch logits (shared per-token MLP).
        let token = (0..8).map(|i| i as f64 * 0.1).collect::<Vec<_>>();
        let tokens = Tensor::raw(vec![16, 8], token.repeat(16));
        let out = cls.classify(&g, &grid_of(&g, tokens, 4, 4));
        let pl = out.patch_logits.as_ref().unwrap();
        assert_eq!(pl.shape(), &[16, 1]);
        assert_eq!(out.global_logit.numel(), 1);
        let first = pl.data()[0];
        assert!(pl.data().iter().all(|&v| (v - first).abs() < 1e-12));
        let y = out.fused_prob.item();
        assert!((0.0..=1.0).contains(&y));
    }

    #[test]
    fn zeroed_fusion_gives_sigma_of_bias() {
        let mut cls = test_classifier(41, true);
        for v in cls.fusion.w.value.data_mut() {
            *v = 0.0;
        }
        let bias = 0.37;
        cls.fusion.b.as_mut().unwrap().value.data_mut()[0] = bias;
        let g = Graph::no_grad();
        let mut rng = stream(42, "zf");
        let tokens = uniform_fan_in::<f64>(&mut rng, 1, vec![16, 8]);
        let out = cls.classify(&g, &grid_of(&g, tokens, 4, 4));
        let want = 1.0 / (1.0 + (-bias as f64).exp());
        assert!((out.fused_prob.item() - want).abs() < 1e-12);
    }

    #[test]
    fn fused_prob_permutation_invariant() {
        let cls = test_classifier(43, true);
        let mut rng = stream(44, "perm");
        let tokens = uniform_fan_in::<f64>(&mut rng, 1, vec![16, 8]);
        let mut permuted_data = tokens.data().to_vec();
        permuted_data.rotate_left(8 * 5); // rotate rows by 5
        let permuted = Tensor::raw(vec![16, 8], permuted_data);
        let g = Graph::no_grad();
        let a = cls.classify(&g, &grid_of(&g, tokens, 4, 4)).fused_prob.item();
        let b = cls.classify(&g, &grid_of(&g, permuted, 4, 4)).fused_prob.item();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn classification_loss_additivity_and_perfect_case() {
        let cls = test_classifier(45, true);
        let mut rng = stream(46, "addv");
        let tokens = uniform_fan_in::<f64>(&mut rng, 1, vec![16, 8]);
        let targets = Tensor::raw(vec![16, 1], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let g = Graph::no_grad();
        let out = cls.classify(&g, &grid_of(&g, tokens, 4, 4));
        let total = classification_loss(&g, &out, 1, Some(&targets), PolyFocalParams::STAGE1);
        let patch = poly_focal_loss(&g, out.patch_probs.as_ref().unwrap(), &targets, PolyFocalParams::STAGE1);
        let z = &out.fused_logit;
        let global = z.log_sigmoid().neg().mean_all();
        assert!((total.item() - (patch.item() + global.item())).abs() < 1e-9);

        // Perfect predictions: saturated logits and exact patch probabilities.
        let g2 = Graph::no_grad();
        let perfect = ClassifierOutput {
            global_logit: g2.constant(Tensor::raw(vec![1, 1], vec![30.0])),
            patch_logits: Some(g2.constant(Tensor::raw(vec![16, 1], vec![30.0; 16]))),
            patch_probs: Some(g2.constant(Tensor::raw(vec![16, 1], vec![1.0; 16]))),
            fused_logit: g2.constant(Tensor::raw(vec![1, 1], vec![30.0])),
            fused_prob: g2.constant(Tensor::raw(vec![1, 1], vec![1.0])),
            grid: (4, 4),
        };
        let all_forged = Tensor::raw(vec![16, 1], vec![1.0; 16]);
        let loss = classification_loss(&g2, &perfect, 1, Some(&all_forged), PolyFocalParams::STAGE1);
        assert!(loss.item() <= 1e-5);
    }

    #[test]
    fn classifier_gradients_pass_fd() {
        let cls = test_classifier(47, true);
        let mut rng = stream(48, "cls-fd");
        let tokens = uniform_fan_in::<f64>(&mut rng, 1, vec![16, 8]);
        let targets = Tensor::raw(vec![16, 1], (0..16).map(|i| (i % 4 == 0) as u8 as f64).collect());
        // Fusion weights receive nonzero gradient from the loss.
        let probe = cls.fusion.w.value.clone();
        let report = check_gradients(
            &|g, vars| {
                g.bind_param(cls.fusion.w.id(), vars[0].clone());
                let out = cls.classify(&g, &grid_of(g, tokens.clone(), 4, 4));
                classification_loss(g, &out, 1, Some(&targets), PolyFocalParams::STAGE1)
            },
            &[probe],
        )
        .unwrap();
        assert!(report.components > 0);

        // And the loss gradient w.r.t. the input tokens checks out too.
        check_gradients(
            &|g, vars| {
                let grid = FeatureGrid { h: 4, w: 4, dim: 8, tokens: vars[0].clone() };
                let out = cls.classify(g, &grid);
                classification_loss(g, &out, 0, Some(&targets), PolyFocalParams::STAGE1)
            },
            &[tokens],
        )
        .unwrap();
    }
}
