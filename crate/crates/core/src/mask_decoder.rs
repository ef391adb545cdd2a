//! Query-based mask prediction over the refined pyramid, Hungarian matching
//! against ground-truth forged components, and the stage-2 objective
//! (poly focal mask/class terms + Tversky + box losses).

use crate::classifier::{poly_focal_loss, PolyFocalParams};
use crate::cond_decoder::DecodedFeatures;
use crate::error::{Error, Result};
use crate::matching::hungarian_match;
use crate::nn::{Attention, Builder, LayerNorm, Linear, Mlp, Module, Param};
use crate::numerics::real::{lit, Real};
use crate::numerics::{Graph, Tensor, Var};

pub const FORGED: usize = 0;
pub const NO_OBJECT: usize = 1;
const BLOCKED: f64 = -1e9;

// ── ground-truth instances ──────────────────────────────────────────────

/// One 4-connected forged component with its tight normalized box.
#[derive(Debug, Clone)]
pub struct GroundTruthInstance {
    pub h: usize,
    pub w: usize,
    /// Full-resolution component mask (0/1).
    pub mask: Vec<u8>,
    /// (cx, cy, w, h), normalized by the pixel-edge convention: a pixel spans
    /// [i/N, (i+1)/N).
    pub box_: [f64; 4],
}

impl GroundTruthInstance {
    /// Max-pooled (recall-preserving) mask at 1/4 resolution, shape (1, N4).
    pub fn pooled_quarter<T: Real>(&self) -> Tensor<T> {
        let (h4, w4) = (self.h / 4, self.w / 4);
        let mut out = vec![T::zero(); h4 * w4];
        for y in 0..self.h {
            for x in 0..self.w {
                if self.mask[y * self.w + x] != 0 {
                    out[(y / 4) * w4 + x / 4] = T::one();
                }
            }
        }
        Tensor::raw(vec![1, h4 * w4], out)
    }
}

/// 4-connectivity connected components of a binary mask; empty mask → [].
pub fn extract_gt_instances(mask: &[u8], h: usize, w: usize) -> Vec<GroundTruthInstance> {
    assert_eq!(mask.len(), h * w);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = vec![0u8; h * w];
        let (mut r0, mut r1, mut c0, mut c1) = (h, 0usize, w, 0usize);
        stack.push(start);
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp[i] = 1;
            let (y, x) = (i / w, i % w);
            r0 = r0.min(y);
            r1 = r1.max(y);
            c0 = c0.min(x);
            c1 = c1.max(x);
            if y > 0 && mask[i - w] != 0 && !seen[i - w] {
                seen[i - w] = true;
                stack.push(i - w);
            }
            if y + 1 < h && mask[i + w] != 0 && !seen[i + w] {
                seen[i + w] = true;
                stack.push(i + w);
            }
            if x > 0 && mask[i - 1] != 0 && !seen[i - 1] {
                seen[i - 1] = true;
                stack.push(i - 1);
            }
            if x + 1 < w && mask[i + 1] != 0 && !seen[i + 1] {
                seen[i + 1] = true;
                stack.push(i + 1);
            }
        }
        let x0 = c0 as f64 / w as f64;
        let x1 = (c1 + 1) as f64 / w as f64;
        let y0 = r0 as f64 / h as f64;
        let y1 = (r1 + 1) as f64 / h as f64;
        out.push(GroundTruthInstance {
            h,
            w,
            mask: comp,
            box_: [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0],
        });
    }
    out
}

// ── losses ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub tversky_smooth: f64,
    pub mask_focal: PolyFocalParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 5.0,
            lambda2: 5.0,
            lambda3: 2.0,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            tversky_smooth: 1.0,
            mask_focal: PolyFocalParams::STAGE2_MASK,
        }
    }
}

/// Tversky loss from soft confusion counts:
/// 1 − (TP + s)/(TP + α·FP + β·FN + s).
pub fn tversky_loss<T: Real>(
    g: &Graph<T>,
    pred_probs: &Var<T>,
    gt: &Tensor<T>,
    alpha: f64,
    beta: f64,
    smooth: f64,
) -> Var<T> {
    assert_eq!(pred_probs.shape(), gt.shape(), "tversky shape mismatch");
    let gt_v = g.constant(gt.clone());
    let not_gt = g.constant(Tensor::raw(
        gt.shape().to_vec(),
        gt.data().iter().map(|&t| T::one() - t).collect(),
    ));
    let tp = pred_probs.mul(&gt_v).sum_all();
    let fp = pred_probs.mul(&not_gt).sum_all();
    let fnn = pred_probs.neg().add_scalar(T::one()).mul(&gt_v).sum_all();
    let s = lit::<T>(smooth);
    let num = tp.add_scalar(s);
    let den = tp
        .add(&fp.scale(lit::<T>(alpha)))
        .add(&fnn.scale(lit::<T>(beta)))
        .add_scalar(s);
    num.div(&den).neg().add_scalar(T::one())
}

/// L1 + (1 − generalized IoU) between normalized (cx,cy,w,h) boxes.
/// `pred` is a (1,4) var with entries already in [0,1].
pub fn box_loss<T: Real>(g: &Graph<T>, pred: &Var<T>, gt: &[f64; 4]) -> Result<Var<T>> {
    if gt[2] <= 0.0 || gt[3] <= 0.0 {
        return Err(Error::numeric(format!(
            "degenerate ground-truth box w={} h={}",
            gt[2], gt[3]
        )));
    }
    assert_eq!(pred.shape(), &[1, 4]);
    let gt_t = g.constant(Tensor::raw(vec![1, 4], gt.iter().map(|&v| lit::<T>(v)).collect()));
    let l1 = pred.sub(&gt_t).abs().sum_all();

    let half = lit::<T>(0.5);
    let (cx, cy) = (pred.narrow_cols(0, 1), pred.narrow_cols(1, 1));
    let (w, h) = (pred.narrow_cols(2, 1), pred.narrow_cols(3, 1));
    let px0 = cx.sub(&w.scale(half));
    let px1 = cx.add(&w.scale(half));
    let py0 = cy.sub(&h.scale(half));
    let py1 = cy.add(&h.scale(half));
    let gx0 = g.constant(Tensor::raw(vec![1, 1], vec![lit::<T>(gt[0] - gt[2] / 2.0)]));
    let gx1 = g.constant(Tensor::raw(vec![1, 1], vec![lit::<T>(gt[0] + gt[2] / 2.0)]));
    let gy0 = g.constant(Tensor::raw(vec![1, 1], vec![lit::<T>(gt[1] - gt[3] / 2.0)]));
    let gy1 = g.constant(Tensor::raw(vec![1, 1], vec![lit::<T>(gt[1] + gt[3] / 2.0)]));
    let zero = g.constant(Tensor::raw(vec![1, 1], vec![T::zero()]));

    let iw = px1.emin(&gx1).sub(&px0.emax(&gx0)).emax(&zero);
    let ih = py1.emin(&gy1).sub(&py0.emax(&gy0)).emax(&zero);
    let inter = iw.mul(&ih);
    let area_p = w.mul(&h);
    let area_g = lit::<T>(gt[2] * gt[3]);
    let union = area_p.add_scalar(area_g).sub(&inter);
    let cw = px1.emax(&gx1).sub(&px0.emin(&gx0));
    let ch = py1.emax(&gy1).sub(&py0.emin(&gy0));
    let c_area = cw.mul(&ch);
    let giou = inter.div(&union).sub(&c_area.sub(&union).div(&c_area));
    Ok(l1.add(&giou.neg().add_scalar(T::one()).reshape(vec![1])))
}

// ── mask decoder ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MaskDecoderConfig {
    pub dim: usize,
    pub num_queries: usize,
    pub rounds: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Attend only where the previous prediction is active; switchable so
    /// gradient verification can avoid the discrete threshold.
    pub masked_attention: bool,
}

impl MaskDecoderConfig {
    pub fn new(dim: usize) -> Self {
        MaskDecoderConfig {
            dim,
            num_queries: 20,
            rounds: 3,
            heads: 4,
            ffn_hidden: dim * 2,
            masked_attention: true,
        }
    }
}

struct DecoderLayer<T: Real> {
    cross_norm: LayerNorm<T>,
    cross: Attention<T>,
    self_norm: LayerNorm<T>,
    self_attn: Attention<T>,
    ffn_norm: LayerNorm<T>,
    ffn: Mlp<T>,
}

impl<T: Real> DecoderLayer<T> {
    fn new(b: &mut Builder<T>, name: &str, cfg: &MaskDecoderConfig) -> Self {
        DecoderLayer {
            cross_norm: LayerNorm::new(b, &format!("{name}.cross_norm"), cfg.dim),
            cross: Attention::new(b, &format!("{name}.cross"), cfg.dim, cfg.heads),
            self_norm: LayerNorm::new(b, &format!("{name}.self_norm"), cfg.dim),
            self_attn: Attention::new(b, &format!("{name}.self_attn"), cfg.dim, cfg.heads),
            ffn_norm: LayerNorm::new(b, &format!("{name}.ffn_norm"), cfg.dim),
            ffn: Mlp::new(b, &format!("{name}.ffn"), cfg.dim, cfg.ffn_hidden, cfg.dim),
        }
    }

    fn forward(&self, g: &Graph<T>, q: &Var<T>, memory: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let h = self.cross_norm.forward(g, q);
        let q = q.add(&self.cross.forward(g, &h, memory, bias));
        let h = self.self_norm.forward(g, &q);
        let q = q.add(&self.self_attn.forward(g, &h, &h, None));
        let h = self.ffn_norm.forward(g, &q);
        q.add(&self.ffn.forward(g, &h))
    }
}

impl<T: Real> Module<T> for DecoderLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.cross_norm.visit(f);
        self.cross.visit(f);
        self.self_norm.visit(f);
        self.self_attn.visit(f);
        self.ffn_norm.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.cross_norm.visit_mut(f);
        self.cross.visit_mut(f);
        self.self_norm.visit_mut(f);
        self.self_attn.visit_mut(f);
        self.ffn_norm.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Batched per-query outputs of one decode pass.
pub struct MaskPredictions<T: Real> {
    /// (Q, H4·W4) mask logits at 1/4 resolution.
    pub mask_logits: Var<T>,
    /// (Q, 2) class logits, columns (forged, no-object).
    pub class_logits: Var<T>,
    /// (Q, 4) normalized (cx,cy,w,h), already sigmoided.
    pub boxes: Var<T>,
    pub h4: usize,
    pub w4: usize,
}

/// One query's prediction as plain tensors.
pub struct InstancePrediction<T: Real> {
    pub mask_logits: Tensor<T>,
    pub class_logits: Tensor<T>,
    pub box_: [f64; 4],
}

impl<T: Real> MaskPredictions<T> {
    pub fn num_queries(&self) -> usize {
        self.mask_logits.shape()[0]
    }

    pub fn instances(&self) -> Vec<InstancePrediction<T>> {
        let q_cnt = self.num_queries();
        let n4 = self.h4 * self.w4;
        (0..q_cnt)
            .map(|q| InstancePrediction {
                mask_logits: Tensor::raw(
                    vec![self.h4, self.w4],
                    self.mask_logits.data()[q * n4..(q + 1) * n4].to_vec(),
                ),
                class_logits: Tensor::raw(
                    vec![2],
                    self.class_logits.data()[q * 2..(q + 1) * 2].to_vec(),
                ),
                box_: {
                    let b = &self.boxes.data()[q * 4..(q + 1) * 4];
                    [b[0].to_f64s(), b[1].to_f64s(), b[2].to_f64s(), b[3].to_f64s()]
                },
            })
            .collect()
    }
}

pub struct MaskDecoder<T: Real> {
    pub cfg: MaskDecoderConfig,
    pub query_embed: Param<T>,
    layers: Vec<DecoderLayer<T>>,
    decoder_norm: LayerNorm<T>,
    mask_embed: Mlp<T>,
    class_head: Linear<T>,
    box_head: Mlp<T>,
}

impl<T: Real> MaskDecoder<T> {
    pub fn new(b: &mut Builder<T>, name: &str, cfg: MaskDecoderConfig) -> Self {
        MaskDecoder {
            query_embed: b.uniform(format!("{name}.query_embed"), cfg.dim, vec![cfg.num_queries, cfg.dim]),
            layers: (0..cfg.rounds * 3)
                .map(|i| DecoderLayer::new(b, &format!("{name}.layer{i}"), &cfg))
                .collect(),
            decoder_norm: LayerNorm::new(b, &format!("{name}.decoder_norm"), cfg.dim),
            mask_embed: Mlp::new(b, &format!("{name}.mask_embed"), cfg.dim, cfg.dim, cfg.dim),
            class_head: Linear::new(b, &format!("{name}.class_head"), cfg.dim, 2),
            box_head: Mlp::new(b, &format!("{name}.box_head"), cfg.dim, cfg.dim, 4),
            cfg,
        }
    }

    fn predict_mask_logits(&self, g: &Graph<T>, queries: &Var<T>, pixel_embedding: &Var<T>) -> Var<T> {
        let q = self.decoder_norm.forward(g, queries);
        let emb = self.mask_embed.forward(g, &q);
        emb.matmul_tb(pixel_embedding)
    }

    /// Attention bias for a level: block pixels whose max-pooled mask
    /// probability is below 0.5; a fully blocked row falls back to unmasked.
    fn attention_bias(
        &self,
        g: &Graph<T>,
        mask_logits: &Tensor<T>,
        h4: usize,
        w4: usize,
        lh: usize,
        lw: usize,
    ) -> Var<T> {
        let q_cnt = self.cfg.num_queries;
        let f = h4 / lh;
        debug_assert_eq!(w4 / lw, f);
        let mut bias = vec![T::zero(); q_cnt * lh * lw];
        for q in 0..q_cnt {
            let row = &mask_logits.data()[q * h4 * w4..(q + 1) * h4 * w4];
            let mut any = false;
            for y in 0..lh {
                for x in 0..lw {
                    // max-pool of sigmoid(m) ≥ 0.5 ⇔ any logit ≥ 0 in block
                    let mut active = false;
                    'blk: for dy in 0..f {
                        for dx in 0..f {
                            if row[(y * f + dy) * w4 + x * f + dx] >= T::zero() {
                                active = true;
                                break 'blk;
                            }
                        }
                    }
                    if active {
                        any = true;
                    } else {
                        bias[q * lh * lw + y * lw + x] = lit::<T>(BLOCKED);
                    }
                }
            }
            if !any {
                for v in &mut bias[q * lh * lw..(q + 1) * lh * lw] {
                    *v = T::zero();
                }
            }
        }
        g.constant(Tensor::raw(vec![q_cnt, lh * lw], bias))
    }

    /// Run the decoder: rounds cycle over levels 1/32 → 1/16 → 1/8, with
    /// masked cross-attention driven by the previous layer's prediction.
    pub fn decode_masks(&self, g: &Graph<T>, features: &DecodedFeatures<T>) -> MaskPredictions<T> {
        let f4 = features.level(4);
        let (h4, w4) = (f4.h, f4.w);
        let mut q = self.query_embed.var(g);
        let mut mask_logits = self.predict_mask_logits(g, &q, &features.pixel_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            let scale = [32usize, 16, 8][i % 3];
            let lvl = features.level(scale);
            let bias = if self.cfg.masked_attention {
                Some(self.attention_bias(g, mask_logits.value(), h4, w4, lvl.h, lvl.w))
            } else {
                None
            };
            q = layer.forward(g, &q, &lvl.tokens, bias.as_ref());
            mask_logits = self.predict_mask_logits(g, &q, &features.pixel_embedding);
        }
        let qn = self.decoder_norm.forward(g, &q);
        let class_logits = self.class_head.forward(g, &qn);
        let boxes = self.box_head.forward(g, &qn).sigmoid();
        MaskPredictions { mask_logits, class_logits, boxes, h4, w4 }
    }
}

impl<T: Real> Module<T> for MaskDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.query_embed);
        for l in &self.layers {
            l.visit(f);
        }
        self.decoder_norm.visit(f);
        self.mask_embed.visit(f);
        self.class_head.visit(f);
        self.box_head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.query_embed);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.decoder_norm.visit_mut(f);
        self.mask_embed.visit_mut(f);
        self.class_head.visit_mut(f);
        self.box_head.visit_mut(f);
    }
}

// ── matching + segmentation loss ────────────────────────────────────────

fn poly_focal_plain(q: f64, t: f64, p: PolyFocalParams) -> f64 {
    let q = q.clamp(1e-7, 1.0 - 1e-7);
    let pt = t * q + (1.0 - t) * (1.0 - q);
    let a = p.alpha * t + (1.0 - p.alpha) * (1.0 - t);
    -a * (1.0 - pt).powf(p.gamma) * pt.ln() + p.epsilon * (1.0 - pt).powf(p.gamma + 1.0)
}

/// Hungarian assignment of ground-truth instances to queries. The pairwise
/// cost mirrors the loss weights (λ1·focal + λ2·tversky + λ3·box) plus the
/// forged-class negative log-probability. Returns, per instance, a query.
pub fn match_instances<T: Real>(
    preds: &MaskPredictions<T>,
    gts: &[GroundTruthInstance],
    cfg: &LossConfig,
) -> Result<Vec<usize>> {
    if gts.is_empty() {
        return Ok(Vec::new());
    }
    let q_cnt = preds.num_queries();
    let n4 = preds.h4 * preds.w4;
    let g64 = Graph::<f64>::no_grad();
    let pooled: Vec<Tensor<f64>> = gts.iter().map(|gt| gt.pooled_quarter::<f64>()).collect();
    let mut cost = vec![vec![0.0f64; gts.len()]; q_cnt];
    for q in 0..q_cnt {
        let mask_row: Vec<f64> =
            preds.mask_logits.data()[q * n4..(q + 1) * n4].iter().map(|v| v.to_f64s()).collect();
        let probs: Vec<f64> = mask_row.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let cls = [
            preds.class_logits.data()[q * 2].to_f64s(),
            preds.class_logits.data()[q * 2 + 1].to_f64s(),
        ];
        let cls_soft = crate::numerics::func::stable_softmax(&cls).expect("finite logits");
        let class_cost = -(cls_soft[FORGED].max(1e-12)).ln();
        let box_q: [f64; 4] = {
            let b = &preds.boxes.data()[q * 4..(q + 1) * 4];
            [b[0].to_f64s(), b[1].to_f64s(), b[2].to_f64s(), b[3].to_f64s()]
        };
        let probs_var = g64.constant(Tensor::raw(vec![1, n4], probs.clone()));
        let box_var = g64.constant(Tensor::raw(vec![1, 4], box_q.to_vec()));
        for (gi, gt) in gts.iter().enumerate() {
            let focal = probs
                .iter()
                .zip(pooled[gi].data())
                .map(|(&p, &t)| poly_focal_plain(p, t, cfg.mask_focal))
                .sum::<f64>()
                / n4 as f64;
            let tv = tversky_loss(
                &g64,
                &probs_var,
                &pooled[gi],
                cfg.tversky_alpha,
                cfg.tversky_beta,
                cfg.tversky_smooth,
            )
            .item();
            let bx = box_loss(&g64, &box_var, &gt.box_)?.item();
            cost[q][gi] = cfg.lambda1 * focal + cfg.lambda2 * tv + cfg.lambda3 * bx + class_cost;
        }
    }
    hungarian_match(&cost)
}

/// The λ-weighted pieces of one image's segmentation loss. `total` is the
/// differentiable sum; the f64 fields expose the decomposition.
pub struct SegLossParts<T: Real> {
    pub total: Var<T>,
    pub mask_term: f64,
    pub tversky_term: f64,
    pub box_term: f64,
}

/// L_seg = λ1·L_mask + λ2·L_Tversky + λ3·L_box for one image, given an
/// assignment (instance index → query). L_mask combines the matched-pair
/// mask focal loss with the all-query classification focal loss; images with
/// no instances contribute the classification term only.
pub fn segmentation_loss<T: Real>(
    g: &Graph<T>,
    preds: &MaskPredictions<T>,
    gts: &[GroundTruthInstance],
    assignment: &[usize],
    cfg: &LossConfig,
) -> Result<SegLossParts<T>> {
    assert_eq!(gts.len(), assignment.len());
    let q_cnt = preds.num_queries();
    let n4 = preds.h4 * preds.w4;

    // Classification focal over all queries: forged for matched, no-object
    // for the rest, expressed as a target on the forged-class probability.
    let mut class_targets = vec![T::zero(); q_cnt];
    for &q in assignment {
        class_targets[q] = T::one();
    }
    let forged_probs = preds.class_logits.softmax_rows().narrow_cols(FORGED, 1);
    let class_focal = poly_focal_loss(
        g,
        &forged_probs,
        &Tensor::raw(vec![q_cnt, 1], class_targets),
        cfg.mask_focal,
    );

    let mut mask_focal: Option<Var<T>> = None;
    let mut tversky: Option<Var<T>> = None;
    let mut boxl: Option<Var<T>> = None;
    for (gi, &q) in assignment.iter().enumerate() {
        let gt = &gts[gi];
        let pooled = gt.pooled_quarter::<T>();
        let mask_probs = preds.mask_logits.narrow_rows(q, 1).sigmoid();
        debug_assert_eq!(mask_probs.numel(), n4);
        let mf = poly_focal_loss(g, &mask_probs, &pooled, cfg.mask_focal);
        let tv = tversky_loss(
            g,
            &mask_probs,
            &pooled,
            cfg.tversky_alpha,
            cfg.tversky_beta,
            cfg.tversky_smooth,
        );
        let bx = box_loss(g, &preds.boxes.narrow_rows(q, 1), &gt.box_)?;
        mask_focal = Some(match mask_focal {
            Some(acc) => acc.add(&mf),
            None => mf,
        });
        tversky = Some(match tversky {
            Some(acc) => acc.add(&tv),
            None => tv,
        });
        boxl = Some(match boxl {
            Some(acc) => acc.add(&bx),
            None => bx,
        });
    }
    let inv = lit::<T>(1.0 / assignment.len().max(1) as f64);
    let l_mask = match mask_focal {
        Some(acc) => acc.scale(inv).add(&class_focal),
        None => class_focal,
    };
    let l_tversky = tversky.map(|acc| acc.scale(inv));
    let l_box = boxl.map(|acc| acc.scale(inv));

    let mut total = l_mask.scale(lit::<T>(cfg.lambda1));
    let mask_term = total.item().to_f64s();
    let mut tversky_term = 0.0;
    let mut box_term = 0.0;
    if let Some(tv) = &l_tversky {
        let w = tv.scale(lit::<T>(cfg.lambda2));
        tversky_term = w.item().to_f64s();
        total = total.add(&w);
    }
    if let Some(bx) = &l_box {
        let w = bx.scale(lit::<T>(cfg.lambda3));
        box_term = w.item().to_f64s();
        total = total.add(&w);
    }
    Ok(SegLossParts { total, mask_term, tversky_term, box_term })
}

/// Convenience wrapper: match, then compute the loss under that assignment.
pub fn matched_segmentation_loss<T: Real>(
    g: &Graph<T>,
    preds: &MaskPredictions<T>,
    gts: &[GroundTruthInstance],
    cfg: &LossConfig,
) -> Result<SegLossParts<T>> {
    let assignment = match_instances(preds, gts, cfg)?;
    segmentation_loss(g, preds, gts, &assignment, cfg)
}

// ── prediction merging ──────────────────────────────────────────────────

/// Merge per-query predictions into one 1/4-resolution score map:
/// score(x) = max over queries of p_forged(q) · σ(mask_q(x)).
pub fn merged_score_map<T: Real>(g: &Graph<T>, preds: &MaskPredictions<T>) -> Var<T> {
    let q_cnt = preds.num_queries();
    let forged = preds.class_logits.softmax_rows().narrow_cols(FORGED, 1);
    let mut best: Option<Var<T>> = None;
    for q in 0..q_cnt {
        let p = forged.narrow_rows(q, 1).reshape(vec![1]);
        let m = preds.mask_logits.narrow_rows(q, 1).sigmoid().mul_scalar_var(&p);
        best = Some(match best {
            Some(acc) => acc.emax(&m),
            None => m,
        });
    }
    best.expect("at least one query").reshape(vec![preds.h4, preds.w4])
}

/// Nearest-upsample a (h,w) score map by 4× to full resolution.
pub fn upsample_score_to_full<T: Real>(score: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (h4, w4) = (score.shape()[0], score.shape()[1]);
    assert_eq!((h4 * 4, w4 * 4), (h, w), "score map is not the 1/4 grid of the target");
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = score.data()[(y / 4) * w4 + x / 4];
        }
    }
    Tensor::raw(vec![h, w], out)
}

pub fn binarize<T: Real>(score: &Tensor<T>, threshold: f64) -> Vec<u8> {
    score.data().iter().map(|&v| (v.to_f64s() >= threshold) as u8).collect()
}
