//! Fused multi-level deformable sampling.
//!
//! One node gathers, for every query and head, K bilinear samples from each
//! pyramid level and mixes them with the given attention weights. Keeping
//! this fused avoids thousands of tiny graph nodes per decoder layer.

use std::rc::Rc;

use super::func::bilinear_tap;
use super::graph::{Node, Var};
use super::real::{lit, Real};
use super::tensor::Tensor;

/// Attention-weighted multi-level bilinear sampling.
///
/// * `levels` — per-level value tokens as an (Hl·Wl, C) matrix plus (Hl, Wl);
///   row y·Wl+x holds the C-vector of pixel (y, x).
/// * `points` — (Q, heads, L, K, 2) normalized (u, v) sampling locations.
/// * `weights` — (Q, heads, L, K) mixture weights (softmaxed upstream).
///
/// Head h reads and writes the channel slice [h·C/heads, (h+1)·C/heads).
/// Output is (Q, C).
pub fn deform_sample<T: Real>(
    levels: &[(Var<T>, usize, usize)],
    points: &Var<T>,
    weights: &Var<T>,
    heads: usize,
) -> Var<T> {
    let l_cnt = levels.len();
    assert!(l_cnt > 0, "deform_sample needs at least one level");
    let c = levels[0].0.shape()[1];
    assert!(c % heads == 0, "channels {c} not divisible by heads {heads}");
    let dh = c / heads;
    for (grid, h, w) in levels {
        assert_eq!(grid.shape(), &[h * w, c], "level token matrix shape mismatch");
    }
    let ps = points.shape();
    assert_eq!(ps.len(), 5, "points must be (Q,heads,L,K,2)");
    let (q_cnt, k_cnt) = (ps[0], ps[3]);
    assert_eq!(ps[1], heads);
    assert_eq!(ps[2], l_cnt);
    assert_eq!(ps[4], 2);
    assert_eq!(weights.shape(), &ps[..4], "weights must be (Q,heads,L,K)");

    let dims: Vec<(usize, usize)> = levels.iter().map(|&(_, h, w)| (h, w)).collect();
    let pd = points.data();
    let wd = weights.data();
    let mut out = vec![T::zero(); q_cnt * c];
    for qi in 0..q_cnt {
        for hi in 0..heads {
            for (li, &(ref grid, _, _)) in levels.iter().enumerate() {
                let (gh, gw) = dims[li];
                let gd = grid.data();
                for ki in 0..k_cnt {
                    let slot = ((qi * heads + hi) * l_cnt + li) * k_cnt + ki;
                    let u = pd[slot * 2].to_f64s();
                    let v = pd[slot * 2 + 1].to_f64s();
                    let t = bilinear_tap(u, v, gh, gw);
                    let w00 = lit::<T>((1.0 - t.wy) * (1.0 - t.wx));
                    let w01 = lit::<T>((1.0 - t.wy) * t.wx);
                    let w10 = lit::<T>(t.wy * (1.0 - t.wx));
                    let w11 = lit::<T>(t.wy * t.wx);
                    let b00 = (t.y0 * gw + t.x0) * c + hi * dh;
                    let b01 = (t.y0 * gw + t.x1) * c + hi * dh;
                    let b10 = (t.y1 * gw + t.x0) * c + hi * dh;
                    let b11 = (t.y1 * gw + t.x1) * c + hi * dh;
                    let aw = wd[slot];
                    let dst = &mut out[qi * c + hi * dh..qi * c + (hi + 1) * dh];
                    for ch in 0..dh {
                        let val = w00 * gd[b00 + ch]
                            + w01 * gd[b01 + ch]
                            + w10 * gd[b10 + ch]
                            + w11 * gd[b11 + ch];
                        dst[ch] = dst[ch] + aw * val;
                    }
                }
            }
        }
    }
    let out = Tensor::raw(vec![q_cnt, c], out);

    let g = points.graph_handle();
    let needs = points.node.needs_grad
        || weights.node.needs_grad
        || levels.iter().any(|(v, _, _)| v.node.needs_grad);
    let grid_nodes: Vec<Rc<Node<T>>> = levels.iter().map(|(v, _, _)| Rc::clone(&v.node)).collect();
    let p_node = Rc::clone(&points.node);
    let w_node = Rc::clone(&weights.node);

    g.make(
        out,
        needs,
        Some(Box::new(move |up: &[T]| {
            let pd = p_node.value.data();
            let wd = w_node.value.data();
            let mut d_grids: Vec<Vec<T>> =
                grid_nodes.iter().map(|n| vec![T::zero(); n.value.numel()]).collect();
            let mut d_pts = vec![T::zero(); pd.len()];
            let mut d_w = vec![T::zero(); wd.len()];
            for qi in 0..q_cnt {
                for hi in 0..heads {
                    for li in 0..l_cnt {
                        let (gh, gw) = dims[li];
                        let gd = grid_nodes[li].value.data();
                        for ki in 0..k_cnt {
                            let slot = ((qi * heads + hi) * l_cnt + li) * k_cnt + ki;
                            let u = pd[slot * 2].to_f64s();
                            let v = pd[slot * 2 + 1].to_f64s();
                            let t = bilinear_tap(u, v, gh, gw);
                            let (wx, wy) = (t.wx, t.wy);
                            let b00 = (t.y0 * gw + t.x0) * c + hi * dh;
                            let b01 = (t.y0 * gw + t.x1) * c + hi * dh;
                            let b10 = (t.y1 * gw + t.x0) * c + hi * dh;
                            let b11 = (t.y1 * gw + t.x1) * c + hi * dh;
                            let aw = wd[slot];
                            let gq = &up[qi * c + hi * dh..qi * c + (hi + 1) * dh];

                            let cw = [
                                (1.0 - wy) * (1.0 - wx),
                                (1.0 - wy) * wx,
                                wy * (1.0 - wx),
                                wy * wx,
                            ];
                            let bases = [b00, b01, b10, b11];

                            let mut dw_acc = 0.0f64;
                            let (mut du, mut dv) = (0.0f64, 0.0f64);
                            for ch in 0..dh {
                                let m00 = gd[b00 + ch].to_f64s();
                                let m01 = gd[b01 + ch].to_f64s();
                                let m10 = gd[b10 + ch].to_f64s();
                                let m11 = gd[b11 + ch].to_f64s();
                                let gch = gq[ch].to_f64s();
                                let val = cw[0] * m00 + cw[1] * m01 + cw[2] * m10 + cw[3] * m11;
                                dw_acc += gch * val;
                                du += gch
                                    * ((1.0 - wy) * (m01 - m00) + wy * (m11 - m10))
                                    * t.dwx_du;
                                dv += gch
                                    * ((1.0 - wx) * (m10 - m00) + wx * (m11 - m01))
                                    * t.dwy_dv;
                            }
                            d_w[slot] = d_w[slot] + lit::<T>(dw_acc);
                            let awf = aw.to_f64s();
                            d_pts[slot * 2] = d_pts[slot * 2] + lit::<T>(du * awf);
                            d_pts[slot * 2 + 1] = d_pts[slot * 2 + 1] + lit::<T>(dv * awf);

                            let dg = &mut d_grids[li];
                            for (base, cwi) in bases.iter().zip(&cw) {
                                let f = aw * lit::<T>(*cwi);
                                for ch in 0..dh {
                                    dg[base + ch] = dg[base + ch] + f * gq[ch];
                                }
                            }
                        }
                    }
                }
            }
            for (node, dg) in grid_nodes.iter().zip(&d_grids) {
                node.accumulate(dg);
            }
            p_node.accumulate(&d_pts);
            w_node.accumulate(&d_w);
        })),
    )
}
