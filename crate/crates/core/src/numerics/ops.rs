//! Differentiable operations on [`Var`].
//!
//! Each op computes its forward value eagerly and, when any input carries
//! gradient, records a closure that accumulates adjoints into its parents.
//! Shape violations are programmer errors and panic; user-facing validation
//! happens at module boundaries.

use std::rc::Rc;

use super::func;
use super::graph::{Node, Var};
use super::linalg::{mm_nn, mm_nt, mm_tn};
use super::real::{lit, Real};
use super::tensor::Tensor;

fn unary<T: Real>(
    x: &Var<T>,
    out: Tensor<T>,
    back: impl Fn(&Rc<Node<T>>, &[T]) + 'static,
) -> Var<T> {
    let g = x.graph_handle();
    let needs = x.node.needs_grad;
    let parent = Rc::clone(&x.node);
    g.make(out, needs, Some(Box::new(move |up: &[T]| back(&parent, up))))
}

fn binary<T: Real>(
    a: &Var<T>,
    b: &Var<T>,
    out: Tensor<T>,
    back: impl Fn(&Rc<Node<T>>, &Rc<Node<T>>, &[T]) + 'static,
) -> Var<T> {
    debug_assert!(a.same_graph(b), "operands from different graphs");
    let g = a.graph_handle();
    let needs = a.node.needs_grad || b.node.needs_grad;
    let pa = Rc::clone(&a.node);
    let pb = Rc::clone(&b.node);
    g.make(out, needs, Some(Box::new(move |up: &[T]| back(&pa, &pb, up))))
}

impl<T: Real> Var<T> {
    fn same_shape(&self, other: &Var<T>) {
        assert_eq!(self.shape(), other.shape(), "elementwise op on mismatched shapes");
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        self.same_shape(other);
        let data = self.data().iter().zip(other.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        binary(self, other, out, |a, b, up| {
            a.accumulate(up);
            b.accumulate(up);
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        self.same_shape(other);
        let data = self.data().iter().zip(other.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        binary(self, other, out, |a, b, up| {
            a.accumulate(up);
            let neg: Vec<T> = up.iter().map(|&u| -u).collect();
            b.accumulate(&neg);
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        self.same_shape(other);
        let data = self.data().iter().zip(other.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        binary(self, other, out, |a, b, up| {
            let da: Vec<T> = up.iter().zip(b.value.data()).map(|(&u, &y)| u * y).collect();
            a.accumulate(&da);
            let db: Vec<T> = up.iter().zip(a.value.data()).map(|(&u, &x)| u * x).collect();
            b.accumulate(&db);
        })
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        self.same_shape(other);
        let data = self.data().iter().zip(other.data()).map(|(&x, &y)| x / y).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        binary(self, other, out, |a, b, up| {
            let bd = b.value.data();
            let da: Vec<T> = up.iter().zip(bd).map(|(&u, &y)| u / y).collect();
            a.accumulate(&da);
            let ad = a.value.data();
            let db: Vec<T> = up
                .iter()
                .zip(ad.iter().zip(bd))
                .map(|(&u, (&x, &y))| -u * x / (y * y))
                .collect();
            b.accumulate(&db);
        })
    }

    /// k·x + c elementwise.
    pub fn affine(&self, k: T, c: T) -> Var<T> {
        let data = self.data().iter().map(|&x| k * x + c).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, move |p, up| {
            let d: Vec<T> = up.iter().map(|&u| k * u).collect();
            p.accumulate(&d);
        })
    }

    pub fn neg(&self) -> Var<T> {
        self.affine(-T::one(), T::zero())
    }

    pub fn scale(&self, k: T) -> Var<T> {
        self.affine(k, T::zero())
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        self.affine(T::one(), c)
    }

    /// x^e for strictly positive x.
    pub fn powf(&self, e: T) -> Var<T> {
        let data = self.data().iter().map(|&x| x.powf(e)).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, move |p, up| {
            let d: Vec<T> = up
                .iter()
                .zip(p.value.data())
                .map(|(&u, &x)| u * e * x.powf(e - T::one()))
                .collect();
            p.accumulate(&d);
        })
    }

    pub fn ln(&self) -> Var<T> {
        let data = self.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, |p, up| {
            let d: Vec<T> = up.iter().zip(p.value.data()).map(|(&u, &x)| u / x).collect();
            p.accumulate(&d);
        })
    }

    pub fn exp(&self) -> Var<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x.exp()).collect();
        let saved = data.clone();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, move |p, up| {
            let d: Vec<T> = up.iter().zip(&saved).map(|(&u, &y)| u * y).collect();
            p.accumulate(&d);
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let data: Vec<T> = self.data().iter().map(|&x| func::sigmoid(x)).collect();
        let saved = data.clone();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, move |p, up| {
            let d: Vec<T> =
                up.iter().zip(&saved).map(|(&u, &s)| u * s * (T::one() - s)).collect();
            p.accumulate(&d);
        })
    }

    pub fn log_sigmoid(&self) -> Var<T> {
        let data = self.data().iter().map(|&x| func::stable_log_sigmoid(x)).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, |p, up| {
            // d/dx logσ(x) = σ(−x)
            let d: Vec<T> = up
                .iter()
                .zip(p.value.data())
                .map(|(&u, &x)| u * func::sigmoid(-x))
                .collect();
            p.accumulate(&d);
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<T> {
        let k = lit::<T>(0.7978845608028654); // √(2/π)
        let c3 = lit::<T>(0.044715);
        let half = lit::<T>(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = k * (x + c3 * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, move |p, up| {
            let d: Vec<T> = up
                .iter()
                .zip(p.value.data())
                .map(|(&g, &x)| {
                    let u = k * (x + c3 * x * x * x);
                    let t = u.tanh();
                    let sech2 = T::one() - t * t;
                    let du = k * (T::one() + lit::<T>(3.0) * c3 * x * x);
                    g * (half * (T::one() + t) + half * x * sech2 * du)
                })
                .collect();
            p.accumulate(&d);
        })
    }

    /// Clamp to [lo, hi]; gradient passes only through the strict interior.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let data = self.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, move |p, up| {
            let d: Vec<T> = up
                .iter()
                .zip(p.value.data())
                .map(|(&u, &x)| if x > lo && x < hi { u } else { T::zero() })
                .collect();
            p.accumulate(&d);
        })
    }

    pub fn abs(&self) -> Var<T> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        unary(self, out, |p, up| {
            let d: Vec<T> = up
                .iter()
                .zip(p.value.data())
                .map(|(&u, &x)| {
                    if x > T::zero() {
                        u
                    } else if x < T::zero() {
                        -u
                    } else {
                        T::zero()
                    }
                })
                .collect();
            p.accumulate(&d);
        })
    }

    /// Elementwise maximum; subgradient routes to the left operand on ties.
    pub fn emax(&self, other: &Var<T>) -> Var<T> {
        self.same_shape(other);
        let data = self.data().iter().zip(other.data()).map(|(&x, &y)| x.max(y)).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        binary(self, other, out, |a, b, up| {
            let (ad, bd) = (a.value.data(), b.value.data());
            let da: Vec<T> = up
                .iter()
                .enumerate()
                .map(|(i, &u)| if ad[i] >= bd[i] { u } else { T::zero() })
                .collect();
            a.accumulate(&da);
            let db: Vec<T> = up
                .iter()
                .enumerate()
                .map(|(i, &u)| if ad[i] >= bd[i] { T::zero() } else { u })
                .collect();
            b.accumulate(&db);
        })
    }

    /// Elementwise minimum; subgradient routes to the left operand on ties.
    pub fn emin(&self, other: &Var<T>) -> Var<T> {
        self.same_shape(other);
        let data = self.data().iter().zip(other.data()).map(|(&x, &y)| x.min(y)).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        binary(self, other, out, |a, b, up| {
            let (ad, bd) = (a.value.data(), b.value.data());
            let da: Vec<T> = up
                .iter()
                .enumerate()
                .map(|(i, &u)| if ad[i] <= bd[i] { u } else { T::zero() })
                .collect();
            a.accumulate(&da);
            let db: Vec<T> = up
                .iter()
                .enumerate()
                .map(|(i, &u)| if ad[i] <= bd[i] { T::zero() } else { u })
                .collect();
            b.accumulate(&db);
        })
    }

    /// Broadcast multiply by a one-element Var.
    pub fn mul_scalar_var(&self, s: &Var<T>) -> Var<T> {
        assert_eq!(s.numel(), 1, "mul_scalar_var takes a one-element factor");
        let sv = s.item();
        let data = self.data().iter().map(|&x| x * sv).collect();
        let out = Tensor::raw(self.shape().to_vec(), data);
        binary(self, s, out, move |x, sc, up| {
            let d: Vec<T> = up.iter().map(|&u| u * sv).collect();
            x.accumulate(&d);
            let ds: T = up
                .iter()
                .zip(x.value.data())
                .fold(T::zero(), |acc, (&u, &xv)| acc + u * xv);
            sc.accumulate(&[ds]);
        })
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Var<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let out = Tensor::scalar(s);
        let n = self.numel();
        unary(self, out, move |p, up| {
            p.accumulate(&vec![up[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.numel();
        let inv = T::one() / lit::<T>(n as f64);
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v) * inv;
        let out = Tensor::scalar(s);
        unary(self, out, move |p, up| {
            p.accumulate(&vec![up[0] * inv; n]);
        })
    }

    /// Maximum over all elements; subgradient routes to the first argmax.
    pub fn max_all(&self) -> Var<T> {
        let data = self.data();
        let mut best = 0usize;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let out = Tensor::scalar(data[best]);
        let n = self.numel();
        unary(self, out, move |p, up| {
            let mut d = vec![T::zero(); n];
            d[best] = up[0];
            p.accumulate(&d);
        })
    }

    /// Column means of an (N,D) matrix, shape (1,D).
    pub fn mean_axis0(&self) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "mean_axis0 needs a matrix");
        let (n, d) = (s[0], s[1]);
        let inv = T::one() / lit::<T>(n as f64);
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                out[j] = out[j] + self.data()[i * d + j];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let out = Tensor::raw(vec![1, d], out);
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); n * d];
            for i in 0..n {
                for j in 0..d {
                    grad[i * d + j] = up[j] * inv;
                }
            }
            p.accumulate(&grad);
        })
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    /// (M,K)·(K,N) → (M,N)
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?}·{sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.data(), other.data(), &mut out, m, k, n);
        let out = Tensor::raw(vec![m, n], out);
        binary(self, other, out, move |a, b, up| {
            if a.needs_grad {
                let mut da = vec![T::zero(); m * k];
                mm_nt(up, b.value.data(), &mut da, m, n, k);
                a.accumulate(&da);
            }
            if b.needs_grad {
                let mut db = vec![T::zero(); k * n];
                mm_tn(a.value.data(), up, &mut db, k, m, n);
                b.accumulate(&db);
            }
        })
    }

    /// (M,K)·(N,K)ᵀ → (M,N)
    pub fn matmul_tb(&self, other: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_tb {sa:?}·{sb:?}ᵀ");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        mm_nt(self.data(), other.data(), &mut out, m, k, n);
        let out = Tensor::raw(vec![m, n], out);
        binary(self, other, out, move |a, b, up| {
            if a.needs_grad {
                let mut da = vec![T::zero(); m * k];
                mm_nn(up, b.value.data(), &mut da, m, n, k);
                a.accumulate(&da);
            }
            if b.needs_grad {
                let mut db = vec![T::zero(); n * k];
                mm_tn(up, a.value.data(), &mut db, n, m, k);
                b.accumulate(&db);
            }
        })
    }

    pub fn transpose2d(&self) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = self.data()[i * d + j];
            }
        }
        let out = Tensor::raw(vec![d, n], out);
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); n * d];
            for j in 0..d {
                for i in 0..n {
                    grad[i * d + j] = up[j * n + i];
                }
            }
            p.accumulate(&grad);
        })
    }

    /// Add a (D)- or (1,D)-shaped row vector to every row of an (N,D) matrix.
    pub fn add_row(&self, row: &Var<T>) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert_eq!(row.numel(), d, "row length must match columns");
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(self.data()[i * d + j] + row.data()[j]);
            }
        }
        let out = Tensor::raw(vec![n, d], out);
        binary(self, row, out, move |x, r, up| {
            x.accumulate(up);
            if r.needs_grad {
                let mut dr = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] = dr[j] + up[i * d + j];
                    }
                }
                r.accumulate(&dr);
            }
        })
    }

    /// Multiply every row of an (N,D) matrix by a (D)-shaped vector.
    pub fn mul_row(&self, row: &Var<T>) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert_eq!(row.numel(), d);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(self.data()[i * d + j] * row.data()[j]);
            }
        }
        let out = Tensor::raw(vec![n, d], out);
        binary(self, row, out, move |x, r, up| {
            let rd = r.value.data();
            if x.needs_grad {
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = up[i * d + j] * rd[j];
                    }
                }
                x.accumulate(&dx);
            }
            if r.needs_grad {
                let xd = x.value.data();
                let mut dr = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] = dr[j] + up[i * d + j] * xd[i * d + j];
                    }
                }
                r.accumulate(&dr);
            }
        })
    }

    /// Add a per-channel bias (C) to a (C,H,W) map.
    pub fn add_chan(&self, bias: &Var<T>) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert_eq!(bias.numel(), c);
        let hw = h * w;
        let mut out = self.data().to_vec();
        for ci in 0..c {
            let b = bias.data()[ci];
            for v in &mut out[ci * hw..(ci + 1) * hw] {
                *v = *v + b;
            }
        }
        let out = Tensor::raw(vec![c, h, w], out);
        binary(self, bias, out, move |x, bi, up| {
            x.accumulate(up);
            if bi.needs_grad {
                let mut db = vec![T::zero(); c];
                for ci in 0..c {
                    for &u in &up[ci * hw..(ci + 1) * hw] {
                        db[ci] = db[ci] + u;
                    }
                }
                bi.accumulate(&db);
            }
        })
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<T> {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {shape:?}",
            self.shape()
        );
        let out = Tensor::raw(shape, self.data().to_vec());
        unary(self, out, |p, up| p.accumulate(up))
    }

    /// Rows [start, start+len) of a matrix.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert!(start + len <= n);
        let out = Tensor::raw(vec![len, d], self.data()[start * d..(start + len) * d].to_vec());
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); n * d];
            grad[start * d..(start + len) * d].copy_from_slice(up);
            p.accumulate(&grad);
        })
    }

    /// Columns [start, start+len) of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert!(start + len <= d);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&self.data()[i * d + start..i * d + start + len]);
        }
        let out = Tensor::raw(vec![n, len], out);
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); n * d];
            for i in 0..n {
                grad[i * d + start..i * d + start + len]
                    .copy_from_slice(&up[i * len..(i + 1) * len]);
            }
            p.accumulate(&grad);
        })
    }

    /// Select rows of a matrix by index (duplicates allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert!(indices.iter().all(|&i| i < n), "gather index out of range");
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::raw(vec![indices.len(), d], out);
        let idx = indices.to_vec();
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); n * d];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    grad[i * d + j] = grad[i * d + j] + up[r * d + j];
                }
            }
            p.accumulate(&grad);
        })
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Row-wise stable softmax of a matrix.
    pub fn softmax_rows(&self) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "softmax_rows needs a matrix");
        let (n, m) = (s[0], s[1]);
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = func::stable_softmax(&self.data()[i * m..(i + 1) * m])
                .expect("softmax on non-empty finite rows");
            data.extend_from_slice(&row);
        }
        let saved = data.clone();
        let out = Tensor::raw(vec![n, m], data);
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); n * m];
            for i in 0..n {
                let y = &saved[i * m..(i + 1) * m];
                let g = &up[i * m..(i + 1) * m];
                let dot = y.iter().zip(g).fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                for j in 0..m {
                    grad[i * m + j] = y[j] * (g[j] - dot);
                }
            }
            p.accumulate(&grad);
        })
    }

    /// Row-wise normalization to zero mean / unit variance (no affine part).
    pub fn layernorm_rows(&self, eps: T) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "layernorm_rows needs a matrix");
        let (n, d) = (s[0], s[1]);
        let invd = T::one() / lit::<T>(d as f64);
        let mut data = vec![T::zero(); n * d];
        let mut inv_stds = vec![T::zero(); n];
        for i in 0..n {
            let row = &self.data()[i * d..(i + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * invd;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * invd;
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds[i] = inv_std;
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std;
            }
        }
        let saved_y = data.clone();
        let out = Tensor::raw(vec![n, d], data);
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); n * d];
            for i in 0..n {
                let y = &saved_y[i * d..(i + 1) * d];
                let g = &up[i * d..(i + 1) * d];
                let mean_g = g.iter().fold(T::zero(), |a, &v| a + v) * invd;
                let mean_gy = g.iter().zip(y).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv) * invd;
                for j in 0..d {
                    grad[i * d + j] = inv_stds[i] * (g[j] - mean_g - y[j] * mean_gy);
                }
            }
            p.accumulate(&grad);
        })
    }

    // ── concatenation ───────────────────────────────────────────────────

    /// Stack matrices with equal column count along the row axis.
    pub fn concat_rows(parts: &[Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let d = parts[0].shape()[1];
        let mut total = 0usize;
        for p in parts {
            assert_eq!(p.shape().len(), 2);
            assert_eq!(p.shape()[1], d, "concat_rows with unequal column counts");
            total += p.shape()[0];
        }
        let mut data = Vec::with_capacity(total * d);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let out = Tensor::raw(vec![total, d], data);
        let g = parts[0].graph_handle();
        let needs = parts.iter().any(|p| p.node.needs_grad);
        let nodes: Vec<Rc<Node<T>>> = parts.iter().map(|p| Rc::clone(&p.node)).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[0] * d).collect();
        g.make(
            out,
            needs,
            Some(Box::new(move |up: &[T]| {
                let mut off = 0usize;
                for (node, &sz) in nodes.iter().zip(&sizes) {
                    node.accumulate(&up[off..off + sz]);
                    off += sz;
                }
            })),
        )
    }

    /// Stack matrices with equal row count along the column axis.
    pub fn concat_cols(parts: &[Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let n = parts[0].shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.shape().len(), 2);
                assert_eq!(p.shape()[0], n, "concat_cols with unequal row counts");
                p.shape()[1]
            })
            .collect();
        let d: usize = widths.iter().sum();
        let mut data = vec![T::zero(); n * d];
        let mut off = 0usize;
        for (p, &wd) in parts.iter().zip(&widths) {
            for i in 0..n {
                data[i * d + off..i * d + off + wd]
                    .copy_from_slice(&p.data()[i * wd..(i + 1) * wd]);
            }
            off += wd;
        }
        let out = Tensor::raw(vec![n, d], data);
        let g = parts[0].graph_handle();
        let needs = parts.iter().any(|p| p.node.needs_grad);
        let nodes: Vec<Rc<Node<T>>> = parts.iter().map(|p| Rc::clone(&p.node)).collect();
        g.make(
            out,
            needs,
            Some(Box::new(move |up: &[T]| {
                let mut off = 0usize;
                for (node, &wd) in nodes.iter().zip(&widths) {
                    if node.needs_grad {
                        let mut grad = vec![T::zero(); n * wd];
                        for i in 0..n {
                            grad[i * wd..(i + 1) * wd]
                                .copy_from_slice(&up[i * d + off..i * d + off + wd]);
                        }
                        node.accumulate(&grad);
                    }
                    off += wd;
                }
            })),
        )
    }

    // ── spatial ops ─────────────────────────────────────────────────────

    /// Convolution of a (C,H,W) map; kernel (O,C,k,k), odd k, stride 1 or 2.
    pub fn conv2d(&self, kernel: &Var<T>, bias: Option<&Var<T>>, stride: usize, padding: usize) -> Var<T> {
        let (c, h, w) = {
            let s = self.shape();
            assert_eq!(s.len(), 3);
            (s[0], s[1], s[2])
        };
        let ks = kernel.shape().to_vec();
        assert_eq!(ks.len(), 4);
        assert_eq!(ks[1], c);
        let (o, k) = (ks[0], ks[2]);
        let ho = func::conv_out_len(h, k, stride, padding);
        let wo = func::conv_out_len(w, k, stride, padding);

        let bias_t = bias.map(|b| b.value().clone());
        let out = func::conv2d(self.value(), kernel.value(), bias_t.as_ref(), stride, padding)
            .expect("conv2d preconditions checked by caller");

        let g = self.graph_handle();
        let needs = self.node.needs_grad
            || kernel.node.needs_grad
            || bias.map(|b| b.node.needs_grad).unwrap_or(false);
        let px = Rc::clone(&self.node);
        let pk = Rc::clone(&kernel.node);
        let pb = bias.map(|b| Rc::clone(&b.node));
        g.make(
            out,
            needs,
            Some(Box::new(move |up: &[T]| {
                let ckk = c * k * k;
                let hw = ho * wo;
                if pk.needs_grad {
                    // dW(O,Ckk) = up(O,HW) · colsᵀ
                    let cols = func::im2col(px.value.data(), c, h, w, k, stride, padding, ho, wo);
                    let mut dk = vec![T::zero(); o * ckk];
                    mm_nt(up, &cols, &mut dk, o, hw, ckk);
                    pk.accumulate(&dk);
                }
                if px.needs_grad {
                    // dcols(Ckk,HW) = Wᵀ · up, then fold back.
                    let mut dcols = vec![T::zero(); ckk * hw];
                    mm_tn(pk.value.data(), up, &mut dcols, ckk, o, hw);
                    let dx = func::col2im(&dcols, c, h, w, k, stride, padding, ho, wo);
                    px.accumulate(&dx);
                }
                if let Some(pb) = &pb {
                    if pb.needs_grad {
                        let mut db = vec![T::zero(); o];
                        for oi in 0..o {
                            for &u in &up[oi * hw..(oi + 1) * hw] {
                                db[oi] = db[oi] + u;
                            }
                        }
                        pb.accumulate(&db);
                    }
                }
            })),
        )
    }

    /// Nearest ×2 upsample of a (C,H,W) map.
    pub fn upsample2(&self) -> Var<T> {
        let out = func::resample(self.value(), func::Resample::Up2).expect("3-d input");
        let s = self.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        unary(self, out, move |p, up| {
            let (ho, wo) = (h * 2, w * 2);
            let mut grad = vec![T::zero(); c * h * w];
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let d = ci * h * w + (y / 2) * w + x / 2;
                        grad[d] = grad[d] + up[ci * ho * wo + y * wo + x];
                    }
                }
            }
            p.accumulate(&grad);
        })
    }

    /// Top-left ×½ downsample of a (C,H,W) map (even dims).
    pub fn downsample2(&self) -> Var<T> {
        let out = func::resample(self.value(), func::Resample::Down2).expect("even dims checked by caller");
        let s = self.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        unary(self, out, move |p, up| {
            let (ho, wo) = (h / 2, w / 2);
            let mut grad = vec![T::zero(); c * h * w];
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        grad[ci * h * w + (y * 2) * w + x * 2] = up[ci * ho * wo + y * wo + x];
                    }
                }
            }
            p.accumulate(&grad);
        })
    }

    /// Average-pool an (H,W) map with square kernel = stride = n.
    pub fn avg_pool2(&self, n: usize) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let (h, w) = (s[0], s[1]);
        assert!(h % n == 0 && w % n == 0, "avg_pool2 needs divisible dims");
        let (ho, wo) = (h / n, w / n);
        let inv = T::one() / lit::<T>((n * n) as f64);
        let mut out = vec![T::zero(); ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..n {
                    for dx in 0..n {
                        acc = acc + self.data()[(oy * n + dy) * w + ox * n + dx];
                    }
                }
                out[oy * wo + ox] = acc * inv;
            }
        }
        let out = Tensor::raw(vec![ho, wo], out);
        unary(self, out, move |p, up| {
            let mut grad = vec![T::zero(); h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let u = up[oy * wo + ox] * inv;
                    for dy in 0..n {
                        for dx in 0..n {
                            grad[(oy * n + dy) * w + ox * n + dx] = u;
                        }
                    }
                }
            }
            p.accumulate(&grad);
        })
    }

    /// Bilinear interpolation of an (H,W,C) map at an (P,2) tensor of
    /// normalized (u,v) points; differentiable in both map and points.
    pub fn bilinear_sample(&self, points: &Var<T>) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 3, "bilinear_sample map must be (H,W,C)");
        let (h, w, c) = (s[0], s[1], s[2]);
        let ps = points.shape();
        assert!(ps.len() == 2 && ps[1] == 2, "points must be (P,2)");
        let p_cnt = ps[0];
        let pts: Vec<(f64, f64)> = (0..p_cnt)
            .map(|i| (points.data()[i * 2].to_f64s(), points.data()[i * 2 + 1].to_f64s()))
            .collect();
        let out = func::bilinear_sample(self.value(), &pts).expect("non-empty map");
        binary(self, points, out, move |map, pt, up| {
            let md = map.value.data();
            let mut dmap = vec![T::zero(); h * w * c];
            let mut dpts = vec![T::zero(); p_cnt * 2];
            for pi in 0..p_cnt {
                let u = pt.value.data()[pi * 2].to_f64s();
                let v = pt.value.data()[pi * 2 + 1].to_f64s();
                let t = func::bilinear_tap(u, v, h, w);
                let (wx, wy) = (t.wx, t.wy);
                let corners = [
                    ((t.y0 * w + t.x0) * c, (1.0 - wy) * (1.0 - wx)),
                    ((t.y0 * w + t.x1) * c, (1.0 - wy) * wx),
                    ((t.y1 * w + t.x0) * c, wy * (1.0 - wx)),
                    ((t.y1 * w + t.x1) * c, wy * wx),
                ];
                let g_row = &up[pi * c..(pi + 1) * c];
                if map.needs_grad {
                    for &(base, cw) in &corners {
                        let cw = lit::<T>(cw);
                        for ch in 0..c {
                            dmap[base + ch] = dmap[base + ch] + cw * g_row[ch];
                        }
                    }
                }
                if pt.needs_grad {
                    let (mut du, mut dv) = (0.0f64, 0.0f64);
                    for ch in 0..c {
                        let m00 = md[(t.y0 * w + t.x0) * c + ch].to_f64s();
                        let m01 = md[(t.y0 * w + t.x1) * c + ch].to_f64s();
                        let m10 = md[(t.y1 * w + t.x0) * c + ch].to_f64s();
                        let m11 = md[(t.y1 * w + t.x1) * c + ch].to_f64s();
                        let gch = g_row[ch].to_f64s();
                        // ∂value/∂wx and ∂value/∂wy of the bilinear blend.
                        du += gch * ((1.0 - wy) * (m01 - m00) + wy * (m11 - m10)) * t.dwx_du;
                        dv += gch * ((1.0 - wx) * (m10 - m00) + wx * (m11 - m01)) * t.dwy_dv;
                    }
                    dpts[pi * 2] = lit::<T>(du);
                    dpts[pi * 2 + 1] = lit::<T>(dv);
                }
            }
            map.accumulate(&dmap);
            pt.accumulate(&dpts);
        })
    }
}
