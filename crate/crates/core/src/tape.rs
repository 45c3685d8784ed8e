//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation evaluates eagerly and records how to push a gradient back
//! to its inputs. Severing gradient flow is done with [`Tape::detach`], which
//! copies a value into a fresh leaf with no history.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::{gelu, gelu_grad, normalize_rows, softmax_in_place, Mat, Real, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of a sampled softmax cross-entropy: `-log softmax(row)[target]`
/// over the listed candidate columns (which include `target`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CeItem {
    pub row: usize,
    pub target: usize,
    pub candidates: Vec<usize>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Normalize(Var),
    MaskedSoftmax(Var, T),
    Columns(Var, usize),
    HStack(Vec<Var>),
    Gather(Vec<Var>, Vec<(usize, usize)>),
    RowUnit(Var, T),
    GroupSoftmax(Var, usize),
    StraightThrough(Var),
    Sum(Var),
    MeanRows(Var),
    CrossEntropy(Var, Vec<CeItem>),
    Diversity(Var, usize),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1 × cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_row_broadcast(self.value(bias));
        self.push(value, Op::AddRow(a, bias))
    }

    /// Multiplies every row of `a` elementwise by the `1 × cols` row `gain`.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Var {
        let g = self.value(gain);
        assert_eq!(g.shape(), (1, self.value(a).cols()), "gain shape");
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            for (x, &y) in value.row_mut(r).iter_mut().zip(g.as_slice()) {
                *x *= y;
            }
        }
        self.push(value, Op::MulRow(a, gain))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row standardisation (layer norm without affine terms).
    pub fn normalize(&mut self, a: Var) -> Var {
        let value = normalize_rows(self.value(a));
        self.push(value, Op::Normalize(a))
    }

    /// `softmax(a · scale + mask)` per row; `mask` is additive and constant.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mat<T>, scale: T) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), mask.shape(), "mask shape");
        for (x, &m) in value.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *x = *x * scale + m;
        }
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::MaskedSoftmax(a, scale))
    }

    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).columns(start, len);
        self.push(value, Op::Columns(a, start))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::hstack(&mats);
        self.push(value, Op::HStack(parts.to_vec()))
    }

    /// Builds a matrix whose row `k` is row `index[k].1` of `sources[index[k].0]`.
    pub fn gather(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Var {
        let cols = self.value(sources[0]).cols();
        let mut value = Mat::zeros(index.len(), cols);
        for (k, &(s, r)) in index.iter().enumerate() {
            value.row_mut(k).copy_from_slice(self.value(sources[s]).row(r));
        }
        self.push(value, Op::Gather(sources.to_vec(), index.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let index: Vec<(usize, usize)> = rows.iter().map(|&r| (0, r)).collect();
        self.gather(&[a], &index)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mut index = Vec::new();
        for (s, &p) in parts.iter().enumerate() {
            index.extend((0..self.value(p).rows()).map(|r| (s, r)));
        }
        self.gather(parts, &index)
    }

    /// `x / (‖x‖ + eps)` per row.
    pub fn row_unit(&mut self, a: Var, eps: T) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt() + eps;
            row.iter_mut().for_each(|x| *x = *x / n);
        }
        self.push(value, Op::RowUnit(a, eps))
    }

    /// Softmax within each of `groups` equal column blocks.
    pub fn group_softmax(&mut self, a: Var, groups: usize) -> Var {
        let mut value = self.value(a).clone();
        let width = value.cols() / groups;
        assert_eq!(width * groups, value.cols(), "group width");
        for r in 0..value.rows() {
            for g in 0..groups {
                softmax_in_place(&mut value.row_mut(r)[g * width..(g + 1) * width]);
            }
        }
        self.push(value, Op::GroupSoftmax(a, groups))
    }

    /// Forward value `hard`, backward gradient routed unchanged into `soft`.
    pub fn straight_through(&mut self, hard: Mat<T>, soft: Var) -> Var {
        assert_eq!(hard.shape(), self.value(soft).shape(), "straight-through shape");
        self.push(hard, Op::StraightThrough(soft))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = T::of(m.rows() as f64);
        let value = Mat::from_fn(1, m.cols(), |_, c| (0..m.rows()).map(|r| m.get(r, c)).sum::<T>() / n);
        self.push(value, Op::MeanRows(a))
    }

    /// Summed sampled softmax cross-entropy over `items` of the logit matrix.
    pub fn cross_entropy(&mut self, logits: Var, items: Vec<CeItem>) -> Var {
        let m = self.value(logits);
        let mut total = T::zero();
        for it in &items {
            let row = m.row(it.row);
            let max = it
                .candidates
                .iter()
                .map(|&c| row[c])
                .fold(T::neg_infinity(), T::max);
            let lse = max + it.candidates.iter().map(|&c| (row[c] - max).exp()).sum::<T>().ln();
            total += lse - row[it.target];
        }
        self.push(Mat::filled(1, 1, total), Op::CrossEntropy(logits, items))
    }

    /// Codebook diversity `(G·V − Σ_g exp H(p_g)) / (G·V)` of a `1 × G·V`
    /// row of averaged group distributions.
    pub fn diversity(&mut self, probs: Var, groups: usize) -> Var {
        let value = diversity_value(self.value(probs).as_slice(), groups);
        self.push(Mat::filled(1, 1, value), Op::Diversity(probs, groups))
    }

    pub fn grad(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Back-propagates from the scalar node `root`. Earlier gradients are discarded.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Mat::filled(1, 1, T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, g: Mat<T>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Mat<T>) {
        let node = &self.nodes[i];
        let contributions: Vec<(Var, Mat<T>)> = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![(*a, g.matmul_t(vb)), (*b, va.t_matmul(g))]
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![(*a, g.matmul(vb)), (*b, g.t_matmul(va))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(vb, |x, y| x * y)),
                    (*b, g.zip_map(va, |x, y| x * y)),
                ]
            }
            Op::AddRow(a, bias) => {
                let gb = Mat::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                vec![(*a, g.clone()), (*bias, gb)]
            }
            Op::MulRow(a, gain) => {
                let (va, vg) = (self.value(*a), self.value(*gain));
                let ga = Mat::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * vg.get(0, c));
                let gg = Mat::from_fn(1, g.cols(), |_, c| {
                    (0..g.rows()).map(|r| g.get(r, c) * va.get(r, c)).sum()
                });
                vec![(*a, ga), (*gain, gg)]
            }
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, g.map(|x| x * s))]
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                vec![(*a, g.zip_map(va, |dy, x| dy * gelu_grad(x)))]
            }
            Op::Normalize(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let n = T::of(x.cols() as f64);
                let eps = T::of(LAYER_NORM_EPS);
                let mut gx = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().copied().sum::<T>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let rstd = (var + eps).sqrt().recip();
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (c, out) in gx.row_mut(r).iter_mut().enumerate() {
                        *out = rstd * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                vec![(*a, gx)]
            }
            Op::MaskedSoftmax(a, scale) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum::<T>();
                    for (c, out) in gx.row_mut(r).iter_mut().enumerate() {
                        *out = *scale * yr[c] * (gr[c] - inner);
                    }
                }
                vec![(*a, gx)]
            }
            Op::Columns(a, start) => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                vec![(*a, ga)]
            }
            Op::HStack(parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    out.push((p, g.columns(off, w)));
                    off += w;
                }
                out
            }
            Op::Gather(sources, index) => {
                let mut acc: Vec<Mat<T>> = sources
                    .iter()
                    .map(|&s| {
                        let v = self.value(s);
                        Mat::zeros(v.rows(), v.cols())
                    })
                    .collect();
                for (k, &(s, r)) in index.iter().enumerate() {
                    for (o, &x) in acc[s].row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                sources.iter().copied().zip(acc).collect()
            }
            Op::RowUnit(a, eps) => {
                let x = self.value(*a);
                let mut gx = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (xr, gr) = (x.row(r), g.row(r));
                    let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let ne = n + *eps;
                    let xg = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    let k = if n > T::zero() {
                        xg / (n * ne * ne)
                    } else {
                        T::zero()
                    };
                    for (c, out) in gx.row_mut(r).iter_mut().enumerate() {
                        *out = gr[c] / ne - xr[c] * k;
                    }
                }
                vec![(*a, gx)]
            }
            Op::GroupSoftmax(a, groups) => {
                let y = &node.value;
                let width = y.cols() / groups;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    for grp in 0..*groups {
                        let span = grp * width..(grp + 1) * width;
                        let (yr, gr) = (&y.row(r)[span.clone()], &g.row(r)[span.clone()]);
                        let inner = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum::<T>();
                        for (c, out) in gx.row_mut(r)[span].iter_mut().enumerate() {
                            *out = yr[c] * (gr[c] - inner);
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::StraightThrough(soft) => vec![(*soft, g.clone())],
            Op::Sum(a) => {
                let va = self.value(*a);
                vec![(*a, Mat::filled(va.rows(), va.cols(), g.get(0, 0)))]
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let n = T::of(va.rows() as f64);
                vec![(*a, Mat::from_fn(va.rows(), va.cols(), |_, c| g.get(0, c) / n))]
            }
            Op::CrossEntropy(logits, items) => {
                let m = self.value(*logits);
                let scale = g.get(0, 0);
                let mut gl = Mat::zeros(m.rows(), m.cols());
                for it in items {
                    let row = m.row(it.row);
                    let max = it
                        .candidates
                        .iter()
                        .map(|&c| row[c])
                        .fold(T::neg_infinity(), T::max);
                    let z = it.candidates.iter().map(|&c| (row[c] - max).exp()).sum::<T>();
                    let out = gl.row_mut(it.row);
                    for &c in &it.candidates {
                        out[c] += scale * (row[c] - max).exp() / z;
                    }
                    out[it.target] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::Diversity(probs, groups) => {
                let p = self.value(*probs);
                let total = T::of(p.cols() as f64);
                let width = p.cols() / groups;
                let scale = g.get(0, 0);
                let mut gp = Mat::zeros(1, p.cols());
                for grp in 0..*groups {
                    let span = grp * width..(grp + 1) * width;
                    let ps = &p.as_slice()[span.clone()];
                    let perplexity = entropy(ps).exp();
                    for (c, out) in gp.as_mut_slice()[span].iter_mut().enumerate() {
                        let lp = if ps[c] > T::zero() { ps[c].ln() } else { T::zero() };
                        *out = scale * perplexity * (lp + T::one()) / total;
                    }
                }
                vec![(*probs, gp)]
            }
        };
        for (v, gv) in contributions {
            self.accumulate(v, gv);
        }
    }
}

/// Natural-log entropy; zero-probability entries contribute nothing.
pub fn entropy<T: Real>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| x * x.ln())
        .sum::<T>()
}

pub(crate) fn diversity_value<T: Real>(p: &[T], groups: usize) -> T {
    let total = T::of(p.len() as f64);
    let width = p.len() / groups;
    let perplexity: T = (0..groups)
        .map(|g| entropy(&p[g * width..(g + 1) * width]).exp())
        .sum();
    (total - perplexity) / total
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` over every entry of `x`.
    fn numeric_grad(x: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64) -> Mat<f64> {
        let h = 1e-6;
        let mut g = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: Mat<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let eval = |m: &Mat<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(m.clone());
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = build(&mut t, v);
        t.backward(out);
        let analytic = t.grad(v).cloned().unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(&x, eval);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}\n{analytic:?}\n{numeric:?}");
    }

    fn sample(rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_fn(rows, cols, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.17 - 0.8)
    }

    #[test]
    fn layer_ops_backprop() {
        let w = sample(4, 3).map(|x| x * 0.5);
        check(sample(3, 4), |t, x| {
            let wv = t.leaf(w.clone());
            let n = t.normalize(x);
            let h = t.matmul(n, wv);
            let a = t.gelu(h);
            let sq = t.mul(a, a);
            t.sum(sq)
        });
    }

    #[test]
    fn attention_backprop() {
        let mask = Mat::from_fn(3, 3, |r, c| if c > r { f64::NEG_INFINITY } else { 0.0 });
        check(sample(3, 4), |t, x| {
            let s = t.matmul_t(x, x);
            let p = t.masked_softmax(s, &mask, 0.5);
            let o = t.matmul(p, x);
            let c = t.columns(o, 1, 2);
            let h = t.hstack(&[c, x]);
            let sq = t.mul(h, h);
            t.sum(sq)
        });
    }

    #[test]
    fn broadcast_and_gather_backprop() {
        check(sample(4, 3), |t, x| {
            let b = t.select_rows(x, &[2]);
            let y = t.add_row(x, b);
            let z = t.mul_row(y, b);
            let g = t.gather(&[z, x], &[(0, 1), (1, 3), (0, 1), (1, 0)]);
            let m = t.mean_rows(g);
            let s = t.scale(m, 3.0);
            let q = t.mul(s, s);
            t.sum(q)
        });
    }

    #[test]
    fn loss_ops_backprop() {
        check(sample(3, 4), |t, x| {
            let u = t.row_unit(x, 1e-8);
            let s = t.matmul_t(u, u);
            let s = t.scale(s, 2.0);
            t.cross_entropy(
                s,
                alloc::vec![
                    CeItem { row: 0, target: 0, candidates: alloc::vec![0, 1, 2] },
                    CeItem { row: 2, target: 2, candidates: alloc::vec![2, 0] },
                ],
            )
        });
        check(sample(2, 6), |t, x| {
            let p = t.group_softmax(x, 2);
            let m = t.mean_rows(p);
            t.diversity(m, 2)
        });
    }

    #[test]
    fn detach_and_straight_through() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(sample(2, 3));
        let d = t.detach(x);
        let y = t.mul(d, x);
        let s = t.sum(y);
        t.backward(s);
        // gradient only through the attached factor
        assert_eq!(t.grad(x).unwrap(), t.value(d));
        assert!(t.grad(d).is_some());

        let mut t = Tape::<f64>::new();
        let x = t.leaf(sample(1, 4));
        let hard = Mat::from_vec(1, 4, alloc::vec![0.0, 1.0, 0.0, 0.0]);
        let st = t.straight_through(hard.clone(), x);
        assert_eq!(t.value(st), &hard);
        let s = t.sum(st);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap(), &Mat::filled(1, 4, 1.0));
    }
}
