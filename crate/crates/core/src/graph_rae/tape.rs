//! Matrix-level reverse-mode differentiation.
//!
//! Every op records its inputs; `backward` walks the tape in reverse and
//! accumulates adjoints. Scalar losses are recorded as `Fused` nodes that
//! carry their local gradients computed during the forward pass.

use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Abs(usize),
    Scale(usize, T),
    Gather(usize, Vec<usize>),
    SegmentMean { src: usize, seg: Vec<usize>, counts: Vec<usize> },
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    RowNormalize(usize),
    Attention { q: usize, k: usize, v: usize, dst: Vec<usize>, heads: usize, alpha: Vec<T> },
    Fused { inputs: Vec<usize>, grads: Vec<Mat<T>> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -T::one());
        self.push(out, Op::Sub(a.0, b.0))
    }

    /// `a + 1·row`, broadcasting a `1×m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut out = self.value(a).clone();
        let cols = out.cols();
        assert_eq!(cols, r.cols());
        for i in 0..out.rows() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += x;
            }
        }
        let _ = cols;
        self.push(out, Op::AddRow(a.0, row.0))
    }

    /// Elementwise product with a broadcast `1×m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).clone();
        assert_eq!(r.rows(), 1);
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o *= x;
            }
        }
        self.push(out, Op::MulRow(a.0, row.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a.0))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a.0, s))
    }

    /// Row `r` of the output is row `idx[r]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut out = Mat::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        self.push(out, Op::Gather(a.0, idx))
    }

    /// Mean of the rows sharing a segment id; empty segments are zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: Vec<usize>, n_segments: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), seg.len());
        let mut counts = vec![0usize; n_segments];
        let mut out = Mat::zeros(n_segments, src.cols());
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for (o, &x) in out.row_mut(s).iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = T::one() / T::from_count(c);
                for o in out.row_mut(s) {
                    *o *= inv;
                }
            }
        }
        self.push(out, Op::SegmentMean { src: a.0, seg, counts })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows(), y.rows());
        let out = Mat::from_fn(x.rows(), x.cols() + y.cols(), |i, j| {
            if j < x.cols() {
                x[(i, j)]
            } else {
                y[(i, j - x.cols())]
            }
        });
        self.push(out, Op::ConcatCols(a.0, b.0))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols());
        let mut data = x.as_slice().to_vec();
        data.extend_from_slice(y.as_slice());
        let out = Mat::from_vec(x.rows() + y.rows(), x.cols(), data).expect("consistent shape");
        self.push(out, Op::ConcatRows(a.0, b.0))
    }

    /// Divides each row by its ℓ2 norm. Callers must rule out zero rows.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        for i in 0..out.rows() {
            let n = crate::scalar::norm2(src.row(i));
            for o in out.row_mut(i) {
                *o /= n;
            }
        }
        self.push(out, Op::RowNormalize(a.0))
    }

    /// Multi-head attention of node queries over their incoming edges.
    ///
    /// `q` is `n×d` (one row per node), `k` and `v` are `m×d` (one row per
    /// edge) and `dst[e]` is the node edge `e` points into. Scores are scaled
    /// dot products per head, softmax-normalized over each node's incoming
    /// edges. Nodes without incoming edges receive a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dst: Vec<usize>, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let n = qm.rows();
        let d = qm.cols();
        assert!(heads > 0 && d % heads == 0, "d must divide into heads");
        assert_eq!(km.shape(), vm.shape());
        assert_eq!(km.rows(), dst.len());
        assert_eq!(km.cols(), d);
        let dh = d / heads;
        let inv_sqrt = T::one() / T::from_count(dh).sqrt();
        let m = dst.len();
        let mut alpha = vec![T::zero(); m * heads];
        let mut max = vec![T::neg_infinity(); n * heads];
        for (e, &i) in dst.iter().enumerate() {
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let s = crate::scalar::dot(&qm.row(i)[r.clone()], &km.row(e)[r]) * inv_sqrt;
                alpha[e * heads + h] = s;
                if s > max[i * heads + h] {
                    max[i * heads + h] = s;
                }
            }
        }
        let mut denom = vec![T::zero(); n * heads];
        for (e, &i) in dst.iter().enumerate() {
            for h in 0..heads {
                let x = (alpha[e * heads + h] - max[i * heads + h]).exp();
                alpha[e * heads + h] = x;
                denom[i * heads + h] += x;
            }
        }
        let mut out = Mat::zeros(n, d);
        for (e, &i) in dst.iter().enumerate() {
            for h in 0..heads {
                let a = alpha[e * heads + h] / denom[i * heads + h];
                alpha[e * heads + h] = a;
                for c in h * dh..(h + 1) * dh {
                    out[(i, c)] += a * vm[(e, c)];
                }
            }
        }
        self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, dst, heads, alpha })
    }

    /// Records a scalar-valued function of `inputs` whose gradients were
    /// computed alongside its value.
    pub fn fused(&mut self, value: T, inputs: Vec<Var>, grads: Vec<Mat<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).shape(), g.shape());
        }
        let out = Mat::from_vec(1, 1, vec![value]).expect("1x1");
        self.push(out, Op::Fused { inputs: inputs.into_iter().map(|v| v.0).collect(), grads })
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Vec<Option<Mat<T>>> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![T::one()]).expect("1x1"));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&self.nodes[*b].value);
                    let db = self.nodes[*a].value.t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-T::one()));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, column_sums(&g));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let r = &self.nodes[*row].value;
                    let av = &self.nodes[*a].value;
                    let mut da = g.clone();
                    let mut dr = Mat::zeros(1, r.cols());
                    for i in 0..g.rows() {
                        for c in 0..g.cols() {
                            da[(i, c)] = g[(i, c)] * r[(0, c)];
                            dr[(0, c)] += g[(i, c)] * av[(i, c)];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = Mat::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * (T::one() - y[(i, j)] * y[(i, j)]));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = Mat::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * y[(i, j)] * (T::one() - y[(i, j)]));
                    accumulate(&mut grads, *a, da);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[*a].value;
                    let da = Mat::from_fn(g.rows(), g.cols(), |i, j| {
                        let s = x[(i, j)];
                        if s > T::zero() {
                            g[(i, j)]
                        } else if s < T::zero() {
                            -g[(i, j)]
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Gather(a, idx) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Mat::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &x) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SegmentMean { src, seg, counts } => {
                    let cols = g.cols();
                    let mut da = Mat::zeros(seg.len(), cols);
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = T::one() / T::from_count(counts[s]);
                        for (o, &x) in da.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o = x * inv;
                        }
                    }
                    accumulate(&mut grads, *src, da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let da = Mat::from_fn(g.rows(), ca, |i, j| g[(i, j)]);
                    let db = Mat::from_fn(g.rows(), cb, |i, j| g[(i, ca + j)]);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.rows();
                    let cols = g.cols();
                    let (top, bottom) = g.as_slice().split_at(ra * cols);
                    let da = Mat::from_vec(ra, cols, top.to_vec()).expect("shape");
                    let db = Mat::from_vec(g.rows() - ra, cols, bottom.to_vec()).expect("shape");
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::RowNormalize(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let mut da = Mat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let n = crate::scalar::norm2(x.row(i));
                        let proj = crate::scalar::dot(y.row(i), g.row(i));
                        for c in 0..x.cols() {
                            da[(i, c)] = (g[(i, c)] - y[(i, c)] * proj) / n;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Attention { q, k, v, dst, heads, alpha } => {
                    let (qm, km, vm) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let n = qm.rows();
                    let d = qm.cols();
                    let heads = *heads;
                    let dh = d / heads;
                    let inv_sqrt = T::one() / T::from_count(dh).sqrt();
                    let m = dst.len();
                    let mut dq = Mat::zeros(n, d);
                    let mut dk = Mat::zeros(m, d);
                    let mut dv = Mat::zeros(m, d);
                    // dα per edge/head, and Σ α·dα per node/head.
                    let mut dalpha = vec![T::zero(); m * heads];
                    let mut weighted = vec![T::zero(); n * heads];
                    for (e, &i) in dst.iter().enumerate() {
                        for h in 0..heads {
                            let a = alpha[e * heads + h];
                            let mut da = T::zero();
                            for c in h * dh..(h + 1) * dh {
                                dv[(e, c)] += a * g[(i, c)];
                                da += g[(i, c)] * vm[(e, c)];
                            }
                            dalpha[e * heads + h] = da;
                            weighted[i * heads + h] += a * da;
                        }
                    }
                    for (e, &i) in dst.iter().enumerate() {
                        for h in 0..heads {
                            let a = alpha[e * heads + h];
                            let ds = a * (dalpha[e * heads + h] - weighted[i * heads + h]) * inv_sqrt;
                            for c in h * dh..(h + 1) * dh {
                                dq[(i, c)] += ds * km[(e, c)];
                                dk[(e, c)] += ds * qm[(i, c)];
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Fused { inputs, grads: local } => {
                    let up = g[(0, 0)];
                    for (i, lg) in inputs.iter().zip(local) {
                        accumulate(&mut grads, *i, lg.scale(up));
                    }
                }
            }
            grads[idx] = Some(g);
        }
        grads
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], idx: usize, g: Mat<T>) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Mat<f64>, f: &dyn Fn(&Mat<f64>) -> f64) -> Mat<f64> {
        let h = 1e-6;
        Mat::from_fn(x.rows(), x.cols(), |i, j| {
            let mut p = x.clone();
            p[(i, j)] += h;
            let mut m = x.clone();
            m[(i, j)] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn sum_of_squares(t: &mut Tape<f64>, v: Var) -> Var {
        let val = t.value(v).clone();
        let total = val.as_slice().iter().map(|x| x * x).sum();
        let g = val.scale(2.0);
        t.fused(total, vec![v], vec![g])
    }

    fn close(a: &Mat<f64>, b: &Mat<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn fill(rows: usize, cols: usize, seed: f64) -> Mat<f64> {
        Mat::from_fn(rows, cols, |i, j| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn attention_gradients_match_differences() {
        let dst = vec![0, 0, 2, 2, 2];
        let q0 = fill(3, 4, 0.1);
        let k0 = fill(5, 4, 0.7);
        let v0 = fill(5, 4, 1.3);
        let run = |q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>| {
            let mut t = Tape::new();
            let (q, k, v) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
            let a = t.attention(q, k, v, dst.clone(), 2);
            let l = t.tanh(a);
            let root = sum_of_squares(&mut t, l);
            (t, [q, k, v], root)
        };
        let (t, leaves, root) = run(&q0, &k0, &v0);
        // node 1 has no incoming edges
        assert!(t.value(Var(3)).row(1).iter().all(|&x| x == 0.0));
        let g = t.backward(root);
        let val = |q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>| {
            let (t, _, r) = run(q, k, v);
            t.value(r)[(0, 0)]
        };
        close(g[leaves[0].0].as_ref().unwrap(), &numeric_grad(&q0, &|q| val(q, &k0, &v0)), 1e-6);
        close(g[leaves[1].0].as_ref().unwrap(), &numeric_grad(&k0, &|k| val(&q0, k, &v0)), 1e-6);
        close(g[leaves[2].0].as_ref().unwrap(), &numeric_grad(&v0, &|v| val(&q0, &k0, v)), 1e-6);
    }

    #[test]
    fn composite_gradients_match_differences() {
        let a0 = fill(4, 3, 0.2);
        let w0 = fill(3, 3, 0.9);
        let r0 = fill(1, 3, 2.0);
        let run = |a: &Mat<f64>, w: &Mat<f64>, r: &Mat<f64>| {
            let mut t = Tape::new();
            let (a, w, r) = (t.leaf(a.clone()), t.leaf(w.clone()), t.leaf(r.clone()));
            let h = t.matmul(a, w);
            let h = t.add_row(h, r);
            let s = t.sigmoid(r);
            let h = t.mul_row(h, s);
            let gth = t.gather(h, vec![3, 0, 0, 2, 1]);
            let seg = t.segment_mean(gth, vec![0, 1, 0, 2, 1], 4);
            let cc = t.concat_cols(seg, seg);
            let cr = t.concat_rows(cc, cc);
            let ab = t.abs(cr);
            let sc = t.scale(ab, 0.5);
            let n = t.row_normalize(a);
            let diff = t.sub(n, a);
            let d2 = t.tanh(diff);
            let x = sum_of_squares(&mut t, sc);
            let y = sum_of_squares(&mut t, d2);
            let root = t.add(x, y);
            (t, [a, w, r], root)
        };
        let (t, leaves, root) = run(&a0, &w0, &r0);
        let g = t.backward(root);
        let val = |a: &Mat<f64>, w: &Mat<f64>, r: &Mat<f64>| {
            let (t, _, root) = run(a, w, r);
            t.value(root)[(0, 0)]
        };
        close(g[leaves[0].0].as_ref().unwrap(), &numeric_grad(&a0, &|a| val(a, &w0, &r0)), 1e-6);
        close(g[leaves[1].0].as_ref().unwrap(), &numeric_grad(&w0, &|w| val(&a0, w, &r0)), 1e-6);
        close(g[leaves[2].0].as_ref().unwrap(), &numeric_grad(&r0, &|r| val(&a0, &w0, r)), 1e-6);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1e6f64), 0.0);
        assert_eq!(sigmoid(1e6f64), 1.0);
        assert!((sigmoid(0.3f64) - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-15);
    }
}
