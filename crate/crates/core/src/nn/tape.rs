//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! Rows are batch elements. Every op records its inputs on the tape and
//! `backward` walks the tape once in reverse, accumulating gradients.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

static NEXT_SET: AtomicU64 = AtomicU64::new(1);

// ── Parameters ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Every set (including clones) carries a unique
/// id so gradients from several sets on one tape stay separate.
#[derive(Debug)]
pub struct ParamSet {
    uid: u64,
    names: Vec<String>,
    values: Vec<Mat>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_SET.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            uid: NEXT_SET.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }
    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn values(&self) -> &[Mat] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// `self <- tau * src + (1 - tau) * self`
    pub fn soft_update(&mut self, src: &ParamSet, tau: f64) {
        for (t, s) in self.values.iter_mut().zip(&src.values) {
            *t = &*t * (1.0 - tau) + s * tau;
        }
    }

    pub fn copy_from(&mut self, src: &ParamSet) {
        for (t, s) in self.values.iter_mut().zip(&src.values) {
            t.copy_from(s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|m| m.norm_squared()).sum()
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    map: BTreeMap<(u64, usize), Mat>,
}

impl Grads {
    pub fn get(&self, set: &ParamSet, id: ParamId) -> Option<&Mat> {
        self.map.get(&(set.uid, id.0))
    }

    /// Gradients for every parameter of `set`, zero where untouched.
    pub fn for_set(&self, set: &ParamSet) -> Vec<Mat> {
        set.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                self.map
                    .get(&(set.uid, i))
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(v.nrows(), v.ncols()))
            })
            .collect()
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<(u64, usize)>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Vec<Var>, Vec<(usize, usize)>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf(None))
    }

    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        self.push(set.values[id.0].clone(), Op::Leaf(Some((set.uid, id.0))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let mut v = self.value(x).clone();
        for mut vr in v.row_iter_mut() {
            vr += r;
        }
        self.push(v, Op::AddRow(x, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let v = self.value(a).component_mul(&c);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_element(1, 1, m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut c = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.nrows(), rows, "concat_cols row mismatch");
            v.columns_mut(c, m.ncols()).copy_from(m);
            c += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).columns(start, len).clone_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Output row `i` is row `index[i].1` of `sources[index[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Var {
        let cols = self.value(sources[0]).ncols();
        let mut v = Mat::zeros(index.len(), cols);
        for (i, &(src, row)) in index.iter().enumerate() {
            v.row_mut(i).copy_from(&self.value(sources[src]).row(row));
        }
        self.push(v, Op::Gather(sources.to_vec(), index))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.sum() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                xhat[(i, j)] = (xv[(i, j)] - mu) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut v = xhat.clone();
        for i in 0..n {
            for j in 0..d {
                v[(i, j)] = v[(i, j)] * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Causal multi-head scaled dot-product attention. Inputs are
    /// `(batch * seq) x d` with rows ordered `b * seq + t`; position `t`
    /// attends to positions `<= t` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(qv.nrows(), batch * seq, "attention input rows");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(batch * seq, d);
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for h in 0..heads {
                let qb = qv.view((b * seq, h * dh), (seq, dh));
                let kb = kv.view((b * seq, h * dh), (seq, dh));
                let vb = vv.view((b * seq, h * dh), (seq, dh));
                let mut s = qb * kb.transpose() * scale;
                for i in 0..seq {
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        mx = mx.max(s[(i, j)]);
                    }
                    let mut z = 0.0;
                    for j in 0..seq {
                        let e = if j <= i { (s[(i, j)] - mx).exp() } else { 0.0 };
                        s[(i, j)] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        s[(i, j)] /= z;
                    }
                }
                out.view_mut((b * seq, h * dh), (seq, dh)).copy_from(&(&s * vb));
                probs.push(s);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_element(1, 1, 1.0));
        let mut out = Grads::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf(None) => {}
                Op::Leaf(Some(key)) => {
                    match out.map.get_mut(key) {
                        Some(acc) => *acc += &g,
                        None => {
                            out.map.insert(*key, g);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).tr_mul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let mut gr = Mat::zeros(1, g.ncols());
                    for r in g.row_iter() {
                        gr += r;
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(self.value(*b));
                    let gb = g.component_mul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g.component_mul(c)),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y)));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(x, |g, x| {
                            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        }),
                    );
                }
                Op::Exp(a) => acc(&mut grads, *a, g.component_mul(&node.value)),
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(x, |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
                    );
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| 2.0 * g * x));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::from_element(r, c, g[(0, 0)] / (r * c) as f64));
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.columns(c, w).clone_owned());
                        c += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    ga.columns_mut(*start, g.ncols()).copy_from(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(sources, index) => {
                    let mut per: Vec<Mat> = sources
                        .iter()
                        .map(|&s| {
                            let (r, c) = self.value(s).shape();
                            Mat::zeros(r, c)
                        })
                        .collect();
                    for (i, &(src, row)) in index.iter().enumerate() {
                        let mut target = per[src].row_mut(row);
                        target += g.row(i);
                    }
                    for (&s, m) in sources.iter().zip(per) {
                        acc(&mut grads, s, m);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = g.shape();
                    let gv = self.value(*gamma);
                    let mut g_gamma = Mat::zeros(1, d);
                    let mut g_beta = Mat::zeros(1, d);
                    let mut gx = Mat::zeros(n, d);
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gij = g[(i, j)];
                            g_beta[(0, j)] += gij;
                            g_gamma[(0, j)] += gij * xhat[(i, j)];
                            let dxh = gij * gv[(0, j)];
                            m1 += dxh;
                            m2 += dxh * xhat[(i, j)];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g[(i, j)] * gv[(0, j)];
                            gx[(i, j)] = inv_std[i] * (dxh - m1 - xhat[(i, j)] * m2);
                        }
                    }
                    acc(&mut grads, *gamma, g_gamma);
                    acc(&mut grads, *beta, g_beta);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(qv.nrows(), d);
                    let mut gk = Mat::zeros(qv.nrows(), d);
                    let mut gvv = Mat::zeros(qv.nrows(), d);
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let p = &probs[b * heads + h];
                            let at = (b * seq, h * dh);
                            let shape = (*seq, dh);
                            let go = g.view(at, shape);
                            let qb = qv.view(at, shape);
                            let kb = kv.view(at, shape);
                            let vb = vv.view(at, shape);
                            gvv.view_mut(at, shape).copy_from(&p.tr_mul(&go));
                            let dp = go * vb.transpose();
                            let mut ds = p.component_mul(&dp);
                            for i in 0..*seq {
                                let dot: f64 = (0..*seq).map(|j| dp[(i, j)] * p[(i, j)]).sum();
                                for j in 0..*seq {
                                    ds[(i, j)] -= p[(i, j)] * dot;
                                }
                            }
                            ds *= scale;
                            gq.view_mut(at, shape).copy_from(&(&ds * kb));
                            gk.view_mut(at, shape).copy_from(&(ds.tr_mul(&qb)));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gvv);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric<F: Fn(&Mat) -> f64>(x: &Mat, f: F) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.nrows(), x.ncols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            out[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check<F: Fn(&mut Tape, Var) -> Var>(x: Mat, build: F) {
        let mut ps = ParamSet::new();
        let id = ps.add("x", x.clone());
        let mut tape = Tape::new();
        let xv = tape.param(&ps, id);
        let y = build(&mut tape, xv);
        let loss = tape.sum(y);
        let g = tape.backward(loss).for_set(&ps).remove(0);
        let n = numeric(&x, |xm| {
            let mut t = Tape::new();
            let v = t.constant(xm.clone());
            let y = build(&mut t, v);
            let l = t.sum(y);
            t.scalar(l)
        });
        assert!((&g - &n).amax() < 1e-6, "analytic {g} numeric {n}");
    }

    fn sample(r: usize, c: usize, seed: u64) -> Mat {
        Mat::from_fn(r, c, |i, j| (((i * 7 + j * 13) as f64 + seed as f64) * 0.731).sin())
    }

    #[test]
    fn elementwise_ops() {
        check(sample(3, 4, 1), |t, x| t.tanh(x));
        check(sample(3, 4, 2), |t, x| t.gelu(x));
        check(sample(3, 4, 3), |t, x| t.exp(x));
        check(sample(3, 4, 4), |t, x| t.square(x));
        check(sample(3, 4, 5), |t, x| t.clamp(x, -0.5, 0.5));
        check(sample(3, 4, 6), |t, x| {
            let y = t.scale(x, -2.5);
            t.relu(y)
        });
    }

    #[test]
    fn structural_ops() {
        let w = sample(4, 2, 9);
        check(sample(3, 4, 1), move |t, x| {
            let c = t.constant(w.clone());
            t.matmul(x, c)
        });
        check(sample(3, 4, 2), |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_cols(x, 0, 1);
            let c = t.concat_cols(&[a, b, x]);
            t.square(c)
        });
        check(sample(3, 4, 3), |t, x| {
            let r = t.gather_rows(&[x, x], vec![(0, 2), (1, 2), (0, 0)]);
            t.square(r)
        });
        check(sample(1, 4, 4), |t, row| {
            let base = t.constant(sample(3, 4, 8));
            let y = t.add_row(base, row);
            t.mul(y, y)
        });
        check(sample(3, 4, 5), |t, x| {
            let m = t.mean(x);
            let s = t.sub(x, x);
            let a = t.add(s, x);
            let mc = t.mul_const(a, sample(3, 4, 1));
            let sq = t.square(mc);
            let tot = t.sum(sq);
            t.mul(tot, m)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let g = sample(1, 5, 3);
        let b = sample(1, 5, 4);
        let w = sample(4, 5, 7);
        check(sample(4, 5, 1), move |t, x| {
            let (gv, bv, wv) = (t.constant(g.clone()), t.constant(b.clone()), t.constant(w.clone()));
            let y = t.layer_norm(x, gv, bv, 1e-5);
            t.mul(y, wv)
        });
        let x = sample(4, 5, 2);
        let w = sample(4, 5, 7);
        check(sample(1, 5, 5), move |t, g| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let b = t.constant(Mat::zeros(1, 5));
            let y = t.layer_norm(xv, g, b, 1e-5);
            t.mul(y, wv)
        });
    }

    #[test]
    fn attention_gradients() {
        let (batch, seq, heads, d) = (2, 3, 2, 4);
        let k = sample(batch * seq, d, 3);
        let v = sample(batch * seq, d, 4);
        let w = sample(batch * seq, d, 5);
        let (k2, v2, w2) = (k.clone(), v.clone(), w.clone());
        check(sample(batch * seq, d, 1), move |t, q| {
            let (kv, vv, wv) = (t.constant(k.clone()), t.constant(v.clone()), t.constant(w.clone()));
            let o = t.causal_attention(q, kv, vv, batch, seq, heads);
            t.mul(o, wv)
        });
        let q = sample(batch * seq, d, 6);
        check(sample(batch * seq, d, 2), move |t, x| {
            let qv = t.constant(q.clone());
            let wv = t.constant(w2.clone());
            let o = t.causal_attention(qv, x, x, batch, seq, heads);
            let _ = (&k2, &v2);
            t.mul(o, wv)
        });
    }

    #[test]
    fn clones_get_separate_gradients() {
        let mut a = ParamSet::new();
        let id = a.add("w", Mat::from_element(1, 1, 2.0));
        let b = a.clone();
        assert_ne!(a.uid(), b.uid());
        let mut t = Tape::new();
        let x = t.param(&a, id);
        let y = t.param(&b, id);
        let z = t.mul(x, x);
        let s = t.add(z, y);
        let g = t.backward(s);
        assert_eq!(g.get(&a, id).unwrap()[(0, 0)], 4.0);
        assert_eq!(g.get(&b, id).unwrap()[(0, 0)], 1.0);
    }
}
