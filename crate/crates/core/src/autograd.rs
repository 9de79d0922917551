//! A small reverse-mode automatic differentiation tape over dense f64 matrices.
//!
//! Every value is a 2-D matrix. Sequence batches are laid out as
//! `(batch * frames) x channels`, row `b * frames + t` holding frame `t` of
//! instance `b`; the sequence-aware ops (`im2col`, `repeat_rows`,
//! `mean_pool_seq`, `stack_time`) rely on that layout.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct GruCache {
    r: Mat,
    z: Mat,
    n: Mat,
    hp_n: Mat,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    RepeatRows(Var, usize),
    MeanPoolSeq(Var, usize),
    Im2col {
        x: Var,
        seq_len: usize,
        kernel: usize,
        dilation: usize,
    },
    GatherRows(Var, Vec<usize>),
    StackTime(Vec<Var>),
    GruCell {
        xp: Var,
        h: Var,
        whh: Var,
        bhh: Var,
        cache: Box<GruCache>,
    },
    SoftmaxRows(Var),
    Grl(Var, f64),
    SumSq(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar node");
        m[[0, 0]]
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = self.value(a) + r;
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// `a * row` elementwise, broadcasting a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = self.value(a) * r;
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    /// `max(a, min)`; the gradient passes only where `a > min`.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(min));
        let ng = self.ng(a);
        self.push(v, Op::ClampMin(a, min), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    /// `B x c -> (B * times) x c`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let (b, c) = x.dim();
        let mut out = Mat::zeros((b * times, c));
        for i in 0..b {
            out.slice_mut(s![i * times..(i + 1) * times, ..])
                .assign(&x.slice(s![i..i + 1, ..]));
        }
        let ng = self.ng(a);
        self.push(out, Op::RepeatRows(a, times), ng)
    }

    /// `(B * seq_len) x c -> B x c`, mean over each instance's frames.
    pub fn mean_pool_seq(&mut self, a: Var, seq_len: usize) -> Var {
        let x = self.value(a);
        let (n, c) = x.dim();
        assert_eq!(n % seq_len, 0, "rows not a multiple of seq_len");
        let b = n / seq_len;
        let mut out = Mat::zeros((b, c));
        for i in 0..b {
            let block = x.slice(s![i * seq_len..(i + 1) * seq_len, ..]);
            out.row_mut(i).assign(&block.mean_axis(Axis(0)).unwrap());
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanPoolSeq(a, seq_len), ng)
    }

    /// Unfolds same-padded dilated 1-D convolution windows so a convolution
    /// becomes one matmul: `(B*T) x C -> (B*T) x (kernel*C)`, tap `j` reading
    /// frame `t + (j - kernel/2) * dilation` of the same instance.
    pub fn im2col(&mut self, a: Var, seq_len: usize, kernel: usize, dilation: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let x = self.value(a);
        let (n, c) = x.dim();
        assert_eq!(n % seq_len, 0, "rows not a multiple of seq_len");
        let half = (kernel / 2) as isize;
        let mut out = Mat::zeros((n, kernel * c));
        for b in 0..n / seq_len {
            for t in 0..seq_len {
                let row = b * seq_len + t;
                for j in 0..kernel {
                    let src = t as isize + (j as isize - half) * dilation as isize;
                    if src < 0 || src >= seq_len as isize {
                        continue;
                    }
                    out.slice_mut(s![row, j * c..(j + 1) * c])
                        .assign(&x.row(b * seq_len + src as usize));
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            out,
            Op::Im2col {
                x: a,
                seq_len,
                kernel,
                dilation,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let v = x.select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Interleaves `T` per-step `B x H` matrices into `(B*T) x H`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        let t_len = steps.len();
        let (b, h) = self.value(steps[0]).dim();
        let mut out = Mat::zeros((b * t_len, h));
        for (t, &sv) in steps.iter().enumerate() {
            let m = self.value(sv);
            for i in 0..b {
                out.row_mut(i * t_len + t).assign(&m.row(i));
            }
        }
        let ng = steps.iter().any(|&v| self.ng(v));
        self.push(out, Op::StackTime(steps.to_vec()), ng)
    }

    /// One GRU step. `xp` holds the precomputed input projection
    /// `[x W_r + b_r | x W_z + b_z | x W_n + b_n]` (`B x 3H`).
    pub fn gru_cell(&mut self, xp: Var, h: Var, whh: Var, bhh: Var) -> Var {
        let hsz = self.value(h).ncols();
        let hp = self.value(h).dot(self.value(whh)) + self.value(bhh);
        let xpv = self.value(xp);
        let r = (&xpv.slice(s![.., 0..hsz]) + &hp.slice(s![.., 0..hsz])).mapv(sigmoid);
        let z = (&xpv.slice(s![.., hsz..2 * hsz]) + &hp.slice(s![.., hsz..2 * hsz])).mapv(sigmoid);
        let hp_n = hp.slice(s![.., 2 * hsz..]).to_owned();
        let n = (&xpv.slice(s![.., 2 * hsz..]) + &(&r * &hp_n)).mapv(f64::tanh);
        let hv = self.value(h);
        let out = &n + &(&z * &(hv - &n));
        let ng = self.ng(xp) || self.ng(h) || self.ng(whh) || self.ng(bhh);
        self.push(
            out,
            Op::GruCell {
                xp,
                h,
                whh,
                bhh,
                cache: Box::new(GruCache { r, z, n, hp_n }),
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Gradient reversal: identity forward, upstream gradient scaled by `-lambda`.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        assert!(lambda > 0.0, "GRL lambda must be positive");
        let v = self.value(a).clone();
        let ng = self.ng(a);
        self.push(v, Op::Grl(a, lambda), ng)
    }

    /// Sum of squared elements, as a `1 x 1` node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), s), Op::SumSq(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), s), Op::Sum(a), ng)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*row));
                }
                if self.ng(*row) {
                    let d = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*row, d);
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= sigmoid(x));
                acc(*a, d);
            }
            Op::ClampMin(a, min) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= *min {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::RepeatRows(a, times) => {
                let (b, c) = self.value(*a).dim();
                let mut d = Mat::zeros((b, c));
                for i in 0..b {
                    d.row_mut(i)
                        .assign(&g.slice(s![i * times..(i + 1) * times, ..]).sum_axis(Axis(0)));
                }
                acc(*a, d);
            }
            Op::MeanPoolSeq(a, seq_len) => {
                let (n, c) = self.value(*a).dim();
                let mut d = Mat::zeros((n, c));
                let k = 1.0 / *seq_len as f64;
                for i in 0..n / seq_len {
                    let gr = g.row(i).mapv(|v| v * k);
                    for t in 0..*seq_len {
                        d.row_mut(i * seq_len + t).assign(&gr);
                    }
                }
                acc(*a, d);
            }
            Op::Im2col {
                x,
                seq_len,
                kernel,
                dilation,
            } => {
                let (n, c) = self.value(*x).dim();
                let half = (*kernel / 2) as isize;
                let mut d = Mat::zeros((n, c));
                for b in 0..n / seq_len {
                    for t in 0..*seq_len {
                        let row = b * seq_len + t;
                        for j in 0..*kernel {
                            let src = t as isize + (j as isize - half) * *dilation as isize;
                            if src < 0 || src >= *seq_len as isize {
                                continue;
                            }
                            let mut dst = d.row_mut(b * seq_len + src as usize);
                            dst += &g.slice(s![row, j * c..(j + 1) * c]);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for (i, &src) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(i);
                }
                acc(*a, d);
            }
            Op::StackTime(steps) => {
                let t_len = steps.len();
                for (t, &sv) in steps.iter().enumerate() {
                    if !self.ng(sv) {
                        continue;
                    }
                    let b = self.value(sv).nrows();
                    let rows: Vec<usize> = (0..b).map(|i| i * t_len + t).collect();
                    acc(sv, g.select(Axis(0), &rows));
                }
            }
            Op::GruCell {
                xp,
                h,
                whh,
                bhh,
                cache,
            } => {
                let GruCache { r, z, n, hp_n } = cache.as_ref();
                let hv = self.value(*h);
                let dn = g * &z.mapv(|z| 1.0 - z);
                let dz = g * &(hv - n);
                let da_n = &dn * &n.mapv(|n| 1.0 - n * n);
                let dr = &da_n * hp_n;
                let da_r = &dr * &r.mapv(|r| r * (1.0 - r));
                let da_z = &dz * &z.mapv(|z| z * (1.0 - z));
                let dhp_n = &da_n * r;
                let dxp = ndarray::concatenate(Axis(1), &[da_r.view(), da_z.view(), da_n.view()])
                    .unwrap();
                let dhp = ndarray::concatenate(Axis(1), &[da_r.view(), da_z.view(), dhp_n.view()])
                    .unwrap();
                if self.ng(*h) {
                    acc(*h, g * z + dhp.dot(&self.value(*whh).t()));
                }
                if self.ng(*whh) {
                    acc(*whh, hv.t().dot(&dhp));
                }
                if self.ng(*bhh) {
                    acc(*bhh, dhp.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*xp, dxp);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, y * &(g - &dot));
            }
            Op::Grl(a, lambda) => acc(*a, g * -*lambda),
            Op::SumSq(a) => acc(*a, self.value(*a) * (2.0 * g[[0, 0]])),
            Op::Sum(a) => acc(*a, Mat::from_elem(self.value(*a).dim(), g[[0, 0]])),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
