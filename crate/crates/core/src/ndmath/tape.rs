use super::tensor::gemm;
use super::{NdError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MinScalar(Var, f64),
    Clamp(Var, f64, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    SumAll(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Values are computed eagerly as ops are recorded. A tape is meant to live
/// for a single loss evaluation: build, call [`Tape::backward`] once, read
/// gradients, drop.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(ctx: &'static str, a: &Tensor, b: &Tensor) {
    assert!(
        a.rows() == b.rows() && a.cols() == b.cols(),
        "{ctx}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::matrix(src.rows(), src.cols(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("elementwise", ta, tb);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::matrix(ta.rows(), ta.cols(), data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut v = value.clone();
        v.zero_grad();
        self.push(v, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            ta.cols(),
            tb.rows(),
            "matmul: {:?} x {:?} not conformable",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::matrix(m, n, out).expect("gemm shape"),
            Op::MatMul(a, b),
            rg,
        )
    }

    /// `a + row`, broadcasting the `1 x m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert!(
            tr.rows() == 1 && tr.cols() == ta.cols(),
            "add_row: {:?} + {:?}",
            ta.shape(),
            tr.shape()
        );
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(cols.max(1)) {
            chunk.iter_mut().zip(tr.data()).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::matrix(ta.rows(), cols, data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Minimum(a, b), f64::min)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// `min(x, c)` elementwise.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::MinScalar(a, c), |x| x.min(c))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Per-row sum: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let data: Vec<f64> = t.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Tensor::matrix(t.rows(), 1, data).expect("column");
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .hcat(&self.nodes[b.0].value)
            .unwrap_or_else(|e| panic!("concat_cols: {e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start <= end && end <= t.cols(), "slice_cols out of range");
        let cols: Vec<usize> = (start..end).collect();
        let value = t.select_cols(&cols);
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(t.numel());
        for r in t.iter_rows() {
            let lse = log_sum_exp(r);
            data.extend(r.iter().map(|x| x - lse));
        }
        let value = Tensor::matrix(t.rows(), t.cols(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Back-propagates from the scalar `loss`, replacing any gradients from a
    /// previous call.
    pub fn backward(&mut self, loss: Var) -> Result<(), NdError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(NdError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(a) {
                    let buf = slot(grads, a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, buf, true);
                }
                if self.rg(b) {
                    let buf = slot(grads, b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, buf, true);
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.rg(row) {
                    let cols = self.nodes[row.0].value.cols();
                    let buf = slot(grads, row, cols);
                    for chunk in g.chunks(cols.max(1)) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, a, g, |_, gi| gi);
                self.acc_map(grads, b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, a, g, |_, gi| gi);
                self.acc_map(grads, b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc_map(grads, a, g, |j, gi| gi * vb[j]);
                self.acc_map(grads, b, g, |j, gi| gi * va[j]);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc_map(grads, a, g, |j, gi| if va[j] <= vb[j] { gi } else { 0.0 });
                self.acc_map(grads, b, g, |j, gi| if va[j] <= vb[j] { 0.0 } else { gi });
            }
            Op::Scale(a, c) => self.acc_map(grads, a, g, |_, gi| c * gi),
            Op::AddScalar(a) => self.acc_map(grads, a, g, |_, gi| gi),
            Op::MinScalar(a, c) => {
                let va = self.nodes[a.0].value.data();
                self.acc_map(grads, a, g, |j, gi| if va[j] < c { gi } else { 0.0 });
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.nodes[a.0].value.data();
                self.acc_map(grads, a, g, |j, gi| {
                    if va[j] >= lo && va[j] <= hi {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.nodes[a.0].value.data();
                self.acc_map(grads, a, g, |j, gi| if va[j] > 0.0 { gi } else { 0.0 });
            }
            Op::Tanh(a) => self.acc_map(grads, a, g, |j, gi| gi * (1.0 - out[j] * out[j])),
            Op::Exp(a) => self.acc_map(grads, a, g, |j, gi| gi * out[j]),
            Op::Log(a) => {
                let va = self.nodes[a.0].value.data();
                self.acc_map(grads, a, g, |j, gi| gi / va[j]);
            }
            Op::Sqrt(a) => self.acc_map(grads, a, g, |j, gi| {
                if out[j] > 0.0 {
                    0.5 * gi / out[j]
                } else {
                    0.0
                }
            }),
            Op::Square(a) => {
                let va = self.nodes[a.0].value.data();
                self.acc_map(grads, a, g, |j, gi| 2.0 * va[j] * gi);
            }
            Op::Softplus(a) => {
                let va = self.nodes[a.0].value.data();
                self.acc_map(grads, a, g, |j, gi| gi * sigmoid(va[j]));
            }
            Op::SumAll(a) => self.acc_map(grads, a, g, |_, _| g[0]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel().max(1) as f64;
                self.acc_map(grads, a, g, |_, _| g[0] / n);
            }
            Op::SumCols(a) => {
                let cols = self.nodes[a.0].value.cols().max(1);
                self.acc_map(grads, a, g, |j, _| g[j / cols]);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.cols();
                let cb = self.nodes[b.0].value.cols();
                let width = ca + cb;
                self.acc_map(grads, a, g, |j, _| g[(j / ca) * width + j % ca]);
                if cb > 0 {
                    self.acc_map(grads, b, g, |j, _| g[(j / cb) * width + ca + j % cb]);
                }
            }
            Op::SliceCols(a, start, end) => {
                let cols = self.nodes[a.0].value.cols();
                let w = end - start;
                self.acc_map(grads, a, g, |j, _| {
                    let (r, c) = (j / cols, j % cols);
                    if c >= start && c < end {
                        g[r * w + c - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::LogSoftmax(a) => {
                if self.rg(a) {
                    let cols = node.value.cols().max(1);
                    let buf = slot(grads, a, g.len());
                    for ((gr, yr), br) in g
                        .chunks(cols)
                        .zip(out.chunks(cols))
                        .zip(buf.chunks_mut(cols))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for ((b, gi), y) in br.iter_mut().zip(gr).zip(yr) {
                            *b += gi - y.exp() * gsum;
                        }
                    }
                }
            }
        }
    }

    /// `grad[a][j] += f(j, g[j])` for every element `j` of `a`.
    fn acc_map(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.rg(a) {
            return;
        }
        let n = self.nodes[a.0].value.numel();
        let buf = slot(grads, a, n);
        if n == g.len() {
            for (j, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
                *b += f(j, gi);
            }
        } else {
            for (j, b) in buf.iter_mut().enumerate() {
                *b += f(j, 0.0);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: &Tensor) {
        let mut tape = Tape::new();
        let x = tape.param(x0);
        let y = build(&mut tape, x);
        tape.backward(y).unwrap();
        let g = tape.grad(x).unwrap().to_vec();
        let h = 1e-6;
        for j in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[j] += delta;
                let mut t = Tape::new();
                let v = t.param(&xp);
                let out = build(&mut t, v);
                t.value(out).item().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g[j]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "elem {j}: fd {fd} vs ad {}",
                g[j]
            );
        }
    }

    fn sample() -> Tensor {
        Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 1.5, -0.4, 0.9]).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::row(&[1.0, -2.0]));
        let sq = tape.mul(w, w);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::row(&[1.0, -2.0]));
        let c = tape.constant(Tensor::row(&[3.0, 4.0]));
        let z = tape.scale(w, 0.0);
        let s = tape.add(z, c);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(NdError::NotScalar { .. })));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let a = t.tanh(x);
                let b = t.exp(a);
                let c = t.softplus(b);
                let d = t.square(c);
                let e = t.sum_cols(d);
                let f = t.sqrt(e);
                t.mean(f)
            },
            &sample(),
        );
        fd_check(
            |t, x| {
                let l = t.log_softmax(x);
                let s = t.slice_cols(l, 1, 3);
                let c = t.concat_cols(s, x);
                let m = t.min_scalar(c, 0.5);
                let k = t.clamp(m, -1.0, 0.45);
                t.sum(k)
            },
            &sample(),
        );
    }

    #[test]
    fn matmul_and_broadcast_match_finite_differences() {
        let w = Tensor::matrix(3, 2, vec![0.2, -0.5, 1.1, 0.3, -0.7, 0.4]).unwrap();
        fd_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv);
                let b = t.constant(Tensor::row(&[0.1, -0.2]));
                let z = t.add_row(y, b);
                let r = t.relu(z);
                let q = t.add_scalar(r, 1.0);
                let l = t.ln(q);
                t.sum(l)
            },
            &sample(),
        );
        let x = sample();
        fd_check(
            |t, wv| {
                let xv = t.constant(x.clone());
                let y = t.matmul(xv, wv);
                let y2 = t.scale(y, -1.5);
                let m = t.minimum(y, y2);
                t.sum(m)
            },
            &w,
        );
    }
}
