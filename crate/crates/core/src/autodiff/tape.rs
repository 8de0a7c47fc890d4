//! Linear reverse-mode tape.
//!
//! Every differentiable operation appends one node holding its output value
//! and whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in exact reverse order and accumulates gradients additively.

use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a patch unfold, `x[H, W, C] -> [H_out * W_out, k * k * C]`.
///
/// Columns are ordered `(i, j, c)` with `i` the row offset inside the window,
/// `j` the column offset and `c` the channel: column `(i * k + j) * C + c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output extent of a sliding window; errors unless the window tiles the
/// padded input exactly.
pub fn output_shape(
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize), AutodiffError> {
    let one = |n: usize, axis: &str| -> Result<usize, AutodiffError> {
        if kernel == 0 || stride == 0 {
            return Err(AutodiffError::Config("kernel and stride must be >= 1".into()));
        }
        let padded = n + 2 * padding;
        if padded < kernel {
            return Err(AutodiffError::Config(format!(
                "{axis}: kernel {kernel} larger than padded extent {padded}"
            )));
        }
        let span = padded - kernel;
        if !span.is_multiple_of(stride) {
            return Err(AutodiffError::Config(format!(
                "{axis}: ({n} + 2*{padding} - {kernel}) is not a multiple of stride {stride}"
            )));
        }
        Ok(span / stride + 1)
    };
    Ok((one(height, "height")?, one(width, "width")?))
}

impl PatchGeometry {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, AutodiffError> {
        if channels == 0 {
            return Err(AutodiffError::Config("zero channels".into()));
        }
        let (out_height, out_width) = output_shape(height, width, kernel, stride, padding)?;
        Ok(PatchGeometry {
            height,
            width,
            channels,
            kernel,
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    pub fn rows(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Visit every `(row, col, input_offset)` triple whose input lies inside
    /// the unpadded image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, c_n) = (self.kernel, self.channels);
        for h in 0..self.out_height {
            for w in 0..self.out_width {
                let row = h * self.out_width + w;
                for i in 0..k {
                    let y = (h * self.stride + i) as isize - self.padding as isize;
                    if y < 0 || y >= self.height as isize {
                        continue;
                    }
                    for j in 0..k {
                        let x = (w * self.stride + j) as isize - self.padding as isize;
                        if x < 0 || x >= self.width as isize {
                            continue;
                        }
                        let base = (y as usize * self.width + x as usize) * c_n;
                        let col = (i * k + j) * c_n;
                        for c in 0..c_n {
                            f(row, col + c, base + c);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Map { x: Var, deriv: Vec<S> },
    MatMul { a: Var, b: Var },
    Unfold { x: Var, geom: PatchGeometry },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: S },
    ScalarMul { x: Var, s: Var },
    Clamp { x: Var, lo: S, hi: S },
    Sum { x: Var },
    Reshape { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    SoftmaxCe { logits: Var, label: usize, probs: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Record of executed operations. Not shareable across threads; use one tape
/// per sample.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the output does not depend on `v` through a
    /// differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(what: &str, a: &[usize], b: &[usize]) -> Result<(), AutodiffError> {
    if a != b {
        return Err(AutodiffError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape matches node"),
        None => *slot = Some(g),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `y_i = f(x_i)` with backward `dL/dx = dL/dy * df(x)`.
    pub fn map(&mut self, x: Var, f: impl Fn(S) -> S, df: impl Fn(S) -> S) -> Var {
        let xv = &self.nodes[x.0].value;
        let value = xv.map(f);
        let needs = self.needs(x);
        let deriv = if needs {
            xv.data().iter().map(|&v| df(v)).collect()
        } else {
            Vec::new()
        };
        self.push(value, Op::Map { x, deriv }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    pub fn unfold(&mut self, x: Var, geom: PatchGeometry) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        check_same(
            "unfold input",
            xv.shape(),
            &[geom.height, geom.width, geom.channels],
        )?;
        let src = xv.data();
        let cols = geom.cols();
        let mut out = vec![S::zero(); geom.rows() * cols];
        geom.for_each_tap(|row, col, off| out[row * cols + col] = src[off]);
        let value = Tensor::new(vec![geom.rows(), cols], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Unfold { x, geom }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("add", av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// Multiply every element of `x` by the single element of `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "scalar_mul needs a one-element scale, got {:?}",
                sv.shape()
            )));
        }
        let k = sv.data()[0];
        let value = self.value(x).map(|v| v * k);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::ScalarMul { x, s }, needs))
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let needs = self.needs(x);
        self.push(value, Op::Clamp { x, lo, hi }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// 2x2 max-pool with stride 2 over `[H, W, C]`, flooring odd extents.
    /// Ties go to the first element of the window in row-major order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(AutodiffError::Config(format!(
                "max-pool needs [H >= 2, W >= 2, C], got {s:?}"
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = Vec::with_capacity(ho * wo * c);
        let mut argmax = Vec::with_capacity(ho * wo * c);
        for oh in 0..ho {
            for ow in 0..wo {
                for ch in 0..c {
                    let mut best = ((2 * oh) * w + 2 * ow) * c + ch;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * oh + di) * w + 2 * ow + dj) * c + ch;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    /// `-log softmax(logits)[label]` with max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(AutodiffError::Domain(format!(
                "label {label} out of range for {} classes",
                lv.len()
            )));
        }
        let (probs, loss) = softmax_ce(lv.data(), label);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, label, probs },
            needs,
        ))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>, AutodiffError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), S::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            check_same("backward", g.shape(), node.value.shape())?;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Map { x, deriv } => {
                    let data = g.data().iter().zip(deriv).map(|(&a, &d)| a * d).collect();
                    add_into(&mut grads[x.0], Tensor::new(self.value(*x).shape().to_vec(), data)?);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let gd = g.data();
                    if self.needs(*a) {
                        // dA = dY * B^T
                        let bd = bv.data();
                        let mut da = vec![S::zero(); m * k];
                        for i in 0..m {
                            let g_row = &gd[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bd[p * n..(p + 1) * n];
                                da[i * k + p] = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
                            }
                        }
                        add_into(&mut grads[a.0], Tensor::new(vec![m, k], da)?);
                    }
                    if self.needs(*b) {
                        // dB = A^T * dY
                        let ad = av.data();
                        let mut db = vec![S::zero(); k * n];
                        for i in 0..m {
                            let g_row = &gd[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = ad[i * k + p];
                                if a_ip == S::zero() {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *d = *d + a_ip * gv;
                                }
                            }
                        }
                        add_into(&mut grads[b.0], Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Unfold { x, geom } => {
                    let cols = geom.cols();
                    let gd = g.data();
                    let mut dx = Tensor::zeros(&[geom.height, geom.width, geom.channels]);
                    let dxd = dx.data_mut();
                    geom.for_each_tap(|row, col, off| dxd[off] = dxd[off] + gd[row * cols + col]);
                    add_into(&mut grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        add_into(&mut grads[b.0], g);
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    add_into(&mut grads[x.0], g.map(|v| v * f));
                }
                Op::ScalarMul { x, s } => {
                    let k = self.value(*s).data()[0];
                    if self.needs(*s) {
                        let xv = self.value(*x);
                        let ds: S = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                        add_into(&mut grads[s.0], Tensor::new(self.value(*s).shape().to_vec(), vec![ds])?);
                    }
                    if self.needs(*x) {
                        add_into(&mut grads[x.0], g.map(|v| v * k));
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > *lo && v < *hi { gv } else { S::zero() })
                        .collect();
                    add_into(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    add_into(&mut grads[x.0], Tensor::full(self.value(*x).shape(), gv));
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    add_into(&mut grads[x.0], g.reshaped(shape)?);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let dxd = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dxd[src] = dxd[src] + gv;
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::SoftmaxCe { logits, label, probs } => {
                    let gv = g.data()[0];
                    let data = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            let t = if i == *label { S::one() } else { S::zero() };
                            gv * (p - t)
                        })
                        .collect();
                    add_into(&mut grads[logits.0], Tensor::new(self.value(*logits).shape().to_vec(), data)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Softmax probabilities and the cross-entropy of `label`.
pub fn softmax_ce<S: Scalar>(logits: &[S], label: usize) -> (Vec<S>, S) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: S = exps.iter().copied().sum();
    let probs = exps.iter().map(|&e| e / z).collect();
    let loss = z.ln() - (logits[label] - max);
    (probs, loss)
}

/// Plain `a[m, k] * b[k, n]` on row-major slices.
pub fn matmul_slices<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}
