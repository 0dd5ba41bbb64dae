use std::rc::Rc;
use std::sync::Arc;

use super::tape::{Op, Tape};

/// Dense 64-bit float tensor. Attached tensors carry their tape handle and
/// node id; detached ones are plain values. All ops work in both states.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) node: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn detached(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(data.len(), numel(&shape), "data does not match shape");
        Tensor {
            data: Rc::new(data),
            shape,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::detached(vec![v], vec![])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar of shape {:?}", self.shape);
        self.data[0]
    }

    /// The value as a detached tensor, dropping tape provenance.
    pub fn detach(&self) -> Tensor {
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Node id on `tape`, pushing a constant leaf when detached.
    fn id_on(&self, tape: &Tape) -> usize {
        match &self.node {
            Some((t, id)) => {
                assert!(t.same_tape(tape), "tensors belong to different tapes");
                *id
            }
            None => {
                let leaf = tape.constant(self.data.to_vec(), self.shape.clone());
                leaf.node.unwrap().1
            }
        }
    }

    fn unary<K, M>(&self, kernel: K, make: M) -> Tensor
    where
        K: Fn(f64) -> f64,
        M: FnOnce(usize) -> Op,
    {
        let out: Vec<f64> = self.data.iter().map(|&v| kernel(v)).collect();
        match self.tape() {
            Some(tape) => {
                let tape = tape.clone();
                let id = self.node.as_ref().unwrap().1;
                let _ = id;
                tape.push(make(self.id_on(&tape)), out, self.shape.clone())
            }
            None => Tensor::detached(out, self.shape.clone()),
        }
    }

    fn binary<K, M>(&self, other: &Tensor, kernel: K, make: M) -> Tensor
    where
        K: Fn(f64, f64) -> f64,
        M: FnOnce(usize, usize) -> Op,
    {
        let (out, shape) = elementwise(&self.data, &self.shape, &other.data, &other.shape, kernel);
        let tape = match (self.tape(), other.tape()) {
            (Some(a), Some(b)) => {
                assert!(a.same_tape(b), "tensors belong to different tapes");
                Some(a.clone())
            }
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
        };
        match tape {
            Some(tape) => {
                let ia = self.id_on(&tape);
                let ib = other.id_on(&tape);
                tape.push(make(ia, ib), out, shape)
            }
            None => Tensor::detached(out, shape),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn add_scalar(&self, v: f64) -> Tensor {
        self.add(&Tensor::scalar(v))
    }

    pub fn mul_scalar(&self, v: f64) -> Tensor {
        self.mul(&Tensor::scalar(v))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, e: f64) -> Tensor {
        self.unary(|v| v.powf(e), |a| Op::Pow(a, e))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, Op::Abs)
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data.iter().sum();
        match self.tape() {
            Some(tape) => {
                let tape = tape.clone();
                tape.push(Op::Sum(self.id_on(&tape)), vec![total], vec![])
            }
            None => Tensor::scalar(total),
        }
    }

    pub fn mean(&self) -> Tensor {
        assert!(!self.is_empty(), "mean of empty tensor");
        self.sum().mul_scalar(1.0 / self.len() as f64)
    }

    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.mul(other).sum()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            self.len(),
            numel(&shape),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        match self.tape() {
            Some(tape) => {
                let tape = tape.clone();
                tape.push(Op::Reshape(self.id_on(&tape)), self.data.to_vec(), shape)
            }
            None => Tensor::detached(self.data.to_vec(), shape),
        }
    }

    pub fn flatten(&self) -> Tensor {
        if self.shape.len() == 1 {
            self.clone()
        } else {
            self.reshape(vec![self.len()])
        }
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose expects a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        match self.tape() {
            Some(tape) => {
                let tape = tape.clone();
                tape.push(Op::Transpose(self.id_on(&tape)), out, vec![c, r])
            }
            None => Tensor::detached(out, vec![c, r]),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matmul lhs must be a matrix");
        assert_eq!(other.shape.len(), 2, "matmul rhs must be a matrix");
        let (r, k) = (self.shape[0], self.shape[1]);
        let (k2, c) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for kk in 0..k {
                let av = self.data[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * c..(kk + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += av * brow[j];
                }
            }
        }
        match (self.tape(), other.tape()) {
            (None, None) => Tensor::detached(out, vec![r, c]),
            _ => {
                let tape = self
                    .tape()
                    .or(other.tape())
                    .cloned()
                    .expect("tape present");
                let ia = self.id_on(&tape);
                let ib = other.id_on(&tape);
                tape.push(Op::MatMul(ia, ib), out, vec![r, c])
            }
        }
    }

    /// out[i] = self.flat[idx[i]]; always 1-D.
    pub fn gather(&self, idx: Arc<Vec<usize>>) -> Tensor {
        let out: Vec<f64> = idx.iter().map(|&i| self.data[i]).collect();
        let shape = vec![idx.len()];
        match self.tape() {
            Some(tape) => {
                let tape = tape.clone();
                tape.push(Op::Gather(self.id_on(&tape), idx), out, shape)
            }
            None => Tensor::detached(out, shape),
        }
    }

    pub fn gather_slice(&self, idx: &[usize]) -> Tensor {
        self.gather(Arc::new(idx.to_vec()))
    }

    /// out[idx[i]] += self.flat[i] into a zero vector of `dst_len`; 1-D.
    pub fn scatter(&self, idx: Arc<Vec<usize>>, dst_len: usize) -> Tensor {
        assert_eq!(self.len(), idx.len(), "scatter source/index length mismatch");
        let mut out = vec![0.0; dst_len];
        for (v, &i) in self.data.iter().zip(idx.iter()) {
            out[i] += v;
        }
        let shape = vec![dst_len];
        match self.tape() {
            Some(tape) => {
                let tape = tape.clone();
                tape.push(Op::Scatter(self.id_on(&tape), idx), out, shape)
            }
            None => Tensor::detached(out, shape),
        }
    }

    /// Numerically shifted softmax over a 1-D tensor. The max shift is a
    /// constant; softmax is shift-invariant so this does not alter gradients.
    pub fn softmax(&self) -> Tensor {
        assert!(!self.is_empty(), "softmax of empty tensor");
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_scalar(-max);
        let e = shifted.exp();
        let denom = e.sum().pow(-1.0);
        e.mul(&denom)
    }

    /// 2x2 max pooling with stride 2 on a [C, H, W] tensor. Ties resolve to
    /// the first maximum in row-major window order.
    pub fn max_pool2x2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 3, "max_pool2x2 expects [C, H, W]");
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even H and W, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let candidates = [
                        base + (2 * i) * w + 2 * j,
                        base + (2 * i) * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = candidates[0];
                    for &cand in &candidates[1..] {
                        if self.data[cand] > self.data[best] {
                            best = cand;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        self.gather(Arc::new(idx)).reshape(vec![c, oh, ow])
    }

    /// 2-D convolution, stride 1, symmetric zero padding, on a [C, H, W]
    /// input with an [OC, IC, KH, KW] kernel. Expands to scatter (padding),
    /// gather (im2col), matmul, and a broadcast bias add.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, padding: usize) -> Tensor {
        assert_eq!(self.shape.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(kernel.shape.len(), 4, "conv2d kernel must be [OC, IC, KH, KW]");
        let (ic, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (oc, kic, kh, kw) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        assert_eq!(ic, kic, "conv2d channel mismatch: input {ic}, kernel {kic}");
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        assert!(ph >= kh && pw >= kw, "kernel {kh}x{kw} larger than padded input {ph}x{pw}");
        let (oh, ow) = (ph - kh + 1, pw - kw + 1);

        let padded = if padding == 0 {
            self.flatten()
        } else {
            let mut idx = Vec::with_capacity(ic * h * w);
            for ch in 0..ic {
                for i in 0..h {
                    for j in 0..w {
                        idx.push(ch * ph * pw + (i + padding) * pw + (j + padding));
                    }
                }
            }
            self.flatten().scatter(Arc::new(idx), ic * ph * pw)
        };

        let mut cols_idx = Vec::with_capacity(ic * kh * kw * oh * ow);
        for ch in 0..ic {
            for u in 0..kh {
                for v in 0..kw {
                    for i in 0..oh {
                        for j in 0..ow {
                            cols_idx.push(ch * ph * pw + (i + u) * pw + (j + v));
                        }
                    }
                }
            }
        }
        let cols = padded
            .gather(Arc::new(cols_idx))
            .reshape(vec![ic * kh * kw, oh * ow]);
        let kmat = kernel.reshape(vec![oc, ic * kh * kw]);
        let mut out = kmat.matmul(&cols);
        if let Some(b) = bias {
            assert_eq!(b.len(), oc, "conv2d bias length {} vs {oc} channels", b.len());
            let mut bidx = Vec::with_capacity(oc * oh * ow);
            for ch in 0..oc {
                bidx.extend(std::iter::repeat(ch).take(oh * ow));
            }
            let bfull = b.gather(Arc::new(bidx)).reshape(vec![oc, oh * ow]);
            out = out.add(&bfull);
        }
        out.reshape(vec![oc, oh, ow])
    }
}

/// Elementwise combine with scalar broadcast: operands must have equal
/// lengths, or one must be a single element.
fn elementwise<K: Fn(f64, f64) -> f64>(
    a: &[f64],
    ashape: &[usize],
    b: &[f64],
    bshape: &[usize],
    k: K,
) -> (Vec<f64>, Vec<usize>) {
    if a.len() == b.len() {
        if a.len() != 1 {
            assert_eq!(
                ashape, bshape,
                "elementwise shape mismatch {ashape:?} vs {bshape:?}"
            );
        }
        (
            a.iter().zip(b).map(|(&x, &y)| k(x, y)).collect(),
            ashape.to_vec(),
        )
    } else if b.len() == 1 {
        (a.iter().map(|&x| k(x, b[0])).collect(), ashape.to_vec())
    } else if a.len() == 1 {
        (b.iter().map(|&y| k(a[0], y)).collect(), bshape.to_vec())
    } else {
        panic!(
            "elementwise length mismatch: {} (shape {ashape:?}) vs {} (shape {bshape:?})",
            a.len(),
            b.len()
        );
    }
}
