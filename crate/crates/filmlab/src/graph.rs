//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in creation order, so node ids are already a
//! topological order; [`Graph::backward`] walks the tape once in reverse,
//! accumulating gradients with `+=` at every fan-in. Ops that need saved
//! state for their backward pass (batch-norm statistics, softmax
//! probabilities, pooling argmaxes) store it inline in the op record at
//! forward time.
//!
//! The graph holds values, not references: leaves copy their tensors in.
//! A graph is built per batch, used for one backward pass, and dropped.

use crate::error::Error;
use crate::ops::{self, BnSaved, ConvDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

pub type NodeId = usize;

enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AffineConst {
        x: NodeId,
        scale: S,
        shift: S,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        n: usize,
        k: usize,
        m: usize,
    },
    AddRowBias {
        x: NodeId,
        b: NodeId,
        n: usize,
        m: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
    },
    BnTrain {
        x: NodeId,
        weight: Option<NodeId>,
        bias: Option<NodeId>,
        n: usize,
        c: usize,
        hw: usize,
        saved: BnSaved<S>,
    },
    BnEval {
        x: NodeId,
        n: usize,
        c: usize,
        hw: usize,
        scale: Vec<S>,
    },
    GlobalMaxPool {
        x: NodeId,
        n: usize,
        c: usize,
        hw: usize,
        arg: Vec<u32>,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
        n: usize,
        a: usize,
        probs: Vec<S>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        v: usize,
        e: usize,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
        n: usize,
        ca: usize,
        cb: usize,
        hw: usize,
    },
    Film {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        n: usize,
        c: usize,
        hw: usize,
    },
    SliceCols {
        x: NodeId,
        n: usize,
        m: usize,
        start: usize,
        len: usize,
    },
    MaskMix {
        on: NodeId,
        off: NodeId,
        mask: Vec<S>,
    },
    SumAll(NodeId),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    /// Gradient of the last backward root wrt this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// A differentiable input (parameter or anything needing a gradient).
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, coordinate maps, ...).
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::shape(format!(
                "{what}: shape {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise with constants.
    pub fn affine_const(&mut self, x: NodeId, scale: S, shift: S) -> NodeId {
        let v = self.nodes[x].value.map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(v, Op::AffineConst { x, scale, shift }, rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.affine_const(x, -S::one(), S::one())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| S::one() / (S::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| v.exp());
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    /// `a` is \[n, k\], `b` is \[k, m\].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = ops::matmul_forward(self.nodes[a].value.data(), self.nodes[b].value.data(), n, k, m);
        let v = Tensor::from_vec(&[n, m], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Matmul { a, b, n, k, m }, rg))
    }

    /// `x` is \[n, m\], `b` is \[m\]; adds the bias row to every row.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.nodes[x].value.shape(), self.nodes[b].value.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape(format!("add_row_bias: {sx:?} + {sb:?}")));
        }
        let (n, m) = (sx[0], sx[1]);
        let xv = self.nodes[x].value.data();
        let bv = self.nodes[b].value.data();
        let mut data = xv.to_vec();
        for i in 0..n {
            let row = &mut data[i * m..][..m];
            for (r, &bb) in row.iter_mut().zip(bv) {
                *r = *r + bb;
            }
        }
        let v = Tensor::from_vec(&[n, m], data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddRowBias { x, b, n, m }, rg))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// `x` is \[n, c, h, w\], `w` is \[cout, cin, kh, kw\], `b` is \[cout\].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let sw = self.nodes[w].value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!("conv2d: x {sx:?} w {sw:?}")));
        }
        if let Some(b) = b {
            let sb = self.nodes[b].value.shape();
            if sb != [sw[0]] {
                return Err(Error::shape(format!("conv2d bias: {sb:?} for {} maps", sw[0])));
            }
        }
        let dims = ConvDims {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if !dims.valid() {
            return Err(Error::shape(format!("conv2d geometry invalid: {dims:?}")));
        }
        let (oh, ow) = dims.out_hw();
        let data = ops::conv2d_forward(
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            b.map(|b| self.nodes[b].value.data()),
            dims,
        );
        let v = Tensor::from_vec(&[dims.n, dims.cout, oh, ow], data)?;
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Training-mode batch norm; updates the running statistics in place.
    #[allow(clippy::too_many_arguments)]
    pub fn bn2d_train(
        &mut self,
        x: NodeId,
        weight: Option<NodeId>,
        bias: Option<NodeId>,
        running_mean: &mut [S],
        running_var: &mut [S],
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("bn2d: rank {} input", sx.len())));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("bn2d: running stats length".into()));
        }
        for nid in [weight, bias].into_iter().flatten() {
            if self.nodes[nid].value.shape() != [c] {
                return Err(Error::shape("bn2d: affine parameter length".into()));
            }
        }
        let (data, saved) = ops::bn2d_forward_train(
            self.nodes[x].value.data(),
            n,
            c,
            hw,
            weight.map(|w| self.nodes[w].value.data()),
            bias.map(|b| self.nodes[b].value.data()),
            running_mean,
            running_var,
            momentum,
            eps,
        );
        let v = Tensor::from_vec(&sx, data)?;
        let rg = self.rg(x)
            || weight.map_or(false, |w| self.rg(w))
            || bias.map_or(false, |b| self.rg(b));
        Ok(self.push(
            v,
            Op::BnTrain {
                x,
                weight,
                bias,
                n,
                c,
                hw,
                saved,
            },
            rg,
        ))
    }

    /// Inference-mode batch norm from frozen running statistics. The affine
    /// parameters are treated as constants here; no gradient flows to them.
    pub fn bn2d_eval(
        &mut self,
        x: NodeId,
        weight: Option<&[S]>,
        bias: Option<&[S]>,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("bn2d: rank {} input", sx.len())));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let data = ops::bn2d_forward_eval(
            self.nodes[x].value.data(),
            n,
            c,
            hw,
            weight,
            bias,
            running_mean,
            running_var,
            eps,
        );
        let scale: Vec<S> = (0..c)
            .map(|ch| {
                weight.map_or(S::one(), |w| w[ch])
                    / (running_var[ch] + S::from_f64(eps)).sqrt()
            })
            .collect();
        let v = Tensor::from_vec(&sx, data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::BnEval { x, n, c, hw, scale }, rg))
    }

    /// \[n, c, h, w\] -> \[n, c\] max over the spatial plane.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("global_max_pool: rank {}", sx.len())));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let (data, arg) = ops::global_max_pool_forward(self.nodes[x].value.data(), n, c, hw);
        let v = Tensor::from_vec(&[n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::GlobalMaxPool { x, n, c, hw, arg }, rg))
    }

    /// Mean cross-entropy over the batch; produces the scalar loss node.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let sx = self.nodes[logits].value.shape().to_vec();
        if sx.len() != 2 || sx[0] != targets.len() {
            return Err(Error::shape(format!(
                "softmax_ce: logits {sx:?}, {} targets",
                targets.len()
            )));
        }
        let (n, a) = (sx[0], sx[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= a) {
            return Err(Error::shape(format!("softmax_ce: target {t} out of {a}")));
        }
        let (loss, probs) = ops::softmax_ce_forward(self.nodes[logits].value.data(), targets, n, a);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                n,
                a,
                probs,
            },
            rg,
        ))
    }

    /// `table` is \[v, e\]; gathers rows by id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.nodes[table].value.shape().to_vec();
        if st.len() != 2 {
            return Err(Error::shape(format!("embedding: table rank {}", st.len())));
        }
        let (vsz, e) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vsz) {
            return Err(Error::shape(format!("embedding: id {bad} out of {vsz}")));
        }
        let data = ops::embedding_forward(self.nodes[table].value.data(), e, ids);
        let v = Tensor::from_vec(&[ids.len(), e], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                v: vsz,
                e,
            },
            rg,
        ))
    }

    /// Concatenate along the channel axis of \[n, c, h, w\] tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::shape(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let mut data = vec![S::zero(); n * (ca + cb) * hw];
        for ni in 0..n {
            let dst = &mut data[ni * (ca + cb) * hw..][..(ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&av[ni * ca * hw..][..ca * hw]);
            dst[ca * hw..].copy_from_slice(&bv[ni * cb * hw..][..cb * hw]);
        }
        let v = Tensor::from_vec(&[n, ca + cb, sa[2], sa[3]], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            v,
            Op::ConcatChannels {
                a,
                b,
                n,
                ca,
                cb,
                hw,
            },
            rg,
        ))
    }

    /// Feature-wise modulation: `gamma`/`beta` are \[n, c\], `x` is \[n, c, h, w\].
    pub fn film(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let sg = self.nodes[gamma].value.shape().to_vec();
        let sbta = self.nodes[beta].value.shape().to_vec();
        if sx.len() != 4 || sg != [sx[0], sx[1]] || sbta != [sx[0], sx[1]] {
            return Err(Error::shape(format!(
                "film: x {sx:?}, gamma {sg:?}, beta {sbta:?}"
            )));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let data = ops::film_forward(
            self.nodes[x].value.data(),
            self.nodes[gamma].value.data(),
            self.nodes[beta].value.data(),
            n,
            c,
            hw,
        );
        let v = Tensor::from_vec(&sx, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::Film {
                x,
                gamma,
                beta,
                n,
                c,
                hw,
            },
            rg,
        ))
    }

    /// Columns `[start, start+len)` of a \[n, m\] tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 2 || start + len > sx[1] || len == 0 {
            return Err(Error::shape(format!(
                "slice_cols: {sx:?} range {start}..{}",
                start + len
            )));
        }
        let (n, m) = (sx[0], sx[1]);
        let xv = self.nodes[x].value.data();
        let mut data = vec![S::zero(); n * len];
        for i in 0..n {
            data[i * len..][..len].copy_from_slice(&xv[i * m + start..][..len]);
        }
        let v = Tensor::from_vec(&[n, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::SliceCols {
                x,
                n,
                m,
                start,
                len,
            },
            rg,
        ))
    }

    /// Per-row blend of two \[n, m\] tensors: row i of the output is
    /// `mask[i] * on + (1 - mask[i]) * off`. Used to freeze recurrent state
    /// past the end of padded sequences.
    pub fn mask_mix(&mut self, on: NodeId, off: NodeId, mask: &[S]) -> Result<NodeId> {
        self.binary_same_shape(on, off, "mask_mix")?;
        let s = self.nodes[on].value.shape().to_vec();
        if s.len() != 2 || s[0] != mask.len() {
            return Err(Error::shape(format!(
                "mask_mix: shape {s:?} with {} mask rows",
                mask.len()
            )));
        }
        let (n, m) = (s[0], s[1]);
        let ov = self.nodes[on].value.data();
        let fv = self.nodes[off].value.data();
        let mut data = vec![S::zero(); n * m];
        for i in 0..n {
            let mk = mask[i];
            let inv = S::one() - mk;
            for j in 0..m {
                data[i * m + j] = mk * ov[i * m + j] + inv * fv[i * m + j];
            }
        }
        let v = Tensor::from_vec(&[n, m], data)?;
        let rg = self.rg(on) || self.rg(off);
        Ok(self.push(
            v,
            Op::MaskMix {
                on,
                off,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::zero();
        for &v in self.nodes[x].value.data() {
            acc = acc + v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x), rg)
    }

    fn accum(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
        match &mut grads[id] {
            slot @ None => *slot = Some(g),
            Some(t) => {
                debug_assert_eq!(t.shape(), g.shape());
                for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
        }
    }

    /// Run reverse-mode accumulation from `root` (must be a scalar node).
    ///
    /// Gradients are afterwards available through [`Graph::grad`]. Calling
    /// this a second time on the same graph is an error: saved state is
    /// consumed conceptually, and silent re-accumulation would double
    /// gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if root >= self.nodes.len() {
            return Err(Error::Graph(format!("backward: no node {root}")));
        }
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Graph("backward already run on this graph".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(S::one()));

        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        Self::accum(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        Self::accum(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        Self::accum(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        Self::accum(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.zip_map(&self.nodes[*b].value, |gv, bv| gv * bv)?;
                        Self::accum(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.zip_map(&self.nodes[*a].value, |gv, av| gv * av)?;
                        Self::accum(&mut grads, *b, gb);
                    }
                }
                Op::AffineConst { x, scale, .. } => {
                    let s = *scale;
                    Self::accum(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(&node.value, |gv, yv| {
                        if yv > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    })?;
                    Self::accum(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gv, yv| gv * yv * (S::one() - yv))?;
                    Self::accum(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |gv, yv| gv * (S::one() - yv * yv))?;
                    Self::accum(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&node.value, |gv, yv| gv * yv)?;
                    Self::accum(&mut grads, *x, gx);
                }
                Op::Matmul { a, b, n, k, m } => {
                    if self.rg(*a) {
                        let ga = ops::matmul_backward_a(
                            g.data(),
                            self.nodes[*b].value.data(),
                            *n,
                            *k,
                            *m,
                        );
                        Self::accum(&mut grads, *a, Tensor::from_vec(&[*n, *k], ga)?);
                    }
                    if self.rg(*b) {
                        let gb = ops::matmul_backward_b(
                            g.data(),
                            self.nodes[*a].value.data(),
                            *n,
                            *k,
                            *m,
                        );
                        Self::accum(&mut grads, *b, Tensor::from_vec(&[*k, *m], gb)?);
                    }
                }
                Op::AddRowBias { x, b, n, m } => {
                    if self.rg(*x) {
                        Self::accum(&mut grads, *x, g.clone());
                    }
                    if self.rg(*b) {
                        let mut gb = vec![S::zero(); *m];
                        for i in 0..*n {
                            let row = &g.data()[i * m..][..*m];
                            for (s, &gv) in gb.iter_mut().zip(row) {
                                *s = *s + gv;
                            }
                        }
                        Self::accum(&mut grads, *b, Tensor::from_vec(&[*m], gb)?);
                    }
                }
                Op::Conv2d { x, w, b, dims } => {
                    if self.rg(*x) {
                        let gx = ops::conv2d_backward_input(
                            g.data(),
                            self.nodes[*w].value.data(),
                            *dims,
                        );
                        Self::accum(
                            &mut grads,
                            *x,
                            Tensor::from_vec(&[dims.n, dims.cin, dims.h, dims.w], gx)?,
                        );
                    }
                    if self.rg(*w) {
                        let gw = ops::conv2d_backward_weights(
                            g.data(),
                            self.nodes[*x].value.data(),
                            *dims,
                        );
                        Self::accum(
                            &mut grads,
                            *w,
                            Tensor::from_vec(&[dims.cout, dims.cin, dims.kh, dims.kw], gw)?,
                        );
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let gb = ops::conv2d_backward_bias(g.data(), *dims);
                            Self::accum(&mut grads, *b, Tensor::from_vec(&[dims.cout], gb)?);
                        }
                    }
                }
                Op::BnTrain {
                    x,
                    weight,
                    bias,
                    n,
                    c,
                    hw,
                    saved,
                } => {
                    let (gx, gw, gb) = ops::bn2d_backward_train(
                        g.data(),
                        saved,
                        *n,
                        *c,
                        *hw,
                        weight.map(|w| self.nodes[w].value.data()),
                    );
                    if self.rg(*x) {
                        Self::accum(
                            &mut grads,
                            *x,
                            Tensor::from_vec(self.nodes[*x].value.shape(), gx)?,
                        );
                    }
                    if let (Some(w), Some(gw)) = (weight, gw) {
                        if self.rg(*w) {
                            Self::accum(&mut grads, *w, Tensor::from_vec(&[*c], gw)?);
                        }
                    }
                    if let (Some(bn), Some(gb)) = (bias, gb) {
                        if self.rg(*bn) {
                            Self::accum(&mut grads, *bn, Tensor::from_vec(&[*c], gb)?);
                        }
                    }
                }
                Op::BnEval { x, n, c, hw, scale } => {
                    let mut gx = vec![S::zero(); g.len()];
                    for ni in 0..*n {
                        for ch in 0..*c {
                            let base = (ni * c + ch) * hw;
                            let s = scale[ch];
                            for i in 0..*hw {
                                gx[base + i] = g.data()[base + i] * s;
                            }
                        }
                    }
                    Self::accum(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.nodes[*x].value.shape(), gx)?,
                    );
                }
                Op::GlobalMaxPool { x, n, c, hw, arg } => {
                    let gx = ops::global_max_pool_backward(g.data(), arg, *n, *c, *hw);
                    Self::accum(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.nodes[*x].value.shape(), gx)?,
                    );
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    n,
                    a,
                    probs,
                } => {
                    let gl = ops::softmax_ce_backward(g.data()[0], probs, targets, *n, *a);
                    Self::accum(&mut grads, *logits, Tensor::from_vec(&[*n, *a], gl)?);
                }
                Op::Embedding { table, ids, v, e } => {
                    let gt = ops::embedding_backward(g.data(), *v, *e, ids);
                    Self::accum(&mut grads, *table, Tensor::from_vec(&[*v, *e], gt)?);
                }
                Op::ConcatChannels {
                    a,
                    b,
                    n,
                    ca,
                    cb,
                    hw,
                } => {
                    let ctot = ca + cb;
                    if self.rg(*a) {
                        let mut ga = vec![S::zero(); n * ca * hw];
                        for ni in 0..*n {
                            ga[ni * ca * hw..][..ca * hw]
                                .copy_from_slice(&g.data()[ni * ctot * hw..][..ca * hw]);
                        }
                        Self::accum(
                            &mut grads,
                            *a,
                            Tensor::from_vec(self.nodes[*a].value.shape(), ga)?,
                        );
                    }
                    if self.rg(*b) {
                        let mut gb = vec![S::zero(); n * cb * hw];
                        for ni in 0..*n {
                            gb[ni * cb * hw..][..cb * hw]
                                .copy_from_slice(&g.data()[ni * ctot * hw + ca * hw..][..cb * hw]);
                        }
                        Self::accum(
                            &mut grads,
                            *b,
                            Tensor::from_vec(self.nodes[*b].value.shape(), gb)?,
                        );
                    }
                }
                Op::Film {
                    x,
                    gamma,
                    beta,
                    n,
                    c,
                    hw,
                } => {
                    let (gx, gg, gb) = ops::film_backward(
                        g.data(),
                        self.nodes[*x].value.data(),
                        self.nodes[*gamma].value.data(),
                        *n,
                        *c,
                        *hw,
                    );
                    if self.rg(*x) {
                        Self::accum(
                            &mut grads,
                            *x,
                            Tensor::from_vec(self.nodes[*x].value.shape(), gx)?,
                        );
                    }
                    if self.rg(*gamma) {
                        Self::accum(&mut grads, *gamma, Tensor::from_vec(&[*n, *c], gg)?);
                    }
                    if self.rg(*beta) {
                        Self::accum(&mut grads, *beta, Tensor::from_vec(&[*n, *c], gb)?);
                    }
                }
                Op::SliceCols {
                    x,
                    n,
                    m,
                    start,
                    len,
                } => {
                    let mut gx = vec![S::zero(); n * m];
                    for i in 0..*n {
                        gx[i * m + start..][..*len].copy_from_slice(&g.data()[i * len..][..*len]);
                    }
                    Self::accum(&mut grads, *x, Tensor::from_vec(&[*n, *m], gx)?);
                }
                Op::SumAll(x) => {
                    let gv = g.data()[0];
                    let gx = self.nodes[*x].value.map(|_| gv);
                    Self::accum(&mut grads, *x, gx);
                }
                Op::MaskMix { on, off, mask } => {
                    let m = g.shape()[1];
                    if self.rg(*on) {
                        let mut gon = g.data().to_vec();
                        for (i, &mk) in mask.iter().enumerate() {
                            for v in &mut gon[i * m..][..m] {
                                *v = *v * mk;
                            }
                        }
                        Self::accum(&mut grads, *on, Tensor::from_vec(g.shape(), gon)?);
                    }
                    if self.rg(*off) {
                        let mut goff = g.data().to_vec();
                        for (i, &mk) in mask.iter().enumerate() {
                            let inv = S::one() - mk;
                            for v in &mut goff[i * m..][..m] {
                                *v = *v * inv;
                            }
                        }
                        Self::accum(&mut grads, *off, Tensor::from_vec(g.shape(), goff)?);
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
