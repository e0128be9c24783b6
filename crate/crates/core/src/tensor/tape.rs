use super::{ParamStore, Tensor};
use crate::error::{CoreError, Result};
use crate::tensor::Init;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Abs(Var),
    MatMul(Var, Var),
    /// a[m,k] · b[n,k]ᵀ -> [m,n]
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    /// a[m,n] scaled per row by v[m]
    RowScale(Var, Var),
    Softmax { x: Var, axis: usize },
    /// Row softmax over unmasked entries; fully-masked rows output zeros.
    MaskedSoftmaxRows { x: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv2d { x: Var, kernels: Var, stride: usize },
    Concat { a: Var, b: Var, axis: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    /// 2-D matrix transpose.
    Transpose(Var),
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    /// grid[H,W,C] plus weighted copies of token[C] at listed flat cells.
    ScatterPoints { grid: Var, token: Var, points: Vec<(usize, f64)> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Linear record of forward operations; one backward pass per tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), params: Vec::new(), backward_done: false }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf tracked for gradients (inputs under test, injected features).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Fetch-or-initialize a named parameter from the store and leaf it.
    pub fn param(&mut self, store: &mut ParamStore, path: &str, shape: &[usize], init: Init) -> Var {
        let t = store.get_or_init(path, shape, init).clone();
        let v = self.push(Op::Leaf, t, true);
        self.params.push((path.to_string(), v));
        v
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::Dimension(format!(
                "{op}: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(Op::Add(a, b), t, self.rg(a) || self.rg(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(Op::Sub(a, b), t, self.rg(a) || self.rg(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(Op::Mul(a, b), t, self.rg(a) || self.rg(b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x * c).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::Scale(a, c), t, self.rg(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::Relu(a), t, self.rg(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| sigmoid(*x)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::Sigmoid(a), t, self.rg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.exp()).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::Exp(a), t, self.rg(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| softplus(*x)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::Softplus(a), t, self.rg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.abs()).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(Op::Abs(a), t, self.rg(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::Dimension(format!("matmul: shapes {sa:?} vs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += x * row[j];
                }
            }
        }
        let t = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(Op::MatMul(a, b), t, self.rg(a) || self.rg(b)))
    }

    /// a[m,k] · b[n,k]ᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(CoreError::Dimension(format!("matmul_nt: shapes {sa:?} vs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = s;
            }
        }
        let t = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(Op::MatMulNT(a, b), t, self.rg(a) || self.rg(b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(CoreError::Dimension(format!("add_row: shapes {sa:?} vs {sb:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let av = &self.value(a).data;
        let bv = &self.value(bias).data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        let t = Tensor { shape: sa, data: out };
        Ok(self.push(Op::AddRow(a, bias), t, self.rg(a) || self.rg(bias)))
    }

    pub fn row_scale(&mut self, a: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(a).to_vec(), self.shape(v).to_vec());
        if sa.len() != 2 || sv.len() != 1 || sv[0] != sa[0] {
            return Err(CoreError::Dimension(format!("row_scale: shapes {sa:?} vs {sv:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let av = &self.value(a).data;
        let vv = &self.value(v).data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] * vv[i]);
            }
        }
        let t = Tensor { shape: sa, data: out };
        Ok(self.push(Op::RowScale(a, v), t, self.rg(a) || self.rg(v)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(CoreError::Dimension(format!("softmax: axis {axis} for shape {shape:?}")));
        }
        let data = softmax_forward(&self.value(x).data, &shape, axis);
        let t = Tensor { shape, data };
        Ok(self.push(Op::Softmax { x, axis }, t, self.rg(x)))
    }

    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || mask.len() != shape[0] * shape[1] {
            return Err(CoreError::Dimension(format!(
                "masked_softmax_rows: shape {shape:?}, mask len {}",
                mask.len()
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let rmask = &mask[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if rmask[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut z = 0.0;
            for j in 0..n {
                if rmask[j] {
                    z += (row[j] - mx).exp();
                }
            }
            for j in 0..n {
                if rmask[j] {
                    out[i * n + j] = (row[j] - mx).exp() / z;
                }
            }
        }
        let t = Tensor { shape, data: out };
        let rg = self.rg(x);
        Ok(self.push(Op::MaskedSoftmaxRows { x, mask: mask.to_vec() }, t, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| CoreError::Dimension("layer_norm: rank 0".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(CoreError::Dimension(format!(
                "layer_norm: last dim {d}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = &self.value(x).data;
        let gv = &self.value(gain).data;
        let bv = &self.value(bias).data;
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let t = Tensor { shape, data: out };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, t, rg))
    }

    /// Valid cross-correlation, no padding: x[C_in,H,W] * k[C_out,C_in,kh,kw].
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(CoreError::Dimension(format!("conv2d: input {sx:?}, kernels {sk:?}")));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h || kw > w || stride < 1 {
            return Err(CoreError::Dimension(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} on input {h}x{w}"
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xv = &self.value(x).data;
        let kv = &self.value(kernels).data;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                s += xv[ci * h * w + (i * stride + u) * w + (j * stride + v)]
                                    * kv[((co * cin + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[co * oh * ow + i * ow + j] = s;
                }
            }
        }
        let t = Tensor { shape: vec![cout, oh, ow], data: out };
        let rg = self.rg(x) || self.rg(kernels);
        Ok(self.push(Op::Conv2d { x, kernels, stride }, t, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(CoreError::Dimension(format!("concat axis {axis}: {sa:?} vs {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[axis] = sa[axis] + sb[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let (ba, bb) = (sa[axis] * inner, sb[axis] * inner);
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * ba..(o + 1) * ba]);
            out.extend_from_slice(&bv[o * bb..(o + 1) * bb]);
        }
        let t = Tensor { shape, data: out };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat { a, b, axis }, t, rg))
    }

    /// Stack 2-D blocks along axis 0.
    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(CoreError::Contract("concat_rows: empty input".into()));
        }
        let n = self.shape(vars[0]).last().copied().unwrap_or(0);
        let mut rows = 0;
        for v in vars {
            let s = self.shape(*v);
            if s.len() != 2 || s[1] != n {
                return Err(CoreError::Dimension(format!("concat_rows: shape {s:?}, want [_, {n}]")));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * n);
        for v in vars {
            out.extend_from_slice(&self.value(*v).data);
        }
        let t = Tensor { shape: vec![rows, n], data: out };
        let rg = vars.iter().any(|v| self.rg(*v));
        Ok(self.push(Op::ConcatRows(vars.to_vec()), t, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(CoreError::Dimension(format!(
                "reshape: {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let t = Tensor { shape: shape.to_vec(), data: self.value(x).data.clone() };
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), t, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(CoreError::Dimension(format!("transpose on {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let t = Tensor { shape: vec![n, m], data: out };
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), t, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(CoreError::Dimension(format!("slice_cols {start}..{} on {s:?}", start + len)));
        }
        let (m, n) = (s[0], s[1]);
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let t = Tensor { shape: vec![m, len], data: out };
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start, len }, t, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(CoreError::Dimension(format!("slice_rows {start}..{} on {s:?}", start + len)));
        }
        let n = s[1];
        let xv = &self.value(x).data;
        let out = xv[start * n..(start + len) * n].to_vec();
        let t = Tensor { shape: vec![len, n], data: out };
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start, len }, t, rg))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(CoreError::Dimension(format!("gather_rows on {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|i| **i >= v) {
            return Err(CoreError::Contract(format!("gather_rows: id {bad} out of {v}")));
        }
        let tv = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor { shape: vec![ids.len(), d], data: out };
        let rg = self.rg(table);
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, t, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data.iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Op::MeanAll(x), Tensor::scalar(s), rg)
    }

    /// grid[H,W,C] with `w * token` added at each listed flat cell (h*W + w).
    pub fn scatter_points(&mut self, grid: Var, token: Var, points: &[(usize, f64)]) -> Result<Var> {
        let sg = self.shape(grid).to_vec();
        let st = self.shape(token).to_vec();
        if sg.len() != 3 || st.len() != 1 || st[0] != sg[2] {
            return Err(CoreError::Dimension(format!("scatter_points: grid {sg:?}, token {st:?}")));
        }
        let c = sg[2];
        let cells = sg[0] * sg[1];
        if let Some(bad) = points.iter().find(|(cell, _)| *cell >= cells) {
            return Err(CoreError::Contract(format!("scatter_points: cell {} out of {cells}", bad.0)));
        }
        let mut out = self.value(grid).data.clone();
        let tok = self.value(token).data.clone();
        for &(cell, w) in points {
            for ch in 0..c {
                out[cell * c + ch] += w * tok[ch];
            }
        }
        let t = Tensor { shape: sg, data: out };
        let rg = self.rg(grid) || self.rg(token);
        Ok(self.push(Op::ScatterPoints { grid, token, points: points.to_vec() }, t, rg))
    }

    // ---- composites ----

    /// y = xW + b with x of any rank whose last dim matches W's rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != d_in {
            return Err(CoreError::Dimension(format!("linear: input {sx:?} vs weight {sw:?}")));
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, d_in])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_row(y, b)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    /// Scaled dot-product multi-head attention over raw Q/K/V.
    ///
    /// `mask[i*L_k + j]` true means query i may attend to key j. Queries with
    /// no visible key output zeros.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(CoreError::Dimension(format!("attention: q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let d = sq[1];
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Config(format!("attention: dim {d} not divisible by {heads} heads")));
        }
        let (lq, lk) = (sq[0], sk[0]);
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(CoreError::Dimension(format!(
                    "attention mask len {} want {}",
                    m.len(),
                    lq * lk
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scores = self.scale(scores, scale);
            let attn = match mask {
                Some(m) => self.masked_softmax_rows(scores, m)?,
                None => self.softmax(scores, 1)?,
            };
            outs.push(self.matmul(attn, vh)?);
        }
        let mut out = outs[0];
        for &o in &outs[1..] {
            out = self.concat(out, o, 1)?;
        }
        Ok(out)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        Ok(self.mean_all(ad))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(CoreError::Contract("backward already invoked on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx);
        }
        Ok(())
    }

    /// Gradient of the loss wrt a tape node, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Named parameter gradients recorded on this tape.
    pub fn param_grads(&self) -> Vec<(&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grad(*v).map(|g| (p.as_str(), g)))
            .collect()
    }

    fn propagate(&mut self, idx: usize) {
        let (left, right) = self.grads.split_at_mut(idx);
        let g: &[f64] = right[0].as_ref().expect("grad present").as_slice();
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut add_to = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = left[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot.as_mut_slice());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(*a, &mut |d| for (x, y) in d.iter_mut().zip(g) { *x += y });
                add_to(*b, &mut |d| for (x, y) in d.iter_mut().zip(g) { *x += y });
            }
            Op::Sub(a, b) => {
                add_to(*a, &mut |d| for (x, y) in d.iter_mut().zip(g) { *x += y });
                add_to(*b, &mut |d| for (x, y) in d.iter_mut().zip(g) { *x -= y });
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                add_to(*a, &mut |d| for i in 0..d.len() { d[i] += g[i] * bv[i] });
                add_to(*b, &mut |d| for i in 0..d.len() { d[i] += g[i] * av[i] });
            }
            Op::Scale(a, c) => {
                let c = *c;
                add_to(*a, &mut |d| for i in 0..d.len() { d[i] += g[i] * c });
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value.data;
                add_to(*a, &mut |d| for i in 0..d.len() { if av[i] > 0.0 { d[i] += g[i] } });
            }
            Op::Sigmoid(a) => {
                let yv = &node.value.data;
                add_to(*a, &mut |d| for i in 0..d.len() { d[i] += g[i] * yv[i] * (1.0 - yv[i]) });
            }
            Op::Exp(a) => {
                let yv = &node.value.data;
                add_to(*a, &mut |d| for i in 0..d.len() { d[i] += g[i] * yv[i] });
            }
            Op::Softplus(a) => {
                let av = &nodes[a.0].value.data;
                add_to(*a, &mut |d| for i in 0..d.len() { d[i] += g[i] * sigmoid(av[i]) });
            }
            Op::Abs(a) => {
                let av = &nodes[a.0].value.data;
                add_to(*a, &mut |d| for i in 0..d.len() { d[i] += g[i] * av[i].signum() * (av[i] != 0.0) as u8 as f64 });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let n = nodes[b.0].value.shape[1];
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                // dA = g · Bᵀ
                add_to(*a, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · g
                add_to(*b, &mut |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            d[p * n + j] += s;
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let n = nodes[b.0].value.shape[0];
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                // y = A · Bᵀ; dA = g · B; dB = gᵀ · A
                add_to(*a, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[j * k + p];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                add_to(*b, &mut |d| {
                    for j in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += g[i * n + j] * av[i * k + p];
                            }
                            d[j * k + p] += s;
                        }
                    }
                });
            }
            Op::AddRow(a, bias) => {
                let n = nodes[bias.0].value.shape[0];
                let m = nodes[a.0].value.shape[0];
                add_to(*a, &mut |d| for (x, y) in d.iter_mut().zip(g) { *x += y });
                add_to(*bias, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::RowScale(a, v) => {
                let (m, n) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let av = &nodes[a.0].value.data;
                let vv = &nodes[v.0].value.data;
                add_to(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i * n + j] * vv[i];
                        }
                    }
                });
                add_to(*v, &mut |d| {
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * av[i * n + j];
                        }
                        d[i] += s;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let yv = &node.value.data;
                let shape = &node.value.shape;
                let axis = *axis;
                let lane = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                add_to(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for l in 0..lane {
                                let p = (o * lane + l) * inner + i;
                                dot += g[p] * yv[p];
                            }
                            for l in 0..lane {
                                let p = (o * lane + l) * inner + i;
                                d[p] += yv[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows { x, mask } => {
                let yv = &node.value.data;
                let (m, n) = (node.value.shape[0], node.value.shape[1]);
                add_to(*x, &mut |d| {
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            if mask[i * n + j] {
                                dot += g[i * n + j] * yv[i * n + j];
                            }
                        }
                        for j in 0..n {
                            if mask[i * n + j] {
                                d[i * n + j] += yv[i * n + j] * (g[i * n + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &nodes[x.0].value.data;
                let gv = &nodes[gain.0].value.data;
                let d_dim = nodes[gain.0].value.shape[0];
                let rows = xv.len() / d_dim;
                let eps = *eps;
                add_to(*x, &mut |d| {
                    for r in 0..rows {
                        let row = &xv[r * d_dim..(r + 1) * d_dim];
                        let mean = row.iter().sum::<f64>() / d_dim as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d_dim as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut m1 = 0.0; // mean of gain*g
                        let mut m2 = 0.0; // mean of gain*g*xhat
                        for j in 0..d_dim {
                            let xh = (row[j] - mean) * inv;
                            let gg = gv[j] * g[r * d_dim + j];
                            m1 += gg;
                            m2 += gg * xh;
                        }
                        m1 /= d_dim as f64;
                        m2 /= d_dim as f64;
                        for j in 0..d_dim {
                            let xh = (row[j] - mean) * inv;
                            let gg = gv[j] * g[r * d_dim + j];
                            d[r * d_dim + j] += (gg - m1 - xh * m2) * inv;
                        }
                    }
                });
                add_to(*gain, &mut |d| {
                    for r in 0..rows {
                        let row = &xv[r * d_dim..(r + 1) * d_dim];
                        let mean = row.iter().sum::<f64>() / d_dim as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d_dim as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..d_dim {
                            d[j] += g[r * d_dim + j] * (row[j] - mean) * inv;
                        }
                    }
                });
                add_to(*bias, &mut |d| {
                    for r in 0..rows {
                        for j in 0..d_dim {
                            d[j] += g[r * d_dim + j];
                        }
                    }
                });
            }
            Op::Conv2d { x, kernels, stride } => {
                let sx = &nodes[x.0].value.shape;
                let sk = &nodes[kernels.0].value.shape;
                let (cin, h, w) = (sx[0], sx[1], sx[2]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let stride = *stride;
                let oh = (h - kh) / stride + 1;
                let ow = (w - kw) / stride + 1;
                let xv = &nodes[x.0].value.data;
                let kv = &nodes[kernels.0].value.data;
                add_to(*x, &mut |d| {
                    for co in 0..cout {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[co * oh * ow + i * ow + j];
                                for ci in 0..cin {
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            d[ci * h * w + (i * stride + u) * w + (j * stride + v)] +=
                                                go * kv[((co * cin + ci) * kh + u) * kw + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                add_to(*kernels, &mut |d| {
                    for co in 0..cout {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[co * oh * ow + i * ow + j];
                                for ci in 0..cin {
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            d[((co * cin + ci) * kh + u) * kw + v] +=
                                                go * xv[ci * h * w + (i * stride + u) * w + (j * stride + v)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let sa = &nodes[a.0].value.shape;
                let sb = &nodes[b.0].value.shape;
                let inner: usize = sa[axis + 1..].iter().product();
                let outer: usize = sa[..*axis].iter().product();
                let (ba, bb) = (sa[*axis] * inner, sb[*axis] * inner);
                add_to(*a, &mut |d| {
                    for o in 0..outer {
                        let src = &g[o * (ba + bb)..o * (ba + bb) + ba];
                        for (x, y) in d[o * ba..(o + 1) * ba].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
                add_to(*b, &mut |d| {
                    for o in 0..outer {
                        let src = &g[o * (ba + bb) + ba..(o + 1) * (ba + bb)];
                        for (x, y) in d[o * bb..(o + 1) * bb].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatRows(vars) => {
                let mut offset = 0;
                for v in vars.clone() {
                    let len = nodes[v.0].value.numel();
                    add_to(v, &mut |d| {
                        for (x, y) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                add_to(*a, &mut |d| for (x, y) in d.iter_mut().zip(g) { *x += y });
            }
            Op::Transpose(a) => {
                let m = nodes[a.0].value.shape[0];
                let n = nodes[a.0].value.shape[1];
                add_to(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let n = nodes[x.0].value.shape[1];
                let m = nodes[x.0].value.shape[0];
                let (start, len) = (*start, *len);
                add_to(*x, &mut |d| {
                    for i in 0..m {
                        for j in 0..len {
                            d[i * n + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let n = nodes[x.0].value.shape[1];
                let (start, len) = (*start, *len);
                add_to(*x, &mut |d| {
                    for (x, y) in d[start * n..(start + len) * n].iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d_dim = nodes[table.0].value.shape[1];
                add_to(*table, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d_dim {
                            d[i * d_dim + j] += g[r * d_dim + j];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let s = g[0];
                add_to(*a, &mut |d| for x in d.iter_mut() { *x += s });
            }
            Op::MeanAll(a) => {
                let s = g[0] / nodes[a.0].value.numel() as f64;
                add_to(*a, &mut |d| for x in d.iter_mut() { *x += s });
            }
            Op::ScatterPoints { grid, token, points } => {
                let c = nodes[token.0].value.shape[0];
                add_to(*grid, &mut |d| for (x, y) in d.iter_mut().zip(g) { *x += y });
                add_to(*token, &mut |d| {
                    for &(cell, w) in points {
                        for ch in 0..c {
                            d[ch] += w * g[cell * c + ch];
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for l in 0..lane {
                mx = mx.max(x[(o * lane + l) * inner + i]);
            }
            let mut z = 0.0;
            for l in 0..lane {
                z += (x[(o * lane + l) * inner + i] - mx).exp();
            }
            for l in 0..lane {
                let p = (o * lane + l) * inner + i;
                out[p] = (x[p] - mx).exp() / z;
            }
        }
    }
    out
}
