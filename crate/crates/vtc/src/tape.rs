//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation in creation order; because an
//! operation can only reference values that already exist, a single reverse
//! scan over the records is a valid reverse-topological backward pass that
//! visits each operation exactly once. Gradients of untouched leaves stay
//! exactly zero.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

enum Op {
    Leaf,
    MatMul {
        a: Val,
        b: Val,
    },
    Add {
        a: Val,
        b: Val,
    },
    Sub {
        a: Val,
        b: Val,
    },
    MulElem {
        a: Val,
        b: Val,
    },
    Scale {
        a: Val,
        c: f64,
    },
    AddRow {
        a: Val,
        row: Val,
    },
    Transpose {
        a: Val,
    },
    SoftmaxRows {
        a: Val,
    },
    LayerNorm {
        x: Val,
        gain: Val,
        bias: Val,
        eps: f64,
    },
    Silu {
        a: Val,
    },
    ConcatRows {
        parts: Vec<Val>,
    },
    NarrowRows {
        a: Val,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Val>,
    },
    NarrowCols {
        a: Val,
        start: usize,
    },
    GatherRows {
        table: Val,
        indices: Vec<usize>,
    },
    SumAll {
        a: Val,
    },
    CrossEntropyMean {
        logits: Val,
        targets: Vec<usize>,
    },
    AvgPoolGrid {
        a: Val,
        grid_h: usize,
        grid_w: usize,
        stride: usize,
    },
    MaxPoolGrid {
        a: Val,
        argmax: Vec<usize>,
    },
    Detach,
}

struct Node {
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape: operation records plus a registry of named parameters.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Val)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Val {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            dims,
            data,
            grad,
            op,
            needs_grad,
        });
        Val(self.nodes.len() - 1)
    }

    /// Record an input value; it participates in backward only if
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(
            t.dims().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Record a learnable parameter and register it under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Val {
        assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        let v = self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, dims: &[usize], data: Vec<f64>) -> Val {
        self.push(dims.to_vec(), data, Op::Leaf, false)
    }

    pub fn dims(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn to_tensor(&self, v: Val) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].dims.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    pub fn scalar_value(&self, v: Val) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.grad(*v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn rows_cols(&self, v: Val, op: &'static str) -> Result<(usize, usize)> {
        let d = &self.nodes[v.0].dims;
        if d.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected rank-2 operand, got {:?}", d),
            ));
        }
        Ok((d[0], d[1]))
    }

    fn propagates(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: left {}x{}, right {}x{}", m, k, k2, n),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &bd[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let ng = self.propagates(a) || self.propagates(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, ng))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: Val, b: Val) -> Result<Val> {
        self.elementwise_binary(a, b, "mul_elem", |x, y| x * y, Op::MulElem { a, b })
    }

    fn elementwise_binary(
        &mut self,
        a: Val,
        b: Val,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Val> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(Error::shape(
                name,
                format!(
                    "operand dims differ: {:?} vs {:?}",
                    self.nodes[a.0].dims, self.nodes[b.0].dims
                ),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let ng = self.propagates(a) || self.propagates(b);
        Ok(self.push(dims, out, op, ng))
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Result<Val> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let dims = self.nodes[a.0].dims.clone();
        let ng = self.propagates(a);
        Ok(self.push(dims, out, Op::Scale { a, c }, ng))
    }

    /// Broadcast-add a rank-1 `row` of width n to every row of an m-by-n value.
    pub fn add_row(&mut self, a: Val, row: Val) -> Result<Val> {
        let (m, n) = self.rows_cols(a, "add_row")?;
        let rd = &self.nodes[row.0].dims;
        if rd.len() != 1 || rd[0] != n {
            return Err(Error::shape(
                "add_row",
                format!("row dims {:?} do not match width {}", rd, n),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let rowd = &self.nodes[row.0].data;
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = ad[i * n + j] + rowd[j];
                }
            }
        }
        let ng = self.propagates(a) || self.propagates(row);
        Ok(self.push(vec![m, n], out, Op::AddRow { a, row }, ng))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let (m, n) = self.rows_cols(a, "transpose")?;
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = ad[i * n + j];
                }
            }
        }
        let ng = self.propagates(a);
        Ok(self.push(vec![n, m], out, Op::Transpose { a }, ng))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Val) -> Result<Val> {
        let (m, n) = self.rows_cols(a, "softmax_rows")?;
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            for i in 0..m {
                let row = &ad[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[i * n..(i + 1) * n];
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for v in orow.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let ng = self.propagates(a);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows { a }, ng))
    }

    /// Per-row layer normalization over the last dimension with affine output:
    /// y = gain * (x - mean) / sqrt(var + eps) + bias.
    pub fn layer_norm(&mut self, x: Val, gain: Val, bias: Val, eps: f64) -> Result<Val> {
        let (m, d) = self.rows_cols(x, "layer_norm")?;
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let dm = &self.nodes[v.0].dims;
            if dm.len() != 1 || dm[0] != d {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{what} dims {:?} do not match width {}", dm, d),
                ));
            }
        }
        let mut out = vec![0.0; m * d];
        {
            let xd = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for i in 0..m {
                let row = &xd[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let orow = &mut out[i * d..(i + 1) * d];
                for j in 0..d {
                    orow[j] = g[j] * ((row[j] - mean) * inv) + b[j];
                }
            }
        }
        let ng = self.propagates(x) || self.propagates(gain) || self.propagates(bias);
        Ok(self.push(vec![m, d], out, Op::LayerNorm { x, gain, bias, eps }, ng))
    }

    /// x * sigmoid(x), the smooth gate used in feed-forward blocks.
    pub fn silu(&mut self, a: Val) -> Result<Val> {
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let ng = self.propagates(a);
        Ok(self.push(dims, out, Op::Silu { a }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts given".to_string()));
        }
        let (_, n) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.rows_cols(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch: {} vs {}", c, n),
                ));
            }
            rows += m;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let ng = parts.iter().any(|&p| self.propagates(p));
        Ok(self.push(
            vec![rows, n],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn narrow_rows(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let (m, n) = self.rows_cols(a, "narrow_rows")?;
        if start + len > m {
            return Err(Error::shape(
                "narrow_rows",
                format!(
                    "rows {}..{} out of bounds for {} rows",
                    start,
                    start + len,
                    m
                ),
            ));
        }
        let out = self.nodes[a.0].data[start * n..(start + len) * n].to_vec();
        let ng = self.propagates(a);
        Ok(self.push(vec![len, n], out, Op::NarrowRows { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts given".to_string()));
        }
        let (m, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", r, m),
                ));
            }
            cols += c;
        }
        let mut out = vec![0.0; m * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.rows_cols(p, "concat_cols")?;
            let pd = &self.nodes[p.0].data;
            for i in 0..m {
                out[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.propagates(p));
        Ok(self.push(
            vec![m, cols],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn narrow_cols(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let (m, n) = self.rows_cols(a, "narrow_cols")?;
        if start + len > n {
            return Err(Error::shape(
                "narrow_cols",
                format!(
                    "cols {}..{} out of bounds for {} cols",
                    start,
                    start + len,
                    n
                ),
            ));
        }
        let mut out = vec![0.0; m * len];
        {
            let ad = &self.nodes[a.0].data;
            for i in 0..m {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&ad[i * n + start..i * n + start + len]);
            }
        }
        let ng = self.propagates(a);
        Ok(self.push(vec![m, len], out, Op::NarrowCols { a, start }, ng))
    }

    /// out[i] = table[indices[i]]; rows may repeat.
    pub fn gather_rows(&mut self, table: Val, indices: &[usize]) -> Result<Val> {
        let (m, n) = self.rows_cols(table, "gather_rows")?;
        for (pos, &idx) in indices.iter().enumerate() {
            if idx >= m {
                return Err(Error::shape(
                    "gather_rows",
                    format!(
                        "index {} at position {} out of range for {} rows",
                        idx, pos, m
                    ),
                ));
            }
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &idx in indices {
            out.extend_from_slice(&self.nodes[table.0].data[idx * n..(idx + 1) * n]);
        }
        let ng = self.propagates(table);
        Ok(self.push(
            vec![indices.len(), n],
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Val) -> Result<Val> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.propagates(a);
        Ok(self.push(vec![1], vec![s], Op::SumAll { a }, ng))
    }

    pub fn mean_all(&mut self, a: Val) -> Result<Val> {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Val, b: Val) -> Result<Val> {
        let d = self.sub(a, b)?;
        let sq = self.mul_elem(d, d)?;
        self.mean_all(sq)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, computed in a numerically stable fused form.
    pub fn cross_entropy_mean(&mut self, logits: Val, targets: &[usize]) -> Result<Val> {
        let (m, v) = self.rows_cols(logits, "cross_entropy_mean")?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy_mean",
                format!("{} targets for {} rows", targets.len(), m),
            ));
        }
        for (pos, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::shape(
                    "cross_entropy_mean",
                    format!("target {} at row {} out of range for {} classes", t, pos, v),
                ));
            }
        }
        let mut total = 0.0;
        {
            let ld = &self.nodes[logits.0].data;
            for i in 0..m {
                let row = &ld[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[targets[i]];
            }
        }
        let ng = self.propagates(logits);
        Ok(self.push(
            vec![1],
            vec![total / m as f64],
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over each non-overlapping stride-by-stride block of a token grid
    /// laid out as (grid_h * grid_w) rows in row-major raster order.
    pub fn avg_pool_grid(
        &mut self,
        a: Val,
        grid_h: usize,
        grid_w: usize,
        stride: usize,
    ) -> Result<Val> {
        let (t, d) = self.rows_cols(a, "avg_pool_grid")?;
        check_pool_dims(t, grid_h, grid_w, stride, "avg_pool_grid")?;
        let out =
            crate::pooling::avg_pool_forward(&self.nodes[a.0].data, grid_h, grid_w, d, stride);
        let oh = grid_h / stride;
        let ow = grid_w / stride;
        let ng = self.propagates(a);
        Ok(self.push(
            vec![oh * ow, d],
            out,
            Op::AvgPoolGrid {
                a,
                grid_h,
                grid_w,
                stride,
            },
            ng,
        ))
    }

    /// Per-channel max over each block; used only by the compressor ablation.
    pub fn max_pool_grid(
        &mut self,
        a: Val,
        grid_h: usize,
        grid_w: usize,
        stride: usize,
    ) -> Result<Val> {
        let (t, d) = self.rows_cols(a, "max_pool_grid")?;
        check_pool_dims(t, grid_h, grid_w, stride, "max_pool_grid")?;
        let (out, argmax) =
            crate::pooling::max_pool_forward(&self.nodes[a.0].data, grid_h, grid_w, d, stride);
        let oh = grid_h / stride;
        let ow = grid_w / stride;
        let ng = self.propagates(a);
        Ok(self.push(vec![oh * ow, d], out, Op::MaxPoolGrid { a, argmax }, ng))
    }

    /// Identity forward, zero backward: sg(x) in loss notation.
    pub fn detach(&mut self, a: Val) -> Result<Val> {
        let dims = self.nodes[a.0].dims.clone();
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(dims, data, Op::Detach, false))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss. May be called once per tape.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].dims),
            ));
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_step(idx);
        }
        Ok(())
    }

    fn backward_step(&mut self, idx: usize) {
        // Move the op out to appease the borrow checker; leaves carry no deps.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].dims[0], self.nodes[a.0].dims[1]);
                let n = self.nodes[b.0].dims[1];
                if self.propagates(*a) {
                    let mut da = vec![0.0; m * k];
                    {
                        let g = &self.nodes[idx].grad;
                        let bd = &self.nodes[b.0].data;
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                if self.propagates(*b) {
                    let mut db = vec![0.0; k * n];
                    {
                        let g = &self.nodes[idx].grad;
                        let ad = &self.nodes[a.0].data;
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let arow = &ad[i * k..(i + 1) * k];
                            for (p, &aip) in arow.iter().enumerate() {
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    dbrow[j] += aip * grow[j];
                                }
                            }
                        }
                    }
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
            }
            Op::Add { a, b } => {
                let g = self.nodes[idx].grad.clone();
                if self.propagates(*a) {
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                if self.propagates(*b) {
                    accumulate(&mut self.nodes[b.0].grad, &g);
                }
            }
            Op::Sub { a, b } => {
                let g = self.nodes[idx].grad.clone();
                if self.propagates(*a) {
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                if self.propagates(*b) {
                    for (dst, &gv) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                }
            }
            Op::MulElem { a, b } => {
                if self.propagates(*a) {
                    let contrib: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&g, &bv)| g * bv)
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &contrib);
                }
                if self.propagates(*b) {
                    let contrib: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&g, &av)| g * av)
                        .collect();
                    accumulate(&mut self.nodes[b.0].grad, &contrib);
                }
            }
            Op::Scale { a, c } => {
                if self.propagates(*a) {
                    let contrib: Vec<f64> = self.nodes[idx].grad.iter().map(|&g| g * c).collect();
                    accumulate(&mut self.nodes[a.0].grad, &contrib);
                }
            }
            Op::AddRow { a, row } => {
                let n = self.nodes[row.0].dims[0];
                let g = self.nodes[idx].grad.clone();
                if self.propagates(*a) {
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                if self.propagates(*row) {
                    let m = g.len() / n;
                    let rg = &mut self.nodes[row.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            rg[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                if self.propagates(*a) {
                    let (n, m) = (self.nodes[idx].dims[0], self.nodes[idx].dims[1]);
                    let g = &self.nodes[idx].grad;
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            contrib[j * n + i] = g[i * m + j];
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &contrib);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.propagates(*a) {
                    let (m, n) = (self.nodes[idx].dims[0], self.nodes[idx].dims[1]);
                    let y = &self.nodes[idx].data;
                    let g = &self.nodes[idx].grad;
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        let yrow = &y[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        let crow = &mut contrib[i * n..(i + 1) * n];
                        for j in 0..n {
                            crow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &contrib);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, d) = (self.nodes[x.0].dims[0], self.nodes[x.0].dims[1]);
                let mut dx = vec![0.0; m * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                {
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gain.0].data;
                    let g = &self.nodes[idx].grad;
                    for i in 0..m {
                        let row = &xd[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // dxhat, and its row statistics
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            dxhat[j] = grow[j] * gd[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat;
                            dg[j] += grow[j] * xhat;
                            db[j] += grow[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            dx[i * d + j] = inv
                                * (dxhat[j] - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
                        }
                    }
                }
                if self.propagates(*x) {
                    accumulate(&mut self.nodes[x.0].grad, &dx);
                }
                if self.propagates(*gain) {
                    accumulate(&mut self.nodes[gain.0].grad, &dg);
                }
                if self.propagates(*bias) {
                    accumulate(&mut self.nodes[bias.0].grad, &db);
                }
            }
            Op::Silu { a } => {
                if self.propagates(*a) {
                    let contrib: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &contrib);
                }
            }
            Op::ConcatRows { parts } => {
                let n = self.nodes[idx].dims[1];
                let mut offset = 0;
                let g = self.nodes[idx].grad.clone();
                for &p in parts {
                    let rows = self.nodes[p.0].dims[0];
                    if self.propagates(p) {
                        accumulate(
                            &mut self.nodes[p.0].grad,
                            &g[offset * n..(offset + rows) * n],
                        );
                    }
                    offset += rows;
                }
            }
            Op::NarrowRows { a, start } => {
                if self.propagates(*a) {
                    let (len, n) = (self.nodes[idx].dims[0], self.nodes[idx].dims[1]);
                    let g = self.nodes[idx].grad.clone();
                    let ag = &mut self.nodes[a.0].grad;
                    for i in 0..len {
                        for j in 0..n {
                            ag[(start + i) * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let (m, cols) = (self.nodes[idx].dims[0], self.nodes[idx].dims[1]);
                let g = self.nodes[idx].grad.clone();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].dims[1];
                    if self.propagates(p) {
                        let pg = &mut self.nodes[p.0].grad;
                        for i in 0..m {
                            for j in 0..c {
                                pg[i * c + j] += g[i * cols + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::NarrowCols { a, start } => {
                if self.propagates(*a) {
                    let (m, len) = (self.nodes[idx].dims[0], self.nodes[idx].dims[1]);
                    let n = self.nodes[a.0].dims[1];
                    let g = self.nodes[idx].grad.clone();
                    let ag = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        for j in 0..len {
                            ag[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                if self.propagates(*table) {
                    let n = self.nodes[idx].dims[1];
                    let g = self.nodes[idx].grad.clone();
                    let tg = &mut self.nodes[table.0].grad;
                    for (i, &idx_row) in indices.iter().enumerate() {
                        for j in 0..n {
                            tg[idx_row * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if self.propagates(*a) {
                    let g = self.nodes[idx].grad[0];
                    for dst in self.nodes[a.0].grad.iter_mut() {
                        *dst += g;
                    }
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                if self.propagates(*logits) {
                    let (m, v) = (self.nodes[logits.0].dims[0], self.nodes[logits.0].dims[1]);
                    let up = self.nodes[idx].grad[0] / m as f64;
                    let ld = &self.nodes[logits.0].data;
                    let mut contrib = vec![0.0; m * v];
                    for i in 0..m {
                        let row = &ld[i * v..(i + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        let crow = &mut contrib[i * v..(i + 1) * v];
                        for j in 0..v {
                            crow[j] = (row[j] - max).exp();
                            sum += crow[j];
                        }
                        let inv = 1.0 / sum;
                        for j in 0..v {
                            crow[j] =
                                up * (crow[j] * inv - if j == targets[i] { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut self.nodes[logits.0].grad, &contrib);
                }
            }
            Op::AvgPoolGrid {
                a,
                grid_h,
                grid_w,
                stride,
            } => {
                if self.propagates(*a) {
                    let d = self.nodes[idx].dims[1];
                    let g = self.nodes[idx].grad.clone();
                    let contrib =
                        crate::pooling::avg_pool_backward(&g, *grid_h, *grid_w, d, *stride);
                    accumulate(&mut self.nodes[a.0].grad, &contrib);
                }
            }
            Op::MaxPoolGrid { a, argmax } => {
                if self.propagates(*a) {
                    let d = self.nodes[idx].dims[1];
                    let g = self.nodes[idx].grad.clone();
                    let ag = &mut self.nodes[a.0].grad;
                    for (o, &src_row) in argmax.iter().enumerate() {
                        let (out_row, c) = (o / d, o % d);
                        ag[src_row * d + c] += g[out_row * d + c];
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_pool_dims(
    t: usize,
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    op: &'static str,
) -> Result<()> {
    if grid_h * grid_w != t {
        return Err(Error::shape(
            op,
            format!("{} rows do not form a {}x{} grid", t, grid_h, grid_w),
        ));
    }
    if stride == 0 || grid_h % stride != 0 || grid_w % stride != 0 {
        return Err(Error::shape(
            op,
            format!(
                "grid {}x{} not divisible by stride {}",
                grid_h, grid_w, stride
            ),
        ));
    }
    Ok(())
}

/// Central-difference gradient oracle: (f(x + h e_i) - f(x - h e_i)) / 2h per
/// element. `f` must be deterministic; non-finite values are an oracle error.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Oracle(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite value at element {i}: f+ = {fp}, f- = {fm}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(x.dims().to_vec(), grad)
}

/// Per-element relative error with denominator max(|a|, |n|, 1e-8).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_grad_wrt_input, rand_tensor, rng};
    use rand::Rng;

    const GRAD_TOL: f64 = 1e-5;

    /// Reduce a matrix value to a scalar through fixed pseudo-random weights
    /// so every output element influences the loss.
    fn weighted_sum(tape: &mut Tape, v: Val, seed: u64) -> Result<Val> {
        let dims = tape.dims(v).to_vec();
        let numel: usize = dims.iter().product();
        let mut r = rng(seed);
        let w: Vec<f64> = (0..numel).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w = tape.constant(&dims, w);
        let prod = tape.mul_elem(v, w)?;
        tape.sum_all(prod)
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut tape = Tape::new();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = tape.constant(&[2, 2], vec![3.0, -1.5, 2.25, 0.5]);
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));
    }

    #[test]
    fn matmul_matches_hand_multiplication() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(&[2, 1], vec![1.0, 1.0]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_projection_shape() {
        // 4x32 query times a 32x32 weight stays 4x32
        let mut r = rng(7);
        let mut tape = Tape::new();
        let q = tape.leaf(&rand_tensor(&[4, 32], &mut r));
        let w = tape.leaf(&rand_tensor(&[32, 32], &mut r));
        let out = tape.matmul(q, w).unwrap();
        assert_eq!(tape.dims(out), &[4, 32]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims_naming_both() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]);
        let b = tape.constant(&[4, 2], vec![0.0; 8]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "got: {msg}");
    }

    #[test]
    fn softmax_uniform_on_zero_row() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1, 4], vec![0.0; 4]);
        let out = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(out), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_closed_form_row() {
        // softmax([ln 2, 0]) = [2/3, 1/3]
        let mut tape = Tape::new();
        let a = tape.constant(&[1, 2], vec![2.0f64.ln(), 0.0]);
        let out = tape.softmax_rows(a).unwrap();
        let got = tape.value(out);
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((got[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut r = rng(11);
        let base: Vec<f64> = (0..6).map(|_| r.gen_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = base.iter().map(|&x| x + 17.25).collect();
        let mut tape = Tape::new();
        let a = tape.constant(&[1, 6], base);
        let b = tape.constant(&[1, 6], shifted);
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(13);
        let mut tape = Tape::new();
        let a = tape.leaf(&rand_tensor(&[5, 9], &mut r));
        let out = tape.softmax_rows(a).unwrap();
        for i in 0..5 {
            let sum: f64 = tape.value(out)[i * 9..(i + 1) * 9].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn layer_norm_absorbs_constant_rows() {
        // constant vector, unit gain, zero bias -> all zeros (eps governs)
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 4], vec![3.75; 4]);
        let gain = tape.constant(&[4], vec![1.0; 4]);
        let bias = tape.constant(&[4], vec![0.0; 4]);
        let out = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_identity_on_standardized_row() {
        // [1,-1] already has mean 0 and variance 1; with eps -> 0 it passes through
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![1.0, -1.0]);
        let gain = tape.constant(&[2], vec![1.0; 2]);
        let bias = tape.constant(&[2], vec![0.0; 2]);
        let out = tape.layer_norm(x, gain, bias, 1e-15).unwrap();
        assert!((tape.value(out)[0] - 1.0).abs() < 1e-9);
        assert!((tape.value(out)[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_applies_affine_after_normalizing() {
        let mut r = rng(17);
        let xd: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..1.5)).collect();
        let b: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let eps = 1e-5;
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3], xd.clone());
        let gain = tape.constant(&[3], g.clone());
        let bias = tape.constant(&[3], b.clone());
        let out = tape.layer_norm(x, gain, bias, eps).unwrap();
        for i in 0..2 {
            let row = &xd[i * 3..(i + 1) * 3];
            let mean = row.iter().sum::<f64>() / 3.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..3 {
                let expect = g[j] * ((row[j] - mean) * inv) + b[j];
                assert!((tape.value(out)[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_zero_mean_before_affine() {
        let mut r = rng(19);
        let mut tape = Tape::new();
        let x = tape.leaf(&rand_tensor(&[6, 8], &mut r));
        let gain = tape.constant(&[8], vec![1.0; 8]);
        let bias = tape.constant(&[8], vec![0.0; 8]);
        let out = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for i in 0..6 {
            let mean: f64 = tape.value(out)[i * 8..(i + 1) * 8].iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10, "row {i} mean {mean}");
        }
    }

    #[test]
    fn finite_diff_of_sum_is_all_ones() {
        let x = Tensor::from_vec(vec![3], vec![0.2, -1.0, 4.0]).unwrap();
        let grad = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-4).unwrap();
        for &g in grad.data() {
            assert!((g - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_dot_square() {
        // f(x) = x . x at [1, 2] has gradient [2, 4]
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let grad =
            finite_diff_grad(|t| Ok(t.data().iter().map(|&v| v * v).sum()), &x, 1e-4).unwrap();
        assert!((grad.data()[0] - 2.0).abs() < 1e-6);
        assert!((grad.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_non_finite_objective() {
        let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let err = finite_diff_grad(|t| Ok(1.0 / t.data()[0]), &x, 1e-4);
        // 1/h is finite; force a NaN instead
        assert!(err.is_ok());
        let err = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn forward_ops_are_deterministic_bit_for_bit() {
        let mut r = rng(23);
        let x = rand_tensor(&[4, 6], &mut r);
        let w = rand_tensor(&[6, 5], &mut r);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let h = tape.matmul(xv, wv).unwrap();
            let s = tape.softmax_rows(h).unwrap();
            tape.value(s).to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn unused_parameter_gradient_is_exactly_zero() {
        let mut r = rng(29);
        let used = rand_tensor(&[2, 2], &mut r);
        let unused = rand_tensor(&[3, 3], &mut r);
        let mut tape = Tape::new();
        let u = tape.param("used", &used);
        let n = tape.param("never", &unused);
        let l = tape.sum_all(u).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(n).iter().all(|&g| g == 0.0));
        assert!(tape.grad(u).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn detach_passes_value_and_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::from_vec(vec![2], vec![1.5, -0.5])
                .unwrap()
                .with_grad(),
        );
        let d = tape.detach(x).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        let l = tape.sum_all(d).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).iter().all(|&g| g == 0.0));
    }

    // ── per-op gradient checks against the finite-difference oracle ──────

    #[test]
    fn grad_matmul_left_and_right() {
        let mut r = rng(31);
        let a0 = rand_tensor(&[3, 4], &mut r);
        let b0 = rand_tensor(&[4, 2], &mut r);
        let b_fixed = b0.clone();
        check_grad_wrt_input(
            move |tape, a| {
                let b = tape.leaf(&b_fixed);
                let out = tape.matmul(a, b)?;
                weighted_sum(tape, out, 1)
            },
            &a0,
            GRAD_TOL,
        );
        let a_fixed = a0.clone();
        check_grad_wrt_input(
            move |tape, b| {
                let a = tape.leaf(&a_fixed);
                let out = tape.matmul(a, b)?;
                weighted_sum(tape, out, 2)
            },
            &b0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_elementwise_and_scale() {
        let mut r = rng(37);
        let x0 = rand_tensor(&[3, 3], &mut r);
        let other = rand_tensor(&[3, 3], &mut r);
        let o = other.clone();
        check_grad_wrt_input(
            move |tape, x| {
                let y = tape.leaf(&o);
                let s = tape.add(x, y)?;
                let d = tape.sub(s, x)?;
                let m = tape.mul_elem(d, x)?;
                let sq = tape.mul_elem(x, x)?;
                let t = tape.add(m, sq)?;
                let t = tape.scale(t, 0.37)?;
                weighted_sum(tape, t, 3)
            },
            &x0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_add_row_broadcast() {
        let mut r = rng(41);
        let x0 = rand_tensor(&[4, 3], &mut r);
        let row0 = rand_tensor(&[3], &mut r);
        let row_fixed = row0.clone();
        check_grad_wrt_input(
            move |tape, x| {
                let row = tape.leaf(&row_fixed);
                let out = tape.add_row(x, row)?;
                weighted_sum(tape, out, 4)
            },
            &x0,
            GRAD_TOL,
        );
        let x_fixed = x0.clone();
        check_grad_wrt_input(
            move |tape, row| {
                let x = tape.leaf(&x_fixed);
                let out = tape.add_row(x, row)?;
                weighted_sum(tape, out, 5)
            },
            &row0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_transpose_softmax_silu() {
        let mut r = rng(43);
        let x0 = rand_tensor(&[3, 5], &mut r);
        check_grad_wrt_input(
            |tape, x| {
                let t = tape.transpose(x)?;
                let s = tape.softmax_rows(t)?;
                let g = tape.silu(s)?;
                weighted_sum(tape, g, 6)
            },
            &x0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let mut r = rng(47);
        let x0 = rand_tensor(&[4, 6], &mut r);
        let g0 = rand_tensor(&[6], &mut r);
        let b0 = rand_tensor(&[6], &mut r);
        let (gf, bf) = (g0.clone(), b0.clone());
        check_grad_wrt_input(
            move |tape, x| {
                let gain = tape.leaf(&gf);
                let bias = tape.leaf(&bf);
                let out = tape.layer_norm(x, gain, bias, 1e-5)?;
                weighted_sum(tape, out, 7)
            },
            &x0,
            GRAD_TOL,
        );
        let (xf, bf) = (x0.clone(), b0.clone());
        check_grad_wrt_input(
            move |tape, gain| {
                let x = tape.leaf(&xf);
                let bias = tape.leaf(&bf);
                let out = tape.layer_norm(x, gain, bias, 1e-5)?;
                weighted_sum(tape, out, 8)
            },
            &g0,
            GRAD_TOL,
        );
        let (xf, gf) = (x0.clone(), g0.clone());
        check_grad_wrt_input(
            move |tape, bias| {
                let x = tape.leaf(&xf);
                let gain = tape.leaf(&gf);
                let out = tape.layer_norm(x, gain, bias, 1e-5)?;
                weighted_sum(tape, out, 9)
            },
            &b0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_concat_narrow_rows_and_cols() {
        let mut r = rng(53);
        let x0 = rand_tensor(&[4, 4], &mut r);
        check_grad_wrt_input(
            |tape, x| {
                let top = tape.narrow_rows(x, 0, 2)?;
                let bottom = tape.narrow_rows(x, 2, 2)?;
                let swapped = tape.concat_rows(&[bottom, top])?;
                let left = tape.narrow_cols(swapped, 0, 1)?;
                let right = tape.narrow_cols(swapped, 1, 3)?;
                let back = tape.concat_cols(&[right, left])?;
                weighted_sum(tape, back, 10)
            },
            &x0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_gather_rows_with_repeats() {
        let mut r = rng(59);
        let table0 = rand_tensor(&[5, 3], &mut r);
        check_grad_wrt_input(
            |tape, table| {
                let picked = tape.gather_rows(table, &[1, 3, 1, 0, 1])?;
                weighted_sum(tape, picked, 11)
            },
            &table0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_cross_entropy_mean() {
        let mut r = rng(61);
        let logits0 = rand_tensor(&[4, 7], &mut r);
        check_grad_wrt_input(
            |tape, logits| tape.cross_entropy_mean(logits, &[2, 0, 6, 3]),
            &logits0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_pooling_ops() {
        let mut r = rng(67);
        let x0 = rand_tensor(&[16, 3], &mut r); // 4x4 grid
        check_grad_wrt_input(
            |tape, x| {
                let pooled = tape.avg_pool_grid(x, 4, 4, 2)?;
                weighted_sum(tape, pooled, 12)
            },
            &x0,
            GRAD_TOL,
        );
        check_grad_wrt_input(
            |tape, x| {
                let pooled = tape.max_pool_grid(x, 4, 4, 2)?;
                weighted_sum(tape, pooled, 13)
            },
            &x0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_mse_and_mean() {
        let mut r = rng(71);
        let x0 = rand_tensor(&[3, 4], &mut r);
        let target = rand_tensor(&[3, 4], &mut r);
        check_grad_wrt_input(
            move |tape, x| {
                let t = tape.leaf(&target);
                tape.mse(x, t)
            },
            &x0,
            GRAD_TOL,
        );
    }

    #[test]
    fn grad_masked_softmax_ignores_future() {
        // the additive-mask pattern used by causal attention downstream
        let mut r = rng(73);
        let x0 = rand_tensor(&[4, 4], &mut r);
        check_grad_wrt_input(
            |tape, x| {
                let n = 4;
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    for j in (i + 1)..n {
                        m[i * n + j] = ATTN_MASK_TEST;
                    }
                }
                let mask = tape.constant(&[n, n], m);
                let masked = tape.add(x, mask)?;
                let soft = tape.softmax_rows(masked)?;
                weighted_sum(tape, soft, 14)
            },
            &x0,
            GRAD_TOL,
        );
    }

    const ATTN_MASK_TEST: f64 = -1e30;
}
