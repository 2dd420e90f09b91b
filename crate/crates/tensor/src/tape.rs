use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::kernels::{gelu, gemm_acc, GELU_C};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        dim: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GatherLast {
        x: Var,
        idx: Vec<usize>,
        len: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    // Persistent accumulator, populated only for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in construction order, which is already a topological
/// order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}


fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let rn: usize = rhs.iter().product();
    rn == 1 || (rhs.len() <= lhs.len() && lhs.ends_with(rhs))
}

fn add_into(adj: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// da[m,k] += dc[m,n] * b[k,n]^T
fn gemm_acc_bt(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
            da[i * k + p] += s;
        }
    }
}

/// db[k,n] += a[m,k]^T * dc[m,n]
fn gemm_acc_at(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &mut db[p * n..(p + 1) * n];
            for (o, d) in brow.iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Scatter index map for a permutation: `out[j] = x[map[j]]`.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a copy of `t` as a leaf. Gradients flow to it only when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's current value out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(TensorError::NotScalar(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    /// Accumulated gradient of a leaf. Leaves that require grad but were not
    /// reached by backward report zeros once any backward pass has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, usize)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if !broadcast_ok(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok((sa.clone(), self.nodes[b.0].value.len()))
    }

    /// `a + b`, with `b` equal in shape, a trailing suffix, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, bl) = self.elementwise("add", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = Vec::with_capacity(va.len());
        for chunk in va.chunks(bl) {
            value.extend(chunk.iter().zip(vb).map(|(x, y)| x + y));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Add(a, b), rg))
    }

    /// `a - b` expressed through add and scale.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, bl) = self.elementwise("mul", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = Vec::with_capacity(va.len());
        for chunk in va.chunks(bl) {
            value.extend(chunk.iter().zip(vb).map(|(x, y)| x * y));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::Scale(a, c), rg)
    }

    /// Matrix product over the last two axes. `b` is either a plain `[k, n]`
    /// matrix shared by every batch entry of `a`, or has the same leading
    /// dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            for bi in 0..batch {
                let ao = &va[bi * m * k..(bi + 1) * m * k];
                let bo = if shared_rhs {
                    &vb[..]
                } else {
                    &vb[bi * k * n..(bi + 1) * k * n]
                };
                gemm_acc(ao, bo, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            gelu,
            Op::Gelu(a),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(&self.nodes[x.0].shape, axis, "softmax")?;
        let n = &self.nodes[x.0];
        let mut out = vec![0.0; n.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| n.value[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (n.value[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(&self.nodes[x.0].shape, axis, "log_softmax")?;
        let n = &self.nodes[x.0];
        let mut out = vec![0.0; n.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| n.value[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|j| (n.value[at(j)] - mx).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = n.value[at(j)] - lse;
                }
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::LogSoftmax { x, outer, len, inner }, rg))
    }

    /// Normalizes over the last axis with epsilon 1e-5 inside the square
    /// root, then applies the optional affine `gamma`, `beta` (shape `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.nodes[x.0].shape.clone();
        let dim = *shape.last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            shape: shape.clone(),
        })?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.nodes[p.0].shape != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let v = &self.nodes[x.0].value;
        let rows = v.len() / dim.max(1);
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &v[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / dim as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for (o, x) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = &self.nodes[g.0].value;
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gv[i % dim];
            }
        }
        if let Some(b) = beta {
            let bv = &self.nodes[b.0].value;
            for (i, o) in out.iter_mut().enumerate() {
                *o += bv[i % dim];
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows of `table` (`[vocab, d]`) selected by `ids`; result shape is
    /// `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: ts,
                rhs: ids_shape.to_vec(),
            });
        }
        if ids.len() != ids_shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                len: ids.len(),
                shape: ids_shape.to_vec(),
            });
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: vocab,
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            shape,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidAxis {
            op: "concat",
            axis,
            shape: vec![],
        })?;
        let base = self.nodes[first.0].shape.clone();
        let (outer, _, inner) = split_axis(&base, axis, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let same_rank = s.len() == base.len();
            let compatible = same_rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            widths.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = split_axis(&shape, axis, "mean")?;
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[o * len * inner + j * inner + i];
                }
            }
        }
        for x in &mut out {
            *x /= len as f64;
        }
        let mut s = shape;
        s.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::Mean { x, outer, len, inner }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::SumAll(x), rg)
    }

    /// Replaces entries where `mask` is true with `fill`. No gradient flows
    /// through the replaced entries.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let n = &self.nodes[x.0];
        if mask.len() != n.value.len() {
            return Err(TensorError::DataLength {
                len: mask.len(),
                shape: n.shape.clone(),
            });
        }
        let value = n
            .value
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(
            shape,
            value,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let (out_shape, map) = permute_map(&shape, perm);
        let v = &self.nodes[x.0].value;
        let value = map.iter().map(|&s| v[s]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Picks one entry per row along the last axis: `[.., n] -> [..]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let len = *shape.last().unwrap_or(&1);
        let rows = self.nodes[x.0].value.len() / len.max(1);
        if idx.len() != rows || shape.is_empty() {
            return Err(TensorError::DataLength {
                len: idx.len(),
                shape,
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_last",
                index: bad,
                size: len,
            });
        }
        let v = &self.nodes[x.0].value;
        let value = idx.iter().enumerate().map(|(r, &i)| v[r * len + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            shape[..shape.len() - 1].to_vec(),
            value,
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
                len,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate, so
    /// calling this twice without clearing doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                let buf = node.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (b, x) in buf.iter_mut().zip(&g) {
                    *b += x;
                }
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    add_into(adj, *a, g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                    });
                }
                if rg(*b) {
                    let bl = len(*b);
                    add_into(adj, *b, bl, |d| {
                        for chunk in g.chunks(bl) {
                            d.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let bl = vb.len();
                if rg(*a) {
                    add_into(adj, *a, g.len(), |d| {
                        g.iter().enumerate().for_each(|(j, x)| d[j] += x * vb[j % bl])
                    });
                }
                if rg(*b) {
                    add_into(adj, *b, bl, |d| {
                        g.iter().enumerate().for_each(|(j, x)| d[j % bl] += x * va[j])
                    });
                }
            }
            Op::Scale(a, c) => add_into(adj, *a, g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(d, x)| *d += x * c)
            }),
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if rg(a) {
                    add_into(adj, a, va.len(), |d| {
                        for bi in 0..batch {
                            let bo = if shared_rhs {
                                &vb[..]
                            } else {
                                &vb[bi * k * n..(bi + 1) * k * n]
                            };
                            gemm_acc_bt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                bo,
                                &mut d[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                if rg(b) {
                    add_into(adj, b, vb.len(), |d| {
                        for bi in 0..batch {
                            let dst = if shared_rhs {
                                &mut d[..]
                            } else {
                                &mut d[bi * k * n..(bi + 1) * k * n]
                            };
                            gemm_acc_at(
                                &va[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                dst,
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                add_into(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                add_into(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        let xv = x[j];
                        let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                        let dy = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                        d[j] += g[j] * dy;
                    }
                });
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                add_into(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                add_into(adj, *a, g.len(), |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] / x[j];
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                add_into(adj, x, g.len(), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, outer, len, inner } => {
                let y = &node.value;
                add_into(adj, x, g.len(), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += g[at(j)] - y[at(j)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                inv_std,
            } => {
                let dim = *dim;
                let rows = inv_std.len();
                if let Some(b) = beta.filter(|b| rg(*b)) {
                    add_into(adj, b, dim, |d| {
                        g.iter().enumerate().for_each(|(j, x)| d[j % dim] += x)
                    });
                }
                if let Some(gm) = gamma.filter(|gm| rg(*gm)) {
                    add_into(adj, gm, dim, |d| {
                        g.iter()
                            .enumerate()
                            .for_each(|(j, x)| d[j % dim] += x * xhat[j])
                    });
                }
                if rg(*x) {
                    let gv = gamma.map(|gm| &nodes[gm.0].value);
                    add_into(adj, *x, g.len(), |d| {
                        let mut gh = vec![0.0; dim];
                        for r in 0..rows {
                            let off = r * dim;
                            for c in 0..dim {
                                gh[c] = g[off + c] * gv.map_or(1.0, |v| v[c]);
                            }
                            let mean_g = gh.iter().sum::<f64>() / dim as f64;
                            let mean_gx = gh
                                .iter()
                                .zip(&xhat[off..off + dim])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / dim as f64;
                            for c in 0..dim {
                                d[off + c] +=
                                    inv_std[r] * (gh[c] - mean_g - xhat[off + c] * mean_gx);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids, dim } => {
                let dim = *dim;
                add_into(adj, *table, len(*table), |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            d[id * dim + c] += g[r * dim + c];
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if rg(*p) {
                        add_into(adj, *p, outer * w, |d| {
                            for o in 0..*outer {
                                for c in 0..w {
                                    d[o * w + c] += g[o * row + off + c];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            &Op::Mean { x, outer, len, inner } => {
                let scale = 1.0 / len as f64;
                add_into(adj, x, outer * len * inner, |d| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                d[o * len * inner + j * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let n = len(*x);
                add_into(adj, *x, n, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MaskedFill { x, mask } => add_into(adj, *x, g.len(), |d| {
                for j in 0..g.len() {
                    if !mask[j] {
                        d[j] += g[j];
                    }
                }
            }),
            Op::Reshape(x) => add_into(adj, *x, g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(d, x)| *d += x)
            }),
            Op::Permute { x, perm } => {
                let (_, map) = permute_map(&nodes[x.0].shape, perm);
                add_into(adj, *x, g.len(), |d| {
                    for (j, &src) in map.iter().enumerate() {
                        d[src] += g[j];
                    }
                });
            }
            Op::GatherLast { x, idx, len: l } => {
                let l = *l;
                add_into(adj, *x, idx.len() * l, |d| {
                    for (r, &c) in idx.iter().enumerate() {
                        d[r * l + c] += g[r];
                    }
                });
            }
        }
    }
}
