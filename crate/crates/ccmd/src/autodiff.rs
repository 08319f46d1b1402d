//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Define-by-run Wengert tape over flat `f64` buffers. Every operation the
//! backbones and losses need is implemented here, and gradients of every
//! intermediate node stay queryable after `backward` — the gradient-scaling
//! harness reads them off inner layers directly.
//!
//! Design notes:
//! - double precision everywhere; exponent fits downstream must not be
//!   polluted by single-precision noise,
//! - no implicit broadcasting beyond row-vector-over-matrix (`add_row`) and
//!   the explicit `broadcast_axis`; all other shape coercions are explicit,
//! - the tape is rebuilt every forward pass; constants are leaves flagged
//!   `needs_grad = false` and backward does not propagate into them,
//! - `abs` uses the subgradient 0 at exactly zero difference.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    MatMul { a: Var, b: Var },
    /// [l,m,k] x [l,k,n] -> [l,m,n]; with `transpose_b`, b is [l,n,k].
    Bmm { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// [m,n] + [n] broadcast over rows.
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Gelu { a: Var },
    Abs { a: Var },
    /// Softmax over the last axis restricted to mask==1 slots; masked slots
    /// output exactly 0 (the limit of -inf logits, without the NaN hazard).
    SoftmaxRowMasked { a: Var, mask: Arc<Vec<f64>> },
    /// Normalization over the last axis with learnable scale/shift.
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Row gather from a [v,d] table.
    EmbeddingLookup { table: Var, ids: Arc<Vec<usize>> },
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    /// Dot product with a constant weight vector -> scalar.
    DotConst { a: Var, w: Arc<Vec<f64>> },
    Concat { a: Var, b: Var, axis: usize },
    Slice { a: Var, axis: usize, start: usize, len: usize },
    /// Row gather from a [m,n] matrix (duplicates allowed; backward scatter-adds).
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    Reshape { a: Var },
    Permute { a: Var, perm: Arc<Vec<usize>> },
    /// Repeat a size-1 axis `copies` times; backward sums back over it.
    BroadcastAxis { a: Var, axis: usize, copies: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Reverse-mode tape. Records every op at execution time; `backward` fills a
/// gradient store indexed by node id.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&self, values: &[f64], shape: &[usize]) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(Error::InvalidArgument {
                op: "input",
                msg: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values.to_vec(), true))
    }

    /// Non-differentiable leaf; backward never propagates into it.
    pub fn constant(&self, values: &[f64], shape: &[usize]) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(Error::InvalidArgument {
                op: "constant",
                msg: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values.to_vec(), false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Scalar convenience accessor (shape product must be 1).
    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].value.len(), 1);
        nodes[v.0].value[0]
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let nodes = self.nodes.borrow();
        let out = matmul_kernel(&nodes[a.0].value, &nodes[b.0].value, m, k, n);
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, ng))
    }

    pub fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (l, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let mut out = vec![0.0; l * m * n];
        for i in 0..l {
            let ablk = &av[i * m * k..(i + 1) * m * k];
            let bblk = &bv[i * n * k..(i + 1) * n * k];
            let oblk = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                matmul_bt_into(ablk, bblk, m, k, n, oblk, false);
            } else {
                matmul_into(ablk, bblk, m, k, n, oblk, false);
            }
        }
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::Bmm { a, b, transpose_b }, vec![l, m, n], out, ng))
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b)?;
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let (shape, ng) = (
            nodes[a.0].shape.clone(),
            nodes[a.0].needs_grad || nodes[b.0].needs_grad,
        );
        drop(nodes);
        Ok(self.push(Op::Add { a, b }, shape, out, ng))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("sub", a, b)?;
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let (shape, ng) = (
            nodes[a.0].shape.clone(),
            nodes[a.0].needs_grad || nodes[b.0].needs_grad,
        );
        drop(nodes);
        Ok(self.push(Op::Sub { a, b }, shape, out, ng))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b)?;
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let (shape, ng) = (
            nodes[a.0].shape.clone(),
            nodes[a.0].needs_grad || nodes[b.0].needs_grad,
        );
        drop(nodes);
        Ok(self.push(Op::Mul { a, b }, shape, out, ng))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let n = *sa.last().unwrap_or(&0);
        if sr.len() != 1 || sr[0] != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let nodes = self.nodes.borrow();
        let rv = &nodes[row.0].value;
        let out: Vec<f64> = nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % n])
            .collect();
        let ng = nodes[a.0].needs_grad || nodes[row.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::AddRow { a, row }, sa, out, ng))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.0].value.iter().map(|x| x * c).collect();
        let (shape, ng) = (nodes[a.0].shape.clone(), nodes[a.0].needs_grad);
        drop(nodes);
        Ok(self.push(Op::Scale { a, c }, shape, out, ng))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let (shape, ng) = (nodes[a.0].shape.clone(), nodes[a.0].needs_grad);
        drop(nodes);
        Ok(self.push(Op::Relu { a }, shape, out, ng))
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.0].value.iter().map(|&x| gelu_scalar(x)).collect();
        let (shape, ng) = (nodes[a.0].shape.clone(), nodes[a.0].needs_grad);
        drop(nodes);
        Ok(self.push(Op::Gelu { a }, shape, out, ng))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let out: Vec<f64> = nodes[a.0].value.iter().map(|x| x.abs()).collect();
        let (shape, ng) = (nodes[a.0].shape.clone(), nodes[a.0].needs_grad);
        drop(nodes);
        Ok(self.push(Op::Abs { a }, shape, out, ng))
    }

    pub fn softmax_row(&self, a: Var) -> Result<Var> {
        let ones = vec![1.0; numel(&self.shape(a))];
        self.softmax_row_masked(a, &ones)
    }

    pub fn softmax_row_masked(&self, a: Var, mask: &[f64]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.is_empty() || mask.len() != numel(&sa) {
            return Err(Error::InvalidArgument {
                op: "softmax_row_masked",
                msg: format!("mask len {} vs shape {:?}", mask.len(), sa),
            });
        }
        let n = *sa.last().unwrap();
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let mut out = vec![0.0; av.len()];
        for r in 0..av.len() / n {
            let (xs, ms) = (&av[r * n..(r + 1) * n], &mask[r * n..(r + 1) * n]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if ms[j] != 0.0 && xs[j] > mx {
                    mx = xs[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut z = 0.0;
            for j in 0..n {
                if ms[j] != 0.0 {
                    let e = (xs[j] - mx).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[r * n + j] /= z;
            }
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Op::SoftmaxRowMasked {
                a,
                mask: Arc::new(mask.to_vec()),
            },
            sa,
            out,
            ng,
        ))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        let n = *sx.last().unwrap_or(&0);
        if sg != vec![n] || sb != vec![n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: sg,
            });
        }
        let nodes = self.nodes.borrow();
        let (xv, gv, bv) = (
            &nodes[x.0].value,
            &nodes[gamma.0].value,
            &nodes[beta.0].value,
        );
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.len() / n {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mu) * inv * gv[j] + bv[j];
            }
        }
        let ng =
            nodes[x.0].needs_grad || nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, sx, out, ng))
    }

    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("table must be 2-d, got {st:?}"),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let nodes = self.nodes.borrow();
        let tv = &nodes[table.0].value;
        let mut out = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = nodes[table.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Op::EmbeddingLookup {
                table,
                ids: Arc::new(ids.to_vec()),
            },
            vec![ids.len(), d],
            out,
            ng,
        ))
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let sa = self.shape(a);
        if axis >= sa.len() {
            return Err(Error::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {sa:?}"),
            });
        }
        let (outer, dim, inner) = split_at_axis(&sa, axis);
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let base = (o * dim + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += av[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= dim as f64;
            }
        }
        let mut shape: Vec<usize> = sa[..axis].to_vec();
        shape.extend_from_slice(&sa[axis + 1..]);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        Ok(self.push(op, shape, out, ng))
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let s: f64 = nodes[a.0].value.iter().sum();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::SumAll { a }, vec![1], vec![s], ng))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let len = nodes[a.0].value.len().max(1);
        let s: f64 = nodes[a.0].value.iter().sum::<f64>() / len as f64;
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::MeanAll { a }, vec![1], vec![s], ng))
    }

    pub fn dot_const(&self, a: Var, w: &[f64]) -> Result<Var> {
        let sa = self.shape(a);
        if numel(&sa) != w.len() {
            return Err(Error::InvalidArgument {
                op: "dot_const",
                msg: format!("weights len {} vs shape {:?}", w.len(), sa),
            });
        }
        let nodes = self.nodes.borrow();
        let s: f64 = nodes[a.0].value.iter().zip(w).map(|(x, y)| x * y).sum();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Op::DotConst {
                a,
                w: Arc::new(w.to_vec()),
            },
            vec![1],
            vec![s],
            ng,
        ))
    }

    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (outer, da, inner) = split_at_axis(&sa, axis);
        let db = sb[axis];
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let mut out = vec![0.0; (da + db) * outer * inner];
        for o in 0..outer {
            let dst = o * (da + db) * inner;
            out[dst..dst + da * inner].copy_from_slice(&av[o * da * inner..(o + 1) * da * inner]);
            out[dst + da * inner..dst + (da + db) * inner]
                .copy_from_slice(&bv[o * db * inner..(o + 1) * db * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = da + db;
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::Concat { a, b, axis }, shape, out, ng))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::InvalidArgument {
                op: "slice",
                msg: format!("axis {axis} range {start}+{len} out of shape {sa:?}"),
            });
        }
        let (outer, dim, inner) = split_at_axis(&sa, axis);
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * dim + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&av[src..src + len * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::Slice { a, axis, start, len }, shape, out, ng))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: format!("input must be 2-d, got {sa:?}"),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let mut out = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&av[i * n..(i + 1) * n]);
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Op::GatherRows {
                a,
                idx: Arc::new(idx.to_vec()),
            },
            vec![idx.len(), n],
            out,
            ng,
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if numel(&sa) != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: sa,
                rhs: shape.to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let (v, ng) = (nodes[a.0].value.clone(), nodes[a.0].needs_grad);
        drop(nodes);
        Ok(self.push(Op::Reshape { a }, shape.to_vec(), v, ng))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let mut seen = vec![false; sa.len()];
        let valid = perm.len() == sa.len()
            && perm.iter().all(|&p| {
                if p >= sa.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::InvalidArgument {
                op: "permute",
                msg: format!("perm {perm:?} invalid for shape {sa:?}"),
            });
        }
        let nodes = self.nodes.borrow();
        let out = permute_values(&nodes[a.0].value, &sa, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Op::Permute {
                a,
                perm: Arc::new(perm.to_vec()),
            },
            shape,
            out,
            ng,
        ))
    }

    pub fn broadcast_axis(&self, a: Var, axis: usize, copies: usize) -> Result<Var> {
        let sa = self.shape(a);
        if axis >= sa.len() || sa[axis] != 1 || copies == 0 {
            return Err(Error::InvalidArgument {
                op: "broadcast_axis",
                msg: format!("axis {axis} (copies {copies}) invalid for shape {sa:?}"),
            });
        }
        let (outer, _, inner) = split_at_axis(&sa, axis);
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let mut out = vec![0.0; outer * copies * inner];
        for o in 0..outer {
            let src = &av[o * inner..(o + 1) * inner];
            for c in 0..copies {
                out[(o * copies + c) * inner..(o * copies + c + 1) * inner].copy_from_slice(src);
            }
        }
        let mut shape = sa.clone();
        shape[axis] = copies;
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::BroadcastAxis { a, axis, copies }, shape, out, ng))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-topological accumulation from a scalar root. Gradients of all
    /// differentiable nodes reachable from the root are retained and stay
    /// queryable via [`Tape::grad`] until the next `backward` call.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if numel(&nodes[root.0].shape) != 1 {
            return Err(Error::NonScalarRoot {
                shape: nodes[root.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any was recorded.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    fn accumulate(
        &self,
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
        id: usize,
        g: &[f64],
    ) {
        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            for (dst, src) in slot.iter_mut().zip(contrib) {
                *dst += src;
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g, &nodes[b.0].value, m, n, k, &mut ga, false);
                    add_into(grads, *a, &ga);
                }
                if nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(&nodes[a.0].value, g, m, k, n, &mut gb);
                    add_into(grads, *b, &gb);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (l, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_b { sb[1] } else { sb[2] };
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; l * m * k];
                    for i in 0..l {
                        let gblk = &g[i * m * n..(i + 1) * m * n];
                        let bblk = &bv[i * n * k..(i + 1) * n * k];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // C = A·Bᵀ ⇒ dA = dC·B
                            matmul_into(gblk, bblk, m, n, k, out, false);
                        } else {
                            // C = A·B ⇒ dA = dC·Bᵀ
                            matmul_bt_into(gblk, bblk, m, n, k, out, false);
                        }
                    }
                    add_into(grads, *a, &ga);
                }
                if nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; nodes[b.0].value.len()];
                    for i in 0..l {
                        let gblk = &g[i * m * n..(i + 1) * m * n];
                        let ablk = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * n * k..(i + 1) * n * k];
                        if *transpose_b {
                            // dB = dCᵀ·A
                            matmul_at_into(gblk, ablk, m, n, k, out);
                        } else {
                            // dB = Aᵀ·dC
                            matmul_at_into(ablk, gblk, m, k, n, out);
                        }
                    }
                    add_into(grads, *b, &gb);
                }
            }
            Op::Add { a, b } => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::Sub { a, b } => {
                add_into(grads, *a, g);
                if nodes[b.0].needs_grad {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if nodes[a.0].needs_grad {
                    let ga: Vec<f64> = g.iter().zip(&nodes[b.0].value).map(|(x, y)| x * y).collect();
                    add_into(grads, *a, &ga);
                }
                if nodes[b.0].needs_grad {
                    let gb: Vec<f64> = g.iter().zip(&nodes[a.0].value).map(|(x, y)| x * y).collect();
                    add_into(grads, *b, &gb);
                }
            }
            Op::AddRow { a, row } => {
                add_into(grads, *a, g);
                if nodes[row.0].needs_grad {
                    let n = nodes[row.0].value.len();
                    let mut gr = vec![0.0; n];
                    for (i, x) in g.iter().enumerate() {
                        gr[i % n] += x;
                    }
                    add_into(grads, *row, &gr);
                }
            }
            Op::Scale { a, c } => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(grads, *a, &ga);
            }
            Op::Relu { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&nodes[a.0].value)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(grads, *a, &ga);
            }
            Op::Gelu { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&nodes[a.0].value)
                    .map(|(x, &v)| x * gelu_grad_scalar(v))
                    .collect();
                add_into(grads, *a, &ga);
            }
            Op::Abs { a } => {
                // subgradient at 0 is 0
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&nodes[a.0].value)
                    .map(|(x, &v)| {
                        if v > 0.0 {
                            *x
                        } else if v < 0.0 {
                            -*x
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(grads, *a, &ga);
            }
            Op::SoftmaxRowMasked { a, mask } => {
                let n = *nodes[id].shape.last().unwrap();
                let p = &nodes[id].value;
                let mut ga = vec![0.0; p.len()];
                for r in 0..p.len() / n {
                    let base = r * n;
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[base + j] * p[base + j];
                    }
                    for j in 0..n {
                        if mask[base + j] != 0.0 {
                            ga[base + j] = p[base + j] * (g[base + j] - s);
                        }
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let n = *nodes[x.0].shape.last().unwrap();
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let rows = xv.len() / n;
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let mut m1 = 0.0; // mean of γ∘g
                    let mut m2 = 0.0; // mean of γ∘g∘x̂
                    for j in 0..n {
                        let gg_j = gv[j] * gr[j];
                        m1 += gg_j;
                        m2 += gg_j * xhat[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        gx[r * n + j] = (gv[j] * gr[j] - m1 - xhat[j] * m2) * inv;
                    }
                }
                add_into(grads, *x, &gx);
                add_into(grads, *gamma, &gg);
                add_into(grads, *beta, &gb);
            }
            Op::EmbeddingLookup { table, ids } => {
                if nodes[table.0].needs_grad {
                    let d = nodes[table.0].shape[1];
                    let mut gt = vec![0.0; nodes[table.0].value.len()];
                    for (r, &idx) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[idx * d + j] += g[r * d + j];
                        }
                    }
                    add_into(grads, *table, &gt);
                }
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let sa = &nodes[a.0].shape;
                let (outer, dim, inner) = split_at_axis(sa, *axis);
                let scale = if matches!(nodes[id].op, Op::MeanAxis { .. }) {
                    1.0 / dim as f64
                } else {
                    1.0
                };
                let mut ga = vec![0.0; nodes[a.0].value.len()];
                for o in 0..outer {
                    for k in 0..dim {
                        let base = (o * dim + k) * inner;
                        for i in 0..inner {
                            ga[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::SumAll { a } => {
                let ga = vec![g[0]; nodes[a.0].value.len()];
                add_into(grads, *a, &ga);
            }
            Op::MeanAll { a } => {
                let len = nodes[a.0].value.len().max(1);
                let ga = vec![g[0] / len as f64; nodes[a.0].value.len()];
                add_into(grads, *a, &ga);
            }
            Op::DotConst { a, w } => {
                let ga: Vec<f64> = w.iter().map(|x| x * g[0]).collect();
                add_into(grads, *a, &ga);
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (outer, da, inner) = split_at_axis(sa, *axis);
                let db = sb[*axis];
                let mut ga = vec![0.0; nodes[a.0].value.len()];
                let mut gb = vec![0.0; nodes[b.0].value.len()];
                for o in 0..outer {
                    let src = o * (da + db) * inner;
                    ga[o * da * inner..(o + 1) * da * inner]
                        .copy_from_slice(&g[src..src + da * inner]);
                    gb[o * db * inner..(o + 1) * db * inner]
                        .copy_from_slice(&g[src + da * inner..src + (da + db) * inner]);
                }
                add_into(grads, *a, &ga);
                add_into(grads, *b, &gb);
            }
            Op::Slice { a, axis, start, len } => {
                let sa = &nodes[a.0].shape;
                let (outer, dim, inner) = split_at_axis(sa, *axis);
                let mut ga = vec![0.0; nodes[a.0].value.len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    ga[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(grads, *a, &ga);
            }
            Op::GatherRows { a, idx } => {
                let n = nodes[a.0].shape[1];
                let mut ga = vec![0.0; nodes[a.0].value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[i * n + j] += g[r * n + j];
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::Reshape { a } => {
                add_into(grads, *a, g);
            }
            Op::Permute { a, perm } => {
                let inv = inverse_perm(perm);
                let ga = permute_values(g, &nodes[id].shape, &inv);
                add_into(grads, *a, &ga);
            }
            Op::BroadcastAxis { a, axis, copies } => {
                let sa = &nodes[a.0].shape;
                let (outer, _, inner) = split_at_axis(sa, *axis);
                let mut ga = vec![0.0; nodes[a.0].value.len()];
                for o in 0..outer {
                    for c in 0..*copies {
                        let src = (o * copies + c) * inner;
                        for i in 0..inner {
                            ga[o * inner + i] += g[src + i];
                        }
                    }
                }
                add_into(grads, *a, &ga);
            }
        }
    }
}

// ── kernels ──────────────────────────────────────────────────────────────

/// C (+)= A·B with A [m,k], B [k,n].
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64], _acc: bool) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in ar.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in cr.iter_mut().zip(br) {
                *cj += aik * bj;
            }
        }
    }
}

/// C (+)= A·Bᵀ with A [m,k], B [n,k].
fn matmul_bt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64], _acc: bool) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let s: f64 = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            c[i * n + j] += s;
        }
    }
}

/// C (+)= Aᵀ·B with A [m,k], B [m,n] -> C [k,n].
fn matmul_at_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (kk, &aik) in ar.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let cr = &mut c[kk * n..(kk + 1) * n];
            for (cj, &bj) in cr.iter_mut().zip(br) {
                *cj += aik * bj;
            }
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_into(a, b, m, k, n, &mut c, false);
    c
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_values(values: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; values.len()];
    let mut out_idx = vec![0usize; nd];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for i in (0..nd).rev() {
            out_idx[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src = 0;
        for i in 0..nd {
            src += out_idx[i] * in_strides[perm[i]];
        }
        *slot = values[src];
    }
    out
}

// ── gradient checking ────────────────────────────────────────────────────

/// Max over input elements of the relative error between the analytic
/// gradient and a central difference with step `h`:
/// `|analytic − cd| / max(|analytic|, |cd|, 1e-8)`.
///
/// Any NaN (in outputs or gradients) is reported as an error naming the
/// offending element.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            msg: format!("h must be positive, got {h}"),
        });
    }
    let eval = |xs: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.input(xs, shape)?;
        let y = f(&tape, v)?;
        let sy = tape.shape(y);
        if numel(&sy) != 1 {
            return Err(Error::NonScalarRoot { shape: sy });
        }
        Ok(tape.scalar_value(y))
    };

    let tape = Tape::new();
    let v = tape.input(x, shape)?;
    let y = f(&tape, v)?;
    tape.backward(y)?;
    let analytic = tape.grad(v).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_rel = 0.0_f64;
    let mut xs = x.to_vec();
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = eval(&xs)?;
        xs[i] = orig - h;
        let fm = eval(&xs)?;
        xs[i] = orig;
        let cd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - cd).abs() / analytic[i].abs().max(cd.abs()).max(1e-8);
        if !rel.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check element {i}"),
            });
        }
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
