use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Handle to a node inside one [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Recorded operation, with whatever the backward pass needs saved inline.
#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    ConcatLast { a: NodeId, b: NodeId },
    SliceLast { x: NodeId, start: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: F },
    Relu { x: NodeId },
    Dropout { x: NodeId, keep: Vec<bool>, scale: F },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SumAll { x: NodeId },
    CeSmooth { logits: NodeId, targets: Vec<usize>, valid: Vec<bool>, smoothing: f64, exclude_class0: bool },
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

/// Reverse-mode trace. Operations append nodes in topological order; a single
/// backward sweep then fills gradients for every leaf that asked for them.
/// Gradients accumulate (sum) when a node feeds several consumers.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf with a gradient slot (a trainable parameter or checked input).
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, true, Op::Leaf)
    }

    /// Leaf without a gradient slot (inputs, masks, frozen tables).
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, false, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        self.nodes[id.0].value.data()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push_unchecked(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Every op output must be finite; NaN/Inf is an error, not a state.
    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite("tape operation produced NaN or Inf".to_string()));
        }
        Ok(self.push_unchecked(value, needs_grad, op))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::dim(format!("matmul {:?} x {:?}", ashape, bshape)));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out)?, needs, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::dim(format!("transpose expects rank 2, got {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let xd = self.data(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![c, r], out)?, needs, Op::Transpose { x })
    }

    /// Softmax over the last dimension, max-subtracted for stability.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("softmax on rank-0 tensor"))?;
        if n == 0 {
            return Err(Error::dim("softmax over an empty last dimension"));
        }
        let xd = self.data(x);
        let mut out = vec![F::zero(); xd.len()];
        for (slice, os) in xd.chunks(n).zip(out.chunks_mut(n)) {
            let max = slice.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for (o, &v) in os.iter_mut().zip(slice) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in os.iter_mut() {
                *o = *o / sum;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, needs, Op::Softmax { x })
    }

    /// Per-last-dim-slice (x - mean)/sqrt(var + eps) * gamma + beta with
    /// biased variance. Slices of length 1 are degenerate and rejected.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm on rank-0 tensor"))?;
        if d < 2 {
            return Err(Error::dim(format!("layer_norm over degenerate width {d} (needs >= 2)")));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm gamma/beta length {}/{} vs width {d}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let xd = self.data(x);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut out = vec![F::zero(); xd.len()];
        let df = F::of(d as f64);
        let epsf = F::of(eps);
        for (slice, os) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let mean = slice.iter().fold(F::zero(), |a, &v| a + v) / df;
            let var = slice.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / df;
            let inv = (var + epsf).sqrt().recip();
            for (j, (o, &v)) in os.iter_mut().zip(slice).enumerate() {
                *o = (v - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::new(shape, out)?, needs, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn concat_lastdim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(format!("concat_lastdim {:?} vs {:?}", sa, sb)));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let lead: usize = sa[..sa.len() - 1].iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(lead * (da + db));
        for r in 0..lead {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, needs, Op::ConcatLast { a, b })
    }

    /// Columns [start, start+len) of the last dimension.
    pub fn slice_lastdim(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("slice on rank-0 tensor"))?;
        if start + len > d {
            return Err(Error::dim(format!("slice [{start}, {}) out of width {d}", start + len)));
        }
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(lead * len);
        for r in 0..lead {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = len;
        let needs = self.needs(x);
        self.push(Tensor::new(oshape, out)?, needs, Op::SliceLast { x, start })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip2(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip2(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip2(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip2(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "elementwise {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, needs, op)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cf = F::of(c);
        let out: Vec<F> = self.data(x).iter().map(|&v| v * cf).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, needs, Op::Scale { x, c: cf })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self.data(x).iter().map(|&v| v.max(F::zero())).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, needs, Op::Relu { x })
    }

    /// Inverted dropout: in training each element survives with probability
    /// 1-p and is scaled by 1/(1-p); at inference this is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut SplitMix64, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = F::of(1.0 / (1.0 - p));
        let keep: Vec<bool> = (0..self.value(x).numel()).map(|_| rng.next_f64() >= p).collect();
        let out: Vec<F> = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { F::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, needs, Op::Dropout { x, keep, scale })
    }

    /// Embedding lookup: out row t = table row ids[t]. Differentiable into
    /// the table (scatter-add) when the table is a gradient leaf.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::dim(format!("gather_rows expects a matrix, got {:?}", shape)));
        }
        let (v, d) = (shape[0], shape[1]);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("token id {bad} out of vocabulary range {v}")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(Tensor::new(vec![ids.len(), d], out)?, needs, Op::GatherRows { table, ids })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.data(x).iter().fold(F::zero(), |a, &v| a + v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::SumAll { x })
    }

    /// Chained sum of several nodes of equal shape.
    pub fn add_nodes(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut it = ids.iter();
        let mut acc = *it.next().ok_or_else(|| Error::contract("add_nodes on empty list"))?;
        for &id in it {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    /// Label-smoothed cross entropy, summed over valid rows (caller divides
    /// by the valid count). The target gets mass 1-eps; the remainder is
    /// spread uniformly over the other classes, skipping class 0 when
    /// `exclude_class0` marks it as padding.
    pub fn ce_smooth_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        valid: &[bool],
        smoothing: f64,
        exclude_class0: bool,
    ) -> Result<NodeId> {
        let shape = self.shape(logits);
        if shape.len() != 2 {
            return Err(Error::dim(format!("ce_smooth expects [rows, classes], got {:?}", shape)));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if targets.len() != rows || valid.len() != rows {
            return Err(Error::contract(format!(
                "ce_smooth rows {rows} vs targets {} / valid {}",
                targets.len(),
                valid.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::contract("cross entropy over zero valid positions"));
        }
        let spread = classes - 1 - usize::from(exclude_class0);
        if smoothing > 0.0 && spread == 0 {
            return Err(Error::contract("no classes left to receive smoothing mass"));
        }
        let ld = self.data(logits);
        let mut total = F::zero();
        for r in 0..rows {
            if !valid[r] {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(Error::contract(format!("target {t} out of {classes} classes")));
            }
            if exclude_class0 && t == 0 {
                return Err(Error::contract("valid position targets the padding class"));
            }
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(F::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            if smoothing == 0.0 {
                total = total + (lse - row[t]);
            } else {
                let off = F::of(smoothing / spread as f64);
                let on = F::of(1.0 - smoothing);
                let mut loss = on * (lse - row[t]);
                for (k, &v) in row.iter().enumerate() {
                    if k == t || (exclude_class0 && k == 0) {
                        continue;
                    }
                    loss = loss + off * (lse - v);
                }
                total = total + loss;
            }
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(total),
            needs,
            Op::CeSmooth {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                smoothing,
                exclude_class0,
            },
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, delta: &[F]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![F::zero(); numel]);
        for (a, &d) in g.iter_mut().zip(delta) {
            *a = *a + d;
        }
    }

    /// Reverse sweep from a scalar loss. Fills `grad` on every node that
    /// requested gradients; accumulates across multiple consumers.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // loss independent of every gradient leaf
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        // dA = dC . B^T
                        let bd = self.data(b);
                        let mut da = vec![F::zero(); m * k];
                        for i2 in 0..m {
                            for j in 0..n {
                                let gij = g[i2 * n + j];
                                for p in 0..k {
                                    da[i2 * k + p] = da[i2 * k + p] + gij * bd[p * n + j];
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        // dB = A^T . dC
                        let ad = self.data(a);
                        let mut db = vec![F::zero(); k * n];
                        for i2 in 0..m {
                            for p in 0..k {
                                let aip = ad[i2 * k + p];
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + aip * g[i2 * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![F::zero(); r * c];
                    for i2 in 0..r {
                        for j in 0..c {
                            dx[i2 * c + j] = g[j * r + i2];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Softmax { x } => {
                    let n = *self.shape(x).last().unwrap();
                    let s = self.nodes[i].value.data();
                    let mut dx = vec![F::zero(); s.len()];
                    for (slice, (gs, ds)) in
                        s.chunks(n).zip(g.chunks(n).zip(dx.chunks_mut(n)))
                    {
                        let dot = slice.iter().zip(gs).fold(F::zero(), |a, (&sv, &gv)| a + sv * gv);
                        for ((d, &sv), &gv) in ds.iter_mut().zip(slice).zip(gs) {
                            *d = sv * (gv - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.shape(x).last().unwrap();
                    let xd = self.data(x).to_vec();
                    let gam = self.data(gamma).to_vec();
                    let df = F::of(d as f64);
                    let epsf = F::of(eps);
                    let mut dx = vec![F::zero(); xd.len()];
                    let mut dgamma = vec![F::zero(); d];
                    let mut dbeta = vec![F::zero(); d];
                    for (row, (slice, gs)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                        let mean = slice.iter().fold(F::zero(), |a, &v| a + v) / df;
                        let var =
                            slice.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / df;
                        let inv = (var + epsf).sqrt().recip();
                        let xhat: Vec<F> = slice.iter().map(|&v| (v - mean) * inv).collect();
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + gs[j] * xhat[j];
                            dbeta[j] = dbeta[j] + gs[j];
                            let dxh = gs[j] * gam[j];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[j];
                        }
                        for j in 0..d {
                            let dxh = gs[j] * gam[j];
                            dx[row * d + j] =
                                inv / df * (df * dxh - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::ConcatLast { a, b } => {
                    let sa = self.shape(a);
                    let da = *sa.last().unwrap();
                    let db = *self.shape(b).last().unwrap();
                    let lead: usize = sa[..sa.len() - 1].iter().product();
                    let mut ga = vec![F::zero(); lead * da];
                    let mut gb = vec![F::zero(); lead * db];
                    for r in 0..lead {
                        let src = &g[r * (da + db)..(r + 1) * (da + db)];
                        ga[r * da..(r + 1) * da].copy_from_slice(&src[..da]);
                        gb[r * db..(r + 1) * db].copy_from_slice(&src[da..]);
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::SliceLast { x, start } => {
                    let d = *self.shape(x).last().unwrap();
                    let len = *self.nodes[i].value.shape().last().unwrap();
                    let lead = self.value(x).numel() / d;
                    let mut dx = vec![F::zero(); lead * d];
                    for r in 0..lead {
                        dx[r * d + start..r * d + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accumulate(x, &dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &g);
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<F> =
                            g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<F> =
                            g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<F> = g.iter().map(|&v| v * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::Relu { x } => {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Dropout { x, keep, scale } => {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&keep)
                        .map(|(&gv, &k)| if k { gv * scale } else { F::zero() })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::GatherRows { table, ids } => {
                    let d = self.shape(table)[1];
                    let numel = self.value(table).numel();
                    let mut dt = vec![F::zero(); numel];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[t * d + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
                Op::SumAll { x } => {
                    let dx = vec![g[0]; self.value(x).numel()];
                    self.accumulate(x, &dx);
                }
                Op::CeSmooth { logits, targets, valid, smoothing, exclude_class0 } => {
                    let classes = self.shape(logits)[1];
                    let ld = self.data(logits).to_vec();
                    let spread = classes - 1 - usize::from(exclude_class0);
                    let gout = g[0];
                    let mut dl = vec![F::zero(); ld.len()];
                    for (r, row) in ld.chunks(classes).enumerate() {
                        if !valid[r] {
                            continue;
                        }
                        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                        let mut sum = F::zero();
                        let probs: Vec<F> = row
                            .iter()
                            .map(|&v| {
                                let e = (v - max).exp();
                                sum = sum + e;
                                e
                            })
                            .collect();
                        let off = if smoothing == 0.0 {
                            F::zero()
                        } else {
                            F::of(smoothing / spread as f64)
                        };
                        let on = F::of(1.0 - smoothing);
                        for k in 0..classes {
                            let p = probs[k] / sum;
                            let q = if k == targets[r] {
                                on
                            } else if exclude_class0 && k == 0 {
                                F::zero()
                            } else {
                                off
                            };
                            dl[r * classes + k] = gout * (p - q);
                        }
                    }
                    self.accumulate(logits, &dl);
                }
            }
        }
        Ok(())
    }
}

/// Row-major matrix product, kept free of the tape for reuse in oracle code.
pub fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let bo = p * n;
            let co = i * n;
            for j in 0..n {
                out[co + j] = out[co + j] + aip * b[bo + j];
            }
        }
    }
    out
}
