//! Forward ops recorded on the tape and their reverse-mode adjoints.

use super::{Node, Tape, Tensor, TensorError};
use crate::sparse::SparseMatrix;
use std::rc::Rc;

fn shape_err(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
) -> TensorError {
    let (lr, lc) = a.shape();
    let (rr, rc) = b.shape();
    TensorError::ShapeMismatch { op, lr, lc, rr, rc }
}

impl Tape {
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (n, k) = a.shape();
        let (k2, m) = b.shape();
        if k != k2 {
            return Err(shape_err("matmul", a, b));
        }
        let av = a.value();
        let bv = b.value();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * m..(l + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bvv) in orow.iter_mut().zip(brow) {
                    *o += x * bvv;
                }
            }
        }
        drop(av);
        drop(bv);
        let rg = a.requires_grad() || b.requires_grad();
        self.finish(
            |t| Node::Matmul {
                a: a.clone(),
                b: b.clone(),
                out: t,
            },
            n,
            m,
            out,
            rg,
            "matmul",
        )
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (n, k) = a.shape();
        let (m, k2) = b.shape();
        if k != k2 {
            return Err(shape_err("matmul_nt", a, b));
        }
        let av = a.value();
        let bv = b.value();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * m + j] = acc;
            }
        }
        drop(av);
        drop(bv);
        let rg = a.requires_grad() || b.requires_grad();
        self.finish(
            |t| Node::MatmulNT {
                a: a.clone(),
                b: b.clone(),
                out: t,
            },
            n,
            m,
            out,
            rg,
            "matmul_nt",
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", a, b));
        }
        let out: Vec<f64> = a.value().iter().zip(b.value().iter()).map(|(x, y)| x + y).collect();
        let rg = a.requires_grad() || b.requires_grad();
        let (r, c) = a.shape();
        self.finish(
            |t| Node::Add {
                a: a.clone(),
                b: b.clone(),
                out: t,
            },
            r,
            c,
            out,
            rg,
            "add",
        )
    }

    /// Add a 1 x c bias row to every row of x.
    pub fn add_row_broadcast(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (r, c) = x.shape();
        if bias.shape() != (1, c) {
            return Err(shape_err("add_row_broadcast", x, bias));
        }
        let bv = bias.to_vec();
        let out: Vec<f64> = x
            .value()
            .iter()
            .enumerate()
            .map(|(idx, v)| v + bv[idx % c])
            .collect();
        let rg = x.requires_grad() || bias.requires_grad();
        self.finish(
            |t| Node::AddRowBroadcast {
                x: x.clone(),
                bias: bias.clone(),
                out: t,
            },
            r,
            c,
            out,
            rg,
            "add_row_broadcast",
        )
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.value().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (r, c) = x.shape();
        self.finish(
            |t| Node::Relu { x: x.clone(), out: t },
            r,
            c,
            out,
            x.requires_grad(),
            "relu",
        )
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = x.value().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let (r, c) = x.shape();
        self.finish(
            |t| Node::Sigmoid { x: x.clone(), out: t },
            r,
            c,
            out,
            x.requires_grad(),
            "sigmoid",
        )
    }

    /// Softmax over a vector-shaped tensor (Kx1 or 1xK), computed with
    /// max-subtraction.
    pub fn softmax_vec(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (r, c) = x.shape();
        if r != 1 && c != 1 {
            return Err(shape_err("softmax_vec", x, x));
        }
        let xv = x.to_vec();
        let mx = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        self.finish(
            |t| Node::SoftmaxVec { x: x.clone(), out: t },
            r,
            c,
            out,
            x.requires_grad(),
            "softmax_vec",
        )
    }

    /// Column-wise max over rows: r x c -> 1 x c. Ties break to the lowest
    /// row index so the backward routing is deterministic.
    pub fn row_max_pool(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (r, c) = x.shape();
        if r == 0 {
            return Err(shape_err("row_max_pool", x, x));
        }
        let xv = x.value();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = xv[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        drop(xv);
        self.finish(
            |t| Node::RowMaxPool {
                x: x.clone(),
                out: t,
                argmax,
            },
            1,
            c,
            out,
            x.requires_grad(),
            "row_max_pool",
        )
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape_err("mul", a, b));
        }
        let out: Vec<f64> = a.value().iter().zip(b.value().iter()).map(|(x, y)| x * y).collect();
        let (r, c) = a.shape();
        let rg = a.requires_grad() || b.requires_grad();
        self.finish(
            |t| Node::Mul {
                a: a.clone(),
                b: b.clone(),
                out: t,
            },
            r,
            c,
            out,
            rg,
            "mul",
        )
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let total: f64 = x.value().iter().sum();
        self.finish(
            |t| Node::Sum { x: x.clone(), out: t },
            1,
            1,
            vec![total],
            x.requires_grad(),
            "sum",
        )
    }

    /// Constant sparse matrix times dense tensor.
    pub fn spmm_dense(&mut self, s: &Rc<SparseMatrix>, x: &Tensor) -> Result<Tensor, TensorError> {
        let (xr, xc) = x.shape();
        if s.n_cols() != xr {
            return Err(TensorError::ShapeMismatch {
                op: "spmm_dense",
                lr: s.n_rows(),
                lc: s.n_cols(),
                rr: xr,
                rc: xc,
            });
        }
        let out = s
            .spmm_dense(&x.value(), xc)
            .map_err(|_| TensorError::NonFinite("spmm_dense"))?;
        self.finish(
            |t| Node::SpmmDense {
                s: Rc::clone(s),
                x: x.clone(),
                out: t,
            },
            s.n_rows(),
            xc,
            out,
            x.requires_grad(),
            "spmm_dense",
        )
    }

    /// Row block of a convex combination of sparse relations:
    /// `sum_k alpha[k] * rels[k][row_start..row_end, :]` as a dense tensor.
    pub fn weighted_row_block(
        &mut self,
        alpha: &Tensor,
        rels: &Rc<Vec<SparseMatrix>>,
        rows: std::ops::Range<usize>,
    ) -> Result<Tensor, TensorError> {
        assert!(!rels.is_empty());
        let k = rels.len();
        if alpha.len() != k {
            return Err(shape_err("weighted_row_block", alpha, alpha));
        }
        let n_cols = rels[0].n_cols();
        let av = alpha.to_vec();
        let m = rows.len();
        let mut out = vec![0.0; m * n_cols];
        for (rel, &w) in rels.iter().zip(&av) {
            for (local, i) in rows.clone().enumerate() {
                for (j, v) in rel.row(i) {
                    out[local * n_cols + j] += w * v;
                }
            }
        }
        self.finish(
            |t| Node::WeightedRowBlock {
                alpha: alpha.clone(),
                rels: Rc::clone(rels),
                row_start: rows.start,
                out: t,
            },
            m,
            n_cols,
            out,
            alpha.requires_grad(),
            "weighted_row_block",
        )
    }

    /// `sum_k alpha[k] * (x @ rels[k])`: right-multiplication by a convex
    /// combination of sparse relations.
    pub fn weighted_right_mul(
        &mut self,
        x: &Tensor,
        alpha: &Tensor,
        rels: &Rc<Vec<SparseMatrix>>,
    ) -> Result<Tensor, TensorError> {
        let (m, v) = x.shape();
        let k = rels.len();
        if alpha.len() != k || rels[0].n_rows() != v {
            return Err(shape_err("weighted_right_mul", x, alpha));
        }
        let n_cols = rels[0].n_cols();
        let av = alpha.to_vec();
        let xv = x.value();
        let mut out = vec![0.0; m * n_cols];
        for (rel, &w) in rels.iter().zip(&av) {
            if rel.nnz() == 0 {
                continue;
            }
            for l in 0..v {
                for (j, rv) in rel.row(l) {
                    let scale = w * rv;
                    if scale == 0.0 {
                        continue;
                    }
                    for i in 0..m {
                        out[i * n_cols + j] += scale * xv[i * v + l];
                    }
                }
            }
        }
        drop(xv);
        let rg = x.requires_grad() || alpha.requires_grad();
        self.finish(
            |t| Node::WeightedRightMul {
                x: x.clone(),
                alpha: alpha.clone(),
                rels: Rc::clone(rels),
                out: t,
            },
            m,
            n_cols,
            out,
            rg,
            "weighted_right_mul",
        )
    }

    pub fn slice_cols(
        &mut self,
        x: &Tensor,
        cols: std::ops::Range<usize>,
    ) -> Result<Tensor, TensorError> {
        let (r, c) = x.shape();
        assert!(cols.end <= c);
        let xv = x.value();
        let w = cols.len();
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&xv[i * c + cols.start..i * c + cols.end]);
        }
        drop(xv);
        self.finish(
            |t| Node::SliceCols {
                x: x.clone(),
                col_start: cols.start,
                out: t,
            },
            r,
            w,
            out,
            x.requires_grad(),
            "slice_cols",
        )
    }

    pub fn slice_rows(
        &mut self,
        x: &Tensor,
        rows: std::ops::Range<usize>,
    ) -> Result<Tensor, TensorError> {
        let (r, c) = x.shape();
        assert!(rows.end <= r);
        let xv = x.value();
        let out = xv[rows.start * c..rows.end * c].to_vec();
        drop(xv);
        self.finish(
            |t| Node::SliceRows {
                x: x.clone(),
                row_start: rows.start,
                out: t,
            },
            rows.len(),
            c,
            out,
            x.requires_grad(),
            "slice_rows",
        )
    }

    /// Lift an m x n block to the symmetric bipartite matrix
    /// `[[0, B], [B^T, 0]]` of size (m+n) x (m+n).
    pub fn bipartite_embed(&mut self, block: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = block.shape();
        let s = m + n;
        let bv = block.value();
        let mut out = vec![0.0; s * s];
        for i in 0..m {
            for j in 0..n {
                let v = bv[i * n + j];
                out[i * s + (m + j)] = v;
                out[(m + j) * s + i] = v;
            }
        }
        drop(bv);
        self.finish(
            |t| Node::BipartiteEmbed {
                block: block.clone(),
                out: t,
            },
            s,
            s,
            out,
            block.requires_grad(),
            "bipartite_embed",
        )
    }

    /// Differentiable `D^{-1/2} (P + I) D^{-1/2}` where D is the degree of
    /// P + I. Gradients flow through the degree terms.
    pub fn sym_normalize(&mut self, p: &Tensor) -> Result<Tensor, TensorError> {
        let (n, c) = p.shape();
        if n != c {
            return Err(shape_err("sym_normalize", p, p));
        }
        let pv = p.value();
        let mut inv_sqrt_deg = vec![0.0; n];
        for i in 0..n {
            let deg: f64 = 1.0 + pv[i * n..(i + 1) * n].iter().sum::<f64>();
            inv_sqrt_deg[i] = deg.powf(-0.5);
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let aug = pv[i * n + j] + if i == j { 1.0 } else { 0.0 };
                out[i * n + j] = inv_sqrt_deg[i] * aug * inv_sqrt_deg[j];
            }
        }
        drop(pv);
        self.finish(
            |t| Node::SymNormalize {
                p: p.clone(),
                out: t,
                inv_sqrt_deg,
            },
            n,
            n,
            out,
            p.requires_grad(),
            "sym_normalize",
        )
    }

    /// Convex combination of equally shaped embeddings with the given weight
    /// vector: `sum_i weights[i] * items[i]`.
    pub fn fuse(&mut self, weights: &Tensor, items: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!items.is_empty());
        if weights.len() != items.len() {
            return Err(shape_err("fuse", weights, &items[0]));
        }
        let (r, c) = items[0].shape();
        for it in items {
            if it.shape() != (r, c) {
                return Err(shape_err("fuse", &items[0], it));
            }
        }
        let wv = weights.to_vec();
        let mut out = vec![0.0; r * c];
        for (it, &w) in items.iter().zip(&wv) {
            for (o, &v) in out.iter_mut().zip(it.value().iter()) {
                *o += w * v;
            }
        }
        let rg = weights.requires_grad() || items.iter().any(|t| t.requires_grad());
        self.finish(
            |t| Node::Fuse {
                weights: weights.clone(),
                items: items.to_vec(),
                out: t,
            },
            r,
            c,
            out,
            rg,
            "fuse",
        )
    }

    /// Stack tensors with equal column counts on top of each other.
    pub fn vstack(&mut self, items: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!items.is_empty());
        let c = items[0].cols();
        let mut rows = 0usize;
        for it in items {
            if it.cols() != c {
                return Err(shape_err("vstack", &items[0], it));
            }
            rows += it.rows();
        }
        let mut out = Vec::with_capacity(rows * c);
        for it in items {
            out.extend_from_slice(&it.value());
        }
        let rg = items.iter().any(|t| t.requires_grad());
        self.finish(
            |t| Node::VStack {
                items: items.to_vec(),
                out: t,
            },
            rows,
            c,
            out,
            rg,
            "vstack",
        )
    }

    /// `(1-gamma) * sum_masked (y*(y-p))^2 + gamma * sum_masked ((1-y)*(y-p))^2`
    /// over the labeled entries `(flat_index, label)`.
    pub fn masked_weighted_sq_loss(
        &mut self,
        pred: &Tensor,
        entries: &Rc<Vec<(usize, f64)>>,
        gamma: f64,
    ) -> Result<Tensor, TensorError> {
        if entries.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        let pv = pred.value();
        let mut acc = 0.0;
        for &(idx, y) in entries.iter() {
            let r = y - pv[idx];
            let pos = y * r;
            let neg = (1.0 - y) * r;
            acc += (1.0 - gamma) * pos * pos + gamma * neg * neg;
        }
        drop(pv);
        self.finish(
            |t| Node::MaskedWeightedSqLoss {
                pred: pred.clone(),
                entries: Rc::clone(entries),
                gamma,
                out: t,
            },
            1,
            1,
            vec![acc],
            pred.requires_grad(),
            "masked_weighted_sq_loss",
        )
    }
}

fn grad_of(t: &Tensor) -> Option<Vec<f64>> {
    t.grad()
}

pub(super) fn backward_node(node: &Node) -> Result<(), TensorError> {
    match node {
        Node::Matmul { a, b, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            let (n, k) = a.shape();
            let m = b.cols();
            if a.requires_grad() {
                // dA = G * B^T
                let bv = b.value();
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for l in 0..k {
                        let brow = &bv[l * m..(l + 1) * m];
                        let grow = &g[i * m..(i + 1) * m];
                        let mut acc = 0.0;
                        for (x, y) in grow.iter().zip(brow) {
                            acc += x * y;
                        }
                        da[i * k + l] = acc;
                    }
                }
                drop(bv);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB = A^T * G
                let av = a.value();
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for l in 0..k {
                        let x = av[i * k + l];
                        if x == 0.0 {
                            continue;
                        }
                        let drow = &mut db[l * m..(l + 1) * m];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += x * gv;
                        }
                    }
                }
                drop(av);
                b.accumulate_grad(&db);
            }
        }
        Node::MatmulNT { a, b, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            let (n, k) = a.shape();
            let m = b.rows();
            if a.requires_grad() {
                // dA = G * B
                let bv = b.value();
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let brow = &bv[j * k..(j + 1) * k];
                        let drow = &mut da[i * k..(i + 1) * k];
                        for (d, &bvv) in drow.iter_mut().zip(brow) {
                            *d += gv * bvv;
                        }
                    }
                }
                drop(bv);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB = G^T * A
                let av = a.value();
                let mut db = vec![0.0; m * k];
                for i in 0..n {
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let drow = &mut db[j * k..(j + 1) * k];
                        for (d, &avv) in drow.iter_mut().zip(arow) {
                            *d += gv * avv;
                        }
                    }
                }
                drop(av);
                b.accumulate_grad(&db);
            }
        }
        Node::Add { a, b, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if a.requires_grad() {
                a.accumulate_grad(&g);
            }
            if b.requires_grad() {
                b.accumulate_grad(&g);
            }
        }
        Node::AddRowBroadcast { x, bias, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                x.accumulate_grad(&g);
            }
            if bias.requires_grad() {
                let c = bias.cols();
                let mut db = vec![0.0; c];
                for (idx, gv) in g.iter().enumerate() {
                    db[idx % c] += gv;
                }
                bias.accumulate_grad(&db);
            }
        }
        Node::Relu { x, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                let xv = x.value();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                drop(xv);
                x.accumulate_grad(&dx);
            }
        }
        Node::Sigmoid { x, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                let ov = out.value();
                let dx: Vec<f64> = ov.iter().zip(&g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                drop(ov);
                x.accumulate_grad(&dx);
            }
        }
        Node::SoftmaxVec { x, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                let s = out.value();
                let dot: f64 = s.iter().zip(&g).map(|(&a, &b)| a * b).sum();
                let dx: Vec<f64> = s.iter().zip(&g).map(|(&si, &gi)| si * (gi - dot)).collect();
                drop(s);
                x.accumulate_grad(&dx);
            }
        }
        Node::RowMaxPool { x, out, argmax } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                let (r, c) = x.shape();
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    dx[argmax[j] * c + j] = g[j];
                }
                x.accumulate_grad(&dx);
            }
        }
        Node::Mul { a, b, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if a.requires_grad() {
                let da: Vec<f64> = b.value().iter().zip(&g).map(|(&bv, &gv)| bv * gv).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> = a.value().iter().zip(&g).map(|(&av, &gv)| av * gv).collect();
                b.accumulate_grad(&db);
            }
        }
        Node::Sum { x, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                let dx = vec![g[0]; x.len()];
                x.accumulate_grad(&dx);
            }
        }
        Node::SpmmDense { s, x, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                // dX = S^T * G, accumulated by scattering S's entries
                let (xr, xc) = x.shape();
                let mut dx = vec![0.0; xr * xc];
                for (i, j, v) in s.iter() {
                    let grow = &g[i * xc..(i + 1) * xc];
                    let drow = &mut dx[j * xc..(j + 1) * xc];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += v * gv;
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Node::WeightedRowBlock {
            alpha,
            rels,
            row_start,
            out,
        } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if alpha.requires_grad() {
                let (m, n_cols) = out.shape();
                let mut da = vec![0.0; alpha.len()];
                for (k, rel) in rels.iter().enumerate() {
                    let mut acc = 0.0;
                    for local in 0..m {
                        for (j, v) in rel.row(row_start + local) {
                            acc += v * g[local * n_cols + j];
                        }
                    }
                    da[k] = acc;
                }
                alpha.accumulate_grad(&da);
            }
        }
        Node::WeightedRightMul { x, alpha, rels, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            let (m, v) = x.shape();
            let n_cols = out.cols();
            let av = alpha.to_vec();
            if x.requires_grad() {
                // dX[:, l] += alpha_k * R_k[l, j] * G[:, j]
                let mut dx = vec![0.0; m * v];
                for (rel, &w) in rels.iter().zip(&av) {
                    if w == 0.0 || rel.nnz() == 0 {
                        continue;
                    }
                    for l in 0..v {
                        for (j, rv) in rel.row(l) {
                            let scale = w * rv;
                            if scale == 0.0 {
                                continue;
                            }
                            for i in 0..m {
                                dx[i * v + l] += scale * g[i * n_cols + j];
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
            if alpha.requires_grad() {
                let xv = x.value();
                let mut da = vec![0.0; av.len()];
                for (k, rel) in rels.iter().enumerate() {
                    let mut acc = 0.0;
                    for l in 0..v {
                        for (j, rv) in rel.row(l) {
                            for i in 0..m {
                                acc += rv * xv[i * v + l] * g[i * n_cols + j];
                            }
                        }
                    }
                    da[k] = acc;
                }
                drop(xv);
                alpha.accumulate_grad(&da);
            }
        }
        Node::SliceCols { x, col_start, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                let (r, c) = x.shape();
                let w = out.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + col_start..i * c + col_start + w]
                        .copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                x.accumulate_grad(&dx);
            }
        }
        Node::SliceRows { x, row_start, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if x.requires_grad() {
                let (r, c) = x.shape();
                let h = out.rows();
                let mut dx = vec![0.0; r * c];
                dx[row_start * c..(row_start + h) * c].copy_from_slice(&g);
                x.accumulate_grad(&dx);
            }
        }
        Node::BipartiteEmbed { block, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if block.requires_grad() {
                let (m, n) = block.shape();
                let s = m + n;
                let mut db = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        db[i * n + j] = g[i * s + (m + j)] + g[(m + j) * s + i];
                    }
                }
                block.accumulate_grad(&db);
            }
        }
        Node::SymNormalize {
            p,
            out,
            inv_sqrt_deg,
        } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if p.requires_grad() {
                let n = p.rows();
                let pv = p.value();
                let s = inv_sqrt_deg;
                // u[k]: adjoint of s_k through row k; v[k]: through column k
                let mut u = vec![0.0; n];
                let mut w = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let aug = pv[i * n + j] + if i == j { 1.0 } else { 0.0 };
                        let gv = g[i * n + j];
                        u[i] += gv * aug * s[j];
                        w[j] += gv * s[i] * aug;
                    }
                }
                let mut dp = vec![0.0; n * n];
                for k in 0..n {
                    // ds_k/dd_k = -1/2 d^{-3/2} = -1/2 s^3
                    let dsd = -0.5 * s[k] * s[k] * s[k];
                    let deg_term = (u[k] + w[k]) * dsd;
                    for m in 0..n {
                        dp[k * n + m] = g[k * n + m] * s[k] * s[m] + deg_term;
                    }
                }
                drop(pv);
                p.accumulate_grad(&dp);
            }
        }
        Node::Fuse { weights, items, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            let wv = weights.to_vec();
            for (it, &w) in items.iter().zip(&wv) {
                if it.requires_grad() {
                    let di: Vec<f64> = g.iter().map(|&gv| gv * w).collect();
                    it.accumulate_grad(&di);
                }
            }
            if weights.requires_grad() {
                let mut dw = vec![0.0; wv.len()];
                for (k, it) in items.iter().enumerate() {
                    dw[k] = it.value().iter().zip(&g).map(|(&v, &gv)| v * gv).sum();
                }
                weights.accumulate_grad(&dw);
            }
        }
        Node::VStack { items, out } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            let c = out.cols();
            let mut offset = 0usize;
            for it in items {
                let h = it.rows();
                if it.requires_grad() {
                    it.accumulate_grad(&g[offset * c..(offset + h) * c]);
                }
                offset += h;
            }
        }
        Node::MaskedWeightedSqLoss {
            pred,
            entries,
            gamma,
            out,
        } => {
            let Some(g) = grad_of(out) else { return Ok(()) };
            if pred.requires_grad() {
                let pv = pred.value();
                let mut dp = vec![0.0; pred.len()];
                for &(idx, y) in entries.iter() {
                    let r = y - pv[idx];
                    let w = (1.0 - gamma) * y * y + gamma * (1.0 - y) * (1.0 - y);
                    dp[idx] += -2.0 * w * r * g[0];
                }
                drop(pv);
                pred.accumulate_grad(&dp);
            }
        }
    }
    Ok(())
}
