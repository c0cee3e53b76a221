//! Matrix-level reverse-mode tape.
//!
//! Records are appended in forward order and replayed in exact reverse
//! order by [`Tape::backward`]. The tape is never consumed, so a backward
//! pass can be replayed and yields bitwise-identical gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{log_sum_exp, matmul, matmul_at, matmul_bt, softmax, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

impl Var {
    pub fn tape_id(self) -> u64 {
        self.tape
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    Block {
        src: usize,
        row0: usize,
        col0: usize,
    },
    BlockAdjacency {
        src: usize,
        sizes: Vec<usize>,
    },
    RowSoftmax(usize),
    DiagEntropy(usize),
    MeanCrossEntropy {
        src: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Clone, Debug)]
struct Record {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every trainable leaf reached by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`; `None` for constants and for leaves the output does
    /// not depend on.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}

/// Scatter of a block-softmax adjacency: unified rows sit after all label
/// rows, and each dataset's columns are normalized separately per unified
/// node. The learnable block is mirrored above the diagonal.
pub(crate) fn block_adjacency(raw: &Matrix, sizes: &[usize]) -> Result<Matrix> {
    let labels: usize = sizes.iter().sum();
    if raw.cols() != labels {
        return Err(Error::shape("normalize_adjacency", raw.shape(), (raw.rows(), labels)));
    }
    let nodes = raw.rows();
    let total = labels + nodes;
    let mut out = Matrix::zeros(total, total);
    for r in 0..nodes {
        let row = raw.row(r);
        let mut offset = 0;
        for &size in sizes {
            let p = softmax(&row[offset..offset + size]);
            for (j, v) in p.into_iter().enumerate() {
                out.set(labels + r, offset + j, v);
                out.set(offset + j, labels + r, v);
            }
            offset += size;
        }
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            records: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.records[v.idx].value
    }

    /// Scalar value of a 1×1 record.
    pub fn scalar(&self, v: Var) -> f64 {
        self.records[v.idx].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.records.push(Record { value, op, needs_grad });
        Var {
            idx: self.records.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.records.len() {
            return Err(Error::State(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.idx)
    }

    fn needs(&self, idx: usize) -> bool {
        self.records[idx].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = matmul_bt(self.value(a), self.value(b))?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::MatMulBt(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::Add(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.value(a).scale(s);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Scale(ia, s), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = super::matrix::tanh_map(self.value(a));
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Tanh(ia), ng))
    }

    /// `[a ‖ b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != mb.rows() {
            return Err(Error::shape("concat_cols", ma.shape(), mb.shape()));
        }
        let (ca, cb) = (ma.cols(), mb.cols());
        let value = Matrix::from_fn(ma.rows(), ca + cb, |r, c| {
            if c < ca {
                ma.get(r, c)
            } else {
                mb.get(r, c - ca)
            }
        });
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::ConcatCols(ia, ib), ng))
    }

    /// `a` stacked above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.cols() != mb.cols() {
            return Err(Error::shape("concat_rows", ma.shape(), mb.shape()));
        }
        let mut data = ma.data().to_vec();
        data.extend_from_slice(mb.data());
        let value = Matrix::new(ma.rows() + mb.rows(), ma.cols(), data)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::ConcatRows(ia, ib), ng))
    }

    pub fn block(&mut self, a: Var, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.value(a).block(row0, col0, rows, cols)?;
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Block { src: ia, row0, col0 }, ng))
    }

    /// Block-softmax adjacency from raw logits (unified rows × label columns).
    pub fn block_adjacency(&mut self, raw: Var, sizes: &[usize]) -> Result<Var> {
        let ia = self.check(raw)?;
        let value = block_adjacency(self.value(raw), sizes)?;
        let ng = self.needs(ia);
        Ok(self.push(
            value,
            Op::BlockAdjacency {
                src: ia,
                sizes: sizes.to_vec(),
            },
            ng,
        ))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = super::matrix::row_softmax(self.value(a));
        let ng = self.needs(ia);
        Ok(self.push(value, Op::RowSoftmax(ia), ng))
    }

    /// `-Σᵢ pᵢᵢ ln pᵢᵢ` over the diagonal of a square matrix.
    pub fn diag_entropy(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let m = self.value(a);
        if m.rows() != m.cols() {
            return Err(Error::shape("diag_entropy", m.shape(), (m.rows(), m.rows())));
        }
        let mut acc = 0.0;
        for i in 0..m.rows() {
            let p = m.get(i, i);
            if p > 0.0 {
                acc -= p * p.ln();
            }
        }
        let ng = self.needs(ia);
        Ok(self.push(Matrix::filled(1, 1, acc), Op::DiagEntropy(ia), ng))
    }

    /// Mean over rows of `-ln softmax(row)[label]`.
    pub fn mean_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ia = self.check(logits)?;
        let m = self.value(logits);
        if labels.len() != m.rows() || m.rows() == 0 {
            return Err(Error::shape("mean_cross_entropy", m.shape(), (labels.len(), m.cols())));
        }
        let mut probs = Matrix::zeros(m.rows(), m.cols());
        let mut acc = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= m.cols() {
                return Err(Error::Index {
                    index: y,
                    len: m.cols(),
                    context: "pixel label",
                });
            }
            let row = m.row(r);
            acc += log_sum_exp(row) - row[y];
            probs.row_mut(r).copy_from_slice(&softmax(row));
        }
        let value = Matrix::filled(1, 1, acc / m.rows() as f64);
        let ng = self.needs(ia);
        Ok(self.push(
            value,
            Op::MeanCrossEntropy {
                src: ia,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let idx = self.check(loss)?;
        let shape = self.records[idx].value.shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward", shape, (1, 1)));
        }
        self.backward_with(loss, Matrix::filled(1, 1, 1.0))
    }

    /// Backward pass seeded with an arbitrary upstream gradient on `out`.
    pub fn backward_with(&self, out: Var, seed: Matrix) -> Result<Gradients> {
        let out_idx = self.check(out)?;
        if seed.shape() != self.records[out_idx].value.shape() {
            return Err(Error::shape(
                "backward seed",
                seed.shape(),
                self.records[out_idx].value.shape(),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.records.len()];
        grads[out_idx] = Some(seed);
        for idx in (0..=out_idx).rev() {
            let rec = &self.records[idx];
            if !rec.needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(rec, &g, &mut grads)?;
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], idx: usize, g: Matrix) -> Result<()> {
        if !self.records[idx].needs_grad {
            return Ok(());
        }
        match &mut grads[idx] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, rec: &Record, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |i: usize| &self.records[i].value;
        match &rec.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_bt(g, val(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_at(val(*a), g)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul(g, val(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_at(g, val(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Tanh(a) => {
                let y = &rec.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                self.accumulate(grads, *a, Matrix::new(y.rows(), y.cols(), data)?)?;
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                self.accumulate(grads, *a, g.block(0, 0, g.rows(), ca)?)?;
                self.accumulate(grads, *b, g.block(0, ca, g.rows(), cb)?)?;
            }
            Op::ConcatRows(a, b) => {
                let ra = val(*a).rows();
                let rb = val(*b).rows();
                self.accumulate(grads, *a, g.block(0, 0, ra, g.cols())?)?;
                self.accumulate(grads, *b, g.block(ra, 0, rb, g.cols())?)?;
            }
            Op::Block { src, row0, col0 } => {
                let (sr, sc) = val(*src).shape();
                let mut full = Matrix::zeros(sr, sc);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        full.set(row0 + r, col0 + c, g.get(r, c));
                    }
                }
                self.accumulate(grads, *src, full)?;
            }
            Op::BlockAdjacency { src, sizes } => {
                let raw = val(*src);
                let labels = raw.cols();
                let adj = &rec.value;
                let mut out = Matrix::zeros(raw.rows(), labels);
                for r in 0..raw.rows() {
                    let ur = labels + r;
                    let mut offset = 0;
                    for &size in sizes {
                        // Mirrored entries share one logit.
                        let mut dot = 0.0;
                        for c in offset..offset + size {
                            let gc = g.get(ur, c) + g.get(c, ur);
                            dot += adj.get(ur, c) * gc;
                        }
                        for c in offset..offset + size {
                            let gc = g.get(ur, c) + g.get(c, ur);
                            out.set(r, c, adj.get(ur, c) * (gc - dot));
                        }
                        offset += size;
                    }
                }
                self.accumulate(grads, *src, out)?;
            }
            Op::RowSoftmax(a) => {
                let y = &rec.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, gi)| p * gi).sum();
                    for c in 0..y.cols() {
                        out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::DiagEntropy(a) => {
                let p = val(*a);
                let scale = g.get(0, 0);
                let mut out = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let pii = p.get(i, i).max(f64::MIN_POSITIVE);
                    out.set(i, i, -(pii.ln() + 1.0) * scale);
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::MeanCrossEntropy { src, labels, probs } => {
                let n = labels.len() as f64;
                let scale = g.get(0, 0) / n;
                let mut out = probs.scale(scale);
                for (r, &y) in labels.iter().enumerate() {
                    let v = out.get(r, y);
                    out.set(r, y, v - scale);
                }
                self.accumulate(grads, *src, out)?;
            }
        }
        Ok(())
    }
}
