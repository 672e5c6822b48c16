//! Reverse-mode differentiation over a linear operation record.
//!
//! Every primitive appends one node holding its output value plus whatever
//! it needs for the backward pass. [`GradTape::grad`] walks the nodes from
//! the requested output back to index 0, so operations are visited in exact
//! reverse order of recording.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{
    cross_entropy_row, matmul_transpose_a, matmul_transpose_b, softmax_row, Tensor,
};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// How per-row cross-entropy losses are combined into one scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Relu { a: usize },
    Sum { a: usize },
    ColumnSum { a: usize, column: usize },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tracking(format!(
                "variable #{} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    /// A differentiable input (parameter or model input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = super::tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let tracked = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(out, Op::MatMul { a: ia, b: ib }, tracked))
    }

    /// `a[i, j] + bias[j]` for every row `i`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (rows, cols) = match self.nodes[ia].value.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("add_row lhs must be rank 2, got {s:?}"))),
        };
        let b = &self.nodes[ib].value;
        if b.shape() != [cols] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {cols} columns",
                b.shape()
            )));
        }
        let a_data = self.nodes[ia].value.data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(
                a_data[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| x + y),
            );
        }
        let tracked = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::AddRow { a: ia, bias: ib },
            tracked,
        ))
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "add")?;
        let data = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[ia].value.shape().to_vec();
        let tracked = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a: ia, b: ib }, tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "mul")?;
        let data = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[ia].value.shape().to_vec();
        let tracked = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a: ia, b: ib }, tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        if !factor.is_finite() {
            return Err(Error::Numeric(format!("non-finite scale factor {factor}")));
        }
        let v = &self.nodes[ia].value;
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|x| x * factor).collect(),
        );
        let tracked = self.tracked(ia);
        Ok(self.push(out, Op::Scale { a: ia, factor }, tracked))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = super::tensor::relu(&self.nodes[ia].value);
        let tracked = self.tracked(ia);
        Ok(self.push(out, Op::Relu { a: ia }, tracked))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total: f64 = self.nodes[ia].value.data().iter().sum();
        let tracked = self.tracked(ia);
        Ok(self.push(Tensor::from_parts(vec![1], vec![total]), Op::Sum { a: ia }, tracked))
    }

    /// Sum over rows of one column of a matrix, as a scalar.
    pub fn column_sum(&mut self, a: Var, column: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = self.nodes[ia].value.as_matrix_dims()?;
        if column >= cols {
            return Err(Error::Index(format!("column {column} out of range for {cols} columns")));
        }
        let d = self.nodes[ia].value.data();
        let total: f64 = (0..rows).map(|r| d[r * cols + column]).sum();
        let tracked = self.tracked(ia);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![total]),
            Op::ColumnSum { a: ia, column },
            tracked,
        ))
    }

    /// Row-wise softmax cross-entropy of `logits: [rows × classes]` against
    /// one class label per row, reduced to a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let il = self.check(logits)?;
        let (rows, cols) = self.nodes[il].value.as_matrix_dims()?;
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "{} labels for {rows} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= cols) {
            return Err(Error::Index(format!("class {bad} out of range for {cols} logits")));
        }
        let value = &self.nodes[il].value;
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(rows * cols);
        for (r, &label) in labels.iter().enumerate() {
            let row = value.row(r);
            total += cross_entropy_row(row, label);
            probs.extend(softmax_row(row));
        }
        if reduction == Reduction::Mean {
            total /= rows as f64;
        }
        let tracked = self.tracked(il);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![total]),
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            tracked,
        ))
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Variables that do not depend on any tracked leaf get a zero gradient.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out = self.check(output)?;
        let wrt_idx = wrt.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        if self.nodes[out].value.len() != 1 {
            return Err(Error::Shape(format!(
                "gradient output must be scalar, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        adj[out] = Some(vec![1.0]);
        for i in (0..=out).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backward_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        Ok(wrt_idx
            .into_iter()
            .map(|i| {
                let shape = self.nodes[i].value.shape().to_vec();
                let n = self.nodes[i].value.len();
                let data = adj.get(i).cloned().flatten().unwrap_or_else(|| vec![0.0; n]);
                Tensor::from_parts(shape, data)
            })
            .collect())
    }

    fn backward_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.tracked(*a) {
                    accumulate(adj, *a, matmul_transpose_b(g, bv.data(), m, n, k));
                }
                if self.tracked(*b) {
                    accumulate(adj, *b, matmul_transpose_a(av.data(), g, m, k, n));
                }
            }
            Op::AddRow { a, bias } => {
                let cols = self.nodes[*bias].value.len();
                if self.tracked(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.tracked(*bias) {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(adj, *bias, gb);
                }
            }
            Op::Add { a, b } => {
                if self.tracked(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.tracked(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.tracked(*a) {
                    accumulate(adj, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.tracked(*b) {
                    accumulate(adj, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { a, factor } => {
                accumulate(adj, *a, g.iter().map(|x| x * factor).collect());
            }
            Op::Relu { a } => {
                let input = self.nodes[*a].value.data();
                accumulate(
                    adj,
                    *a,
                    g.iter()
                        .zip(input)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum { a } => {
                accumulate(adj, *a, vec![g[0]; self.nodes[*a].value.len()]);
            }
            Op::ColumnSum { a, column } => {
                let (rows, cols) = self.nodes[*a].value.as_matrix_dims().expect("checked");
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    ga[r * cols + column] = g[0];
                }
                accumulate(adj, *a, ga);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let rows = labels.len();
                let cols = probs.len() / rows;
                let upstream = match reduction {
                    Reduction::Mean => g[0] / rows as f64,
                    Reduction::Sum => g[0],
                };
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    gl[r * cols + label] -= 1.0;
                }
                for v in &mut gl {
                    *v *= upstream;
                }
                accumulate(adj, *logits, gl);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], target: usize, contribution: Vec<f64>) {
    match &mut adj[target] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
