//! Minimal reverse-mode differentiation over vector-valued nodes.
//!
//! Every node holds a flat `Vec<f64>`; scalars are length-1 nodes. The
//! primitive set covers the small tanh network and the two inversion losses,
//! nothing more. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and one reverse sweep suffices.

use crate::error::{Error, Result};

/// Denominators at or below this are treated as zero in norm and sqrt
/// derivatives; the gradient there is the zero subgradient.
pub const NORM_GUARD: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// vector times a length-1 node
    ScaleBy(Var, Var),
    Slice(Var, usize),
    Concat(Var, Var),
    MatVec {
        matrix: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Tanh(Var),
    Sum(Var),
    Dot(Var, Var),
    SumSquares(Var),
    Sqrt(Var),
    Norm(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.adjoints[v.0]
    }
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

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Leaf, values)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Constant, values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| k * x).collect();
        self.push(Op::Scale(a, k), v)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by expects a scalar node");
        let k = self.scalar(s);
        let v = self.value(a).iter().map(|x| k * x).collect();
        self.push(Op::ScaleBy(a, s), v)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice(a, start), v)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        self.push(Op::Concat(a, b), v)
    }

    /// Row-major `rows x cols` matrix node times vector node.
    pub fn matvec(&mut self, matrix: Var, x: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(matrix);
        let xv = self.value(x);
        assert_eq!(m.len(), rows * cols, "matrix node size");
        assert_eq!(xv.len(), cols, "vector node size");
        let v = m.chunks_exact(cols).map(|row| dot(row, xv)).collect();
        self.push(
            Op::MatVec {
                matrix,
                x,
                rows,
                cols,
            },
            v,
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().sum()];
        self.push(Op::Sum(a), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = vec![dot(self.value(a), self.value(b))];
        self.push(Op::Dot(a, b), v)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().map(|x| x * x).sum()];
        self.push(Op::SumSquares(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.sqrt()).collect();
        self.push(Op::Sqrt(a), v)
    }

    /// Unsquared Euclidean norm.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = vec![dot(self.value(a), self.value(a)).sqrt()];
        self.push(Op::Norm(a), v)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn grad(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::contract(format!(
                "gradient output must be scalar, node has {} entries",
                self.value(output).len()
            )));
        }
        if let Some(i) = self.nodes[..=output.0]
            .iter()
            .position(|n| n.value.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numeric(format!("tape node {i}")));
        }

        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[output.0][0] = 1.0;

        for i in (0..=output.0).rev() {
            if adj[i].iter().all(|g| *g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], &g, 1.0);
                    accumulate(&mut adj[b.0], &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], &g, 1.0);
                    accumulate(&mut adj[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    for (k, gk) in g.iter().enumerate() {
                        adj[a.0][k] += gk * vb[k];
                        adj[b.0][k] += gk * va[k];
                    }
                }
                Op::Scale(a, k) => accumulate(&mut adj[a.0], &g, k),
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(s);
                    adj[s.0][0] += dot(&g, self.value(a));
                    accumulate(&mut adj[a.0], &g, k);
                }
                Op::Slice(a, start) => {
                    for (k, gk) in g.iter().enumerate() {
                        adj[a.0][start + k] += gk;
                    }
                }
                Op::Concat(a, b) => {
                    let n = self.value(a).len();
                    accumulate(&mut adj[a.0], &g[..n], 1.0);
                    accumulate(&mut adj[b.0], &g[n..], 1.0);
                }
                Op::MatVec {
                    matrix,
                    x,
                    rows,
                    cols,
                } => {
                    let m = self.value(matrix);
                    let xv = self.value(x);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &m[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            adj[matrix.0][r * cols + c] += gr * xv[c];
                            adj[x.0][c] += gr * row[c];
                        }
                    }
                }
                Op::Tanh(a) => {
                    for (k, gk) in g.iter().enumerate() {
                        let y = node.value[k];
                        adj[a.0][k] += gk * (1.0 - y * y);
                    }
                }
                Op::Sum(a) => {
                    for x in adj[a.0].iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (self.value(a).to_vec(), self.value(b).to_vec());
                    accumulate(&mut adj[a.0], &vb, g[0]);
                    accumulate(&mut adj[b.0], &va, g[0]);
                }
                Op::SumSquares(a) => {
                    let va = self.value(a);
                    for (k, x) in va.iter().enumerate() {
                        adj[a.0][k] += g[0] * 2.0 * x;
                    }
                }
                Op::Sqrt(a) => {
                    for (k, gk) in g.iter().enumerate() {
                        let y = node.value[k];
                        if y > NORM_GUARD {
                            adj[a.0][k] += gk * 0.5 / y;
                        }
                    }
                }
                Op::Norm(a) => {
                    let n = node.value[0];
                    if n > NORM_GUARD {
                        let va = self.value(a);
                        for (k, x) in va.iter().enumerate() {
                            adj[a.0][k] += g[0] * x / n;
                        }
                    }
                }
            }
            adj[i] = g;
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "elementwise op on mismatched nodes");
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric(format!(
                "finite difference evaluation at coordinate {i}"
            )));
        }
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}
