//! Minimal reverse-mode differentiation tape over `ndarray` matrices.
//!
//! Every value is an `Array2<f64>`; column vectors are `(n, 1)` and scalars
//! are `(1, 1)`. Nodes are appended in topological order, so the backward
//! sweep is a single reverse pass over the arena. Gradients of leaves stay
//! available after [`Graph::backward`], which is how perturbation directions
//! and saliency maps are extracted.

use ndarray::Array2;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Matrix product `a . b`.
    MatMul(Var, Var),
    /// Elementwise sum of same-shape values.
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    /// Elementwise (Hadamard) product.
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    /// Numerically stable log-softmax of a column vector.
    LogSoftmax(Var),
    /// Softmax of a column vector.
    Softmax(Var),
    /// Row `i` of a matrix, emitted as a column vector.
    Row(Var, usize),
    /// Stack `(1,1)` scalars into a `(n,1)` column vector.
    StackScalars(Vec<Var>),
    /// Concatenate `(n,1)` columns into an `(n,k)` matrix.
    ColsConcat(Vec<Var>),
    /// Vertical concatenation of two column vectors.
    ConcatRows(Var, Var),
    /// Inner product of two same-shape values, emitted as `(1,1)`.
    Dot(Var, Var),
    /// Element `i` of a column vector, emitted as `(1,1)`.
    Pick(Var, usize),
    /// Sum of all elements, emitted as `(1,1)`.
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input node. Leaves keep their gradient after `backward`.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by the last [`Graph::backward`] call.
    /// Zero if the node does not influence the target.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n needs at least one operand");
        let mut value = self.nodes[vars[0].0].value.clone();
        for v in &vars[1..] {
            value += &self.nodes[v.0].value;
        }
        self.push(value, Op::AddN(vars.to_vec()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.ncols(), 1);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let value = x.mapv(|v| v - log_sum);
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.ncols(), 1);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = x.mapv(|v| (v - max).exp());
        let sum: f64 = exp.sum();
        let value = exp / sum;
        self.push(value, Op::Softmax(a))
    }

    pub fn row(&mut self, table: Var, i: usize) -> Var {
        let r = self.nodes[table.0].value.row(i);
        let value = Array2::from_shape_fn((r.len(), 1), |(j, _)| r[j]);
        self.push(value, Op::Row(table, i))
    }

    pub fn stack_scalars(&mut self, vars: &[Var]) -> Var {
        let value = Array2::from_shape_fn((vars.len(), 1), |(i, _)| {
            self.nodes[vars[i].0].value[(0, 0)]
        });
        self.push(value, Op::StackScalars(vars.to_vec()))
    }

    pub fn cols_concat(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "cols_concat needs at least one column");
        let n = self.nodes[vars[0].0].value.nrows();
        let value = Array2::from_shape_fn((n, vars.len()), |(i, t)| {
            self.nodes[vars[t].0].value[(i, 0)]
        });
        self.push(value, Op::ColsConcat(vars.to_vec()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.ncols(), 1);
        debug_assert_eq!(vb.ncols(), 1);
        let (na, nb) = (va.nrows(), vb.nrows());
        let value = Array2::from_shape_fn((na + nb, 1), |(i, _)| {
            if i < na {
                va[(i, 0)]
            } else {
                vb[(i - na, 0)]
            }
        });
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let s = (&self.nodes[a.0].value * &self.nodes[b.0].value).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Dot(a, b))
    }

    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let s = self.nodes[a.0].value[(i, 0)];
        self.push(Array2::from_elem((1, 1), s), Op::Pick(a, i))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    /// Reverse sweep seeding `d target / d target = 1`. Accumulated gradients
    /// for every node reachable from `target` stay readable via [`Graph::grad`].
    pub fn backward(&mut self, target: Var) {
        assert_eq!(
            self.nodes[target.0].value.dim(),
            (1, 1),
            "backward target must be scalar"
        );
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[target.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=target.0).rev() {
            if self.grads[idx].is_none() {
                continue;
            }
            // Parents always precede their node, so the arena splits cleanly
            // into (earlier nodes, current gradient).
            let (lo_nodes, hi_nodes) = self.nodes.split_at(idx);
            let (lo_grads, hi_grads) = self.grads.split_at_mut(idx);
            let g = hi_grads[0].as_ref().expect("checked above");
            let node = &hi_nodes[0];

            let mut acc = |v: Var, delta: Array2<f64>| {
                match &mut lo_grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&lo_nodes[b.0].value.t());
                    let db = lo_nodes[a.0].value.t().dot(g);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddN(vars) => {
                    for v in vars {
                        acc(*v, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g * &lo_nodes[b.0].value);
                    acc(*b, g * &lo_nodes[a.0].value);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Tanh(a) => {
                    let d = g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(*a, d);
                }
                Op::LogSoftmax(a) => {
                    let p = node.value.mapv(f64::exp);
                    let gsum: f64 = g.sum();
                    acc(*a, g - &(p * gsum));
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let pg: f64 = (p * g).sum();
                    acc(*a, p * &(g - pg));
                }
                Op::Row(table, i) => {
                    let mut d = Array2::zeros(lo_nodes[table.0].value.raw_dim());
                    for (j, v) in g.column(0).iter().enumerate() {
                        d[(*i, j)] = *v;
                    }
                    acc(*table, d);
                }
                Op::StackScalars(vars) => {
                    for (t, v) in vars.iter().enumerate() {
                        acc(*v, Array2::from_elem((1, 1), g[(t, 0)]));
                    }
                }
                Op::ColsConcat(vars) => {
                    for (t, v) in vars.iter().enumerate() {
                        let col = g.column(t);
                        let d = Array2::from_shape_fn((col.len(), 1), |(i, _)| col[i]);
                        acc(*v, d);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = lo_nodes[a.0].value.nrows();
                    let da = Array2::from_shape_fn((na, 1), |(i, _)| g[(i, 0)]);
                    let nb = lo_nodes[b.0].value.nrows();
                    let db = Array2::from_shape_fn((nb, 1), |(i, _)| g[(na + i, 0)]);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Dot(a, b) => {
                    let s = g[(0, 0)];
                    acc(*a, &lo_nodes[b.0].value * s);
                    acc(*b, &lo_nodes[a.0].value * s);
                }
                Op::Pick(a, i) => {
                    let mut d = Array2::zeros(lo_nodes[a.0].value.raw_dim());
                    d[(*i, 0)] = g[(0, 0)];
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(lo_nodes[a.0].value.raw_dim(), g[(0, 0)]);
                    acc(*a, d);
                }
            }
        }
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite difference of a scalar-valued graph program with
    /// respect to one leaf, compared against the analytic backward pass.
    fn check_grad<F>(build: F, leaves: Vec<Array2<f64>>)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let h = 1e-6;
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|l| g.leaf(l.clone())).collect();
        let out = build(&mut g, &vars);
        g.backward(out);
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = g.grad(vars[li]);
            let cols = leaf.ncols();
            for idx in 0..leaf.len() {
                let pos = (idx / cols, idx % cols);
                let eval = |delta: f64| {
                    let mut pert = leaves.clone();
                    pert[li][pos] += delta;
                    let mut g2 = Graph::new();
                    let vars2: Vec<Var> = pert.into_iter().map(|l| g2.leaf(l)).collect();
                    let out2 = build(&mut g2, &vars2);
                    g2.value(out2)[(0, 0)]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[pos];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (an - fd).abs() / denom < 1e-5,
                    "leaf {li} coord {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 2, 1);
        check_grad(
            |g, v| {
                let ab = g.matmul(v[0], v[1]);
                let abc = g.matmul(ab, v[2]);
                let t = g.tanh(abc);
                g.sum(t)
            },
            vec![a, b, c],
        );
    }

    #[test]
    fn elementwise_ops_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 4, 1);
        let b = rand_mat(&mut rng, 4, 1);
        check_grad(
            |g, v| {
                let s = g.sigmoid(v[0]);
                let m = g.mul(s, v[1]);
                let d = g.sub(m, v[0]);
                let sc = g.scale(d, 0.7);
                let e = g.add(sc, v[1]);
                g.sum(e)
            },
            vec![a, b],
        );
    }

    #[test]
    fn softmax_and_logsoftmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 5, 1);
        let w = rand_mat(&mut rng, 5, 1);
        check_grad(
            |g, v| {
                let p = g.softmax(v[0]);
                let lp = g.log_softmax(v[0]);
                let d1 = g.dot(p, v[1]);
                let d2 = g.dot(lp, v[1]);
                g.add(d1, d2)
            },
            vec![a, w],
        );
    }

    #[test]
    fn structural_ops_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = rand_mat(&mut rng, 6, 3);
        let q = rand_mat(&mut rng, 3, 1);
        check_grad(
            |g, v| {
                let r0 = g.row(v[0], 1);
                let r1 = g.row(v[0], 4);
                let s0 = g.dot(r0, v[1]);
                let s1 = g.dot(r1, v[1]);
                let scores = g.stack_scalars(&[s0, s1]);
                let w = g.softmax(scores);
                let m = g.cols_concat(&[r0, r1]);
                let pooled = g.matmul(m, w);
                let cat = g.concat_rows(pooled, v[1]);
                let p = g.pick(cat, 2);
                let t = g.sum(cat);
                let both = g.add_n(&[p, t]);
                g.scale(both, 0.5)
            },
            vec![table, q],
        );
    }

    #[test]
    fn logsoftmax_matches_softmax_log() {
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0], [-2.0], [0.5]]);
        let lp = g.log_softmax(a);
        let p = g.softmax(a);
        for i in 0..3 {
            approx::assert_abs_diff_eq!(
                g.value(lp)[(i, 0)],
                g.value(p)[(i, 0)].ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn grad_of_unreachable_node_is_zero() {
        let mut g = Graph::new();
        let a = g.leaf(array![[2.0]]);
        let b = g.leaf(array![[3.0]]);
        let out = g.scale(a, 2.0);
        g.backward(out);
        assert_eq!(g.grad(b), array![[0.0]]);
        assert_eq!(g.grad(a), array![[2.0]]);
    }

    #[test]
    fn grad_accumulates_over_shared_parents() {
        // f = a*a + a => df/da = 2a + 1
        let mut g = Graph::new();
        let a = g.leaf(array![[3.0]]);
        let sq = g.mul(a, a);
        let out = g.add(sq, a);
        g.backward(out);
        approx::assert_abs_diff_eq!(g.grad(a)[(0, 0)], 7.0, epsilon = 1e-12);
    }
}
