//! A small reverse-mode tape over row-major matrices, with the graph operators the
//! network needs (FEM patch aggregation, pooling and unpooling) as primitive ops.

use crate::fem::PatchStencil;
use crate::mesh::MeshHierarchy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position in the tape, which indexes the gradients returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'g> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Silu(Var),
    Scale(Var, f64),
    Film(Var, Var),
    Broadcast(Var),
    Concat(Var, Var),
    Aggregate(Var, &'g PatchStencil),
    GateContract(Var, Var),
    Pool(Var, &'g MeshHierarchy, usize),
    Unpool(Var, &'g MeshHierarchy, usize),
    MeanSquaredError(Var, Vec<f64>),
}

struct Node<'g> {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op<'g>,
}

#[derive(Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T (k x n)^T * g (n x m)` accumulated into `out (k x m)`.
fn matmul_tn_acc(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `g (n x m) * b^T (m x k)` accumulated into `out (n x k)`.
fn matmul_nt_acc(g: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op<'g>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let v = matmul(self.value(a), self.value(b), n, k, m);
        self.push(n, m, v, Op::MatMul(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "bias shape mismatch");
        let r = self.value(row).to_vec();
        let mut v = self.value(a).to_vec();
        for chunk in v.chunks_mut(m.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(n, m, v, Op::AddRow(a, row))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (n, m) = self.shape(a);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(n, m, v, Op::Add(a, b))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let v = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.push(n, m, v, Op::Silu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (n, m) = self.shape(a);
        let v = self.value(a).iter().map(|&x| s * x).collect();
        self.push(n, m, v, Op::Scale(a, s))
    }

    /// `h * (1 + alpha) + beta` where `ab = [alpha, beta]` is a `1 x 2c` row.
    pub fn film(&mut self, h: Var, ab: Var) -> Var {
        let (n, c) = self.shape(h);
        assert_eq!(self.shape(ab), (1, 2 * c), "FiLM parameter shape mismatch");
        let ab_v = self.value(ab).to_vec();
        let mut v = self.value(h).to_vec();
        for row in v.chunks_mut(c.max(1)) {
            for k in 0..c {
                row[k] = row[k] * (1.0 + ab_v[k]) + ab_v[c + k];
            }
        }
        self.push(n, c, v, Op::Film(h, ab))
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn broadcast(&mut self, row: Var, n: usize) -> Var {
        let (r, m) = self.shape(row);
        assert_eq!(r, 1, "broadcast expects a row");
        let v = self.value(row).repeat(n);
        self.push(n, m, v, Op::Broadcast(row))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ma) = self.shape(a);
        let (n2, mb) = self.shape(b);
        assert_eq!(n, n2, "concat row counts differ");
        let mut v = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            v.extend_from_slice(&self.value(a)[i * ma..(i + 1) * ma]);
            v.extend_from_slice(&self.value(b)[i * mb..(i + 1) * mb]);
        }
        self.push(n, ma + mb, v, Op::Concat(a, b))
    }

    /// Patch aggregation, `n x c` to `n x (P^2 c)`.
    pub fn aggregate(&mut self, x: Var, stencil: &'g PatchStencil) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(n, stencil.nodes(), "stencil node count differs");
        let v = stencil.apply(self.value(x), c);
        self.push(n, stencil.patch_size() * c, v, Op::Aggregate(x, stencil))
    }

    /// Per-channel gate: `out[i, c] = sum_p wg[p, c] g[i, p c + c]` with `wg` of shape `P^2 x c`.
    pub fn gate_contract(&mut self, g: Var, wg: Var) -> Var {
        let (n, pc) = self.shape(g);
        let (p2, c) = self.shape(wg);
        assert_eq!(p2 * c, pc, "gate shape mismatch");
        let (gv, wv) = (self.value(g), self.value(wg));
        let mut v = vec![0.0; n * c];
        for i in 0..n {
            let gi = &gv[i * pc..(i + 1) * pc];
            let out = &mut v[i * c..(i + 1) * c];
            for p in 0..p2 {
                for k in 0..c {
                    out[k] += wv[p * c + k] * gi[p * c + k];
                }
            }
        }
        self.push(n, c, v, Op::GateContract(g, wg))
    }

    /// Mean over each coarse node's pre-image, level `l` to `l + 1`.
    pub fn pool(&mut self, x: Var, h: &'g MeshHierarchy, l: usize) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(n, h.levels[l].node_count(), "pool input size differs");
        let v = h.pool_mean(l, self.value(x), c);
        self.push(h.levels[l + 1].node_count(), c, v, Op::Pool(x, h, l))
    }

    /// Copies level `l + 1` values onto their level `l` pre-images.
    pub fn unpool(&mut self, x: Var, h: &'g MeshHierarchy, l: usize) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(n, h.levels[l + 1].node_count(), "unpool input size differs");
        let v = h.unpool(l, self.value(x), c);
        self.push(h.levels[l].node_count(), c, v, Op::Unpool(x, h, l))
    }

    /// Mean of squared differences to a constant target, as a `1 x 1` node.
    pub fn mse(&mut self, x: Var, target: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), target.len(), "target size differs");
        let n = target.len().max(1) as f64;
        let v = self.value(x).iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        self.push(1, 1, vec![v], Op::MeanSquaredError(x, target))
    }

    /// Backpropagates `seed` from `out`; returns per-node gradients (empty where unreached).
    pub fn backward(&self, out: Var, seed: Vec<f64>) -> Vec<Vec<f64>> {
        assert_eq!(seed.len(), self.value(out).len(), "seed shape mismatch");
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); out.0 + 1];
        grads[out.0] = seed;
        fn acc(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
            let g = &mut grads[v.0];
            if g.is_empty() {
                *g = vec![0.0; len];
            }
            g
        }
        for idx in (0..=out.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            let (n, m) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    matmul_nt_acc(&g, bv, n, k, m, acc(&mut grads, *a, n * k));
                    matmul_tn_acc(av, &g, n, k, m, acc(&mut grads, *b, k * m));
                }
                Op::AddRow(a, row) => {
                    let ga = acc(&mut grads, *a, n * m);
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                    let gr = acc(&mut grads, *row, m);
                    for chunk in g.chunks(m.max(1)) {
                        for (x, y) in gr.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let gv = acc(&mut grads, *v, n * m);
                        for (x, y) in gv.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::Silu(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, n * m);
                    for ((x, &gv), &z) in ga.iter_mut().zip(&g).zip(av) {
                        let s = sigmoid(z);
                        *x += gv * s * (1.0 + z * (1.0 - s));
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, n * m);
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += s * y;
                    }
                }
                Op::Film(h, ab) => {
                    let c = m;
                    let abv = &self.nodes[ab.0].value;
                    let hv = &self.nodes[h.0].value;
                    let mut gab = vec![0.0; 2 * c];
                    {
                        let gh = acc(&mut grads, *h, n * c);
                        for i in 0..n {
                            for k in 0..c {
                                let gk = g[i * c + k];
                                gh[i * c + k] += gk * (1.0 + abv[k]);
                                gab[k] += gk * hv[i * c + k];
                                gab[c + k] += gk;
                            }
                        }
                    }
                    let ga = acc(&mut grads, *ab, 2 * c);
                    for (x, y) in ga.iter_mut().zip(gab) {
                        *x += y;
                    }
                }
                Op::Broadcast(row) => {
                    let gr = acc(&mut grads, *row, m);
                    for chunk in g.chunks(m.max(1)) {
                        for (x, y) in gr.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let ma = self.nodes[a.0].cols;
                    let mb = m - ma;
                    {
                        let ga = acc(&mut grads, *a, n * ma);
                        for i in 0..n {
                            for k in 0..ma {
                                ga[i * ma + k] += g[i * m + k];
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, n * mb);
                    for i in 0..n {
                        for k in 0..mb {
                            gb[i * mb + k] += g[i * m + ma + k];
                        }
                    }
                }
                Op::Aggregate(x, st) => {
                    let c = self.nodes[x.0].cols;
                    let back = st.apply_transpose(&g, c);
                    let gx = acc(&mut grads, *x, n * c);
                    for (a, b) in gx.iter_mut().zip(back) {
                        *a += b;
                    }
                }
                Op::GateContract(gvar, wg) => {
                    let c = m;
                    let p2 = self.nodes[wg.0].rows;
                    let pc = p2 * c;
                    let gval = &self.nodes[gvar.0].value;
                    let wval = &self.nodes[wg.0].value;
                    let mut gw = vec![0.0; pc];
                    {
                        let gg = acc(&mut grads, *gvar, n * pc);
                        for i in 0..n {
                            for p in 0..p2 {
                                for k in 0..c {
                                    let up = g[i * c + k];
                                    gg[i * pc + p * c + k] += wval[p * c + k] * up;
                                    gw[p * c + k] += gval[i * pc + p * c + k] * up;
                                }
                            }
                        }
                    }
                    let gwv = acc(&mut grads, *wg, pc);
                    for (a, b) in gwv.iter_mut().zip(gw) {
                        *a += b;
                    }
                }
                Op::Pool(x, h, l) => {
                    // adjoint of the pre-image mean: spread g / |pre-image|
                    let c = m;
                    let nf = self.nodes[x.0].rows;
                    let gx = acc(&mut grads, *x, nf * c);
                    for (coarse, members) in h.unpool_maps[*l].iter().enumerate() {
                        let w = 1.0 / members.len() as f64;
                        for &i in members {
                            for k in 0..c {
                                gx[i * c + k] += w * g[coarse * c + k];
                            }
                        }
                    }
                }
                Op::Unpool(x, h, l) => {
                    let c = m;
                    let nc = self.nodes[x.0].rows;
                    let gx = acc(&mut grads, *x, nc * c);
                    for (i, &coarse) in h.pool_maps[*l].iter().enumerate() {
                        for k in 0..c {
                            gx[coarse * c + k] += g[i * c + k];
                        }
                    }
                }
                Op::MeanSquaredError(x, target) => {
                    let xv = &self.nodes[x.0].value;
                    let len = target.len();
                    let s = 2.0 * g[0] / len.max(1) as f64;
                    let gx = acc(&mut grads, *x, len);
                    for ((a, &v), &t) in gx.iter_mut().zip(xv).zip(target) {
                        *a += s * (v - t);
                    }
                }
            }
            grads[idx] = g;
        }
        grads
    }
}
