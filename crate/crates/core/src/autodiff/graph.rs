use super::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a 2-D convolution over row-major `[channels, height, width]` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn weight_cols(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SumRows(Var),
    SumAll(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Detach,
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Conv2d(Var, Var, Var, ConvGeom),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Vec<S>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Reverse-mode tape over row-major matrices.
///
/// Every op records its inputs; [`Graph::backward`] walks the tape once in
/// reverse. Building the tape over [`super::Dual`] instead of `f64` turns the
/// same backward pass into a forward-over-reverse second-order sweep.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Adjoint of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v` with zeros substituted for an unreached node.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<S> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); len],
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<S>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Primal values of `v` as `f64`.
    pub fn primal(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.iter().map(|x| x.value()).collect()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].value()
    }

    /// A leaf holding `data` (parameters and inputs alike).
    pub fn leaf(&mut self, data: Vec<S>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf shape mismatch");
        self.push(data, rows, cols, Op::Leaf)
    }

    /// A leaf built from plain `f64` data (zero tangent under duals).
    pub fn constant(&mut self, data: &[f64], rows: usize, cols: usize) -> Var {
        let v = data.iter().map(|&x| S::from_f64(x)).collect();
        self.leaf(v, rows, cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bpj) in row.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        self.push(out, n, m, Op::MatMul(a, b))
    }

    /// `a + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(bias), (1, m), "bias shape mismatch");
        let bv = self.nodes[bias.0].value.clone();
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % m])
            .collect();
        self.push(out, n, m, Op::AddRow(a, bias))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise shape mismatch");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(out, sa.0, sa.1, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[i, j] * col[i]` with `col` of shape `[rows, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "column shape mismatch");
        let cv = &self.nodes[col.0].value;
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv[i / m])
            .collect();
        self.push(out, n, m, Op::MulCol(a, col))
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op) -> Var {
        let (n, m) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(out, n, m, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x.scale(c), Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        self.map(a, |x| x + cs, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x.value() > 0.0 { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Ln(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(
            a,
            |x| {
                if x.value() < lo {
                    S::from_f64(lo)
                } else if x.value() > hi {
                    S::from_f64(hi)
                } else {
                    x
                }
            },
            Op::Clamp(a, lo, hi),
        )
    }

    /// Row sums, `[n, m] -> [n, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let out = (0..n)
            .map(|i| {
                let mut s = S::zero();
                for &x in &av[i * m..(i + 1) * m] {
                    s += x;
                }
                s
            })
            .collect();
        self.push(out, n, 1, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = S::zero();
        for &x in &self.nodes[a.0].value {
            s += x;
        }
        self.push(vec![s], 1, 1, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mx = row
                .iter()
                .map(|x| x.value())
                .fold(f64::NEG_INFINITY, f64::max);
            let mxs = S::from_f64(mx);
            let mut z = S::zero();
            for &x in row {
                z += (x - mxs).exp();
            }
            let lz = z.ln() + mxs;
            out.extend(row.iter().map(|&x| x - lz));
        }
        self.push(out, n, m, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mx = row
                .iter()
                .map(|x| x.value())
                .fold(f64::NEG_INFINITY, f64::max);
            let mxs = S::from_f64(mx);
            let e: Vec<S> = row.iter().map(|&x| (x - mxs).exp()).collect();
            let mut z = S::zero();
            for &x in &e {
                z += x;
            }
            out.extend(e.into_iter().map(|x| x / z));
        }
        self.push(out, n, m, Op::Softmax(a))
    }

    /// Identity in the forward pass, blocks the gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let v = self.nodes[a.0].value.clone();
        self.push(v, n, m, Op::Detach)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, m, "concat column mismatch");
            out.extend_from_slice(&self.nodes[p.0].value);
            n += r;
        }
        self.push(out, n, m, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, m) = self.shape(a);
        assert!(start <= end && end <= n, "row slice out of range");
        let v = self.nodes[a.0].value[start * m..end * m].to_vec();
        self.push(v, end - start, m, Op::SliceRows(a, start))
    }

    /// 2-D convolution. `x` is `[batch, C*H*W]`, `w` is
    /// `[out_c, in_c*k*k]` and `b` is `[1, out_c]`; the output is
    /// `[batch, out_c*Ho*Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (batch, len) = self.shape(x);
        assert_eq!(len, geom.in_len(), "conv input length mismatch");
        assert_eq!(self.shape(w), (geom.out_channels, geom.weight_cols()));
        assert_eq!(self.shape(b), (1, geom.out_channels));
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![S::zero(); batch * geom.out_len()];
        for s in 0..batch {
            let xs = &xv[s * len..(s + 1) * len];
            let os = &mut out[s * geom.out_len()..(s + 1) * geom.out_len()];
            conv_visit(&geom, ho, wo, |oc, oy, ox, xi, wi| {
                os[(oc * ho + oy) * wo + ox] += wv[oc * geom.weight_cols() + wi] * xs[xi];
            });
            for oc in 0..geom.out_channels {
                for o in &mut os[oc * ho * wo..(oc + 1) * ho * wo] {
                    *o += bv[oc];
                }
            }
        }
        self.push(out, batch, geom.out_len(), Op::Conv2d(x, w, b, geom))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let (n, m) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut ga = vec![S::zero(); n * k];
                let mut gb = vec![S::zero(); k * m];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bv[p * m..(p + 1) * m];
                        let mut s = S::zero();
                        for (&gij, &bpj) in grow.iter().zip(brow) {
                            s += gij * bpj;
                        }
                        ga[i * k + p] += s;
                        let aip = av[i * k + p];
                        for (o, &gij) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *o += aip * gij;
                        }
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, bias) => {
                let mut gb = vec![S::zero(); m];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % m] += gi;
                }
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *bias, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                accumulate(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                accumulate(grads, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::MulCol(a, col) => {
                let av = &self.nodes[a.0].value;
                let cv = &self.nodes[col.0].value;
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * cv[i / m])
                    .collect();
                let mut gc = vec![S::zero(); n];
                for (i, (&gi, &ai)) in g.iter().zip(av).enumerate() {
                    gc[i / m] += gi * ai;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.iter().map(|&x| x.scale(*c)).collect());
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&gi, &x)| if x.value() > 0.0 { gi } else { S::zero() })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * (S::one() - yi * yi))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = &node.value;
                accumulate(grads, *a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
            }
            Op::Ln(a) => {
                let av = &self.nodes[a.0].value;
                accumulate(grads, *a, g.iter().zip(av).map(|(&gi, &x)| gi / x).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[a.0].value;
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&gi, &x)| {
                        let v = x.value();
                        if v < *lo || v > *hi {
                            S::zero()
                        } else {
                            gi
                        }
                    })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let (_, am) = self.shape(*a);
                let ga = (0..n * am).map(|i| g[i / am]).collect();
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let len = self.nodes[a.0].value.len();
                accumulate(grads, *a, vec![g[0]; len]);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = Vec::with_capacity(n * m);
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    let mut gs = S::zero();
                    for &x in gr {
                        gs += x;
                    }
                    for j in 0..m {
                        ga.push(gr[j] - y[i * m + j].exp() * gs);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Vec::with_capacity(n * m);
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    let yr = &y[i * m..(i + 1) * m];
                    let mut dot = S::zero();
                    for (&gj, &yj) in gr.iter().zip(yr) {
                        dot += gj * yj;
                    }
                    for j in 0..m {
                        ga.push(yr[j] * (gr[j] - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    accumulate(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let (an, am) = self.shape(*a);
                let mut ga = vec![S::zero(); an * am];
                ga[start * am..start * am + g.len()].copy_from_slice(g);
                accumulate(grads, *a, ga);
            }
            Op::Conv2d(x, w, b, geom) => {
                let (batch, len) = self.shape(*x);
                let (ho, wo) = (geom.out_height(), geom.out_width());
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let wc = geom.weight_cols();
                let mut gx = vec![S::zero(); batch * len];
                let mut gw = vec![S::zero(); geom.out_channels * wc];
                let mut gb = vec![S::zero(); geom.out_channels];
                for s in 0..batch {
                    let xs = &xv[s * len..(s + 1) * len];
                    let gs = &g[s * geom.out_len()..(s + 1) * geom.out_len()];
                    let gxs = &mut gx[s * len..(s + 1) * len];
                    conv_visit(geom, ho, wo, |oc, oy, ox, xi, wi| {
                        let go = gs[(oc * ho + oy) * wo + ox];
                        gxs[xi] += go * wv[oc * wc + wi];
                        gw[oc * wc + wi] += go * xs[xi];
                    });
                    for oc in 0..geom.out_channels {
                        for &go in &gs[oc * ho * wo..(oc + 1) * ho * wo] {
                            gb[oc] += go;
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
        }
    }
}

/// Calls `f(out_channel, out_y, out_x, input_index, weight_col)` for every
/// multiply of the convolution, skipping padding taps.
fn conv_visit(
    geom: &ConvGeom,
    ho: usize,
    wo: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let k = geom.kernel;
    for oc in 0..geom.out_channels {
        for oy in 0..ho {
            for ox in 0..wo {
                for ic in 0..geom.in_channels {
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let xi = (ic * geom.height + iy as usize) * geom.width + ix as usize;
                            let wi = (ic * k + ky) * k + kx;
                            f(oc, oy, ox, xi, wi);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
