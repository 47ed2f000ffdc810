use super::mlp::{clip_probability, PROB_EPS};
use super::{ParamId, ParameterStore, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sum-pooled embedding lookups for a batch, in CSR layout.
///
/// Record `r`, field `f` pools the table rows
/// `rows[offsets[r * fields + f]..offsets[r * fields + f + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLookup {
    pub records: usize,
    pub fields: usize,
    pub offsets: Vec<usize>,
    pub rows: Vec<usize>,
}

impl EmbeddingLookup {
    pub fn new(records: usize, fields: usize) -> Self {
        let mut offsets = Vec::with_capacity(records * fields + 1);
        offsets.push(0);
        EmbeddingLookup { records, fields, offsets, rows: Vec::new() }
    }

    /// Appends one (record, field) cell; cells must be pushed in row-major order.
    pub fn push_cell(&mut self, rows: impl IntoIterator<Item = usize>) {
        self.rows.extend(rows);
        self.offsets.push(self.rows.len());
    }

    fn cell(&self, record: usize, field: usize) -> &[usize] {
        let k = record * self.fields + field;
        &self.rows[self.offsets[k]..self.offsets[k + 1]]
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Embed { table: ParamId, dim: usize, lookup: EmbeddingLookup },
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    ClampMin(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Bce { pred: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(ctx, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Copies the parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Sum-pooled lookups into a parameter table of shape `[rows, dim]`,
    /// concatenated across fields: output `[records, fields * dim]`.
    pub fn embed(&mut self, store: &ParameterStore, table: ParamId, lookup: EmbeddingLookup) -> Result<Var> {
        let t = store.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim("embedding", format!("table must be 2-D, got {:?}", t.shape())));
        }
        let (n_rows, dim) = (t.shape()[0], t.shape()[1]);
        if lookup.offsets.len() != lookup.records * lookup.fields + 1 {
            return Err(Error::dim("embedding", "lookup cell count does not match records × fields"));
        }
        if let Some(&bad) = lookup.rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::dim("embedding", format!("row {bad} outside table of {n_rows} rows")));
        }
        if lookup.records == 0 {
            return Err(Error::dim("embedding", "empty batch"));
        }
        let width = lookup.fields * dim;
        let mut out = vec![0.0; lookup.records * width];
        let table_data = t.data();
        for r in 0..lookup.records {
            for f in 0..lookup.fields {
                let dst = &mut out[r * width + f * dim..r * width + (f + 1) * dim];
                for &row in lookup.cell(r, f) {
                    for (o, v) in dst.iter_mut().zip(&table_data[row * dim..(row + 1) * dim]) {
                        *o += v;
                    }
                }
            }
        }
        let value = Tensor::matrix(lookup.records, width, out)?;
        Ok(self.push(value, Op::Embed { table, dim, lookup }))
    }

    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("affine", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.value(b).len() != m {
                return Err(Error::dim("affine", format!("bias {:?} vs {m} outputs", self.value(b).shape())));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            if let Some(b) = b {
                row.copy_from_slice(self.nodes[b.0].value.data());
            }
            for (p, &xv) in xd[i * k..(i + 1) * k].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in row.iter_mut().zip(&wd[p * m..(p + 1) * m]) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.push(value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.map(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let src = self.value(x);
        if src.len() != c.len() {
            return Err(Error::dim("mul_const", format!("{} values vs {} constants", src.len(), c.len())));
        }
        let data = src.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(x, c)))
    }

    /// Selects rows of a 2-D node (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        let (n, c) = (src.rows(), src.cols());
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(&src.data()[r * c..(r + 1) * c]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::GatherRows { x, rows }))
    }

    fn zip(&mut self, ctx: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(ctx, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).squared_norm();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Elementwise cross-entropy `−y ln p − (1−y) ln(1−p)` with `p` clipped to
    /// `[PROB_EPS, 1 − PROB_EPS]`; labels may be soft.
    pub fn bce(&mut self, pred: Var, labels: Vec<f64>) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != labels.len() {
            return Err(Error::dim("bce", format!("{} predictions vs {} labels", p.len(), labels.len())));
        }
        let data = p
            .data()
            .iter()
            .zip(&labels)
            .map(|(&q, &y)| {
                let q = clip_probability(q);
                -y * q.ln() - (1.0 - y) * (1.0 - q).ln()
            })
            .collect();
        let value = Tensor::new(p.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Bce { pred, labels }))
    }

    /// Reverse sweep from a scalar node; gradients are added to `store`.
    ///
    /// Every parameter that appears on the tape is marked touched, even when
    /// its gradient is exactly zero.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                store.mark_touched(id);
            }
            if let Op::Embed { table, .. } = node.op {
                store.mark_touched(table);
            }
            let Some(g) = grads[idx].take() else { continue };
            let len_of = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    store.accumulate(*id, &t);
                }
                Op::Embed { table, dim, lookup } => {
                    let width = lookup.fields * dim;
                    let mut cells: Vec<(usize, &[f64])> = Vec::with_capacity(lookup.rows.len());
                    for r in 0..lookup.records {
                        for f in 0..lookup.fields {
                            let gslice = &g[r * width + f * dim..r * width + (f + 1) * dim];
                            for &row in lookup.cell(r, f) {
                                cells.push((row, gslice));
                            }
                        }
                    }
                    store.accumulate_rows(*table, *dim, &cells);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k) = (xv.rows(), xv.cols());
                    let m = wv.shape()[1];
                    {
                        let gx = acc(&mut grads, *x, n * k);
                        let wd = wv.data();
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for (p, slot) in gx[i * k..(i + 1) * k].iter_mut().enumerate() {
                                let wrow = &wd[p * m..(p + 1) * m];
                                *slot += gi.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    {
                        let gw = acc(&mut grads, *w, k * m);
                        let xd = xv.data();
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for (p, &xval) in xd[i * k..(i + 1) * k].iter().enumerate() {
                                if xval == 0.0 {
                                    continue;
                                }
                                for (slot, gv) in gw[p * m..(p + 1) * m].iter_mut().zip(gi) {
                                    *slot += xval * gv;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = acc(&mut grads, *b, m);
                        for i in 0..n {
                            for (slot, gv) in gb.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                                *slot += gv;
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xd = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xd.len());
                    for ((slot, gv), &xv) in gx.iter_mut().zip(&g).zip(xd) {
                        if xv > 0.0 {
                            *slot += gv;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = acc(&mut grads, *x, y.len());
                    for ((slot, gv), &yv) in gx.iter_mut().zip(&g).zip(y) {
                        *slot += gv * yv * (1.0 - yv);
                    }
                }
                Op::Softplus(x) => {
                    let xd = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xd.len());
                    for ((slot, gv), &xv) in gx.iter_mut().zip(&g).zip(xd) {
                        *slot += gv * sigmoid(xv);
                    }
                }
                Op::GatherRows { x, rows } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let gx = acc(&mut grads, *x, xv.len());
                    for (i, &r) in rows.iter().enumerate() {
                        for (slot, gv) in gx[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *slot += gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let gv = acc(&mut grads, v, g.len());
                        gv.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                    }
                }
                Op::Sub(a, b) => {
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                    let gb = acc(&mut grads, *b, g.len());
                    gb.iter_mut().zip(&g).for_each(|(s, d)| *s -= d);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for ((s, d), y) in ga.iter_mut().zip(&g).zip(bd) {
                        *s += d * y;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((s, d), x) in gb.iter_mut().zip(&g).zip(ad) {
                        *s += d * x;
                    }
                }
                Op::Div(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for ((s, d), y) in ga.iter_mut().zip(&g).zip(bd) {
                        *s += d / y;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for (((s, d), x), y) in gb.iter_mut().zip(&g).zip(ad).zip(bd) {
                        *s -= d * x / (y * y);
                    }
                }
                Op::Scale(x, c) => {
                    let gx = acc(&mut grads, *x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(s, d)| *s += d * c);
                }
                Op::MulConst(x, c) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((s, d), k) in gx.iter_mut().zip(&g).zip(c) {
                        *s += d * k;
                    }
                }
                Op::ClampMin(x, lo) => {
                    let xd = self.value(*x).data();
                    let gx = acc(&mut grads, *x, g.len());
                    for ((s, d), &xv) in gx.iter_mut().zip(&g).zip(xd) {
                        if xv > *lo {
                            *s += d;
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = len_of(*x);
                    let gx = acc(&mut grads, *x, n);
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
                Op::SumSquares(x) => {
                    let xd = self.value(*x).data();
                    let gx = acc(&mut grads, *x, xd.len());
                    for (s, &xv) in gx.iter_mut().zip(xd) {
                        *s += 2.0 * xv * g[0];
                    }
                }
                Op::Bce { pred, labels } => {
                    let pd = self.value(*pred).data();
                    let gp = acc(&mut grads, *pred, pd.len());
                    for (((s, d), &p), &y) in gp.iter_mut().zip(&g).zip(pd).zip(labels) {
                        if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            *s += d * (-y / p + (1.0 - y) / (1.0 - p));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParameterStore, Vec<ParamId>) {
        let mut s = ParameterStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone()).unwrap()).collect();
        (s, ids)
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let (mut s, _) = store_with(&[]);
        let v = tape.constant(Tensor::column(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v, &mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let (mut s, ids) = store_with(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let a = tape.param(&s, ids[0]);
        let _b = tape.param(&s, ids[1]);
        let loss = tape.sum_squares(a);
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[4.0]);
        assert_eq!(s.grad(ids[1]).data(), &[0.0]);
    }

    #[test]
    fn logistic_bce_gradient_closed_form() {
        // d/dw BCE(1, σ(w·x)) = (σ(w·x) − 1)·x
        let w = vec![0.3, -0.7, 1.1];
        let x = vec![0.5, 2.0, -1.5];
        let (mut s, ids) = store_with(&[("w", Tensor::matrix(3, 1, w.clone()).unwrap())]);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, 3, x.clone()).unwrap());
        let wv = tape.param(&s, ids[0]);
        let z = tape.affine(xv, wv, None).unwrap();
        let p = tape.sigmoid(z);
        let e = tape.bce(p, vec![1.0]).unwrap();
        let loss = tape.sum(e);
        tape.backward(loss, &mut s).unwrap();
        let zval: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        let sig = 1.0 / (1.0 + (-zval).exp());
        for (g, xi) in s.grad(ids[0]).data().iter().zip(&x) {
            assert!((g - (sig - 1.0) * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rows_sum_and_scatter() {
        let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0]).unwrap();
        let (mut s, ids) = store_with(&[("emb", table)]);
        let mut lookup = EmbeddingLookup::new(1, 2);
        lookup.push_cell([0, 1]);
        lookup.push_cell([2]);
        let mut tape = Tape::new();
        let e = tape.embed(&s, ids[0], lookup).unwrap();
        assert_eq!(tape.value(e).data(), &[11.0, 22.0, 100.0, 200.0]);
        let w = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.mul(e, w).unwrap();
        let loss = tape.sum(m);
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }
}
