//! Reverse-mode differentiation over a tape of 2-D arrays.
//!
//! Every value is a matrix; vectors are `1 x n` rows and scalars `1 x 1`.
//! Leaves may borrow their data, so binding model parameters costs nothing.

use ndarray::{s, Array2, ArrayView2, Axis, CowArray, Ix2, NdFloat};
use num_traits::FromPrimitive;

use crate::error::{Error, Result};

/// Scalar type of the model: `f32` by default, `f64` for gradient checks.
pub trait Float: NdFloat + FromPrimitive + Send + Sync {}
impl<T: NdFloat + FromPrimitive + Send + Sync> Float for T {}

pub(crate) fn cast<F: Float>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// `[n x m] + [1 x m]`, broadcast over rows
    AddRow(Var, Var),
    /// `[n x m] * [n x 1]`, broadcast over columns
    MulCol(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    MaskedSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Dropout {
        x: Var,
        keep: Array2<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<F>,
    },
}

struct Node<'a, F: Float> {
    value: CowArray<'a, F, Ix2>,
    op: Op<F>,
}

pub struct Tape<'a, F: Float> {
    nodes: Vec<Node<'a, F>>,
}

impl<F: Float> Default for Tape<'_, F> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<'a, F: Float> Tape<'a, F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: impl Into<CowArray<'a, F, Ix2>>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A leaf borrowing `data` for the tape's lifetime.
    pub fn leaf_view(&mut self, data: ArrayView2<'a, F>) -> Var {
        self.push(data, Op::Leaf)
    }

    pub fn leaf(&mut self, data: Array2<F>) -> Var {
        self.push(data, Op::Leaf)
    }

    fn check(&self, ok: bool, what: &str, a: Var, b: Var) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).0, "matmul", a, b)?;
        let v = self.value(a).dot(&self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).1, "matmul_nt", a, b)?;
        let v = self.value(a).dot(&self.value(b).t());
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), "add", a, b)?;
        let v = &self.value(a) + &self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        self.check(sr.0 == 1 && sr.1 == sa.1, "add_row", a, row)?;
        let v = &self.value(a) + &self.value(row);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        self.check(sc.1 == 1 && sc.0 == sa.0, "mul_col", a, col)?;
        let v = &self.value(a) * &self.value(col);
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (cast::<F>(GELU_C), cast::<F>(GELU_A), cast::<F>(0.5));
        let v = self
            .value(a)
            .mapv(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned `1 x m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        self.check(self.shape(gain) == (1, m), "layer_norm gain", x, gain)?;
        self.check(self.shape(bias) == (1, m), "layer_norm bias", x, bias)?;
        let eps = cast::<F>(LN_EPS);
        let mf = cast::<F>(m as f64);
        let xv = self.value(x);
        let mut xhat = Array2::<F>::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / mf;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / mf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over each row restricted to the columns where `mask` is true.
    /// Masked entries are exactly zero; a row with no valid column is all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Array2<bool>) -> Result<Var> {
        if mask.dim() != self.shape(x) {
            return Err(Error::Shape(format!(
                "masked_softmax: mask {:?} vs input {:?}",
                mask.dim(),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).to_owned();
        for (mut row, mrow) in out.outer_iter_mut().zip(mask.outer_iter()) {
            let max = row
                .iter()
                .zip(mrow.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                row.fill(F::zero());
                continue;
            }
            let mut sum = F::zero();
            for (v, &m) in row.iter_mut().zip(mrow.iter()) {
                *v = if m { (*v - max).exp() } else { F::zero() };
                sum += *v;
            }
            row.mapv_inplace(|v| v / sum);
        }
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Array2::<F>::zeros((ids.len(), cols));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(i));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, m) = self.shape(x);
        if start + len > m {
            return Err(Error::Shape(format!(
                "slice {start}..{} of {m} columns",
                start + len
            )));
        }
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Multiplies by a precomputed keep mask (already scaled by `1 / (1 - p)`).
    pub fn dropout(&mut self, x: Var, keep: Array2<F>) -> Result<Var> {
        if keep.dim() != self.shape(x) {
            return Err(Error::Shape("dropout mask shape".into()));
        }
        let v = &self.value(x) * &keep;
        Ok(self.push(v, Op::Dropout { x, keep }))
    }

    /// Summed token cross entropy: `-sum_t log softmax(logits_t)[targets_t]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.shape(logits);
        if targets.len() != n || targets.iter().any(|&t| t >= v) {
            return Err(Error::Shape(format!(
                "cross entropy: {} targets for {n} x {v} logits",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        let mut probs = Array2::<F>::zeros((n, v));
        let mut total = F::zero();
        for (r, row) in lv.outer_iter().enumerate() {
            let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row.iter()) {
                *p = (x - max).exp();
                sum += *p;
            }
            probs.row_mut(r).mapv_inplace(|p| p / sum);
            total += sum.ln() + max - row[targets[r]];
        }
        let out = Array2::from_elem((1, 1), total);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of the `1 x 1` node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));

        fn acc<F: Float>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(&self.value(*b));
                    let db = g.t().dot(&self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let dcol = (&g * &av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let da = &g * &self.value(*col);
                    acc(&mut grads, *col, dcol);
                    acc(&mut grads, *a, da);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::Gelu(a) => {
                    let (c, k, half, three) = (
                        cast::<F>(GELU_C),
                        cast::<F>(GELU_A),
                        cast::<F>(0.5),
                        cast::<F>(3.0),
                    );
                    let mut da = self.value(*a).to_owned();
                    da.zip_mut_with(&g, |x, &gy| {
                        let xv = *x;
                        let t = (c * (xv + k * xv * xv * xv)).tanh();
                        let d = half * (F::one() + t)
                            + half * xv * (F::one() - t * t) * c * (F::one() + three * k * xv * xv);
                        *x = gy * d;
                    });
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &self.value(*gain);
                    let m = cast::<F>(xhat.ncols() as f64);
                    let mut dx = Array2::<F>::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let k = inv_std[r] / m;
                        for ((o, &d), &h) in dx.row_mut(r).iter_mut().zip(dh.iter()).zip(xh.iter())
                        {
                            *o = k * (m * d - sum_dh - h * sum_dh_xh);
                        }
                    }
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = Array2::<F>::zeros(y.dim());
                    for ((mut out, yr), gr) in
                        dx.outer_iter_mut().zip(y.outer_iter()).zip(g.outer_iter())
                    {
                        let dot = yr.dot(&gr);
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array2::<F>::zeros(self.shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array2::<F>::zeros(self.shape(*x));
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::Dropout { x, keep } => {
                    acc(&mut grads, *x, &g * keep);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut dl = probs.mapv(|p| p * scale);
                    for (r, &t) in targets.iter().enumerate() {
                        dl[[r, t]] -= scale;
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(leaf) for every element of every input.
    fn check(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let v: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let r = build(&mut t, &v);
            t.value(r)[[0, 0]]
        };
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} [{r},{c}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    /// Reduces any matrix to a scalar with fixed random weights.
    fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> Var {
        let (r, c) = t.shape(x);
        let w = random(&mut ChaCha8Rng::seed_from_u64(seed), c, 1);
        let ones = Array2::from_elem((1, r), 1.0);
        let wv = t.leaf(w);
        let ov = t.leaf(ones);
        let y = t.matmul(x, wv).unwrap();
        t.matmul(ov, y).unwrap()
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)],
            |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 9)
            },
        );
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)],
            |t, v| {
                let y = t.matmul_nt(v[0], v[1]).unwrap();
                weighted_sum(t, y, 9)
            },
        );
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![
                random(&mut rng, 3, 4),
                random(&mut rng, 3, 4),
                random(&mut rng, 1, 4),
                random(&mut rng, 3, 1),
            ],
            |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.add_row(a, v[2]).unwrap();
                let c = t.mul_col(b, v[3]).unwrap();
                let d = t.scale(c, 0.7);
                let e = t.gelu(d);
                weighted_sum(t, e, 3)
            },
        );
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![
                random(&mut rng, 3, 5),
                random(&mut rng, 1, 5),
                random(&mut rng, 1, 5),
            ],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y, 4)
            },
        );
    }

    #[test]
    fn masked_softmax_grad_and_values() {
        let mask = array![
            [true, false, true],
            [false, false, false],
            [true, true, true]
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 3);
        let m2 = mask.clone();
        check(vec![x.clone()], move |t, v| {
            let y = t.masked_softmax(v[0], &m2).unwrap();
            weighted_sum(t, y, 5)
        });
        let mut t = Tape::new();
        let xv = t.leaf(x);
        let y = t.masked_softmax(xv, &mask).unwrap();
        let y = t.value(y);
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(y.row(1).sum(), 0.0);
        assert!((y.row(2).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_slice_concat_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keep = Array2::from_shape_fn((4, 3), |(r, c)| if (r + c) % 3 == 0 { 0.0 } else { 1.5 });
        check(
            vec![random(&mut rng, 5, 3), random(&mut rng, 4, 2)],
            move |t, v| {
                let g = t.gather(v[0], &[4, 1, 1, 0]).unwrap();
                let s = t.slice_cols(g, 1, 2).unwrap();
                let c = t.concat_cols(&[v[1], s, g]).unwrap();
                let c = t.slice_cols(c, 1, 3).unwrap();
                let d = t.dropout(c, keep.clone()).unwrap();
                weighted_sum(t, d, 6)
            },
        );
    }

    #[test]
    fn cross_entropy_grad_and_uniform_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(vec![random(&mut rng, 3, 6)], |t, v| {
            t.cross_entropy_sum(v[0], &[0, 5, 2]).unwrap()
        });

        let mut t = Tape::<f64>::new();
        let l = t.leaf(Array2::zeros((2, 7)));
        let ce = t.cross_entropy_sum(l, &[1, 3]).unwrap();
        assert!((t.value(ce)[[0, 0]] - 2.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(Array2::zeros((2, 3)));
        let b = t.leaf(Array2::zeros((2, 3)));
        assert!(t.matmul(a, b).is_err());
        assert!(t.add_row(a, b).is_err());
        assert!(t.gather(a, &[2]).is_err());
        assert!(t.slice_cols(a, 2, 2).is_err());
        assert!(t.backward(a).is_err());
        assert!(t.cross_entropy_sum(a, &[0]).is_err());
    }
}
