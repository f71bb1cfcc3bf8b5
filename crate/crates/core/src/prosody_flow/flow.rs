//! Conditional Glow-style flow acting independently on each word's row.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{broadcast_rows, Bound, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Largest `|ln|s||` on a mixing diagonal before the matrix counts as
/// numerically singular.
const MAX_LOG_DIAG: f64 = 30.0;

/// Per-channel affine normalisation, unit-initialised.
#[derive(Clone, Copy, Debug)]
pub struct ActNorm {
    pub log_scale: ParamId,
    pub bias: ParamId,
}

impl ActNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            log_scale: store.add(format!("{name}.logs"), Array2::zeros((1, channels))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, channels))),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> (Var, Var) {
        let rows = g.shape(x).0;
        let s = g.exp(p[self.log_scale]);
        let y = g.mul_row(x, s);
        let y = g.add_row(y, p[self.bias]);
        let ld = g.sum(p[self.log_scale]);
        (y, g.scale(ld, T::c(rows as f64)))
    }

    fn inverse<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Var {
        let nb = g.neg(p[self.bias]);
        let x = g.add_row(y, nb);
        let nl = g.neg(p[self.log_scale]);
        let s = g.exp(nl);
        g.mul_row(x, s)
    }
}

/// Invertible `C × C` channel mixing `W = P·L·U` with a fixed permutation
/// `P`, unit lower-triangular `L` and upper-triangular `U` whose diagonal is
/// `sign·exp(log_diag)`. Rows are mapped as `y = x·Wᵀ`.
#[derive(Clone, Debug)]
pub struct Mixing {
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_diag: ParamId,
}

impl Mixing {
    /// `W = P` at initialisation; `perm[j]` is the input channel routed to
    /// output `j`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, perm: Vec<usize>) -> Self {
        let c = perm.len();
        Self {
            sign: vec![1.0; c],
            lower: store.add(format!("{name}.lower"), Array2::zeros((c, c))),
            upper: store.add(format!("{name}.upper"), Array2::zeros((c, c))),
            log_diag: store.add(format!("{name}.logdiag"), Array2::zeros((1, c))),
            perm,
        }
    }

    pub fn reverse<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self::new(store, name, (0..channels).rev().collect())
    }

    fn channels(&self) -> usize {
        self.perm.len()
    }

    fn perm_matrix<T: Scalar>(&self) -> Mat<T> {
        let c = self.channels();
        Array2::from_shape_fn((c, c), |(j, i)| if self.perm[j] == i { T::one() } else { T::zero() })
    }

    fn check<T: Scalar>(&self, p: &Bound, g: &Graph<T>) -> Result<()> {
        let ld = g.value(p[self.log_diag]);
        if ld.iter().any(|v| !v.f64().is_finite() || v.f64().abs() > MAX_LOG_DIAG) {
            return Err(Error::Argument("channel mixing matrix is numerically singular".into()));
        }
        Ok(())
    }

    /// `W` as a graph node.
    fn matrix<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        let c = self.channels();
        let strict_lower = g.constant(Array2::from_shape_fn((c, c), |(i, j)| T::c((i > j) as u8 as f64)));
        let strict_upper = g.constant(Array2::from_shape_fn((c, c), |(i, j)| T::c((i < j) as u8 as f64)));
        let eye = g.constant(Array2::eye(c));
        let sign = g.constant(Array2::from_shape_fn((1, c), |(_, j)| T::c(self.sign[j])));
        let l = g.mul(p[self.lower], strict_lower);
        let l = g.add(l, eye);
        let d = g.exp(p[self.log_diag]);
        let d = g.mul(d, sign);
        let d = broadcast_rows(g, d, c);
        let d = g.mul(d, eye);
        let u = g.mul(p[self.upper], strict_upper);
        let u = g.add(u, d);
        let pm = g.constant(self.perm_matrix());
        let pl = g.matmul(pm, l);
        g.matmul(pl, u)
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check(p, g)?;
        let rows = g.shape(x).0;
        let w = self.matrix(g, p);
        let wt = g.transpose(w);
        let y = g.matmul(x, wt);
        let ld = g.sum(p[self.log_diag]);
        Ok((y, g.scale(ld, T::c(rows as f64))))
    }

    /// `W⁻¹ = U⁻¹·L⁻¹·Pᵀ`, from current values.
    fn inverse_matrix<T: Scalar>(&self, g: &Graph<T>, p: &Bound) -> Mat<f64> {
        let c = self.channels();
        let lv = g.value(p[self.lower]);
        let uv = g.value(p[self.upper]);
        let dv = g.value(p[self.log_diag]);
        let l = Array2::from_shape_fn((c, c), |(i, j)| match i.cmp(&j) {
            std::cmp::Ordering::Greater => lv[[i, j]].f64(),
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        });
        let u = Array2::from_shape_fn((c, c), |(i, j)| match i.cmp(&j) {
            std::cmp::Ordering::Less => uv[[i, j]].f64(),
            std::cmp::Ordering::Equal => self.sign[i] * dv[[0, i]].f64().exp(),
            std::cmp::Ordering::Greater => 0.0,
        });
        let l_inv = lower_unit_inverse(&l);
        let u_inv = upper_inverse(&u);
        let pt = self.perm_matrix::<f64>().t().to_owned();
        u_inv.dot(&l_inv).dot(&pt)
    }

    fn inverse<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        self.check(p, g)?;
        let inv_t = self.inverse_matrix(g, p).t().mapv(T::c);
        let m = g.constant(inv_t);
        Ok(g.matmul(y, m))
    }
}

fn lower_unit_inverse(l: &Mat<f64>) -> Mat<f64> {
    let c = l.nrows();
    let mut x = Array2::<f64>::eye(c);
    for col in 0..c {
        for i in 0..c {
            let s: f64 = (0..i).map(|k| l[[i, k]] * x[[k, col]]).sum();
            x[[i, col]] = if i == col { 1.0 } else { 0.0 } - s;
        }
    }
    x
}

fn upper_inverse(u: &Mat<f64>) -> Mat<f64> {
    let c = u.nrows();
    let mut x = Array2::<f64>::zeros((c, c));
    for col in 0..c {
        for i in (0..c).rev() {
            let s: f64 = (i + 1..c).map(|k| u[[i, k]] * x[[k, col]]).sum();
            x[[i, col]] = ((if i == col { 1.0 } else { 0.0 }) - s) / u[[i, i]];
        }
    }
    x
}

/// Affine coupling: the first `split` channels and the word condition give
/// a log-scale and shift for the rest. The last layer starts at zero.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub split: usize,
    channels: usize,
    h1: Linear,
    h2: Linear,
    out: Linear,
}

impl Coupling {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        cond_dim: usize,
        hidden: usize,
    ) -> Self {
        let split = channels / 2;
        let rest = channels - split;
        Self {
            split,
            channels,
            h1: Linear::new(store, rng, &format!("{name}.h1"), split + cond_dim, hidden),
            h2: Linear::new(store, rng, &format!("{name}.h2"), hidden, hidden),
            out: Linear::zeros(store, &format!("{name}.out"), hidden, 2 * rest),
        }
    }

    pub fn out_layer(&self) -> Linear {
        self.out
    }

    fn scale_shift<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, a: Var, cond: Var) -> (Var, Var) {
        let rest = self.channels - self.split;
        let x = g.concat_cols(&[a, cond]);
        let h = self.h1.forward(g, p, x);
        let h = g.tanh(h);
        let h = self.h2.forward(g, p, h);
        let h = g.tanh(h);
        let o = self.out.forward(g, p, h);
        let raw = g.slice_cols(o, 0, rest);
        let half = g.scale(raw, T::c(0.5));
        let t = g.tanh(half);
        let log_s = g.scale(t, T::c(2.0));
        (log_s, g.slice_cols(o, rest, rest))
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, cond: Var) -> (Var, Var) {
        let rest = self.channels - self.split;
        let a = g.slice_cols(x, 0, self.split);
        let b = g.slice_cols(x, self.split, rest);
        let (log_s, t) = self.scale_shift(g, p, a, cond);
        let s = g.exp(log_s);
        let b = g.mul(b, s);
        let b = g.add(b, t);
        (g.concat_cols(&[a, b]), g.sum(log_s))
    }

    fn inverse<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, y: Var, cond: Var) -> Var {
        let rest = self.channels - self.split;
        let a = g.slice_cols(y, 0, self.split);
        let b = g.slice_cols(y, self.split, rest);
        let (log_s, t) = self.scale_shift(g, p, a, cond);
        let b = g.sub(b, t);
        let nl = g.neg(log_s);
        let s = g.exp(nl);
        let b = g.mul(b, s);
        g.concat_cols(&[a, b])
    }
}

#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub mixing: Mixing,
    pub coupling: Coupling,
}

/// `K` flow steps over `C` channels.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub channels: usize,
    pub steps: Vec<FlowStep>,
}

impl FlowStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        steps: usize,
        cond_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::config("flow channels", "need at least two channels to couple"));
        }
        let steps = (0..steps)
            .map(|k| FlowStep {
                actnorm: ActNorm::new(store, &format!("{name}.{k}.actnorm"), channels),
                mixing: Mixing::reverse(store, &format!("{name}.{k}.mix"), channels),
                coupling: Coupling::new(store, rng, &format!("{name}.{k}.coupling"), channels, cond_dim, hidden),
            })
            .collect();
        Ok(Self { channels, steps })
    }

    fn check_shapes<T: Scalar>(&self, g: &Graph<T>, x: Var, cond: Var) -> Result<()> {
        let (w, c) = g.shape(x);
        let (wc, _) = g.shape(cond);
        if c != self.channels || w != wc {
            return Err(Error::Shape(format!(
                "flow over {} channels got {w}×{c} latents and {wc} conditions",
                self.channels
            )));
        }
        Ok(())
    }

    /// `(Z_s, Σ log|det|)` summed over steps and rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, cond: Var) -> Result<(Var, Var)> {
        self.check_shapes(g, x, cond)?;
        let mut h = x;
        let mut parts = Vec::with_capacity(3 * self.steps.len());
        for s in &self.steps {
            let (y, ld) = s.actnorm.forward(g, p, h);
            parts.push(ld);
            let (y, ld) = s.mixing.forward(g, p, y)?;
            parts.push(ld);
            let (y, ld) = s.coupling.forward(g, p, y, cond);
            parts.push(ld);
            h = y;
        }
        let logdet = crate::acoustic::loss::sum_vars(g, &parts);
        Ok((h, logdet))
    }

    pub fn inverse<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var, cond: Var) -> Result<Var> {
        self.check_shapes(g, z, cond)?;
        let mut h = z;
        for s in self.steps.iter().rev() {
            h = s.coupling.inverse(g, p, h, cond);
            h = s.mixing.inverse(g, p, h)?;
            h = s.actnorm.inverse(g, p, h);
        }
        Ok(h)
    }
}
