//! Named parameter storage and the handful of layers the models are built from.

use std::collections::HashMap;
use std::ops::Index;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. Insertion order is the canonical order
/// for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat<T>> {
        self.values.iter_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|e| e.is_finite()))
    }

    /// Registers every parameter in `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces values from `(name, tensor)` pairs; every stored name must be
    /// present with a matching shape.
    pub fn load_from<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, &'a Mat<T>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in tensors {
            let Some(&i) = self.index.get(name) else {
                continue;
            };
            if self.values[i].dim() != t.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dim(),
                    self.values[i].dim()
                )));
            }
            self.values[i].assign(t);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` missing from checkpoint",
                self.names[i]
            )));
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Mat<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::c(rng.random_range(-bound..bound)))
}

pub fn init_normal<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat<T> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::c(z * std)
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(rng, d_in, d_out, d_in));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, d_out)));
        Self { w, b }
    }

    /// Zero weight and bias, so the layer outputs exactly zero at init.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Array2::zeros((d_in, d_out)));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, d_out)));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Self {
        let fan_in = c_in * spec.kernel;
        let w = store.add(
            format!("{name}.w"),
            init_uniform(rng, spec.kernel * c_in, c_out, fan_in),
        );
        let b = store.add(format!("{name}.b"), Array2::zeros((1, c_out)));
        Self { w, b, spec }
    }

    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Array2::zeros((spec.kernel * c_in, c_out)));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, c_out)));
        Self { w, b, spec }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, n_seq: usize) -> Var {
        g.conv1d(x, p[self.w], Some(p[self.b]), self.spec.with_seqs(n_seq))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl ConvTranspose1d {
    /// Upsamples by `factor` with kernel `2·factor`, so the output is exactly
    /// `factor` times longer.
    pub fn upsampler<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        factor: usize,
    ) -> Self {
        let kernel = 2 * factor;
        let spec = ConvSpec::new(kernel)
            .with_stride(factor)
            .with_padding(factor / 2);
        let w = store.add(
            format!("{name}.w"),
            init_uniform(rng, c_in, kernel * c_out, c_in * 2),
        );
        let b = store.add(format!("{name}.b"), Array2::zeros((1, c_out)));
        Self { w, b, spec }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, n_seq: usize) -> Var {
        g.conv_transpose1d(x, p[self.w], Some(p[self.b]), self.spec.with_seqs(n_seq))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        vocab: usize,
        dim: usize,
        std: f64,
    ) -> Self {
        let table = store.add(format!("{name}.table"), init_normal(rng, vocab, dim, std));
        Self { table, vocab }
    }

    pub fn lookup<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Argument(format!(
                "id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(g.gather_rows(p[self.table], ids.to_vec()))
    }
}

/// Repeats a single row `n` times.
pub fn broadcast_rows<T: Scalar>(g: &mut Graph<T>, row: Var, n: usize) -> Var {
    g.gather_rows(row, vec![0; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn load_rejects_missing_and_misshapen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new();
        Linear::new(&mut a, &mut rng, "l", 3, 2);
        let mut b = a.clone();
        let w = a.get(a.id("l.w").unwrap()).clone();
        assert!(b.load_from([("l.w", &w)]).is_err());
        let wrong = Array2::zeros((2, 2));
        let bias = a.get(a.id("l.b").unwrap()).clone();
        assert!(b.load_from([("l.w", &wrong), ("l.b", &bias)]).is_err());
        assert!(b.load_from(a.iter()).is_ok());
    }

    #[test]
    fn upsampler_multiplies_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let up = ConvTranspose1d::upsampler(&mut s, &mut rng, "up", 3, 2, 4);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.constant(Array2::ones((10, 3)));
        let y = up.forward(&mut g, &p, x, 1);
        assert_eq!(g.shape(y), (40, 2));
    }
}
