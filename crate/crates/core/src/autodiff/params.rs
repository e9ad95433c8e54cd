use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::scalar::{Dual, Scalar};
use crate::error::{Error, Result};

/// One named parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter matrices.
///
/// The order is the flattening order used by every flat-vector routine
/// (gradients, HVPs, Neumann products).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "parameter `{name}` shape mismatch");
        assert!(self.index_of(&name).is_none(), "duplicate parameter `{name}`");
        self.tensors.push(ParamTensor {
            name,
            rows,
            cols,
            data,
        });
    }

    /// Appends all tensors of `other` with `prefix` prepended to their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for t in &other.tensors {
            self.push(format!("{prefix}{}", t.name), t.rows, t.cols, t.data.clone());
        }
    }

    /// Tensors whose name starts with `prefix`, prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|t| {
                t.name.strip_prefix(prefix).map(|rest| ParamTensor {
                    name: rest.to_string(),
                    ..t.clone()
                })
            })
            .collect();
        ParamSet { tensors }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, parameters have {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += alpha * dir` over the flattened layout.
    pub fn axpy(&mut self, alpha: f64, dir: &[f64]) -> Result<()> {
        if dir.len() != self.num_scalars() {
            return Err(Error::shape("axpy direction length mismatch"));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x += alpha * dir[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Same names and shapes as `self`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols)
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn leaves<S: Scalar>(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.constant(&t.data, t.rows, t.cols))
            .collect()
    }

    /// Registers every tensor as a dual leaf whose tangent is the matching
    /// slice of `tangent` (zero when `None`).
    pub fn dual_leaves(&self, g: &mut Graph<Dual>, tangent: Option<&[f64]>) -> Vec<Var> {
        let mut off = 0;
        self.tensors
            .iter()
            .map(|t| {
                let n = t.data.len();
                let data = t
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| Dual::new(v, tangent.map_or(0.0, |tv| tv[off + i])))
                    .collect();
                off += n;
                g.leaf(data, t.rows, t.cols)
            })
            .collect()
    }
}

/// A scalar loss over one parameter set, buildable over any [`Scalar`].
pub trait Objective {
    fn loss<S: Scalar>(&self, g: &mut Graph<S>, params: &[Var]) -> Result<Var>;
}

/// A pair of losses over outer variables and inner variables.
pub trait BilevelObjective {
    /// Inner (training) loss, depends on both variable sets.
    fn inner_loss<S: Scalar>(&self, g: &mut Graph<S>, outer: &[Var], inner: &[Var])
        -> Result<Var>;
    /// Outer (validation) loss evaluated at the inner variables.
    fn outer_loss<S: Scalar>(&self, g: &mut Graph<S>, inner: &[Var]) -> Result<Var>;
}

fn collect<S: Scalar, T>(
    grads: &super::graph::Grads<S>,
    leaves: &[Var],
    params: &ParamSet,
    pick: impl Fn(S) -> T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(params.num_scalars());
    for (v, t) in leaves.iter().zip(params.tensors()) {
        out.extend(grads.get_or_zeros(*v, t.data.len()).into_iter().map(&pick));
    }
    out
}

fn check_scalar(g: &Graph<impl Scalar>, loss: Var) -> Result<()> {
    if g.shape(loss) != (1, 1) {
        return Err(Error::Contract("objective must return a 1x1 loss".into()));
    }
    Ok(())
}

/// Loss value and flat gradient.
pub fn value_and_grad<O: Objective>(obj: &O, params: &ParamSet) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let leaves = params.leaves(&mut g);
    let loss = obj.loss(&mut g, &leaves)?;
    check_scalar(&g, loss)?;
    let grads = g.backward(loss);
    Ok((g.scalar(loss), collect(&grads, &leaves, params, |x| x)))
}

/// Gradient and Hessian-vector product `H v` in one forward-over-reverse sweep.
pub fn grad_and_hvp<O: Objective>(
    obj: &O,
    params: &ParamSet,
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != params.num_scalars() {
        return Err(Error::shape("hvp direction length mismatch"));
    }
    let mut g = Graph::<Dual>::new();
    let leaves = params.dual_leaves(&mut g, Some(v));
    let loss = obj.loss(&mut g, &leaves)?;
    check_scalar(&g, loss)?;
    let grads = g.backward(loss);
    let pairs = collect(&grads, &leaves, params, |d| (d.v, d.t));
    Ok(pairs.into_iter().unzip())
}

/// Inner loss value and flat gradient w.r.t. the inner variables.
pub fn inner_value_and_grad<B: BilevelObjective>(
    obj: &B,
    outer: &ParamSet,
    inner: &ParamSet,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let ol = outer.leaves(&mut g);
    let il = inner.leaves(&mut g);
    let loss = obj.inner_loss(&mut g, &ol, &il)?;
    check_scalar(&g, loss)?;
    let grads = g.backward(loss);
    Ok((g.scalar(loss), collect(&grads, &il, inner, |x| x)))
}

/// Outer loss value and its flat gradient w.r.t. the inner variables.
pub fn outer_value_and_grad<B: BilevelObjective>(
    obj: &B,
    inner: &ParamSet,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let il = inner.leaves(&mut g);
    let loss = obj.outer_loss(&mut g, &il)?;
    check_scalar(&g, loss)?;
    let grads = g.backward(loss);
    Ok((g.scalar(loss), collect(&grads, &il, inner, |x| x)))
}

/// Second-order sweep with tangent `v` on the inner variables.
///
/// Returns `(∂²L/∂inner² · v, ∂²L/∂outer∂inner · v)`, i.e. the inner HVP and
/// the gradient w.r.t. the outer variables of `⟨v, ∂L/∂inner⟩`.
pub fn inner_second_order<B: BilevelObjective>(
    obj: &B,
    outer: &ParamSet,
    inner: &ParamSet,
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != inner.num_scalars() {
        return Err(Error::shape("inner tangent length mismatch"));
    }
    let mut g = Graph::<Dual>::new();
    let ol = outer.dual_leaves(&mut g, None);
    let il = inner.dual_leaves(&mut g, Some(v));
    let loss = obj.inner_loss(&mut g, &ol, &il)?;
    check_scalar(&g, loss)?;
    let grads = g.backward(loss);
    let hv = collect(&grads, &il, inner, |d| d.t);
    let mixed = collect(&grads, &ol, outer, |d| d.t);
    Ok((hv, mixed))
}
