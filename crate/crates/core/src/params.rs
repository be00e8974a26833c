//! Named trainable arrays and the Adam optimizer.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named collection of trainable arrays. Names are unique and insertion
/// order is preserved (it is also the checkpoint order).
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::pre(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::pre(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(Error::pre(format!("no parameter named `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<'_, T> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound { params: self, vars }
    }

    /// Copies every entry of `other` whose name exists here with the same shape.
    pub fn overwrite_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::pre(format!(
                    "parameter `{name}` shape {:?} vs {:?}",
                    dst.shape(),
                    t.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'a, T> {
    params: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Real> Bound<'_, T> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::pre(format!("no parameter named `{name}`")))
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    /// Gradients aligned with the parameter order; zeros where no gradient flowed.
    pub fn grads(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| match tape.grad(v) {
                Some(g) => Tensor::new(p.shape().to_vec(), g.to_vec()).expect("grad shape"),
                None => Tensor::zeros(p.shape().to_vec()),
            })
            .collect()
    }
}

/// Adds `src` into `acc` elementwise.
pub fn accumulate_grads<T: Real>(acc: &mut [Tensor<T>], src: &[Tensor<T>]) {
    for (a, s) in acc.iter_mut().zip(src) {
        for (x, &y) in a.data_mut().iter_mut().zip(s.data()) {
            *x += y;
        }
    }
}

/// Per-parameter Adam moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    frozen: Vec<bool>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            t: 0,
            first: params.tensors().iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.tensors().iter().map(|p| vec![T::zero(); p.len()]).collect(),
            frozen: vec![false; params.len()],
        }
    }

    /// Excludes the named parameters from updates.
    pub fn freeze(&mut self, params: &ParamSet<T>, names: impl IntoIterator<Item = impl AsRef<str>>) -> Result<()> {
        for name in names {
            let i = params
                .position(name.as_ref())
                .ok_or_else(|| Error::pre(format!("no parameter named `{}`", name.as_ref())))?;
            self.frozen[i] = true;
        }
        Ok(())
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the step
/// before any parameter is touched.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::pre(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (name, p)) in params.iter().enumerate() {
        if grads[i].shape() != p.shape() {
            return Err(Error::pre(format!(
                "adam: gradient for `{name}` has shape {:?}, parameter {:?}",
                grads[i].shape(),
                p.shape()
            )));
        }
        if !grads[i].all_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        if state.frozen[i] {
            continue;
        }
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i].data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
