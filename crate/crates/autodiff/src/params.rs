//! Named parameter collections, gradient maps, and the flat gradient vectors
//! used for whole-model gradient algebra.

use indexmap::IndexMap;

use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Ordered collection of named tensors. Insertion order is the canonical
/// order used by checkpoints and [`GradVector`]s.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// `(name, shape)` pairs in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Bitwise equality of every value, names and shapes included.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.layout() == other.layout()
            && self.tensors.values().zip(other.tensors.values()).all(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Vars of a [`ParamSet`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub(crate) fn new(vars: IndexMap<String, Var>) -> Self {
        Self { vars }
    }

    /// Panics when `name` was not bound: model code asks only for names it
    /// created itself.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound on tape"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Gradient per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(grads: IndexMap<String, Tensor>) -> Self {
        Self { grads }
    }

    /// All-zero gradients shaped like `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Keeps only entries whose name is in `params`.
    pub fn restricted_to(&self, params: &ParamSet) -> Gradients {
        Gradients {
            grads: self
                .grads
                .iter()
                .filter(|(k, _)| params.get(k).is_some())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn scale(&mut self, c: f32) {
        for t in self.grads.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    /// `self += c * other`; names missing from `self` are inserted.
    pub fn add_scaled(&mut self, other: &Gradients, c: f32) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(t) => {
                    if t.shape() != g.shape() {
                        return Err(AutodiffError::GradShape {
                            param: name.clone(),
                            expected: t.shape().to_vec(),
                            got: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += c * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    for v in t.data_mut() {
                        *v *= c;
                    }
                    self.grads.insert(name.clone(), t);
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f32 {
        self.grads
            .values()
            .map(Tensor::squared_norm)
            .sum::<f64>()
            .sqrt() as f32
    }
}

/// Flat concatenation of per-parameter gradients in a [`ParamSet`]'s order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector(Vec<f32>);

impl GradVector {
    pub fn from_vec(v: Vec<f32>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &GradVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(AutodiffError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    }
}

/// Concatenates `grads` in the canonical order of `order`.
pub fn flatten_grads(grads: &Gradients, order: &ParamSet) -> Result<GradVector> {
    for name in grads.grads.keys() {
        if order.get(name).is_none() {
            return Err(AutodiffError::UnknownParam(name.clone()));
        }
    }
    let mut out = Vec::with_capacity(order.numel());
    for (name, p) in order.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(AutodiffError::GradShape {
                param: name.to_string(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        out.extend_from_slice(g.data());
    }
    Ok(GradVector(out))
}

/// Inverse of [`flatten_grads`].
pub fn unflatten_grads(flat: &GradVector, order: &ParamSet) -> Result<Gradients> {
    if flat.len() != order.numel() {
        return Err(AutodiffError::LengthMismatch {
            left: flat.len(),
            right: order.numel(),
        });
    }
    let mut grads = IndexMap::with_capacity(order.len());
    let mut offset = 0;
    for (name, p) in order.iter() {
        let n = p.len();
        let t = Tensor::new(p.shape().to_vec(), flat.0[offset..offset + n].to_vec())?;
        grads.insert(name.to_string(), t);
        offset += n;
    }
    Ok(Gradients { grads })
}

/// Norm below which a vector is treated as carrying no direction.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Cosine of the angle between two gradient vectors; 0 when either is
/// (numerically) zero. Accumulates in f64 and clamps to `[-1, 1]`.
pub fn cosine_similarity(u: &GradVector, v: &GradVector) -> Result<f32> {
    let d = u.dot(v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu < ZERO_NORM_EPS || nv < ZERO_NORM_EPS {
        return Ok(0.0);
    }
    Ok((d / (nu * nv)).clamp(-1.0, 1.0) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
    /// Factor applied to the gradient (1 when not clipped).
    pub clip_scale: f32,
}

/// `p <- p - lr * clip(g)` for every parameter.
///
/// `clip` rescales the whole gradient when its global norm exceeds the
/// threshold. A zero learning rate is allowed and leaves `params` untouched.
pub fn sgd_step(
    params: &ParamSet,
    grads: &Gradients,
    lr: f32,
    clip: Option<f32>,
) -> Result<(ParamSet, StepStats)> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(AutodiffError::InvalidLearningRate(lr));
    }
    for name in grads.grads.keys() {
        if params.get(name).is_none() {
            return Err(AutodiffError::UnknownParam(name.clone()));
        }
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(AutodiffError::GradShape {
                param: name.to_string(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(AutodiffError::NonFiniteGradient {
                param: name.to_string(),
            });
        }
    }
    let grad_norm = grads.global_norm();
    let clip_scale = match clip {
        Some(c) if grad_norm > c && grad_norm > 0.0 => c / grad_norm,
        _ => 1.0,
    };
    let step = lr * clip_scale;
    let mut out = params.clone();
    if step != 0.0 {
        for (name, t) in out.tensors.iter_mut() {
            let g = &grads.grads[name];
            for (p, d) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= step * d;
            }
        }
    }
    Ok((
        out,
        StepStats {
            grad_norm,
            clip_scale,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, Vec<f32>)]) -> ParamSet {
        let mut s = ParamSet::new();
        for (k, v) in entries {
            s.insert(*k, Tensor::vector(v.clone()));
        }
        s
    }

    fn grads(entries: &[(&str, Vec<f32>)]) -> Gradients {
        Gradients::from_map(
            entries
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::vector(v.clone())))
                .collect(),
        )
    }

    #[test]
    fn flatten_single() {
        let p = set(&[("w", vec![0.0, 0.0])]);
        let g = grads(&[("w", vec![2.0, 3.0])]);
        assert_eq!(flatten_grads(&g, &p).unwrap().as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn flatten_uses_param_order_not_grad_order() {
        let p = set(&[("a", vec![0.0]), ("b", vec![0.0])]);
        let g = grads(&[("b", vec![2.0]), ("a", vec![1.0])]);
        assert_eq!(flatten_grads(&g, &p).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn flatten_rejects_missing_and_extra() {
        let p = set(&[("a", vec![0.0]), ("b", vec![0.0])]);
        assert!(matches!(
            flatten_grads(&grads(&[("a", vec![1.0])]), &p),
            Err(AutodiffError::MissingParam(_))
        ));
        assert!(matches!(
            flatten_grads(
                &grads(&[("a", vec![1.0]), ("b", vec![1.0]), ("c", vec![1.0])]),
                &p
            ),
            Err(AutodiffError::UnknownParam(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let g = GradVector::from_vec(vec![0.3, -1.2, 4.0]);
        let neg = GradVector::from_vec(vec![-0.3, 1.2, -4.0]);
        assert!((cosine_similarity(&g, &g).unwrap() - 1.0).abs() < 1e-6);
        assert!((cosine_similarity(&g, &neg).unwrap() + 1.0).abs() < 1e-6);
        let e1 = GradVector::from_vec(vec![1.0, 0.0]);
        let e2 = GradVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_zero_norm_guard() {
        let z = GradVector::from_vec(vec![0.0, 0.0]);
        let e1 = GradVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(cosine_similarity(&z, &e1).unwrap(), 0.0);
    }

    #[test]
    fn cosine_length_mismatch() {
        let a = GradVector::from_vec(vec![1.0]);
        let b = GradVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(AutodiffError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sgd_examples() {
        let p = set(&[("p", vec![1.0])]);
        let (q, _) = sgd_step(&p, &grads(&[("p", vec![2.0])]), 0.5, None).unwrap();
        assert_eq!(q.get("p").unwrap().data(), &[0.0]);
        let (q, _) = sgd_step(&p, &grads(&[("p", vec![0.0])]), 0.5, None).unwrap();
        assert_eq!(q.get("p").unwrap().data(), &[1.0]);
    }

    #[test]
    fn sgd_clips_by_global_norm() {
        let p = set(&[("a", vec![0.0]), ("b", vec![0.0])]);
        let g = grads(&[("a", vec![0.0]), ("b", vec![4.0])]);
        let (q, stats) = sgd_step(&p, &g, 1.0, Some(1.0)).unwrap();
        assert_eq!(stats.grad_norm, 4.0);
        assert_eq!(stats.clip_scale, 0.25);
        assert_eq!(q.get("b").unwrap().data(), &[-1.0]);
    }

    #[test]
    fn sgd_aborts_on_nan() {
        let p = set(&[("p", vec![1.0])]);
        let err = sgd_step(&p, &grads(&[("p", vec![f32::NAN])]), 0.1, None).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteGradient { .. }));
    }

    #[test]
    fn sgd_rejects_negative_rate() {
        let p = set(&[("p", vec![1.0])]);
        assert!(sgd_step(&p, &grads(&[("p", vec![1.0])]), -0.1, None).is_err());
    }
}
