//! Adam with bias correction.

use super::layers::{Grads, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, index-aligned with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check_shapes(&self, params: &ParamStore<T>) -> Result<()> {
        let ok = self.m.len() == params.tensors.len()
            && self.v.len() == params.tensors.len()
            && params
                .tensors
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(t, (m, v))| m.len() == t.data.len() && v.len() == t.data.len());
        if ok {
            Ok(())
        } else {
            Err(Error::shape("optimizer moments do not match the parameters"))
        }
    }

    /// Applies one update; `step` counts from 1.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64, step: u64) {
        let c1 = 1.0 - BETA1.powi(step as i32);
        let c2 = 1.0 - BETA2.powi(step as i32);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (ib1, ib2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let step_size = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(EPSILON);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.data[i]);
            for j in 0..t.data.len() {
                m[j] = b1 * m[j] + ib1 * g[j];
                v[j] = b2 * v[j] + ib2 * g[j] * g[j];
                t.data[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            }
        }
    }
}
