//! Uniform access to learnable tensors, used by the optimizer, the weights
//! file and gradient checks.

use crate::akm::AttentionP;
use crate::error::{Error, Result};
use crate::tensor::KernelSet;

/// A type owning named, fixed-shape learnable tensors.
///
/// `visit` and `visit_mut` must enumerate the same tensors in the same order.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64]));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    /// All parameters concatenated in visit order.
    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| v.extend_from_slice(d));
        v
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        self.visit_mut("", &mut |_, d| {
            d.copy_from_slice(&values[at..at + d.len()]);
            at += d.len();
        });
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for KernelSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        f(
            join(prefix, "weight"),
            vec![self.c_out(), self.c_in(), self.k(), self.k()],
            &self.weights,
        );
        f(join(prefix, "bias"), vec![self.c_out()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "weight"), &mut self.weights);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl Parameterized for AttentionP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        f(join(prefix, "kernel"), vec![self.kernel.len()], &self.kernel);
        f(join(prefix, "bias"), vec![1], std::slice::from_ref(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), std::slice::from_mut(&mut self.bias));
    }
}
