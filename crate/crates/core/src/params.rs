//! Named views over every array a network owns, in declaration order.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrayKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
    Gate,
}

impl ArrayKind {
    /// Running statistics are state, not trainable parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ArrayKind::RunningMean | ArrayKind::RunningVar)
    }
}

#[derive(Debug)]
pub struct ArrayRef<'a, T> {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: (usize, usize),
    pub values: &'a [T],
}

#[derive(Debug)]
pub struct ArrayMut<'a, T> {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: (usize, usize),
    pub values: &'a mut [T],
}

/// One learnable parameter paired with its gradient, as consumed by the optimizer.
#[derive(Debug)]
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub kind: ArrayKind,
    pub values: &'a mut [T],
    pub grad: &'a [T],
}

pub trait Parameterized<T> {
    fn arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayRef<'a, T>>);
    fn arrays_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ArrayMut<'a, T>>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
