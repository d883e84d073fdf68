//! Dense layers, cross-attention and the conditional denoiser with hand-written
//! reverse-mode gradients.

mod attention;
mod gradcheck;
mod linear;
mod model;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use attention::CrossAttentionBlock;
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use linear::LinearLayer;
pub use model::{sinusoidal_embedding, Block, BlockKind, DenoiserModel, GradientTape, Gradients, ModelConfig};

use crate::scalar::Scalar;

/// Projection inside a cross-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[serde(alias = "query")]
    Q,
    #[serde(alias = "key")]
    K,
    #[serde(alias = "value")]
    V,
    Out,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::Out];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::Out => "out",
        }
    }
}

/// Identifies one weight matrix that can carry a rank-1 adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum AdapterTarget {
    Input,
    Dense { block: usize },
    Attention { block: usize, proj: Projection },
    Head,
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterTarget::Input => write!(f, "input"),
            AdapterTarget::Dense { block } => write!(f, "blocks.{block}.dense"),
            AdapterTarget::Attention { block, proj } => {
                write!(f, "blocks.{block}.{}", proj.name())
            }
            AdapterTarget::Head => write!(f, "head"),
        }
    }
}

/// One active rank-1 modification `W x + scale * (q . x) p`.
#[derive(Debug, Clone, Copy)]
pub struct RankOneTerm<'a, T> {
    pub target: AdapterTarget,
    pub p: &'a [T],
    pub q: &'a [T],
    pub scale: T,
}

/// Lazy patch of a model: rank-1 terms applied at forward time, weights never mutated.
#[derive(Debug, Clone)]
pub struct AdapterView<'a, T> {
    terms: Vec<RankOneTerm<'a, T>>,
}

impl<'a, T: Scalar> AdapterView<'a, T> {
    pub fn new(terms: Vec<RankOneTerm<'a, T>>) -> Self {
        Self { terms }
    }

    pub fn empty() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn terms(&self) -> &[RankOneTerm<'a, T>] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Concatenates the terms of several views. Terms on the same matrix add.
    pub fn merge(views: impl IntoIterator<Item = AdapterView<'a, T>>) -> Self {
        Self { terms: views.into_iter().flat_map(|v| v.terms).collect() }
    }

    #[inline]
    pub(crate) fn for_target(&self, target: AdapterTarget) -> impl Iterator<Item = (usize, &RankOneTerm<'a, T>)> {
        self.terms.iter().enumerate().filter(move |(_, t)| t.target == target)
    }
}

/// Which parameters a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Only the `(p, q)` vectors of the attached adapter view.
    AdapterOnly,
    /// Every model parameter, plus any attached adapters.
    Full,
}

/// Gradient of the `(p, q)` vectors of one view term.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad<T> {
    pub target: AdapterTarget,
    pub p: Vec<T>,
    pub q: Vec<T>,
}
