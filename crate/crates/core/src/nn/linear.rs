use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AdapterGrad, AdapterTarget, AdapterView};
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor;

/// Affine map `y = W x + b` with `W` of shape `[m, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T> {
    name: String,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(name: impl Into<String>, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let name = name.into();
        if weight.shape().len() != 2 {
            return Err(Error::Dimension {
                what: format!("weight rank of layer {name}"),
                expected: 2,
                got: weight.shape().len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::Dimension {
                    what: format!("bias of layer {name}"),
                    expected: weight.rows(),
                    got: b.len(),
                });
            }
        }
        Ok(Self { name, weight, bias })
    }

    /// Normal init with std `1/sqrt(fan_in)`, zero bias.
    pub fn init(name: impl Into<String>, m: usize, n: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (n as f64).sqrt();
        let weight = Tensor::from_fn(m, n, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(std * z)
        });
        Self { name: name.into(), weight, bias: with_bias.then(|| Tensor::zeros(vec![m])) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            name: self.name.clone(),
            weight: Tensor::zeros(self.weight.shape().to_vec()),
            bias: self.bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = vec![(format!("{}.weight", self.name), self.weight.data_mut())];
        if let Some(b) = self.bias.as_mut() {
            out.push((format!("{}.bias", self.name), b.data_mut()));
        }
        out
    }

    pub(crate) fn params(&self) -> Vec<(String, &[T])> {
        let mut out = vec![(format!("{}.weight", self.name), self.weight.data())];
        if let Some(b) = self.bias.as_ref() {
            out.push((format!("{}.bias", self.name), b.data()));
        }
        out
    }

    /// `W x + b`, shape-checked.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension {
                what: format!("input of layer {}", self.name),
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let mut y = vec![T::zero(); self.out_dim()];
        self.apply(x, None, AdapterTarget::Head, &mut y);
        Ok(y)
    }

    /// Checks that every view term aimed at `target` fits this matrix.
    pub(crate) fn check_terms(&self, view: &AdapterView<'_, T>, target: AdapterTarget) -> Result<()> {
        for (_, term) in view.for_target(target) {
            if term.p.len() != self.out_dim() || term.q.len() != self.in_dim() {
                return Err(Error::AdapterShape {
                    target: target.to_string(),
                    m: self.out_dim(),
                    n: self.in_dim(),
                    got_m: term.p.len(),
                    got_n: term.q.len(),
                });
            }
        }
        Ok(())
    }

    /// Writes `W x + b + sum_k scale_k (q_k . x) p_k` into `y`.
    #[inline]
    pub(crate) fn apply(&self, x: &[T], view: Option<&AdapterView<'_, T>>, target: AdapterTarget, y: &mut [T]) {
        let n = self.in_dim();
        let w = self.weight.data();
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(&w[i * n..(i + 1) * n], x);
        }
        if let Some(b) = &self.bias {
            for (yi, bi) in y.iter_mut().zip(b.data()) {
                *yi = *yi + *bi;
            }
        }
        if let Some(view) = view {
            for (_, term) in view.for_target(target) {
                let s = term.scale * dot(term.q, x);
                axpy(s, term.p, y);
            }
        }
    }

    /// Backward through `apply`. Accumulates into `dx`, `grads` (parameter gradients)
    /// and `adapter_grads` (indexed like the view's terms).
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub(crate) fn backward(
        &self,
        x: &[T],
        gy: &[T],
        view: Option<&AdapterView<'_, T>>,
        target: AdapterTarget,
        dx: Option<&mut [T]>,
        grads: Option<&mut LinearLayer<T>>,
        adapter_grads: &mut [AdapterGrad<T>],
    ) {
        let n = self.in_dim();
        let w = self.weight.data();
        if let Some(dx) = dx {
            for (i, g) in gy.iter().enumerate() {
                if *g != T::zero() {
                    axpy(*g, &w[i * n..(i + 1) * n], dx);
                }
            }
            if let Some(view) = view {
                for (_, term) in view.for_target(target) {
                    let s = term.scale * dot(term.p, gy);
                    axpy(s, term.q, dx);
                }
            }
        }
        if let Some(g) = grads {
            let gw = g.weight.data_mut();
            for (i, gi) in gy.iter().enumerate() {
                axpy(*gi, x, &mut gw[i * n..(i + 1) * n]);
            }
            if let Some(gb) = g.bias.as_mut() {
                for (b, gi) in gb.data_mut().iter_mut().zip(gy) {
                    *b = *b + *gi;
                }
            }
        }
        if let Some(view) = view {
            for (slot, term) in view.for_target(target) {
                let ag = &mut adapter_grads[slot];
                let sx = term.scale * dot(term.q, x);
                axpy(sx, gy, &mut ag.p);
                let sg = term.scale * dot(term.p, gy);
                axpy(sg, x, &mut ag.q);
            }
        }
    }
}
