use rand::Rng;

use super::{AdapterGrad, AdapterTarget, AdapterView, LinearLayer, Projection};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Multi-head attention from sample tokens (queries) onto condition tokens (keys, values),
/// added residually to the sample path.
///
/// The sample path is a flat vector of `tokens * channels` entries; the condition is a flat
/// vector of `cond_tokens * cond_dim` entries. Projections carry no bias, so an all-zero
/// condition yields an exactly zero attention update regardless of attached adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionBlock<T> {
    pub(crate) w_q: LinearLayer<T>,
    pub(crate) w_k: LinearLayer<T>,
    pub(crate) w_v: LinearLayer<T>,
    pub(crate) w_out: LinearLayer<T>,
    heads: usize,
    tokens: usize,
    cond_tokens: usize,
}

/// Forward intermediates of one attention call.
#[derive(Debug, Clone)]
pub(crate) struct AttentionTape<T> {
    pub x: Vec<T>,
    pub cond: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    o: Vec<T>,
}

impl<T: Scalar> CrossAttentionBlock<T> {
    pub fn new(
        w_q: LinearLayer<T>,
        w_k: LinearLayer<T>,
        w_v: LinearLayer<T>,
        w_out: LinearLayer<T>,
        heads: usize,
        tokens: usize,
        cond_tokens: usize,
    ) -> Result<Self> {
        let attn_dim = w_q.out_dim();
        let bad = |what: &str, expected: usize, got: usize| Error::Dimension { what: what.to_string(), expected, got };
        if heads == 0 || !attn_dim.is_multiple_of(heads) {
            return Err(bad("attention dim divisible by heads", heads.max(1), attn_dim));
        }
        if w_k.out_dim() != attn_dim {
            return Err(bad("key projection width", attn_dim, w_k.out_dim()));
        }
        if !w_v.out_dim().is_multiple_of(heads) {
            return Err(bad("value dim divisible by heads", heads, w_v.out_dim()));
        }
        if w_k.in_dim() != w_v.in_dim() {
            return Err(bad("value projection input", w_k.in_dim(), w_v.in_dim()));
        }
        if w_out.in_dim() != w_v.out_dim() {
            return Err(bad("output projection input", w_v.out_dim(), w_out.in_dim()));
        }
        if w_out.out_dim() != w_q.in_dim() {
            return Err(bad("output projection width", w_q.in_dim(), w_out.out_dim()));
        }
        Ok(Self { w_q, w_k, w_v, w_out, heads, tokens, cond_tokens })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init(
        prefix: &str,
        tokens: usize,
        channels: usize,
        cond_tokens: usize,
        cond_dim: usize,
        attn_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            LinearLayer::init(format!("{prefix}.q"), attn_dim, channels, false, rng),
            LinearLayer::init(format!("{prefix}.k"), attn_dim, cond_dim, false, rng),
            LinearLayer::init(format!("{prefix}.v"), attn_dim, cond_dim, false, rng),
            LinearLayer::init(format!("{prefix}.out"), channels, attn_dim, false, rng),
            heads,
            tokens,
            cond_tokens,
        )
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            w_q: self.w_q.zeros_like(),
            w_k: self.w_k.zeros_like(),
            w_v: self.w_v.zeros_like(),
            w_out: self.w_out.zeros_like(),
            ..*self
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.w_q.in_dim()
    }

    pub fn cond_tokens(&self) -> usize {
        self.cond_tokens
    }

    pub fn cond_dim(&self) -> usize {
        self.w_k.in_dim()
    }

    pub fn projection(&self, proj: Projection) -> &LinearLayer<T> {
        match proj {
            Projection::Q => &self.w_q,
            Projection::K => &self.w_k,
            Projection::V => &self.w_v,
            Projection::Out => &self.w_out,
        }
    }

    pub(crate) fn projection_mut(&mut self, proj: Projection) -> &mut LinearLayer<T> {
        match proj {
            Projection::Q => &mut self.w_q,
            Projection::K => &mut self.w_k,
            Projection::V => &mut self.w_v,
            Projection::Out => &mut self.w_out,
        }
    }

    pub(crate) fn check_view(&self, view: &AdapterView<'_, T>, block: usize) -> Result<()> {
        for proj in Projection::ALL {
            self.projection(proj).check_terms(view, AdapterTarget::Attention { block, proj })?;
        }
        Ok(())
    }

    /// Residual cross-attention: returns `sample + attention(sample, cond)`.
    ///
    /// `block` is this block's index in the trunk, used to match adapter targets.
    pub fn forward(&self, sample: &[T], cond: &[T], view: Option<&AdapterView<'_, T>>, block: usize) -> Result<Vec<T>> {
        let want = self.tokens * self.channels();
        if sample.len() != want {
            return Err(Error::Dimension {
                what: format!("sample path of attention block {block}"),
                expected: want,
                got: sample.len(),
            });
        }
        let want = self.cond_tokens * self.cond_dim();
        if cond.len() != want {
            return Err(Error::Dimension {
                what: format!("condition of attention block {block}"),
                expected: want,
                got: cond.len(),
            });
        }
        if let Some(v) = view {
            self.check_view(v, block)?;
        }
        Ok(self.forward_taped(sample, cond, view, block).0)
    }

    pub(crate) fn forward_taped(
        &self,
        x: &[T],
        cond: &[T],
        view: Option<&AdapterView<'_, T>>,
        block: usize,
    ) -> (Vec<T>, AttentionTape<T>) {
        let (s_n, l_n) = (self.tokens, self.cond_tokens);
        let c = self.channels();
        let dc = self.cond_dim();
        let dk = self.w_q.out_dim();
        let dv = self.w_v.out_dim();
        let h_n = self.heads;
        let (hk, hv) = (dk / h_n, dv / h_n);
        let target = |proj| AdapterTarget::Attention { block, proj };

        let mut q = vec![T::zero(); s_n * dk];
        for s in 0..s_n {
            self.w_q.apply(&x[s * c..(s + 1) * c], view, target(Projection::Q), &mut q[s * dk..(s + 1) * dk]);
        }
        let mut k = vec![T::zero(); l_n * dk];
        let mut v = vec![T::zero(); l_n * dv];
        for l in 0..l_n {
            let cl = &cond[l * dc..(l + 1) * dc];
            self.w_k.apply(cl, view, target(Projection::K), &mut k[l * dk..(l + 1) * dk]);
            self.w_v.apply(cl, view, target(Projection::V), &mut v[l * dv..(l + 1) * dv]);
        }

        let inv_sqrt = T::one() / T::lit(hk as f64).sqrt();
        let mut attn = vec![T::zero(); h_n * s_n * l_n];
        let mut o = vec![T::zero(); s_n * dv];
        for h in 0..h_n {
            for s in 0..s_n {
                let qs = &q[s * dk + h * hk..s * dk + (h + 1) * hk];
                let row = &mut attn[(h * s_n + s) * l_n..(h * s_n + s + 1) * l_n];
                let mut max = T::neg_infinity();
                for (l, r) in row.iter_mut().enumerate() {
                    *r = dot(qs, &k[l * dk + h * hk..l * dk + (h + 1) * hk]) * inv_sqrt;
                    max = max.max(*r);
                }
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z = z + *r;
                }
                for r in row.iter_mut() {
                    *r = *r / z;
                }
                let os = &mut o[s * dv + h * hv..s * dv + (h + 1) * hv];
                for (l, a) in row.iter().enumerate() {
                    let vl = &v[l * dv + h * hv..l * dv + (h + 1) * hv];
                    for (oi, vi) in os.iter_mut().zip(vl) {
                        *oi = *oi + *a * *vi;
                    }
                }
            }
        }

        let mut out = x.to_vec();
        let mut y = vec![T::zero(); c];
        for s in 0..s_n {
            self.w_out.apply(&o[s * dv..(s + 1) * dv], view, target(Projection::Out), &mut y);
            for (oi, yi) in out[s * c..(s + 1) * c].iter_mut().zip(&y) {
                *oi = *oi + *yi;
            }
        }
        let tape = AttentionTape { x: x.to_vec(), cond: cond.to_vec(), q, k, v, attn, o };
        (out, tape)
    }

    /// Backward of the attention update (the residual identity is handled by the caller).
    /// Returns the gradient w.r.t. the sample path (attention branch only) and the condition.
    pub(crate) fn backward(
        &self,
        tape: &AttentionTape<T>,
        g_out: &[T],
        view: Option<&AdapterView<'_, T>>,
        block: usize,
        mut grads: Option<&mut CrossAttentionBlock<T>>,
        adapter_grads: &mut [AdapterGrad<T>],
        need_cond_grad: bool,
    ) -> (Vec<T>, Option<Vec<T>>) {
        let (s_n, l_n) = (self.tokens, self.cond_tokens);
        let c = self.channels();
        let dc = self.cond_dim();
        let dk = self.w_q.out_dim();
        let dv = self.w_v.out_dim();
        let h_n = self.heads;
        let (hk, hv) = (dk / h_n, dv / h_n);
        let target = |proj| AdapterTarget::Attention { block, proj };
        let inv_sqrt = T::one() / T::lit(hk as f64).sqrt();

        let mut d_o = vec![T::zero(); s_n * dv];
        for s in 0..s_n {
            self.w_out.backward(
                &tape.o[s * dv..(s + 1) * dv],
                &g_out[s * c..(s + 1) * c],
                view,
                target(Projection::Out),
                Some(&mut d_o[s * dv..(s + 1) * dv]),
                grads.as_deref_mut().map(|g| &mut g.w_out),
                adapter_grads,
            );
        }

        let mut d_q = vec![T::zero(); s_n * dk];
        let mut d_k = vec![T::zero(); l_n * dk];
        let mut d_v = vec![T::zero(); l_n * dv];
        let mut d_a = vec![T::zero(); l_n];
        for h in 0..h_n {
            for s in 0..s_n {
                let row = &tape.attn[(h * s_n + s) * l_n..(h * s_n + s + 1) * l_n];
                let dos = &d_o[s * dv + h * hv..s * dv + (h + 1) * hv];
                let mut weighted = T::zero();
                for l in 0..l_n {
                    let vl = &tape.v[l * dv + h * hv..l * dv + (h + 1) * hv];
                    d_a[l] = dot(dos, vl);
                    weighted = weighted + row[l] * d_a[l];
                    let dvl = &mut d_v[l * dv + h * hv..l * dv + (h + 1) * hv];
                    for (d, g) in dvl.iter_mut().zip(dos) {
                        *d = *d + row[l] * *g;
                    }
                }
                for l in 0..l_n {
                    let ds = row[l] * (d_a[l] - weighted) * inv_sqrt;
                    if ds == T::zero() {
                        continue;
                    }
                    for i in 0..hk {
                        let qi = s * dk + h * hk + i;
                        let ki = l * dk + h * hk + i;
                        d_q[qi] = d_q[qi] + ds * tape.k[ki];
                        d_k[ki] = d_k[ki] + ds * tape.q[qi];
                    }
                }
            }
        }

        let mut d_x = vec![T::zero(); s_n * c];
        for s in 0..s_n {
            self.w_q.backward(
                &tape.x[s * c..(s + 1) * c],
                &d_q[s * dk..(s + 1) * dk],
                view,
                target(Projection::Q),
                Some(&mut d_x[s * c..(s + 1) * c]),
                grads.as_deref_mut().map(|g| &mut g.w_q),
                adapter_grads,
            );
        }
        let mut d_cond = need_cond_grad.then(|| vec![T::zero(); l_n * dc]);
        for l in 0..l_n {
            let cl = &tape.cond[l * dc..(l + 1) * dc];
            self.w_k.backward(
                cl,
                &d_k[l * dk..(l + 1) * dk],
                view,
                target(Projection::K),
                d_cond.as_mut().map(|d| &mut d[l * dc..(l + 1) * dc]),
                grads.as_deref_mut().map(|g| &mut g.w_k),
                adapter_grads,
            );
            self.w_v.backward(
                cl,
                &d_v[l * dv..(l + 1) * dv],
                view,
                target(Projection::V),
                d_cond.as_mut().map(|d| &mut d[l * dc..(l + 1) * dc]),
                grads.as_deref_mut().map(|g| &mut g.w_v),
                adapter_grads,
            );
        }
        (d_x, d_cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RankOneTerm;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(name: &str, n: usize) -> LinearLayer<f64> {
        LinearLayer::new(name, Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 }), None).unwrap()
    }

    fn identity_block() -> CrossAttentionBlock<f64> {
        CrossAttentionBlock::new(eye("q", 2), eye("k", 2), eye("v", 2), eye("out", 2), 1, 2, 2).unwrap()
    }

    #[test]
    fn equal_scores_give_mean_of_values() {
        // Each query scores both keys equally, so softmax weights are (1/2, 1/2) and each
        // token receives the mean of the values (0.5, 0.5) residually.
        let block = identity_block();
        let sample = [1.0, 1.0, -2.0, -2.0];
        let cond = [1.0, 0.0, 0.0, 1.0];
        let out = block.forward(&sample, &cond, None, 0).unwrap();
        let expected = [1.5, 1.5, -1.5, -1.5];
        for (a, e) in out.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_softmax_two_tokens() {
        // Query (1, 0) against keys (1, 0), (0, 0): scores (1/sqrt2, 0).
        let block = identity_block();
        let sample = [1.0, 0.0, 0.0, 0.0];
        let cond = [1.0, 0.0, 0.0, 0.0];
        let out = block.forward(&sample, &cond, None, 0).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((out[0] - (1.0 + w0)).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_p_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = CrossAttentionBlock::<f64>::init("b", 3, 4, 2, 5, 6, 2, &mut rng).unwrap();
        let sample: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let cond: Vec<f64> = (0..10).map(|i| (i as f64 * 0.71).cos()).collect();
        let zero6 = vec![0.0; 6];
        let zero4 = vec![0.0; 4];
        let q4 = vec![0.3; 4];
        let q5 = vec![-0.2; 5];
        let q6 = vec![0.1; 6];
        let view = AdapterView::new(vec![
            RankOneTerm {
                target: AdapterTarget::Attention { block: 1, proj: Projection::Q },
                p: &zero6,
                q: &q4,
                scale: 1.0,
            },
            RankOneTerm {
                target: AdapterTarget::Attention { block: 1, proj: Projection::K },
                p: &zero6,
                q: &q5,
                scale: 1.0,
            },
            RankOneTerm {
                target: AdapterTarget::Attention { block: 1, proj: Projection::V },
                p: &zero6,
                q: &q5,
                scale: 1.0,
            },
            RankOneTerm {
                target: AdapterTarget::Attention { block: 1, proj: Projection::Out },
                p: &zero4,
                q: &q6,
                scale: 1.0,
            },
        ]);
        let a = block.forward(&sample, &cond, None, 1).unwrap();
        let b = block.forward(&sample, &cond, Some(&view), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adapted_value_equals_dense_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = CrossAttentionBlock::<f64>::init("b", 3, 4, 2, 5, 6, 2, &mut rng).unwrap();
        let sample: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cond: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let view = AdapterView::new(vec![RankOneTerm {
            target: AdapterTarget::Attention { block: 0, proj: Projection::V },
            p: &p,
            q: &q,
            scale: 1.0,
        }]);
        let mut dense = block.clone();
        let w = dense.w_v.weight();
        let patched = Tensor::from_fn(6, 5, |i, j| w.at(i, j) + p[i] * q[j]);
        dense.w_v = LinearLayer::new("v", patched, None).unwrap();
        let a = block.forward(&sample, &cond, Some(&view), 0).unwrap();
        let b = dense.forward(&sample, &cond, None, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_shape_error() {
        let block = identity_block();
        let p = vec![1.0; 3];
        let q = vec![1.0; 2];
        let view = AdapterView::new(vec![RankOneTerm {
            target: AdapterTarget::Attention { block: 0, proj: Projection::K },
            p: &p,
            q: &q,
            scale: 1.0,
        }]);
        let err = block.forward(&[0.0; 4], &[0.0; 4], Some(&view), 0).unwrap_err();
        assert!(matches!(err, Error::AdapterShape { .. }));
    }
}
