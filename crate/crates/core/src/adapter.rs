//! Rank-1 attribute adapters: pairs `(p, q)` per adapted matrix, their zero-padded stacked
//! form, one-hot selection from a bank, lazy weight patching and the cross-bank
//! orthogonality penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::IndicatorVector;
use crate::nn::{AdapterTarget, AdapterView, DenoiserModel, Projection, RankOneTerm};
use crate::rng::normal_vec;
use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

/// Which matrices receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    CrossAttention,
    /// Every linear layer except the timestep projection.
    AllLayers,
}

/// Ordered list of adapted matrices with their shapes `(m, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub targets: Vec<(AdapterTarget, usize, usize)>,
}

impl AdapterLayout {
    pub fn for_model<T: Scalar>(
        model: &DenoiserModel<T>,
        placement: Placement,
        projections: &[Projection],
    ) -> Result<Self> {
        let targets = match placement {
            Placement::CrossAttention => model.attention_targets(projections),
            Placement::AllLayers => model.all_targets(),
        };
        if targets.is_empty() {
            return Err(Error::config("train.projections", "no matrices selected for adapters"));
        }
        Ok(Self {
            targets: targets
                .into_iter()
                .map(|t| {
                    let (m, n) = model.target_shape(t).expect("target listed by the model");
                    (t, m, n)
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn max_m(&self) -> usize {
        self.targets.iter().map(|t| t.1).max().unwrap_or(0)
    }

    pub fn max_n(&self) -> usize {
        self.targets.iter().map(|t| t.2).max().unwrap_or(0)
    }

    /// Verifies every target exists in `model` with the recorded shape.
    pub fn check_model<T: Scalar>(&self, model: &DenoiserModel<T>) -> Result<()> {
        for (t, m, n) in &self.targets {
            match model.target_shape(*t) {
                Some((mm, nn)) if mm == *m && nn == *n => {}
                Some((mm, nn)) => {
                    return Err(Error::AdapterShape { target: t.to_string(), m: mm, n: nn, got_m: *m, got_n: *n })
                }
                None => return Err(Error::TargetMismatch(t.to_string())),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<T> {
    pub target: AdapterTarget,
    /// Output-side vector, length `m`.
    pub p: Vec<T>,
    /// Input-side vector, length `n`.
    pub q: Vec<T>,
}

/// Adapter `M_d` of one category: a rank-1 pair on every matrix of the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeAdapter<T> {
    pub category: String,
    pub pairs: Vec<AdapterPair<T>>,
}

impl<T: Scalar> AttributeAdapter<T> {
    pub fn zeros(category: &str, layout: &AdapterLayout) -> Self {
        Self {
            category: category.to_string(),
            pairs: layout
                .targets
                .iter()
                .map(|&(target, m, n)| AdapterPair { target, p: vec![T::zero(); m], q: vec![T::zero(); n] })
                .collect(),
        }
    }

    /// `p = 0`, `q ~ N(0, q_std^2)`: an exact no-op until trained.
    pub fn init(category: &str, layout: &AdapterLayout, q_std: f64, rng: &mut impl Rng) -> Self {
        let mut a = Self::zeros(category, layout);
        for pair in &mut a.pairs {
            pair.q = normal_vec::<T>(rng, pair.q.len()).into_iter().map(|v| v * T::lit(q_std)).collect();
        }
        a
    }

    fn pair_for(&self, target: AdapterTarget) -> Option<&AdapterPair<T>> {
        self.pairs.iter().find(|p| p.target == target)
    }

    /// Column-stacked `(P, Q)`, shapes `[max_m, r]` and `[max_n, r]`, zero-padded at the end
    /// of shorter columns.
    pub fn stack(&self, layout: &AdapterLayout) -> Result<(Tensor<T>, Tensor<T>)> {
        let r = layout.len();
        let (mm, mn) = (layout.max_m(), layout.max_n());
        let mut p = Tensor::zeros(vec![mm, r]);
        let mut q = Tensor::zeros(vec![mn, r]);
        for (j, (target, m, n)) in layout.targets.iter().enumerate() {
            let pair = self.pair_for(*target).ok_or_else(|| Error::IncompleteAdapter {
                category: self.category.clone(),
                target: target.to_string(),
            })?;
            if pair.p.len() != *m || pair.q.len() != *n {
                return Err(Error::AdapterShape {
                    target: target.to_string(),
                    m: *m,
                    n: *n,
                    got_m: pair.p.len(),
                    got_n: pair.q.len(),
                });
            }
            for (i, v) in pair.p.iter().enumerate() {
                p.data_mut()[i * r + j] = *v;
            }
            for (i, v) in pair.q.iter().enumerate() {
                q.data_mut()[i * r + j] = *v;
            }
        }
        Ok((p, q))
    }

    /// Inverse of [`stack`](Self::stack): drops the padding.
    pub fn unstack(category: &str, layout: &AdapterLayout, p: &Tensor<T>, q: &Tensor<T>) -> Result<Self> {
        let r = layout.len();
        if p.shape() != [layout.max_m(), r] || q.shape() != [layout.max_n(), r] {
            return Err(Error::IncongruentBanks(format!(
                "stacked shapes {:?}/{:?} do not match layout",
                p.shape(),
                q.shape()
            )));
        }
        Ok(Self {
            category: category.to_string(),
            pairs: layout
                .targets
                .iter()
                .enumerate()
                .map(|(j, &(target, m, n))| AdapterPair {
                    target,
                    p: (0..m).map(|i| p.at(i, j)).collect(),
                    q: (0..n).map(|i| q.at(i, j)).collect(),
                })
                .collect(),
        })
    }

    /// Lazy patch `W + scale p q^T` on every adapted matrix.
    pub fn view(&self, scale: T) -> AdapterView<'_, T> {
        AdapterView::new(
            self.pairs.iter().map(|pair| RankOneTerm { target: pair.target, p: &pair.p, q: &pair.q, scale }).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.pairs.iter().all(|p| p.p.iter().chain(&p.q).all(|v| v.is_finite()))
    }
}

/// Adapters `[M_1 .. M_K]` of one attribute, in category order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank<T> {
    pub attribute: String,
    pub layout: AdapterLayout,
    pub adapters: Vec<AttributeAdapter<T>>,
}

impl<T: Scalar> AdapterBank<T> {
    pub fn new(
        attribute: &str,
        categories: &[String],
        layout: AdapterLayout,
        q_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::config(format!("attribute.{attribute}"), "an attribute needs at least two categories"));
        }
        let adapters = categories.iter().map(|c| AttributeAdapter::init(c, &layout, q_std, rng)).collect();
        Ok(Self { attribute: attribute.to_string(), layout, adapters })
    }

    pub fn zeros(attribute: &str, categories: &[String], layout: AdapterLayout) -> Self {
        Self {
            attribute: attribute.to_string(),
            adapters: categories.iter().map(|c| AttributeAdapter::zeros(c, &layout)).collect(),
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn categories(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.category.clone()).collect()
    }

    /// The adapter whose indicator entry is one.
    pub fn select(&self, h: &IndicatorVector) -> Result<&AttributeAdapter<T>> {
        if h.len() != self.len() {
            return Err(Error::Indicator(format!(
                "indicator has {} entries, bank `{}` has {} adapters",
                h.len(),
                self.attribute,
                self.len()
            )));
        }
        Ok(&self.adapters[h.index()])
    }

    /// Selection from a raw indicator vector, which must be one-hot.
    pub fn select_raw(&self, h: &[f64]) -> Result<&AttributeAdapter<T>> {
        self.select(&IndicatorVector::from_vec(h.to_vec())?)
    }

    pub fn check_congruent(&self, other: &AdapterBank<T>) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::IncongruentBanks(format!(
                "banks `{}` and `{}` adapt different matrices",
                self.attribute, other.attribute
            )));
        }
        Ok(())
    }
}

/// Validated lazy patch of `model` by one adapter at strength `alpha_scale`.
pub fn patch_weights<'a, T: Scalar>(
    model: &DenoiserModel<T>,
    adapter: &'a AttributeAdapter<T>,
    alpha_scale: T,
) -> Result<AdapterView<'a, T>> {
    let view = adapter.view(alpha_scale);
    model.check_view(&view)?;
    Ok(view)
}

/// How category slots of the current bank are matched against prior banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrthPairing {
    /// Slot `k` of the current bank against slot `k` of each prior bank, when it exists.
    #[default]
    Positional,
    /// Every current adapter against every prior adapter.
    AllPairs,
}

/// Gram matrices `sum P_i P_i^T` and `sum Q_i Q_i^T` over the prior adapters paired with `slot`.
fn prior_grams<T: Scalar>(
    prior: &[AdapterBank<T>],
    layout: &AdapterLayout,
    slot: usize,
    pairing: OrthPairing,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mm, mn) = (layout.max_m(), layout.max_n());
    let mut gp = Tensor::zeros(vec![mm, mm]);
    let mut gq = Tensor::zeros(vec![mn, mn]);
    for bank in prior {
        if &bank.layout != layout {
            return Err(Error::IncongruentBanks(format!("prior bank `{}` adapts different matrices", bank.attribute)));
        }
        let partners: Vec<&AttributeAdapter<T>> = match pairing {
            OrthPairing::Positional => bank.adapters.get(slot).into_iter().collect(),
            OrthPairing::AllPairs => bank.adapters.iter().collect(),
        };
        for a in partners {
            let (p, q) = a.stack(layout)?;
            let pp = p.matmul(&p.transpose())?;
            let qq = q.matmul(&q.transpose())?;
            for (d, s) in gp.data_mut().iter_mut().zip(pp.data()) {
                *d = *d + *s;
            }
            for (d, s) in gq.data_mut().iter_mut().zip(qq.data()) {
                *d = *d + *s;
            }
        }
    }
    Ok((gp, gq))
}

fn quad_and_grad<T: Scalar>(g: &Tensor<T>, v: &[T]) -> (T, Vec<T>) {
    // v is a prefix of the padded column; padding entries are zero.
    let n = g.cols();
    let mut gv = vec![T::zero(); v.len()];
    for (i, out) in gv.iter_mut().enumerate() {
        *out = dot(&g.data()[i * n..i * n + v.len()], v);
    }
    let value = dot(v, &gv);
    (value, gv.into_iter().map(|x| x + x).collect())
}

/// Penalty of the adapter in category `slot` against the prior banks, with its gradient per
/// pair `(dp, dq)`.
pub fn orthogonality_penalty<T: Scalar>(
    prior: &[AdapterBank<T>],
    adapter: &AttributeAdapter<T>,
    layout: &AdapterLayout,
    slot: usize,
    pairing: OrthPairing,
) -> Result<(T, Vec<(Vec<T>, Vec<T>)>)> {
    let (gp, gq) = prior_grams(prior, layout, slot, pairing)?;
    adapter.stack(layout)?;
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(adapter.pairs.len());
    for pair in &adapter.pairs {
        let (vp, dp) = quad_and_grad(&gp, &pair.p);
        let (vq, dq) = quad_and_grad(&gq, &pair.q);
        total = total + vp + vq;
        grads.push((dp, dq));
    }
    Ok((total, grads))
}

/// `sum ||P_a^T P_b||_F^2 + ||Q_a^T Q_b||_F^2` over paired prior adapters `a` and current adapters `b`.
pub fn orthogonality_loss<T: Scalar>(
    prior: &[AdapterBank<T>],
    current: &AdapterBank<T>,
    pairing: OrthPairing,
) -> Result<T> {
    let mut total = T::zero();
    for (slot, a) in current.adapters.iter().enumerate() {
        total = total + orthogonality_penalty(prior, a, &current.layout, slot, pairing)?.0;
    }
    Ok(total)
}

/// Expected penalty if every current column were replaced by a random vector of the same
/// norm, averaged over `draws` draws.
pub fn orthogonality_random_baseline<T: Scalar>(
    prior: &[AdapterBank<T>],
    current: &AdapterBank<T>,
    pairing: OrthPairing,
    draws: usize,
    rng: &mut impl Rng,
) -> Result<T> {
    let mut acc = T::zero();
    for _ in 0..draws.max(1) {
        let mut shadow = current.clone();
        for a in &mut shadow.adapters {
            for pair in &mut a.pairs {
                randomize_keep_norm(&mut pair.p, rng);
                randomize_keep_norm(&mut pair.q, rng);
            }
        }
        acc = acc + orthogonality_loss(prior, &shadow, pairing)?;
    }
    Ok(acc / T::lit(draws.max(1) as f64))
}

fn randomize_keep_norm<T: Scalar>(v: &mut [T], rng: &mut impl Rng) {
    let norm = dot(v, v).sqrt();
    let r: Vec<T> = normal_vec(rng, v.len());
    let rn = dot(&r, &r).sqrt();
    for (d, s) in v.iter_mut().zip(r) {
        *d = s / rn * norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GradMode, ModelConfig};
    use crate::rng::seeded;

    fn tiny_model() -> DenoiserModel<f64> {
        let cfg = ModelConfig {
            sample_dim: 3,
            tokens: 2,
            channels: 3,
            cond_tokens: 2,
            cond_dim: 2,
            attn_dim: 4,
            heads: 2,
            time_dim: 4,
            vocab_size: 3,
            ..ModelConfig::default()
        };
        DenoiserModel::init(cfg, &mut seeded(1)).unwrap()
    }

    fn random_adapter(layout: &AdapterLayout, seed: u64) -> AttributeAdapter<f64> {
        let mut rng = seeded(seed);
        let mut a = AttributeAdapter::zeros("x", layout);
        for pair in &mut a.pairs {
            pair.p = normal_vec(&mut rng, pair.p.len());
            pair.q = normal_vec(&mut rng, pair.q.len());
        }
        a
    }

    fn two_target_layout() -> AdapterLayout {
        AdapterLayout {
            targets: vec![
                (AdapterTarget::Attention { block: 1, proj: Projection::Q }, 3, 2),
                (AdapterTarget::Attention { block: 1, proj: Projection::K }, 2, 2),
            ],
        }
    }

    #[test]
    fn stack_pads_with_zero() {
        let layout = two_target_layout();
        let mut a = AttributeAdapter::<f64>::zeros("c", &layout);
        a.pairs[0].p = vec![1.0, 2.0, 3.0];
        a.pairs[1].p = vec![4.0, 5.0];
        let (p, q) = a.stack(&layout).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 0.0]);
        assert_eq!(q.shape(), &[2, 2]);
        assert!(q.data().iter().all(|v| *v == 0.0));
        let back = AttributeAdapter::unstack("c", &layout, &p, &q).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn stack_reports_missing_pair() {
        let layout = two_target_layout();
        let mut a = AttributeAdapter::<f64>::zeros("c", &layout);
        a.pairs.pop();
        assert!(matches!(a.stack(&layout), Err(Error::IncompleteAdapter { .. })));
    }

    #[test]
    fn selection_is_one_hot() {
        let model = tiny_model();
        let layout = AdapterLayout::for_model(&model, Placement::CrossAttention, &Projection::ALL).unwrap();
        let cats: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let mut bank = AdapterBank::zeros("attr", &cats, layout.clone());
        for (i, a) in bank.adapters.iter_mut().enumerate() {
            *a = AttributeAdapter { category: cats[i].clone(), ..random_adapter(&layout, i as u64) };
        }
        assert_eq!(bank.select_raw(&[0.0, 1.0, 0.0, 0.0]).unwrap().category, "b");
        assert_eq!(bank.select_raw(&[1.0, 0.0, 0.0, 0.0]).unwrap().category, "a");
        assert!(bank.select_raw(&[0.5, 0.5, 0.0, 0.0]).is_err());
        assert!(bank.select_raw(&[1.0, 0.0]).is_err());

        // Weighted-sum oracle: sum_i h_i M_i over stacked matrices equals the selection.
        let h = [0.0, 0.0, 1.0, 0.0];
        let (sp, sq) = bank.select_raw(&h).unwrap().stack(&layout).unwrap();
        let mut wp = Tensor::<f64>::zeros(sp.shape().to_vec());
        let mut wq = Tensor::<f64>::zeros(sq.shape().to_vec());
        for (hi, a) in h.iter().zip(&bank.adapters) {
            let (p, q) = a.stack(&layout).unwrap();
            for (d, s) in wp.data_mut().iter_mut().zip(p.data()) {
                *d += hi * s;
            }
            for (d, s) in wq.data_mut().iter_mut().zip(q.data()) {
                *d += hi * s;
            }
        }
        assert_eq!(wp, sp);
        assert_eq!(wq, sq);
    }

    #[test]
    fn zero_scale_patch_is_bitwise_noop() {
        let model = tiny_model();
        let layout = AdapterLayout::for_model(&model, Placement::AllLayers, &Projection::ALL).unwrap();
        let a = random_adapter(&layout, 4);
        let view = patch_weights(&model, &a, 0.0).unwrap();
        let x = [0.3, -0.2, 1.0];
        assert_eq!(model.forward(&x, 1, 7, None).unwrap(), model.forward(&x, 1, 7, Some(&view)).unwrap());
    }

    #[test]
    fn patch_matches_dense_oracle() {
        let model = tiny_model();
        let layout = AdapterLayout::for_model(&model, Placement::AllLayers, &Projection::ALL).unwrap();
        let a = random_adapter(&layout, 9);
        let alpha = 0.7;
        let view = patch_weights(&model, &a, alpha).unwrap();
        let mut dense = model.clone();
        for pair in &a.pairs {
            let layer = dense.layer_mut(pair.target).unwrap();
            let w = layer.weight().clone();
            let patched = Tensor::from_fn(w.rows(), w.cols(), |i, j| w.at(i, j) + alpha * pair.p[i] * pair.q[j]);
            *layer = crate::nn::LinearLayer::new(layer.name().to_string(), patched, layer.bias().cloned()).unwrap();
        }
        let x = [0.5, 1.5, -0.4];
        let y1 = model.forward(&x, 2, 3, Some(&view)).unwrap();
        let y2 = dense.forward(&x, 2, 3, None).unwrap();
        for (u, v) in y1.iter().zip(&y2) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn patch_rejects_foreign_layout() {
        let model = tiny_model();
        let layout = AdapterLayout { targets: vec![(AdapterTarget::Dense { block: 1 }, 6, 6)] };
        let a = AttributeAdapter::<f64>::zeros("c", &layout);
        assert!(matches!(patch_weights(&model, &a, 1.0), Err(Error::TargetMismatch(_))));
        assert!(layout.check_model(&model).is_err());
    }

    fn bank_from(layout: &AdapterLayout, seeds: &[u64]) -> AdapterBank<f64> {
        AdapterBank {
            attribute: "a".into(),
            layout: layout.clone(),
            adapters: seeds.iter().map(|s| random_adapter(layout, *s)).collect(),
        }
    }

    #[test]
    fn orthogonality_zero_cases() {
        let layout = two_target_layout();
        let prior = bank_from(&layout, &[1, 2]);
        let zero = AdapterBank::zeros("b", &["x".to_string(), "y".to_string()], layout.clone());
        assert_eq!(orthogonality_loss(std::slice::from_ref(&prior), &zero, OrthPairing::AllPairs).unwrap(), 0.0);

        // Prior lives on coordinate 0, current on coordinate 1.
        let mut p1 = AdapterBank::zeros("p", &["x".to_string(), "y".to_string()], layout.clone());
        let mut c1 = p1.clone();
        for a in &mut p1.adapters {
            for pair in &mut a.pairs {
                pair.p[0] = 1.0;
                pair.q[0] = -2.0;
            }
        }
        for a in &mut c1.adapters {
            for pair in &mut a.pairs {
                pair.p[1] = 3.0;
                pair.q[1] = 0.5;
            }
        }
        assert_eq!(orthogonality_loss(&[p1], &c1, OrthPairing::AllPairs).unwrap(), 0.0);
    }

    #[test]
    fn orthogonality_matches_dense_gram_oracle() {
        let layout = two_target_layout();
        let bank = bank_from(&layout, &[5, 6]);
        let got = orthogonality_loss(std::slice::from_ref(&bank), &bank, OrthPairing::AllPairs).unwrap();
        let mut expected = 0.0;
        for a in &bank.adapters {
            for b in &bank.adapters {
                let (pa, qa) = a.stack(&layout).unwrap();
                let (pb, qb) = b.stack(&layout).unwrap();
                expected += pa.transpose().matmul(&pb).unwrap().frobenius_sq();
                expected += qa.transpose().matmul(&qb).unwrap().frobenius_sq();
            }
        }
        assert!((got - expected).abs() < 1e-10 * expected.max(1.0));
        // With a bank compared against itself only, the diagonal reduces to ||P^T P||^2 + ||Q^T Q||^2.
        let single = AdapterBank { adapters: vec![bank.adapters[0].clone()], ..bank.clone() };
        let (p, q) = single.adapters[0].stack(&layout).unwrap();
        let diag = p.transpose().matmul(&p).unwrap().frobenius_sq() + q.transpose().matmul(&q).unwrap().frobenius_sq();
        let got = orthogonality_loss(std::slice::from_ref(&single), &single, OrthPairing::Positional).unwrap();
        assert!((got - diag).abs() < 1e-10 * diag);
        // Positional pairing on a two-slot bank keeps only the diagonal slot pairs.
        let got = orthogonality_loss(std::slice::from_ref(&bank), &bank, OrthPairing::Positional).unwrap();
        let mut expected = 0.0;
        for a in &bank.adapters {
            let (p, q) = a.stack(&layout).unwrap();
            expected +=
                p.transpose().matmul(&p).unwrap().frobenius_sq() + q.transpose().matmul(&q).unwrap().frobenius_sq();
        }
        assert!((got - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn orthogonality_gradient_matches_finite_differences() {
        let layout = two_target_layout();
        let prior = vec![bank_from(&layout, &[1, 2]), bank_from(&layout, &[3])];
        let mut adapter = random_adapter(&layout, 10);
        let (_, grads) = orthogonality_penalty(&prior, &adapter, &layout, 0, OrthPairing::AllPairs).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .iter()
            .enumerate()
            .flat_map(|(j, (dp, dq))| [(format!("{j}.p"), dp.clone()), (format!("{j}.q"), dq.clone())])
            .collect();
        let report = crate::nn::grad_check(&analytic, 1e-5, 1e-4, |g, i, d| {
            let (pair, is_q) = (g / 2, g % 2 == 1);
            let v = if is_q { &mut adapter.pairs[pair].q } else { &mut adapter.pairs[pair].p };
            v[i] += d;
            let val = orthogonality_penalty(&prior, &adapter, &layout, 0, OrthPairing::AllPairs).unwrap().0;
            let v = if is_q { &mut adapter.pairs[pair].q } else { &mut adapter.pairs[pair].p };
            v[i] -= d;
            val
        });
        assert!(report.passed, "{report}");
    }

    #[test]
    fn incongruent_banks_rejected() {
        let layout = two_target_layout();
        let other = AdapterLayout { targets: vec![layout.targets[0]] };
        let prior = bank_from(&other, &[1]);
        let cur = bank_from(&layout, &[2]);
        assert!(matches!(orthogonality_loss(&[prior], &cur, OrthPairing::Positional), Err(Error::IncongruentBanks(_))));
    }

    #[test]
    fn adapter_only_backward_has_no_trunk_keys() {
        let model = tiny_model();
        let layout = AdapterLayout::for_model(&model, Placement::CrossAttention, &Projection::ALL).unwrap();
        let a = random_adapter(&layout, 3);
        let view = a.view(1.0);
        let (y, mut tape) = model.forward_train(&[0.1, 0.2, 0.3], 1, 2, Some(&view), GradMode::AdapterOnly).unwrap();
        let g = tape.backward(&y).unwrap();
        assert!(g.model.is_none());
        assert!(g.keys().iter().all(|k| k.starts_with("adapter.")));
        assert!(matches!(tape.backward(&y), Err(Error::StaleTape)));
    }
}
