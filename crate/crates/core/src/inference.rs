//! Indicator sampling from prescribed distributions, adapter view composition and
//! batch generation.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterBank;
use crate::diffusion::{sample_final, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{AdapterView, DenoiserModel};
use crate::rng::{derive_seed, seeded};
use crate::world::{check_pmf, sample_categorical, ConditionVocab};

/// Target distribution over the categories of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub attribute: String,
    pub pmf: Vec<f64>,
}

impl DistributionSpec {
    pub fn new(attribute: &str, pmf: Vec<f64>) -> Result<Self> {
        let spec = Self { attribute: attribute.to_string(), pmf };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_pmf(&self.pmf, self.pmf.len()).map_err(|m| Error::Distribution(format!("`{}`: {m}", self.attribute)))?;
        if self.pmf.len() < 2 {
            return Err(Error::Distribution(format!("`{}` needs at least two categories", self.attribute)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }
}

pub fn uniform_pmf(attribute: &str, k: usize) -> Result<DistributionSpec> {
    if k < 2 {
        return Err(Error::Distribution(format!("uniform target over {k} categories")));
    }
    DistributionSpec::new(attribute, vec![1.0 / k as f64; k])
}

/// One-hot selector `h` with `h[index] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorVector {
    h: Vec<f64>,
    index: usize,
}

impl IndicatorVector {
    pub fn one_hot(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::Indicator(format!("index {index} out of range for {k} categories")));
        }
        let mut h = vec![0.0; k];
        h[index] = 1.0;
        Ok(Self { h, index })
    }

    /// Validates that `h` is exactly one-hot.
    pub fn from_vec(h: Vec<f64>) -> Result<Self> {
        let ones: Vec<usize> = h.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
        let zeros = h.iter().filter(|v| **v == 0.0).count();
        if ones.len() != 1 || zeros + 1 != h.len() {
            return Err(Error::Indicator(format!("{h:?} is not one-hot")));
        }
        Ok(Self { index: ones[0], h })
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

pub fn sample_indicator(spec: &DistributionSpec, rng: &mut impl Rng) -> Result<IndicatorVector> {
    spec.validate()?;
    IndicatorVector::one_hot(sample_categorical(&spec.pmf, rng), spec.len())
}

/// Sum of the selected rank-1 terms of every attribute. Terms are merged in attribute-name
/// order, so the result does not depend on the order of `selections`.
pub fn compose_views<'a>(
    model: &DenoiserModel<f64>,
    selections: &[(&'a AdapterBank<f64>, &IndicatorVector)],
    alpha_scale: f64,
) -> Result<AdapterView<'a, f64>> {
    let mut seen = BTreeSet::new();
    for (bank, _) in selections {
        if !seen.insert(bank.attribute.as_str()) {
            return Err(Error::DuplicateAttribute(bank.attribute.clone()));
        }
    }
    if let Some((first, _)) = selections.first() {
        for (bank, _) in &selections[1..] {
            first.check_congruent(bank)?;
        }
    }
    let mut ordered: Vec<_> = selections.to_vec();
    ordered.sort_by(|a, b| a.0.attribute.cmp(&b.0.attribute));
    let mut views = Vec::with_capacity(ordered.len());
    for (bank, h) in ordered {
        views.push(bank.select(h)?.view(alpha_scale));
    }
    let view = AdapterView::merge(views);
    model.check_view(&view)?;
    Ok(view)
}

/// One generated sample with everything needed to audit and replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub index: usize,
    pub seed: u64,
    pub group: String,
    /// Attribute name to the category whose adapter was applied.
    pub chosen: BTreeMap<String, String>,
    pub z0: Vec<f64>,
    pub config_hash: String,
}

/// Everything about a batch except the model and banks.
#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub group: &'a str,
    pub n: usize,
    pub guidance_scale: f64,
    pub alpha_scale: f64,
    pub seed: u64,
    pub config_hash: &'a str,
    pub threads: usize,
}

const STREAM_RECORD: u64 = 0x4745_4e;
const STREAM_INDICATOR: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Draws `n` records. Record `i` uses child seed `derive_seed(seed, .., i)`, with separate
/// streams for indicators and sampler noise, so output is independent of `threads`.
pub fn generate_batch(
    model: &DenoiserModel<f64>,
    sched: &NoiseSchedule<f64>,
    vocab: &ConditionVocab,
    specs: &[DistributionSpec],
    banks: &[AdapterBank<f64>],
    req: &GenerationRequest<'_>,
) -> Result<Vec<GenerationRecord>> {
    let cond = vocab.id(req.group)?;
    let mut pairs = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let bank = banks
            .iter()
            .find(|b| b.attribute == spec.attribute)
            .ok_or_else(|| Error::UnknownAttribute(spec.attribute.clone()))?;
        if bank.len() != spec.len() {
            return Err(Error::Distribution(format!(
                "target for `{}` has {} entries, bank has {} adapters",
                spec.attribute,
                spec.len(),
                bank.len()
            )));
        }
        pairs.push((spec, bank));
    }
    let one = |index: usize| -> Result<GenerationRecord> {
        let seed = derive_seed(req.seed, STREAM_RECORD, index as u64);
        let mut ind_rng = seeded(derive_seed(seed, STREAM_INDICATOR, 0));
        let mut noise_rng = seeded(derive_seed(seed, STREAM_NOISE, 0));
        let mut indicators = Vec::with_capacity(pairs.len());
        let mut chosen = BTreeMap::new();
        for (spec, bank) in &pairs {
            let h = sample_indicator(spec, &mut ind_rng)?;
            chosen.insert(spec.attribute.clone(), bank.adapters[h.index()].category.clone());
            indicators.push(h);
        }
        let selections: Vec<_> = pairs.iter().map(|(_, b)| *b).zip(indicators.iter()).collect();
        let view = compose_views(model, &selections, req.alpha_scale)?;
        let view = (!view.is_empty()).then_some(view);
        let z0 =
            sample_final(model, model.sample_dim(), cond, sched, req.guidance_scale, view.as_ref(), &mut noise_rng)?;
        Ok(GenerationRecord {
            index,
            seed,
            group: req.group.to_string(),
            chosen,
            z0,
            config_hash: req.config_hash.to_string(),
        })
    };
    parallel_map(req.n, req.threads, one)
}

/// Evaluates `f(0..n)` on up to `threads` scoped workers, keeping index order.
pub fn parallel_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let lo = (w * chunk).min(n);
                let hi = ((w + 1) * chunk).min(n);
                s.spawn(move || (lo..hi).map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
