//! Gaussian-mixture ground truth with labelled attributes, biased group sampling and the
//! exact Bayes posterior used as the attribute classifier.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

const PMF_TOL: f64 = 1e-9;
const PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub categories: Vec<String>,
}

impl AttributeSpec {
    pub fn new(name: &str, categories: &[&str]) -> Self {
        Self { name: name.to_string(), categories: categories.iter().map(|c| c.to_string()).collect() }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(Error::config(
                format!("world.attributes.{}", self.name),
                "an attribute needs at least two categories",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !seen.insert(c) {
                return Err(Error::config(
                    format!("world.attributes.{}", self.name),
                    format!("duplicate category `{c}`"),
                ));
            }
        }
        Ok(())
    }
}

/// A generation condition whose data is biased: the category distribution is the product of
/// per-attribute marginals (uniform for attributes not listed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    #[serde(default)]
    pub marginals: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub dim: usize,
    pub attributes: Vec<AttributeSpec>,
    pub groups: Vec<GroupSpec>,
    /// Norm of each per-category offset; a component mean is the sum of its offsets.
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Minimum distance between component means, in units of `std`.
    #[serde(default = "default_separation")]
    pub min_separation: f64,
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_spread() -> f64 {
    5.0
}
fn default_separation() -> f64 {
    6.0
}
fn default_std() -> f64 {
    1.0
}

impl WorldSpec {
    /// One binary attribute, 80/20 under group `worker`.
    pub fn two_category() -> Self {
        Self {
            dim: 2,
            attributes: vec![AttributeSpec::new("gender", &["male", "female"])],
            groups: vec![GroupSpec {
                name: "worker".into(),
                marginals: BTreeMap::from([("gender".to_string(), vec![0.8, 0.2])]),
            }],
            spread: default_spread(),
            min_separation: default_separation(),
            std: 1.0,
            seed: 1,
        }
    }

    /// Binary attribute biased 80/20 and a four-way attribute biased 70/10/10/10.
    pub fn benchmark() -> Self {
        Self {
            dim: 4,
            attributes: vec![
                AttributeSpec::new("gender", &["male", "female"]),
                AttributeSpec::new("race", &["white", "asian", "black", "indian"]),
            ],
            groups: vec![GroupSpec {
                name: "worker".into(),
                marginals: BTreeMap::from([
                    ("gender".to_string(), vec![0.8, 0.2]),
                    ("race".to_string(), vec![0.7, 0.1, 0.1, 0.1]),
                ]),
            }],
            spread: default_spread(),
            min_separation: default_separation(),
            std: 1.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("world.dim", "must be positive"));
        }
        if self.attributes.is_empty() {
            return Err(Error::config("world.attributes", "at least one attribute required"));
        }
        if !(self.std > 0.0) {
            return Err(Error::config("world.std", "must be positive"));
        }
        if !(self.spread > 0.0) {
            return Err(Error::config("world.spread", "must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.attributes {
            a.validate()?;
            if !names.insert(&a.name) {
                return Err(Error::config("world.attributes", format!("duplicate attribute `{}`", a.name)));
            }
        }
        let mut gnames = std::collections::BTreeSet::new();
        for g in &self.groups {
            if g.name.is_empty() || !gnames.insert(&g.name) {
                return Err(Error::config("world.groups", format!("bad or duplicate group name `{}`", g.name)));
            }
            for (attr, pmf) in &g.marginals {
                let spec = self.attributes.iter().find(|a| &a.name == attr).ok_or_else(|| {
                    Error::config(format!("world.groups.{}.marginals", g.name), format!("unknown attribute `{attr}`"))
                })?;
                check_pmf(pmf, spec.len())
                    .map_err(|m| Error::config(format!("world.groups.{}.marginals.{attr}", g.name), m))?;
            }
        }
        Ok(())
    }
}

/// Checks length, non-negativity and normalisation of a PMF.
pub fn check_pmf(pmf: &[f64], k: usize) -> std::result::Result<(), String> {
    if pmf.len() != k {
        return Err(format!("expected {k} probabilities, got {}", pmf.len()));
    }
    if pmf.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let s: f64 = pmf.iter().sum();
    if (s - 1.0).abs() > PMF_TOL {
        return Err(format!("probabilities sum to {s}, not 1"));
    }
    Ok(())
}

/// Dense token ids: `""` is 0, then groups, then `attribute:category` names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVocab {
    tokens: Vec<String>,
}

impl ConditionVocab {
    pub fn new(spec: &WorldSpec) -> Self {
        let mut tokens = vec![String::new()];
        tokens.extend(spec.groups.iter().map(|g| g.name.clone()));
        for a in &spec.attributes {
            tokens.extend(a.categories.iter().map(|c| Self::category_token(&a.name, c)));
        }
        Self { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn category_token(attribute: &str, category: &str) -> String {
        format!("{attribute}:{category}")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens.iter().position(|t| t == token).ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::UnknownCondition(id))
    }
}

/// One mixture component: a full category combination and its mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub combo: Vec<usize>,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    spec: WorldSpec,
    components: Vec<Component>,
    group_pmfs: BTreeMap<String, Vec<f64>>,
    vocab: ConditionVocab,
}

/// Samples with ground-truth labels and the condition id used for training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<Vec<usize>>,
    pub conditions: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn random_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Places component means from `spec.seed` and builds group PMFs.
pub fn make_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let combos = all_combos(&spec.attributes);
    let min_d2 = (spec.min_separation * spec.std).powi(2);
    for _ in 0..PLACEMENT_TRIES {
        let offsets: Vec<Vec<Vec<f64>>> = spec
            .attributes
            .iter()
            .map(|a| {
                (0..a.len())
                    .map(|_| random_direction(&mut rng, spec.dim).into_iter().map(|x| x * spec.spread).collect())
                    .collect()
            })
            .collect();
        let components: Vec<Component> = combos
            .iter()
            .map(|combo| {
                let mut mean = vec![0.0; spec.dim];
                for (a, &k) in combo.iter().enumerate() {
                    for (m, o) in mean.iter_mut().zip(&offsets[a][k]) {
                        *m += o;
                    }
                }
                Component { combo: combo.clone(), mean }
            })
            .collect();
        let separated = components
            .iter()
            .enumerate()
            .all(|(i, a)| components[i + 1..].iter().all(|b| sq_dist(&a.mean, &b.mean) >= min_d2));
        if separated {
            return SyntheticWorld::from_components(spec.clone(), components);
        }
    }
    Err(Error::config(
        "world.min_separation",
        format!(
            "could not place {} components {}σ apart in {} dimensions with spread {}",
            combos.len(),
            spec.min_separation,
            spec.dim,
            spec.spread
        ),
    ))
}

fn all_combos(attrs: &[AttributeSpec]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for a in attrs {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..a.len()).map(move |k| {
                    let mut c = prefix.clone();
                    c.push(k);
                    c
                })
            })
            .collect();
    }
    out
}

impl SyntheticWorld {
    /// Builds a world from explicit components in any storage order.
    pub fn from_components(spec: WorldSpec, components: Vec<Component>) -> Result<Self> {
        spec.validate()?;
        let expected = all_combos(&spec.attributes).len();
        if components.len() != expected {
            return Err(Error::config("world.components", format!("expected {expected} components")));
        }
        for c in &components {
            if c.mean.len() != spec.dim || c.combo.len() != spec.attributes.len() {
                return Err(Error::config("world.components", "component shape does not match dim/attributes"));
            }
        }
        let mut group_pmfs = BTreeMap::new();
        for g in &spec.groups {
            let pmf: Vec<f64> = components
                .iter()
                .map(|c| {
                    c.combo
                        .iter()
                        .zip(&spec.attributes)
                        .map(|(&k, a)| match g.marginals.get(&a.name) {
                            Some(m) => m[k],
                            None => 1.0 / a.len() as f64,
                        })
                        .product()
                })
                .collect();
            group_pmfs.insert(g.name.clone(), pmf);
        }
        let vocab = ConditionVocab::new(&spec);
        Ok(Self { spec, components, group_pmfs, vocab })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn std(&self) -> f64 {
        self.spec.std
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn vocab(&self) -> &ConditionVocab {
        &self.vocab
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.spec.attributes
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.spec
            .attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeSpec> {
        Ok(&self.spec.attributes[self.attribute_index(name)?])
    }

    /// Joint PMF of a group over components (in storage order).
    pub fn group_pmf(&self, group: &str) -> Result<&[f64]> {
        self.group_pmfs.get(group).map(Vec::as_slice).ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    /// Marginal category PMF of `attribute` under `group`.
    pub fn group_marginal(&self, group: &str, attribute: &str) -> Result<Vec<f64>> {
        let a = self.attribute_index(attribute)?;
        let joint = self.group_pmf(group)?;
        let mut out = vec![0.0; self.spec.attributes[a].len()];
        for (c, p) in self.components.iter().zip(joint) {
            out[c.combo[a]] += p;
        }
        Ok(out)
    }

    pub fn group_id(&self, group: &str) -> Result<usize> {
        self.group_pmf(group)?;
        self.vocab.id(group)
    }

    pub fn category_id(&self, attribute: &str, category: usize) -> Result<usize> {
        let a = self.attribute(attribute)?;
        let cat = a
            .categories
            .get(category)
            .ok_or_else(|| Error::config(format!("attribute.{attribute}"), format!("no category {category}")))?;
        self.vocab.id(&ConditionVocab::category_token(attribute, cat))
    }

    pub fn component_of(&self, combo: &[usize]) -> Option<&Component> {
        self.components.iter().find(|c| c.combo == combo)
    }

    /// Draws one point from the component with the given combination.
    pub fn sample_component(&self, combo: &[usize], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let c = self.component_of(combo).ok_or_else(|| Error::config("combo", format!("no component {combo:?}")))?;
        Ok(c.mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.spec.std * z
            })
            .collect())
    }

    /// Posterior over components under equal component priors.
    pub fn joint_posterior(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.spec.std * self.spec.std);
        let logits: Vec<f64> = self.components.iter().map(|c| -sq_dist(x, &c.mean) * inv).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Exact `P(category | x)` for one attribute, marginalised over the others.
    pub fn bayes_posterior(&self, x: &[f64], attribute: &str) -> Result<Vec<f64>> {
        let a = self.attribute_index(attribute)?;
        Ok(self.posterior_by_index(x, a))
    }

    pub(crate) fn posterior_by_index(&self, x: &[f64], a: usize) -> Vec<f64> {
        let joint = self.joint_posterior(x);
        let mut out = vec![0.0; self.spec.attributes[a].len()];
        for (c, p) in self.components.iter().zip(joint) {
            out[c.combo[a]] += p;
        }
        out
    }

    /// Most probable full category combination.
    pub fn classify(&self, x: &[f64]) -> Vec<usize> {
        let joint = self.joint_posterior(x);
        let best = joint
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if *p > acc.1 { (i, *p) } else { acc })
            .0;
        self.components[best].combo.clone()
    }

    /// Draws `n` labelled samples of `group`; the condition of every sample is the group token.
    pub fn sample_dataset(&self, group: &str, n: usize, rng: &mut impl Rng) -> Result<LabeledDataset> {
        let pmf = self.group_pmf(group)?;
        let cond = self.vocab.id(group)?;
        let mut ds = LabeledDataset::default();
        for _ in 0..n {
            let idx = sample_categorical(pmf, rng);
            let comp = &self.components[idx];
            ds.samples.push(self.sample_component(&comp.combo, rng)?);
            ds.labels.push(comp.combo.clone());
            ds.conditions.push(cond);
        }
        Ok(ds)
    }
}

/// Inverse-CDF draw from a normalised PMF.
pub fn sample_categorical(pmf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in pmf.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Convenience wrapper mirroring the operation name.
pub fn sample_dataset(world: &SyntheticWorld, group: &str, n: usize, rng: &mut impl Rng) -> Result<LabeledDataset> {
    world.sample_dataset(group, n, rng)
}
