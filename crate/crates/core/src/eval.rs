//! Fairness discrepancy against the exact Bayes oracle, distribution-fidelity metrics and
//! benchmark tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::DistributionSpec;
use crate::rng::{derive_seed, seeded};
use crate::world::SyntheticWorld;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub attribute: String,
    pub target: Vec<f64>,
    /// Mean oracle posterior over the samples.
    pub mean_posterior: Vec<f64>,
    pub fd: f64,
    pub n: usize,
    /// 95% percentile bootstrap interval, widened if needed to contain `fd`.
    pub ci: [f64; 2],
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_rows(rows: &[Vec<f64>], pick: impl Iterator<Item = usize>, k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    let mut n = 0usize;
    for i in pick {
        for (a, b) in m.iter_mut().zip(&rows[i]) {
            *a += b;
        }
        n += 1;
    }
    m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    m
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// FD from precomputed posterior vectors.
pub fn fd_from_posteriors(attribute: &str, posteriors: &[Vec<f64>], target: &[f64], seed: u64) -> Result<FdReport> {
    if posteriors.is_empty() {
        return Err(Error::Distribution(format!("no samples to score for `{attribute}`")));
    }
    let k = target.len();
    if let Some(bad) = posteriors.iter().find(|p| p.len() != k) {
        return Err(Error::Dimension { what: format!("posterior for `{attribute}`"), expected: k, got: bad.len() });
    }
    let n = posteriors.len();
    let mean = mean_rows(posteriors, 0..n, k);
    let fd = l2(target, &mean);
    let mut rng = seeded(derive_seed(seed, 0x6664, 0));
    let mut boots: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            l2(target, &mean_rows(posteriors, idx.into_iter(), k))
        })
        .collect();
    boots.sort_by(f64::total_cmp);
    let ci = [quantile(&boots, 0.025).min(fd), quantile(&boots, 0.975).max(fd)];
    Ok(FdReport { attribute: attribute.to_string(), target: target.to_vec(), mean_posterior: mean, fd, n, ci })
}

/// `|| target - E[posterior] ||_2` with the posterior of the exact Bayes oracle.
pub fn fd_score(
    samples: &[Vec<f64>],
    target: &DistributionSpec,
    world: &SyntheticWorld,
    seed: u64,
) -> Result<FdReport> {
    let k = world.attribute(&target.attribute)?.len();
    if k != target.len() {
        return Err(Error::Dimension {
            what: format!("target for `{}`", target.attribute),
            expected: k,
            got: target.len(),
        });
    }
    let posts = samples.iter().map(|x| world.bayes_posterior(x, &target.attribute)).collect::<Result<Vec<_>>>()?;
    fd_from_posteriors(&target.attribute, &posts, &target.pmf, seed)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    l2(a, b)
}

fn mean_cross(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += dist(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

fn mean_within(a: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            s += dist(&a[i], &a[j]);
        }
    }
    2.0 * s / (a.len() * a.len()) as f64
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic, so identical sets give 0).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Distribution("energy distance of an empty sample set".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    Ok((2.0 * mean_cross(a, b) - mean_within(a) - mean_within(b)).max(0.0))
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased squared MMD with an RBF kernel. `bandwidth = None` uses the median pairwise
/// distance of the pooled sample.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Option<f64>) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Distribution("MMD needs at least two samples per set".into()));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => {
            let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
            let mut d: Vec<f64> = Vec::new();
            let stride = (pooled.len() / 200).max(1);
            for i in (0..pooled.len()).step_by(stride) {
                for j in (i + 1..pooled.len()).step_by(stride) {
                    d.push(sq(pooled[i], pooled[j]).sqrt());
                }
            }
            d.sort_by(f64::total_cmp);
            d[d.len() / 2].max(1e-12)
        }
    };
    let k = |x: &[f64], y: &[f64]| (-sq(x, y) / (2.0 * h * h)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    cross /= (a.len() * b.len()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFidelity {
    /// Category names of the component, joined with `+`.
    pub component: String,
    pub n: usize,
    /// `None` when the component received fewer samples than the minimum.
    pub energy_distance: Option<f64>,
    pub undersampled: bool,
}

/// Energy distance between generated samples and ground truth, per oracle-assigned
/// component. Lower is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_component: Vec<CategoryFidelity>,
    /// Mean over components that were not undersampled; `None` if none were scored.
    pub mean: Option<f64>,
}

impl FidelityReport {
    pub fn get(&self, component: &str) -> Option<&CategoryFidelity> {
        self.per_component.iter().find(|c| c.component == component)
    }
}

pub const MIN_FIDELITY_SAMPLES: usize = 30;

pub fn component_label(world: &SyntheticWorld, combo: &[usize]) -> String {
    world.attributes().iter().zip(combo).map(|(a, c)| a.categories[*c].as_str()).collect::<Vec<_>>().join("+")
}

/// Assigns every sample to its most probable component and compares each component's
/// samples to `reference` fresh ground-truth draws.
pub fn fidelity_score(
    samples: &[Vec<f64>],
    world: &SyntheticWorld,
    reference: usize,
    seed: u64,
) -> Result<FidelityReport> {
    let mut by: BTreeMap<Vec<usize>, Vec<Vec<f64>>> = BTreeMap::new();
    for x in samples {
        by.entry(world.classify(x)).or_default().push(x.clone());
    }
    let mut per_component = Vec::new();
    for (idx, comp) in world.components().iter().enumerate() {
        let group = by.remove(&comp.combo).unwrap_or_default();
        let label = component_label(world, &comp.combo);
        if group.len() < MIN_FIDELITY_SAMPLES {
            if !group.is_empty() {
                log::warn!("component {label} has only {} samples; fidelity not scored", group.len());
            }
            per_component.push(CategoryFidelity {
                component: label,
                n: group.len(),
                energy_distance: None,
                undersampled: true,
            });
            continue;
        }
        let mut rng = seeded(derive_seed(seed, 0x6669, idx as u64));
        let truth =
            (0..reference).map(|_| world.sample_component(&comp.combo, &mut rng)).collect::<Result<Vec<_>>>()?;
        per_component.push(CategoryFidelity {
            component: label,
            n: group.len(),
            energy_distance: Some(energy_distance(&group, &truth)?),
            undersampled: false,
        });
    }
    let scored: Vec<f64> = per_component.iter().filter_map(|c| c.energy_distance).collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(FidelityReport { per_component, mean })
}

/// Empirical category frequencies of `attribute` under the oracle's hard decision.
pub fn category_frequencies(samples: &[Vec<f64>], world: &SyntheticWorld, attribute: &str) -> Result<Vec<f64>> {
    let a = world.attribute_index(attribute)?;
    let k = world.attributes()[a].len();
    let mut f = vec![0.0; k];
    for x in samples {
        f[world.classify(x)[a]] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= samples.len().max(1) as f64);
    Ok(f)
}

/// One method variant: FD per attribute target plus fidelity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub variant: String,
    pub run: String,
    pub fd: BTreeMap<String, f64>,
    pub fd_ci: BTreeMap<String, [f64; 2]>,
    pub fidelity: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn attributes(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rows.iter().flat_map(|r| r.fd.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// CSV with one FD column per attribute. Fidelity is an energy distance (lower is better).
    pub fn to_csv(&self) -> String {
        let attrs = self.attributes();
        let mut out = String::from("variant,run");
        for a in &attrs {
            let _ = write!(out, ",fd_{a},fd_{a}_lo,fd_{a}_hi");
        }
        out.push_str(",fidelity_energy_distance,seed,config_hash\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.variant, r.run);
            for a in &attrs {
                match (r.fd.get(a), r.fd_ci.get(a)) {
                    (Some(v), Some(ci)) => {
                        let _ = write!(out, ",{v:.6},{:.6},{:.6}", ci[0], ci[1]);
                    }
                    (Some(v), None) => {
                        let _ = write!(out, ",{v:.6},,");
                    }
                    _ => out.push_str(",,,"),
                }
            }
            match r.fidelity {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push(','),
            }
            let _ = writeln!(out, ",{},{}", r.seed, r.config_hash);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
