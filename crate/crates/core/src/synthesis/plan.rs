use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::{Persona, SynthesisError};
use crate::corpus::{one_hot, Corpus};
use crate::kmeans::{squared_distance, KMeans};
use crate::seed::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub clusters: usize,
    pub representatives: usize,
    pub disagreers: usize,
    /// Fixed per-instance quota; `None` uses the instance's real annotation count.
    pub per_instance: Option<usize>,
    pub max_iter: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { clusters: 10, representatives: 20, disagreers: 20, per_instance: None, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum GenerationStrategy {
    /// ⌈n/2⌉ personas per instance.
    HalfX,
    /// n personas per instance.
    OneX,
    /// Tops each instance up to `max_per_instance` (observed maximum when unset).
    Fill { max_per_instance: Option<usize> },
    Cluster(ClusterParams),
}

impl GenerationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            GenerationStrategy::HalfX => "half_x",
            GenerationStrategy::OneX => "one_x",
            GenerationStrategy::Fill { .. } => "fill",
            GenerationStrategy::Cluster(_) => "cluster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub instance_id: String,
    /// Real annotations on the instance.
    pub n_real: usize,
    pub personas: Vec<String>,
    /// Leading entries of `personas` drawn from representatives (cluster strategy).
    pub n_representatives: usize,
    /// The pool was smaller than the request, so some personas repeat.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub strategy: GenerationStrategy,
    pub seed: u64,
    pub entries: Vec<PlanEntry>,
    pub representative_personas: Vec<String>,
    pub disagreer_personas: Vec<String>,
}

impl GenerationPlan {
    pub fn total_requests(&self) -> usize {
        self.entries.iter().map(|e| e.personas.len()).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().flat_map(|e| e.personas.iter().map(move |p| (e.instance_id.as_str(), p.as_str())))
    }
}

/// Assigns personas to instances. Random strategies sample uniformly without
/// replacement from `pool`; the cluster strategy draws from representative and
/// disagreeing annotators found by k-means over annotator features.
pub fn plan_generation(
    corpus: &Corpus,
    pool: &[Persona],
    strategy: GenerationStrategy,
    seed: u64,
) -> Result<GenerationPlan, SynthesisError> {
    if pool.is_empty() {
        return Err(SynthesisError::NoProfiles);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in corpus.records.iter().filter(|r| !r.is_synthetic) {
        *counts.entry(r.instance_id.as_str()).or_default() += 1;
    }
    let mut rng = seed::stream(seed, seed::GENERATION);
    let ids: Vec<&str> = pool.iter().map(|p| p.persona_id.as_str()).collect();
    let mut plan = GenerationPlan {
        strategy,
        seed,
        entries: Vec::with_capacity(counts.len()),
        representative_personas: Vec::new(),
        disagreer_personas: Vec::new(),
    };

    match strategy {
        GenerationStrategy::HalfX | GenerationStrategy::OneX | GenerationStrategy::Fill { .. } => {
            let observed_max = counts.values().copied().max().unwrap_or(0);
            for (&instance, &n) in &counts {
                let quota = match strategy {
                    GenerationStrategy::HalfX => n.div_ceil(2),
                    GenerationStrategy::OneX => n,
                    GenerationStrategy::Fill { max_per_instance } => {
                        max_per_instance.unwrap_or(observed_max).saturating_sub(n)
                    }
                    GenerationStrategy::Cluster(_) => unreachable!(),
                };
                let (personas, short) = draw(&mut rng, &ids, quota);
                plan.entries.push(PlanEntry {
                    instance_id: instance.to_string(),
                    n_real: n,
                    personas,
                    n_representatives: 0,
                    short,
                });
            }
        }
        GenerationStrategy::Cluster(params) => {
            let (reps, dis) = cluster_sets(corpus, pool, &params, seed)?;
            for (&instance, &n) in &counts {
                let quota = params.per_instance.unwrap_or(n);
                let n_rep = quota.div_ceil(2);
                let (mut personas, short_a) = draw(&mut rng, &reps, n_rep);
                let (rest, short_b) = draw(&mut rng, &dis, quota - n_rep);
                personas.extend(rest);
                plan.entries.push(PlanEntry {
                    instance_id: instance.to_string(),
                    n_real: n,
                    personas,
                    n_representatives: n_rep,
                    short: short_a || short_b,
                });
            }
            plan.representative_personas = reps.iter().map(|s| s.to_string()).collect();
            plan.disagreer_personas = dis.iter().map(|s| s.to_string()).collect();
        }
    }
    Ok(plan)
}

/// `quota` ids without replacement; when the pool is too small, whole shuffled
/// passes are concatenated and the draw is flagged short.
fn draw(rng: &mut StreamRng, ids: &[&str], quota: usize) -> (Vec<String>, bool) {
    if quota == 0 || ids.is_empty() {
        return (Vec::new(), quota > 0);
    }
    let mut out = Vec::with_capacity(quota);
    while out.len() < quota {
        let take = (quota - out.len()).min(ids.len());
        out.extend(ids.choose_multiple(rng, take).map(|s| s.to_string()));
    }
    (out, quota > ids.len())
}

/// Representative and disagreeing persona ids (disjoint).
fn cluster_sets<'p>(
    corpus: &Corpus,
    pool: &'p [Persona],
    params: &ClusterParams,
    seed: u64,
) -> Result<(Vec<&'p str>, Vec<&'p str>), SynthesisError> {
    if params.clusters == 0 || params.representatives == 0 || params.disagreers == 0 {
        return Err(SynthesisError::InvalidParams(
            "cluster count, representatives and disagreers must be positive".into(),
        ));
    }
    let mut ratings: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in corpus.records.iter().filter(|r| !r.is_synthetic) {
        ratings.entry(r.annotator_id.as_str()).or_default().push(r.rating);
    }
    let annotators: Vec<&str> = ratings.keys().copied().filter(|a| corpus.profiles.contains_key(*a)).collect();
    if annotators.is_empty() {
        return Err(SynthesisError::NoProfiles);
    }

    let mut hot: Vec<Vec<f64>> =
        annotators.iter().map(|a| one_hot(&corpus.schema, &corpus.profiles[*a].attributes)).collect();
    standardize(&mut hot);
    let features: Vec<Vec<f64>> = annotators
        .iter()
        .zip(hot)
        .map(|(a, mut row)| {
            let rs = &ratings[a];
            let n = rs.len() as f64;
            let mean = rs.iter().sum::<f64>() / n;
            let sd = (rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            row.push(mean);
            row.push(sd);
            row
        })
        .collect();

    let k = params.clusters.min(features.len());
    let km = KMeans::fit(&features, k, seed::derive(seed, seed::CLUSTER), params.max_iter)?;
    let mut sizes = vec![0usize; k];
    for &c in &km.assignments {
        sizes[c] += 1;
    }
    let chosen = (0..k).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap_or(0);
    let centre = &km.centroids[chosen];

    let mut by_distance: Vec<usize> = (0..features.len()).collect();
    by_distance.sort_by(|&a, &b| {
        squared_distance(&features[a], centre).total_cmp(&squared_distance(&features[b], centre)).then(a.cmp(&b))
    });
    let rep_annotators: BTreeSet<usize> = by_distance.iter().copied().take(params.representatives).collect();

    let mut far: Vec<usize> = (0..k).filter(|&c| c != chosen).collect();
    far.sort_by(|&a, &b| {
        squared_distance(&km.centroids[b], centre).total_cmp(&squared_distance(&km.centroids[a], centre)).then(a.cmp(&b))
    });
    let mut dis_annotators = Vec::new();
    'outer: for c in far {
        let mut members: Vec<usize> = (0..features.len()).filter(|&i| km.assignments[i] == c).collect();
        members.sort_by(|&a, &b| {
            squared_distance(&features[a], &km.centroids[c])
                .total_cmp(&squared_distance(&features[b], &km.centroids[c]))
                .then(a.cmp(&b))
        });
        for m in members {
            if dis_annotators.len() == params.disagreers {
                break 'outer;
            }
            if !rep_annotators.contains(&m) {
                dis_annotators.push(m);
            }
        }
    }

    let persona_of: BTreeMap<Vec<String>, &str> =
        pool.iter().map(|p| (p.combination.clone(), p.persona_id.as_str())).collect();
    let to_personas = |idx: &mut dyn Iterator<Item = usize>| -> Vec<&'p str> {
        let mut seen = BTreeSet::new();
        idx.filter_map(|i| persona_of.get(&corpus.profiles[annotators[i]].combination(&corpus.schema)).copied())
            .filter(|p| seen.insert(*p))
            .collect()
    };
    let reps = to_personas(&mut by_distance.iter().copied().take(params.representatives));
    let rep_set: BTreeSet<&str> = reps.iter().copied().collect();
    let dis: Vec<&str> =
        to_personas(&mut dis_annotators.into_iter()).into_iter().filter(|p| !rep_set.contains(p)).collect();
    if reps.is_empty() || dis.is_empty() {
        return Err(SynthesisError::InvalidParams(
            "clustering produced no disagreeing personas outside the representatives".into(),
        ));
    }
    Ok((reps, dis))
}

fn standardize(rows: &mut [Vec<f64>]) {
    let Some(width) = rows.first().map(Vec::len) else { return };
    let n = rows.len() as f64;
    for j in 0..width {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for r in rows.iter_mut() {
            r[j] = if sd > 1e-12 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
}
