//! Support-set selection in embedding space.
//!
//! The one-shot pick is the most central sample: the one whose mean cosine
//! distance to all others is smallest (largest inverse mean distance). For
//! `K > 1` that sample seeds a k-center-greedy initialization, which is then
//! polished by k-medoids so every support image is an actual dataset member.
//! Everything is deterministic; ties always go to the lowest dataset index.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_KMEDOIDS_ITERATIONS: usize = 100;

/// `1 - a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len().to_string(),
            actual: b.len().to_string(),
        });
    }
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= T::zero() || nb <= T::zero() {
        return Err(Error::InvalidInput("cosine distance of a zero-norm vector".into()));
    }
    let d = T::one() - dot / (na * nb).sqrt();
    Ok(d.max(T::zero()).min(T::lit(2.0)))
}

/// Symmetric pairwise cosine distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T = f64> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    /// Rows are computed in parallel; the result does not depend on scheduling.
    pub fn cosine<V: AsRef<[T]> + Sync>(vectors: &[V]) -> Result<Self> {
        let n = vectors.len();
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            // still validates the norm
                            cosine_distance(vectors[i].as_ref(), vectors[i].as_ref()).map(|_| T::zero())
                        } else {
                            let (a, b) = if i < j { (i, j) } else { (j, i) };
                            cosine_distance(vectors[a].as_ref(), vectors[b].as_ref())
                        }
                    })
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    fn row_sum_excluding_self(&self, i: usize) -> T {
        (0..self.n).filter(|&j| j != i).map(|j| self.get(i, j)).sum()
    }
}

/// Inverse mean cosine distance from sample `i` to every other sample.
/// Returns `+∞` when that mean is zero.
pub fn similarity_score<T: Scalar>(dist: &DistanceMatrix<T>, i: usize) -> Result<T> {
    if dist.len() < 2 {
        return Err(Error::InvalidInput("similarity needs at least two samples".into()));
    }
    if i >= dist.len() {
        return Err(Error::InvalidInput(format!("sample index {i} out of range")));
    }
    let mean = dist.row_sum_excluding_self(i) / T::from_usize_lossy(dist.len() - 1);
    Ok(if mean <= T::zero() {
        T::infinity()
    } else {
        T::one() / mean
    })
}

/// Index of the most central sample; ties go to the lowest index.
pub fn select_s1<T: Scalar>(dist: &DistanceMatrix<T>) -> Result<usize> {
    let mut best = (0usize, similarity_score(dist, 0)?);
    for i in 1..dist.len() {
        let s = similarity_score(dist, i)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Farthest-first traversal seeded with `seed`: each new center maximizes the
/// distance to its nearest chosen center.
pub fn k_center_greedy<T: Scalar>(dist: &DistanceMatrix<T>, k: usize, seed: usize) -> Result<Vec<usize>> {
    let n = dist.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={n}")));
    }
    if seed >= n {
        return Err(Error::InvalidInput(format!("seed index {seed} out of range")));
    }
    let mut chosen = vec![seed];
    let mut taken = vec![false; n];
    taken[seed] = true;
    let mut nearest: Vec<T> = (0..n).map(|j| dist.get(j, seed)).collect();
    while chosen.len() < k {
        let mut pick: Option<usize> = None;
        for j in (0..n).filter(|&j| !taken[j]) {
            if pick.is_none_or(|p| nearest[j] > nearest[p]) {
                pick = Some(j);
            }
        }
        let p = pick.expect("k <= n leaves a candidate");
        taken[p] = true;
        chosen.push(p);
        for (j, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist.get(j, p));
        }
    }
    Ok(chosen)
}

/// Index-level clustering outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Dataset index of each cluster's medoid.
    pub medoids: Vec<usize>,
    /// Cluster slot of every sample.
    pub cluster_of: Vec<usize>,
    /// Sum of distances from each sample to its medoid.
    pub objective: f64,
    /// Objective after every assignment sweep.
    pub history: Vec<f64>,
}

fn assign<T: Scalar>(dist: &DistanceMatrix<T>, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut cluster_of = vec![0; dist.len()];
    let mut objective = 0.0;
    for (j, slot) in cluster_of.iter_mut().enumerate() {
        if let Some(own) = medoids.iter().position(|&m| m == j) {
            *slot = own;
            continue;
        }
        let mut best = 0;
        for c in 1..medoids.len() {
            let (d, db) = (dist.get(j, medoids[c]), dist.get(j, medoids[best]));
            if d < db || (d == db && medoids[c] < medoids[best]) {
                best = c;
            }
        }
        *slot = best;
        objective += dist.get(j, medoids[best]).as_f64();
    }
    (cluster_of, objective)
}

/// Alternating k-medoids: assign every sample to its nearest medoid, then move
/// each medoid to the member with the smallest total in-cluster distance. A
/// medoid only moves on strict improvement; among improving members the
/// lowest index wins a tie. Stops when no medoid moves or after
/// [`MAX_KMEDOIDS_ITERATIONS`] sweeps.
pub fn k_medoids<T: Scalar>(dist: &DistanceMatrix<T>, init: &[usize]) -> Result<Clustering> {
    let n = dist.len();
    if init.is_empty() || init.len() > n {
        return Err(Error::InvalidInput(format!("need 1..={n} initial medoids")));
    }
    let mut seen = vec![false; n];
    for &m in init {
        if m >= n || std::mem::replace(&mut seen[m], true) {
            return Err(Error::InvalidInput(format!("initial medoid {m} invalid or repeated")));
        }
    }

    let mut medoids = init.to_vec();
    let mut history = Vec::new();
    let (mut cluster_of, mut objective) = assign(dist, &medoids);
    for _ in 0..MAX_KMEDOIDS_ITERATIONS {
        if let Some(&prev) = history.last() {
            assert!(
                objective <= prev + 1e-9 * f64::max(1.0, prev),
                "k-medoids objective increased: {prev} -> {objective}"
            );
        }
        history.push(objective);

        let mut moved = false;
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&j| cluster_of[j] == c).collect();
            let cost = |m: usize| -> T { members.iter().map(|&j| dist.get(m, j)).sum() };
            let current = cost(*medoid);
            let mut best: Option<(usize, T)> = None;
            for &cand in &members {
                let v = cost(cand);
                if v < current && best.is_none_or(|(_, b)| v < b) {
                    best = Some((cand, v));
                }
            }
            if let Some((cand, _)) = best {
                *medoid = cand;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        (cluster_of, objective) = assign(dist, &medoids);
    }
    Ok(Clustering {
        medoids,
        cluster_of,
        objective,
        history,
    })
}

/// Support ids, the support each query is matched with, and the clustering cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub support_ids: Vec<String>,
    /// Query id → support id.
    pub assignment: BTreeMap<String, String>,
    /// Query id → cosine distance to its support.
    pub distances: BTreeMap<String, f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Support,
    Query,
}

/// One audit line per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: String,
    pub role: Role,
    pub assigned_support_id: String,
    pub distance: f64,
}

impl SelectionResult {
    /// Assign every non-support sample to its nearest support (ties → lowest
    /// dataset index).
    pub fn from_supports<T: Scalar>(ids: &[String], dist: &DistanceMatrix<T>, supports: &[usize]) -> Result<Self> {
        let (cluster_of, objective) = assign(dist, supports);
        Ok(Self::build(ids, dist, supports, &cluster_of, objective))
    }

    fn build<T: Scalar>(
        ids: &[String],
        dist: &DistanceMatrix<T>,
        medoids: &[usize],
        cluster_of: &[usize],
        objective: f64,
    ) -> Self {
        let mut assignment = BTreeMap::new();
        let mut distances = BTreeMap::new();
        for (j, &c) in cluster_of.iter().enumerate() {
            if medoids.contains(&j) {
                continue;
            }
            assignment.insert(ids[j].clone(), ids[medoids[c]].clone());
            distances.insert(ids[j].clone(), dist.get(j, medoids[c]).as_f64());
        }
        Self {
            support_ids: medoids.iter().map(|&m| ids[m].clone()).collect(),
            assignment,
            distances,
            objective,
        }
    }

    /// Records sorted by id.
    pub fn records(&self) -> Vec<SelectionRecord> {
        let mut out: Vec<SelectionRecord> = self
            .support_ids
            .iter()
            .map(|s| SelectionRecord {
                id: s.clone(),
                role: Role::Support,
                assigned_support_id: s.clone(),
                distance: 0.0,
            })
            .chain(self.assignment.iter().map(|(q, s)| SelectionRecord {
                id: q.clone(),
                role: Role::Query,
                assigned_support_id: s.clone(),
                distance: self.distances.get(q).copied().unwrap_or(0.0),
            }))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

/// Full selection over `(id, vector)` pairs in dataset order.
pub fn select_support<T, V>(ids: &[String], vectors: &[V], k: usize) -> Result<SelectionResult>
where
    T: Scalar,
    V: AsRef<[T]> + Sync,
{
    if ids.len() != vectors.len() {
        return Err(Error::InvalidInput("ids and vectors differ in length".into()));
    }
    let n = ids.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={n}")));
    }
    if n < 2 {
        return Err(Error::InvalidInput("selection needs at least two samples".into()));
    }
    let dist = DistanceMatrix::cosine(vectors)?;
    let s1 = select_s1(&dist)?;
    let init = k_center_greedy(&dist, k, s1)?;
    let clustering = k_medoids(&dist, &init)?;
    Ok(SelectionResult::build(
        ids,
        &dist,
        &clustering.medoids,
        &clustering.cluster_of,
        clustering.objective,
    ))
}
