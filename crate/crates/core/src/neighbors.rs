//! Neighbor identification (run once on the server) and the per-device
//! dynamic sampling of active neighbors.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collab::SoftDecisionBundle;
use crate::data::{CatId, CheckinSequence, SocialGraph, UserId};
use crate::error::{Error, Result};
use crate::geo::{RegionId, RegionMap};

/// Additive smoothing applied to category distributions so that every KL
/// divergence between two users is finite.
pub const CATEGORY_SMOOTHING: f64 = 1e-6;

/// What a device uploads to the server: the regions it visited (current
/// region first) and its category preference distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user: UserId,
    pub visited_regions: Vec<RegionId>,
    pub category_distribution: Vec<f64>,
}

impl UserSummary {
    /// Builds the summary from the training sequence. Regions are listed by
    /// most recent visit, so the first entry is the current region.
    pub fn from_training(seq: &CheckinSequence, region_map: &RegionMap, num_categories: usize) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::Dataset(format!("user {}: empty training sequence", seq.user)));
        }
        let mut visited = Vec::new();
        for &p in seq.pois.iter().rev() {
            let r = region_map
                .region_of(p)
                .ok_or_else(|| Error::Dataset(format!("POI {p} has no region")))?;
            if !visited.contains(&r) {
                visited.push(r);
            }
        }
        Ok(UserSummary {
            user: seq.user,
            visited_regions: visited,
            category_distribution: category_distribution(&seq.categories, num_categories)?,
        })
    }

    pub fn current_region(&self) -> RegionId {
        self.visited_regions[0]
    }
}

/// Empirical category frequencies with additive smoothing, renormalized.
pub fn category_distribution(cat_seq: &[CatId], num_categories: usize) -> Result<Vec<f64>> {
    if cat_seq.is_empty() {
        return Err(Error::Dataset("empty category sequence".into()));
    }
    let mut counts = vec![CATEGORY_SMOOTHING; num_categories];
    for c in cat_seq {
        *counts
            .get_mut(c.index())
            .ok_or_else(|| Error::Dataset(format!("category {c} out of range")))? += 1.0;
    }
    let total: f64 = counts.iter().sum();
    Ok(counts.into_iter().map(|v| v / total).collect())
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)` in nats, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Config(format!(
            "KL divergence of vectors with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// `u_j` is a geographical neighbor of `u_i` iff `u_j` has visited the
/// current region of `u_i`. The relation is directional.
pub fn identify_geo_neighbors(summaries: &[UserSummary]) -> BTreeMap<UserId, BTreeSet<UserId>> {
    summaries
        .iter()
        .map(|si| {
            let r0 = si.current_region();
            let set = summaries
                .iter()
                .filter(|sj| sj.user != si.user && sj.visited_regions.contains(&r0))
                .map(|sj| sj.user)
                .collect();
            (si.user, set)
        })
        .collect()
}

/// The `h` users with the smallest `KL(CP(u_i) || CP(u_j))` (ties by user
/// id), plus every friend of `u_i`.
pub fn identify_sem_neighbors(
    summaries: &[UserSummary],
    h: usize,
    graph: &SocialGraph,
) -> Result<BTreeMap<UserId, BTreeSet<UserId>>> {
    let known: BTreeSet<UserId> = summaries.iter().map(|s| s.user).collect();
    summaries
        .iter()
        .map(|si| {
            let mut dists = summaries
                .iter()
                .filter(|sj| sj.user != si.user)
                .map(|sj| Ok((kl_divergence(&si.category_distribution, &sj.category_distribution)?, sj.user)))
                .collect::<Result<Vec<(f64, UserId)>>>()?;
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut set: BTreeSet<UserId> = dists.into_iter().take(h).map(|x| x.1).collect();
            set.extend(graph.friends(si.user).into_iter().filter(|f| known.contains(f)));
            Ok((si.user, set))
        })
        .collect()
}

/// Full neighbor sets handed out by the server and the currently active
/// subsets a device exchanges soft decisions with.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborState {
    pub geo_full: BTreeSet<UserId>,
    pub sem_full: BTreeSet<UserId>,
    pub geo_active: BTreeSet<UserId>,
    pub sem_active: BTreeSet<UserId>,
}

impl NeighborState {
    /// Removes `owner` from every set.
    pub fn new(owner: UserId, mut geo_full: BTreeSet<UserId>, mut sem_full: BTreeSet<UserId>) -> Self {
        geo_full.remove(&owner);
        sem_full.remove(&owner);
        NeighborState {
            geo_full,
            sem_full,
            geo_active: BTreeSet::new(),
            sem_active: BTreeSet::new(),
        }
    }

    pub fn activate_all(&mut self) {
        self.geo_active = self.geo_full.clone();
        self.sem_active = self.sem_full.clone();
    }

    /// Redraws both active sets uniformly from the full sets.
    pub fn redraw<R: Rng>(&mut self, k: usize, rng: &mut R) {
        self.geo_active = sample_uniform(&self.geo_full, k, rng);
        self.sem_active = sample_uniform(&self.sem_full, k, rng);
    }
}

/// `k` distinct members drawn uniformly (all of them when `|set| <= k`).
pub fn sample_uniform<R: Rng>(set: &BTreeSet<UserId>, k: usize, rng: &mut R) -> BTreeSet<UserId> {
    if set.len() <= k {
        return set.clone();
    }
    let items: Vec<UserId> = set.iter().copied().collect();
    rand::seq::index::sample(rng, items.len(), k)
        .into_iter()
        .map(|i| items[i])
        .collect()
}

/// Relative local-loss change in percent, `|L_o - L_{o-1}| / L_{o-1} * 100`.
/// A zero previous loss counts as no change.
pub fn relative_loss_change(previous: f64, current: f64) -> f64 {
    if previous == 0.0 {
        return 0.0;
    }
    (current - previous).abs() / previous * 100.0
}

/// Performance-triggered sampling: when the relative change of the local
/// loss falls below `tau_percent`, both active sets are redrawn as `alpha`
/// uniform samples; otherwise they are kept. Returns whether a redraw
/// happened.
pub fn perf_triggered_resample<R: Rng>(
    state: &mut NeighborState,
    previous_loss: f64,
    current_loss: f64,
    tau_percent: f64,
    alpha: usize,
    rng: &mut R,
) -> bool {
    if relative_loss_change(previous_loss, current_loss) < tau_percent {
        state.redraw(alpha, rng);
        true
    } else {
        false
    }
}

/// `d_soft = sum over reference sequences of KL(own || other)`.
pub fn soft_distance(own: &SoftDecisionBundle, other: &SoftDecisionBundle) -> Result<f64> {
    own.check_aligned(other)?;
    own.per_sequence
        .iter()
        .zip(&other.per_sequence)
        .map(|(p, q)| kl_divergence(p, q))
        .sum()
}

/// The `beta` candidates whose bundles are closest to `own` by
/// [`soft_distance`], ties by user id. Candidates without a bundle are
/// skipped with a warning.
pub fn select_most_similar(
    own: &SoftDecisionBundle,
    candidates: &BTreeSet<UserId>,
    bundles: &BTreeMap<UserId, &SoftDecisionBundle>,
    beta: usize,
) -> Result<BTreeSet<UserId>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for &u in candidates {
        match bundles.get(&u) {
            Some(b) => scored.push((soft_distance(own, b)?, u)),
            None => warn!("no soft decisions from user {u}; skipped in similarity sampling"),
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(beta).map(|x| x.1).collect())
}

/// Similarity-based sampling: the `beta` geo candidates closest on the
/// device's geographical reference set and the `beta` semantic candidates
/// closest on the semantic reference set become the new active sets.
#[allow(clippy::too_many_arguments)]
pub fn similarity_sample(
    state: &mut NeighborState,
    own_geo: &SoftDecisionBundle,
    own_sem: &SoftDecisionBundle,
    geo_candidates: &BTreeSet<UserId>,
    sem_candidates: &BTreeSet<UserId>,
    geo_bundles: &BTreeMap<UserId, &SoftDecisionBundle>,
    sem_bundles: &BTreeMap<UserId, &SoftDecisionBundle>,
    beta: usize,
) -> Result<()> {
    let geo_candidates: BTreeSet<UserId> = geo_candidates.intersection(&state.geo_full).copied().collect();
    let sem_candidates: BTreeSet<UserId> = sem_candidates.intersection(&state.sem_full).copied().collect();
    state.geo_active = select_most_similar(own_geo, &geo_candidates, geo_bundles, beta)?;
    state.sem_active = select_most_similar(own_sem, &sem_candidates, sem_bundles, beta)?;
    Ok(())
}
