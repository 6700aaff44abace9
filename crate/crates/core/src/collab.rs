//! Knowledge-distillation collaboration: soft-decision bundles, the
//! geographical and semantic disagreement losses, the POI/category mutual
//! information loss and their combination with the local objective.

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{CatId, PoiId};
use crate::data::UserId;
use crate::error::{Error, Result};
use crate::geo::{RegionId, RegionMap};
use crate::model::{DeviceModel, GradientSet, LossTerm, Mode, WeightedTerm};
use crate::refdata::{GeoReferenceSet, SemReferenceSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RefKind {
    Geo(RegionId),
    Semantic,
}

/// The soft decisions one device publishes on one reference set. This is the
/// only payload devices ever exchange.
///
/// Wire size (see [`wire_bytes`](Self::wire_bytes)): a 21-byte header
/// (`owner u32, kind u8, region u32, round u32, n_sequences u32,
/// support_len u32`) followed by `n_sequences * support_len` 32-bit floats.
/// The support itself is canonical for the reference kind and is not sent.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDecisionBundle {
    pub owner: UserId,
    pub ref_kind: RefKind,
    pub round: u32,
    /// Canonical support: region POI ids ascending, or every category id.
    pub support: Arc<[u32]>,
    pub per_sequence: Vec<Vec<f64>>,
}

pub const BUNDLE_HEADER_BYTES: usize = 21;

impl SoftDecisionBundle {
    pub fn wire_bytes(&self) -> usize {
        BUNDLE_HEADER_BYTES + 4 * self.per_sequence.len() * self.support.len()
    }

    /// Fails unless `other` was computed on the same reference set with the
    /// same canonical support.
    pub fn check_aligned(&self, other: &SoftDecisionBundle) -> Result<()> {
        if self.ref_kind != other.ref_kind
            || self.per_sequence.len() != other.per_sequence.len()
            || self.support != other.support
        {
            return Err(Error::Model(format!(
                "bundles of users {} and {} are not aligned ({:?} vs {:?})",
                self.owner, other.owner, self.ref_kind, other.ref_kind
            )));
        }
        Ok(())
    }
}

pub fn geo_support(region_map: &RegionMap, region: RegionId) -> Arc<[u32]> {
    region_map.region(region).poi_ids.iter().map(|p| p.0).collect()
}

pub fn sem_support(num_categories: usize) -> Arc<[u32]> {
    (0..num_categories as u32).collect()
}

/// Eval-mode next-step prediction after each full reference sequence, over
/// every POI of the reference set's region.
pub fn compute_geo_bundle(
    model: &DeviceModel,
    refs: &GeoReferenceSet,
    support: &Arc<[u32]>,
    round: u32,
) -> Result<SoftDecisionBundle> {
    let support_ids: Vec<PoiId> = support.iter().map(|&p| PoiId(p)).collect();
    let per_sequence = refs
        .sequences
        .iter()
        .map(|x| model.predict_poi(&x.pois, &support_ids))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| {
            Error::Model(format!(
                "device {} cannot predict on the reference set of {}: {e}",
                model.owner(),
                refs.region
            ))
        })?;
    Ok(SoftDecisionBundle {
        owner: model.owner(),
        ref_kind: RefKind::Geo(refs.region),
        round,
        support: support.clone(),
        per_sequence,
    })
}

/// Eval-mode category prediction after each semantic reference sequence.
pub fn compute_sem_bundle(
    model: &DeviceModel,
    refs: &SemReferenceSet,
    support: &Arc<[u32]>,
    round: u32,
) -> Result<SoftDecisionBundle> {
    let per_sequence = refs
        .sequences
        .iter()
        .map(|x| model.predict_cat(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftDecisionBundle {
        owner: model.owner(),
        ref_kind: RefKind::Semantic,
        round,
        support: support.clone(),
        per_sequence,
    })
}

fn disagreement(own: &SoftDecisionBundle, neighbors: &[&SoftDecisionBundle], what: &str) -> Result<f64> {
    if neighbors.is_empty() {
        warn!("user {}: no active {what} neighbors; disagreement is 0", own.owner);
        return Ok(0.0);
    }
    let mut total = 0.0;
    for nb in neighbors {
        own.check_aligned(nb)?;
        for (p, q) in own.per_sequence.iter().zip(&nb.per_sequence) {
            total += p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total / neighbors.len() as f64)
}

/// `(1/|G'|) sum_j sum_X ||phi_i(X) - phi_j(X)||^2` on the geographical
/// reference set of the device's current region.
pub fn loss_geo(own: &SoftDecisionBundle, neighbors: &[&SoftDecisionBundle]) -> Result<f64> {
    disagreement(own, neighbors, "geographical")
}

/// The same disagreement for category predictions on the semantic set.
pub fn loss_cat(own: &SoftDecisionBundle, neighbors: &[&SoftDecisionBundle]) -> Result<f64> {
    disagreement(own, neighbors, "semantic")
}

pub fn loss_mi(model: &mut DeviceModel, pairs: &[(PoiId, CatId)]) -> Result<f64> {
    model.loss(&[WeightedTerm::new(1.0, LossTerm::MutualInfo { pairs })], Mode::Eval)
}

/// Per-component values of the device objective
/// `L_loc + gamma * (mu * L_geo + (1 - mu) * L_sem)` with `L_sem = L_cat + L_MI`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_loc: f64,
    pub l_geo: f64,
    pub l_cat: f64,
    pub l_mi: f64,
    pub l_sem: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn assemble(l_loc: f64, l_geo: f64, l_cat: f64, l_mi: f64, gamma: f64, mu: f64) -> Self {
        let l_sem = l_cat + l_mi;
        LossBreakdown {
            l_loc,
            l_geo,
            l_cat,
            l_mi,
            l_sem,
            combined: l_loc + gamma * (mu * l_geo + (1.0 - mu) * l_sem),
        }
    }
}

/// Next-POI cross-entropy terms for the given positions of a training
/// sequence, averaged. Position `t` predicts `seq[t]` from `seq[..t]` over
/// all POIs of the target's region.
pub fn local_terms<'a>(
    seq: &'a [PoiId],
    positions: &[usize],
    region_map: &'a RegionMap,
) -> Result<Vec<WeightedTerm<'a>>> {
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let w = 1.0 / positions.len() as f64;
    positions
        .iter()
        .map(|&t| {
            if t == 0 || t >= seq.len() {
                return Err(Error::Model(format!("position {t} outside 1..{}", seq.len())));
            }
            let target = seq[t];
            let region = region_map
                .region_of(target)
                .ok_or_else(|| Error::Model(format!("POI {target} has no region")))?;
            Ok(WeightedTerm::new(
                w,
                LossTerm::NextPoi {
                    prefix: &seq[..t],
                    support: &region_map.region(region).poi_ids,
                    target,
                },
            ))
        })
        .collect()
}

/// Everything a device needs from its neighbors to form the collaborative
/// part of its objective. Teacher bundles are constants.
pub struct CollabInputs<'a> {
    pub geo_refs: &'a GeoReferenceSet,
    pub geo_support: &'a [PoiId],
    pub geo_teachers: &'a [&'a SoftDecisionBundle],
    pub sem_refs: &'a SemReferenceSet,
    pub sem_teachers: &'a [&'a SoftDecisionBundle],
    /// Every stored POI with its public category, so alignment also reaches
    /// POIs the user never visited.
    pub mi_pairs: &'a [(PoiId, CatId)],
}

/// Distillation terms with unit weight (`L_geo` and `L_cat` as sums over
/// reference sequences of the mean teacher disagreement).
fn distill_terms<'a>(inputs: &'a CollabInputs<'a>) -> Result<(Vec<WeightedTerm<'a>>, Vec<WeightedTerm<'a>>)> {
    for t in inputs.geo_teachers {
        if t.ref_kind != RefKind::Geo(inputs.geo_refs.region) || t.per_sequence.len() != inputs.geo_refs.sequences.len()
        {
            return Err(Error::Model(format!(
                "geo teacher {} does not match reference set of {}",
                t.owner, inputs.geo_refs.region
            )));
        }
        if t.support.len() != inputs.geo_support.len()
            || t.support.iter().zip(inputs.geo_support).any(|(a, b)| *a != b.0)
        {
            return Err(Error::Model(format!("geo teacher {} has a non-canonical support", t.owner)));
        }
    }
    for t in inputs.sem_teachers {
        if t.ref_kind != RefKind::Semantic || t.per_sequence.len() != inputs.sem_refs.sequences.len() {
            return Err(Error::Model(format!("semantic teacher {} is not aligned", t.owner)));
        }
    }
    let geo = if inputs.geo_teachers.is_empty() {
        Vec::new()
    } else {
        inputs
            .geo_refs
            .sequences
            .iter()
            .enumerate()
            .map(|(x, seq)| {
                WeightedTerm::new(
                    1.0,
                    LossTerm::PoiDistill {
                        prefix: &seq.pois,
                        support: inputs.geo_support,
                        teachers: inputs.geo_teachers.iter().map(|b| b.per_sequence[x].as_slice()).collect(),
                    },
                )
            })
            .collect()
    };
    let sem = if inputs.sem_teachers.is_empty() {
        Vec::new()
    } else {
        inputs
            .sem_refs
            .sequences
            .iter()
            .enumerate()
            .map(|(x, seq)| {
                WeightedTerm::new(
                    1.0,
                    LossTerm::CatDistill {
                        prefix: seq,
                        teachers: inputs.sem_teachers.iter().map(|b| b.per_sequence[x].as_slice()).collect(),
                    },
                )
            })
            .collect()
    };
    Ok((geo, sem))
}

/// Evaluates every component of the device objective and the gradient of
/// the combined loss. `local` carries the (already averaged) next-POI terms;
/// with `collab == None` only the local objective is used. When `gamma == 0`
/// the collaborative components are reported but contribute no gradient.
pub fn combined_loss(
    model: &mut DeviceModel,
    local: &[WeightedTerm<'_>],
    collab: Option<&CollabInputs<'_>>,
    gamma: f64,
    mu: f64,
    mode: Mode,
) -> Result<(LossBreakdown, GradientSet)> {
    if gamma < 0.0 || !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("need gamma >= 0 and mu in [0, 1], got {gamma}, {mu}")));
    }
    let (l_loc, mut grads) = model.backprop(local, mode)?;
    let Some(inputs) = collab else {
        return Ok((LossBreakdown::assemble(l_loc, 0.0, 0.0, 0.0, gamma, mu), grads));
    };
    let (geo, sem) = distill_terms(inputs)?;
    let mi = [WeightedTerm::new(1.0, LossTerm::MutualInfo { pairs: inputs.mi_pairs })];
    let (l_geo, mut g_geo) = model.backprop(&geo, Mode::Eval)?;
    let (l_cat, mut g_cat) = model.backprop(&sem, Mode::Eval)?;
    let (l_mi, g_mi) = model.backprop(&mi, Mode::Eval)?;
    if gamma > 0.0 {
        g_geo.scale(gamma * mu);
        g_cat.add(&g_mi);
        g_cat.scale(gamma * (1.0 - mu));
        grads.add(&g_geo);
        grads.add(&g_cat);
    }
    Ok((LossBreakdown::assemble(l_loc, l_geo, l_cat, l_mi, gamma, mu), grads))
}
