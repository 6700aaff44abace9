//! The decentralized protocol: a one-off server phase followed by
//! synchronous rounds in which devices exchange only soft-decision bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::{
    combined_loss, compute_geo_bundle, compute_sem_bundle, geo_support, local_terms, sem_support, CollabInputs,
    LossBreakdown, RefKind, SoftDecisionBundle,
};
use crate::data::{CatId, CheckinSequence, Poi, PoiId, SocialGraph, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_device, DeviceEval};
use crate::geo::{candidate_set, RegionId, RegionMap};
use crate::model::{DeviceModel, Mode};
use crate::neighbors::{
    identify_geo_neighbors, identify_sem_neighbors, perf_triggered_resample, sample_uniform, similarity_sample,
    NeighborState, UserSummary,
};
use crate::refdata::{build_reference_data, GeoReferenceSet, RefGenConfig, ReferenceData, SemReferenceSet};
use crate::rng::{self, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Redraw `alpha` actives whenever the local loss stalls.
    Performance,
    /// Keep the `beta` neighbors with the closest soft decisions.
    Similarity,
    /// Every neighbor is always active.
    Full,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Performance => "performance",
            SamplingMode::Similarity => "similarity",
            SamplingMode::Full => "full",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "performance" => Ok(SamplingMode::Performance),
            "similarity" => Ok(SamplingMode::Similarity),
            "full" | "none" => Ok(SamplingMode::Full),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub gamma: f64,
    pub mu: f64,
    pub alpha: usize,
    pub beta: usize,
    pub tau_percent: f64,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: u32,
    /// Epochs without validation improvement before a device freezes; 0
    /// disables early stopping.
    pub patience: u32,
    pub sampling: SamplingMode,
    pub num_candidates: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            gamma: 0.5,
            mu: 0.7,
            alpha: 5,
            beta: 10,
            tau_percent: 1.0,
            lr: 0.002,
            dropout: 0.2,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            sampling: SamplingMode::Performance,
            num_candidates: 200,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if !(0.0..=100.0).contains(&self.tau_percent) {
            return bad(format!("tau must lie in [0, 100] percent, got {}", self.tau_percent));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.alpha == 0 || self.beta == 0 || self.batch_size == 0 || self.num_candidates == 0 {
            return bad("alpha, beta, batch size and candidate count must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        Ok(())
    }
}

/// Public, non-personal context every party knows: the POI catalog and the
/// region partition.
#[derive(Clone, Debug)]
pub struct World {
    pub region_map: RegionMap,
    pub pois: Vec<Poi>,
    pub num_categories: usize,
}

impl World {
    fn region_of(&self, p: PoiId) -> Result<RegionId> {
        self.region_map
            .region_of(p)
            .ok_or_else(|| Error::Dataset(format!("POI {p} has no region")))
    }
}

/// Things that happen at the protocol boundary. Implementations must be
/// thread-safe; devices report concurrently.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuditEvent {
    ServerCall { operation: String },
    RoundStart { round: u32 },
    Publish { round: u32, owner: UserId, kind: RefKind },
    Fetch { round: u32, requester: UserId, owner: UserId, kind: RefKind, bytes: usize },
}

pub trait Observer: Send + Sync {
    fn record(&self, _event: AuditEvent) {}
}

pub struct NoopObserver;

impl Observer for NoopObserver {}

/// Recording test double for information-flow audits.
#[derive(Default)]
pub struct AuditLog {
    events: Mutex<Vec<AuditEvent>>,
}

impl AuditLog {
    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().expect("audit log poisoned").clone()
    }
}

impl Observer for AuditLog {
    fn record(&self, event: AuditEvent) {
        self.events.lock().expect("audit log poisoned").push(event);
    }
}

/// What the server sends each device before disengaging.
#[derive(Clone, Debug, PartialEq)]
pub struct Package {
    pub geo_neighbors: BTreeSet<UserId>,
    pub sem_neighbors: BTreeSet<UserId>,
    /// Reference sets of every region the device has visited; the first
    /// visited region's set is the one it distills on.
    pub geo_refs: BTreeMap<RegionId, Arc<GeoReferenceSet>>,
    pub sem_refs: Arc<SemReferenceSet>,
}

/// Everything the server holds after its phase: uploaded summaries,
/// neighbor sets and reference data. No raw sequence of any device.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub summaries: Vec<UserSummary>,
    pub geo_neighbors: BTreeMap<UserId, BTreeSet<UserId>>,
    pub sem_neighbors: BTreeMap<UserId, BTreeSet<UserId>>,
    pub references: ReferenceData,
}

/// The server before its single engagement. It owns the withheld reference
/// pool and the social graph; consuming it in [`Server::server_phase`]
/// makes later calls impossible.
pub struct Server<'a> {
    world: &'a World,
    pool: &'a [CheckinSequence],
    graph: &'a SocialGraph,
    refgen: RefGenConfig,
    top_h: usize,
    seed: u64,
}

impl<'a> Server<'a> {
    pub fn new(
        world: &'a World,
        pool: &'a [CheckinSequence],
        graph: &'a SocialGraph,
        refgen: RefGenConfig,
        top_h: usize,
        seed: u64,
    ) -> Self {
        Server {
            world,
            pool,
            graph,
            refgen,
            top_h,
            seed,
        }
    }

    pub fn server_phase(
        self,
        summaries: Vec<UserSummary>,
        observer: &dyn Observer,
    ) -> Result<(ServerState, BTreeMap<UserId, Package>)> {
        observer.record(AuditEvent::ServerCall {
            operation: "server_phase".into(),
        });
        let geo_neighbors = identify_geo_neighbors(&summaries);
        let sem_neighbors = identify_sem_neighbors(&summaries, self.top_h, self.graph)?;
        let references = build_reference_data(
            self.pool,
            self.graph,
            &self.world.region_map,
            &self.world.pois,
            self.world.num_categories,
            &self.refgen,
            self.seed,
        )?;
        let geo_sets: BTreeMap<RegionId, Arc<GeoReferenceSet>> = references
            .geo
            .iter()
            .map(|(r, s)| (*r, Arc::new(s.clone())))
            .collect();
        let sem = Arc::new(references.sem.clone());
        let mut packages = BTreeMap::new();
        for s in &summaries {
            let mut geo_refs = BTreeMap::new();
            for r in &s.visited_regions {
                let set = geo_sets
                    .get(r)
                    .ok_or_else(|| Error::Generation(format!("no reference set for {r}")))?;
                geo_refs.insert(*r, set.clone());
            }
            packages.insert(
                s.user,
                Package {
                    geo_neighbors: geo_neighbors.get(&s.user).cloned().unwrap_or_default(),
                    sem_neighbors: sem_neighbors.get(&s.user).cloned().unwrap_or_default(),
                    geo_refs,
                    sem_refs: sem.clone(),
                },
            );
        }
        let state = ServerState {
            summaries,
            geo_neighbors,
            sem_neighbors,
            references,
        };
        Ok((state, packages))
    }
}

/// Validation score: hits first, then rank. Larger is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct ValScore {
    hit: bool,
    neg_rank: i64,
}

/// One simulated device. Its data and parameters are private; other parties
/// only ever see the bundles it publishes.
pub struct Device {
    user: UserId,
    model: DeviceModel,
    best: Option<(ValScore, DeviceModel)>,
    stale_epochs: u32,
    frozen: bool,
    train: CheckinSequence,
    valid: PoiId,
    test: PoiId,
    mi_pairs: Vec<(PoiId, CatId)>,
    summary: UserSummary,
    neighbors: NeighborState,
    geo_probes: BTreeSet<UserId>,
    sem_probes: BTreeSet<UserId>,
    geo_refs: BTreeMap<RegionId, Arc<GeoReferenceSet>>,
    sem_refs: Arc<SemReferenceSet>,
    loss_history: Vec<f64>,
    train_rng: SimRng,
    sampling_rng: SimRng,
}

impl Device {
    /// Builds a device from its local split. The model stores every POI of
    /// the regions the user has visited plus the regions of its held-out
    /// targets, which it must be able to rank.
    pub fn new(user: UserId, split: UserSplit, world: &World, dim: usize, config: &SimConfig) -> Result<Self> {
        let summary = UserSummary::from_training(&split.train, &world.region_map, world.num_categories)?;
        let mut regions: BTreeSet<RegionId> = summary.visited_regions.iter().copied().collect();
        regions.insert(world.region_of(split.valid)?);
        regions.insert(world.region_of(split.test)?);
        let stored: Vec<PoiId> = regions
            .iter()
            .flat_map(|r| world.region_map.region(*r).poi_ids.iter().copied())
            .collect();
        // every stored POI with its public category
        let mi_pairs: Vec<(PoiId, CatId)> = stored.iter().map(|p| (*p, world.pois[p.index()].category)).collect();
        let model = DeviceModel::new(
            user,
            dim,
            stored.iter().copied(),
            world.num_categories,
            config.dropout,
            rng::derive(config.seed, rng::stream::MODEL_INIT, user.0 as u64),
        )?;
        Ok(Device {
            user,
            model,
            best: None,
            stale_epochs: 0,
            frozen: false,
            train: split.train,
            valid: split.valid,
            test: split.test,
            mi_pairs,
            summary,
            neighbors: NeighborState::default(),
            geo_probes: BTreeSet::new(),
            sem_probes: BTreeSet::new(),
            geo_refs: BTreeMap::new(),
            sem_refs: Arc::new(SemReferenceSet { sequences: Vec::new() }),
            loss_history: Vec::new(),
            train_rng: rng::derive(config.seed, rng::stream::TRAIN, user.0 as u64),
            sampling_rng: rng::derive(config.seed, rng::stream::SAMPLING, user.0 as u64),
        })
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn model_size_bytes(&self) -> usize {
        self.model.model_size_bytes()
    }

    /// The only personal information uploaded to the server.
    pub fn summary(&self) -> UserSummary {
        self.summary.clone()
    }

    pub fn neighbor_state(&self) -> &NeighborState {
        &self.neighbors
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stores the server package and draws the initial active sets.
    pub fn install(&mut self, package: Package, config: &SimConfig) {
        self.neighbors = NeighborState::new(self.user, package.geo_neighbors, package.sem_neighbors);
        self.geo_refs = package.geo_refs;
        self.sem_refs = package.sem_refs;
        match config.sampling {
            SamplingMode::Full => self.neighbors.activate_all(),
            SamplingMode::Performance => self.neighbors.redraw(config.alpha, &mut self.sampling_rng),
            SamplingMode::Similarity => {
                self.neighbors.redraw(config.beta, &mut self.sampling_rng);
                self.draw_probes(config.beta);
            }
        }
    }

    fn draw_probes(&mut self, k: usize) {
        let rest = |full: &BTreeSet<UserId>, active: &BTreeSet<UserId>| -> BTreeSet<UserId> {
            full.difference(active).copied().collect()
        };
        self.geo_probes = sample_uniform(&rest(&self.neighbors.geo_full, &self.neighbors.geo_active), k, &mut self.sampling_rng);
        self.sem_probes = sample_uniform(&rest(&self.neighbors.sem_full, &self.neighbors.sem_active), k, &mut self.sampling_rng);
    }

    fn current_region(&self) -> RegionId {
        self.summary.current_region()
    }

    /// Bundles this device wants to read this round: `(owner, kind)`.
    fn wanted(&self, sampling: SamplingMode) -> Vec<(UserId, RefKind)> {
        let geo = RefKind::Geo(self.current_region());
        let mut out: Vec<(UserId, RefKind)> = self
            .neighbors
            .geo_active
            .iter()
            .chain(&self.geo_probes)
            .map(|u| (*u, geo))
            .chain(
                self.neighbors
                    .sem_active
                    .iter()
                    .chain(&self.sem_probes)
                    .map(|u| (*u, RefKind::Semantic)),
            )
            .collect();
        if sampling == SamplingMode::Similarity {
            out.push((self.user, geo));
            out.push((self.user, RefKind::Semantic));
        }
        out
    }

    fn publish(&self, kinds: &BTreeSet<RefKind>, world: &World, round: u32) -> Result<Vec<SoftDecisionBundle>> {
        kinds
            .iter()
            .map(|kind| match kind {
                RefKind::Geo(r) => {
                    let refs = self.geo_refs.get(r).ok_or_else(|| {
                        Error::Model(format!("no reference set for {r} on device {}", self.user))
                    })?;
                    compute_geo_bundle(&self.model, refs, &geo_support(&world.region_map, *r), round)
                }
                RefKind::Semantic => {
                    compute_sem_bundle(&self.model, &self.sem_refs, &sem_support(world.num_categories), round)
                }
            })
            .collect()
    }

    fn validation_score(&self, world: &World, n: usize) -> Result<ValScore> {
        let eval = self.evaluate_target(&self.model, &self.train.pois, self.valid, world, n)?;
        Ok(ValScore {
            hit: eval.rank <= 10,
            neg_rank: -(eval.rank as i64),
        })
    }

    /// Ranks `target` after `prefix` against the nearest POIs of its region
    /// the user has not visited within `prefix`, measured from the last
    /// check-in of `prefix`.
    fn evaluate_target(
        &self,
        model: &DeviceModel,
        prefix: &[PoiId],
        target: PoiId,
        world: &World,
        n: usize,
    ) -> Result<DeviceEval> {
        let history: BTreeSet<PoiId> = prefix.iter().copied().collect();
        let last = prefix
            .last()
            .ok_or_else(|| Error::Evaluation(format!("user {} has an empty prefix", self.user)))?;
        let anchor = world.pois[last.index()].coords();
        let candidates = candidate_set(target, &history, anchor, &world.region_map, &world.pois, n)?;
        evaluate_device(model, prefix, target, &candidates)
    }

    /// Test-set evaluation of the best validated model (the current one if
    /// validation never ran). The test target follows the validation
    /// check-in, so the prefix is the training sequence plus that check-in.
    pub fn evaluate_test(&self, world: &World, n: usize) -> Result<DeviceEval> {
        let model = self.best.as_ref().map_or(&self.model, |(_, m)| m);
        let mut prefix = self.train.pois.clone();
        prefix.push(self.valid);
        self.evaluate_target(model, &prefix, self.test, world, n)
    }

    fn train_round(
        &mut self,
        board: &Board,
        world: &World,
        config: &SimConfig,
        round: u32,
        observer: &dyn Observer,
    ) -> Result<RoundRecord> {
        let geo_kind = RefKind::Geo(self.current_region());
        let mut bytes_in = 0usize;
        let mut fetched: BTreeMap<(UserId, RefKind), Arc<SoftDecisionBundle>> = BTreeMap::new();
        let mut fetch = |owner: UserId, kind: RefKind, fetched: &mut BTreeMap<_, _>| -> Result<Arc<SoftDecisionBundle>> {
            if let Some(b) = fetched.get(&(owner, kind)) {
                return Ok(Arc::clone(b));
            }
            let b = board.get(owner, kind)?;
            let bytes = b.wire_bytes();
            bytes_in += bytes;
            observer.record(AuditEvent::Fetch {
                round,
                requester: self.user,
                owner,
                kind,
                bytes,
            });
            fetched.insert((owner, kind), Arc::clone(&b));
            Ok(b)
        };
        let geo_teachers: Vec<Arc<SoftDecisionBundle>> = self
            .neighbors
            .geo_active
            .iter()
            .map(|u| fetch(*u, geo_kind, &mut fetched))
            .collect::<Result<_>>()?;
        let sem_teachers: Vec<Arc<SoftDecisionBundle>> = self
            .neighbors
            .sem_active
            .iter()
            .map(|u| fetch(*u, RefKind::Semantic, &mut fetched))
            .collect::<Result<_>>()?;

        let region = self.current_region();
        let geo_refs = Arc::clone(
            self.geo_refs
                .get(&region)
                .ok_or_else(|| Error::Model(format!("no reference set for current region {region}")))?,
        );
        let sem_refs = Arc::clone(&self.sem_refs);
        let support: Vec<PoiId> = world.region_map.region(region).poi_ids.clone();
        let gt: Vec<&SoftDecisionBundle> = geo_teachers.iter().map(|b| b.as_ref()).collect();
        let st: Vec<&SoftDecisionBundle> = sem_teachers.iter().map(|b| b.as_ref()).collect();
        let mi_pairs = self.mi_pairs.clone();
        let inputs = CollabInputs {
            geo_refs: &geo_refs,
            geo_support: &support,
            geo_teachers: &gt,
            sem_refs: &sem_refs,
            sem_teachers: &st,
            mi_pairs: &mi_pairs,
        };

        let train = self.train.pois.clone();
        let mut positions: Vec<usize> = (1..train.len()).collect();
        positions.shuffle(&mut self.train_rng);
        for batch in positions.chunks(config.batch_size) {
            let local = local_terms(&train, batch, &world.region_map)?;
            let (_, grads) = combined_loss(&mut self.model, &local, Some(&inputs), config.gamma, config.mu, Mode::Train)?;
            if let Some(what) = grads.non_finite() {
                return Err(Error::Numerical { component: what });
            }
            self.model.sgd_step(&grads, config.lr)?;
        }
        let all: Vec<usize> = (1..train.len()).collect();
        let local = local_terms(&train, &all, &world.region_map)?;
        let (breakdown, _) = combined_loss(&mut self.model, &local, Some(&inputs), config.gamma, config.mu, Mode::Eval)?;
        if !breakdown.combined.is_finite() {
            return Err(Error::Numerical {
                component: "combined loss".into(),
            });
        }
        let previous = self.loss_history.last().copied();
        self.loss_history.push(breakdown.l_loc);

        let resampled = match config.sampling {
            SamplingMode::Full => false,
            SamplingMode::Performance => match previous {
                Some(prev) => perf_triggered_resample(
                    &mut self.neighbors,
                    prev,
                    breakdown.l_loc,
                    config.tau_percent,
                    config.alpha,
                    &mut self.sampling_rng,
                ),
                None => false,
            },
            SamplingMode::Similarity => {
                let own_geo = board.get(self.user, geo_kind)?;
                let own_sem = board.get(self.user, RefKind::Semantic)?;
                let geo_cands: BTreeSet<UserId> =
                    self.neighbors.geo_active.union(&self.geo_probes).copied().collect();
                let sem_cands: BTreeSet<UserId> =
                    self.neighbors.sem_active.union(&self.sem_probes).copied().collect();
                let geo_b: Vec<(UserId, Arc<SoftDecisionBundle>)> = geo_cands
                    .iter()
                    .map(|u| Ok((*u, fetch(*u, geo_kind, &mut fetched)?)))
                    .collect::<Result<_>>()?;
                let sem_b: Vec<(UserId, Arc<SoftDecisionBundle>)> = sem_cands
                    .iter()
                    .map(|u| Ok((*u, fetch(*u, RefKind::Semantic, &mut fetched)?)))
                    .collect::<Result<_>>()?;
                let geo_map: BTreeMap<UserId, &SoftDecisionBundle> = geo_b.iter().map(|(u, b)| (*u, b.as_ref())).collect();
                let sem_map: BTreeMap<UserId, &SoftDecisionBundle> = sem_b.iter().map(|(u, b)| (*u, b.as_ref())).collect();
                let before = (self.neighbors.geo_active.clone(), self.neighbors.sem_active.clone());
                similarity_sample(
                    &mut self.neighbors,
                    &own_geo,
                    &own_sem,
                    &geo_cands,
                    &sem_cands,
                    &geo_map,
                    &sem_map,
                    config.beta,
                )?;
                self.draw_probes(config.beta);
                before != (self.neighbors.geo_active.clone(), self.neighbors.sem_active.clone())
            }
        };

        let score = self.validation_score(world, config.num_candidates)?;
        match &self.best {
            Some((best, _)) if score <= *best => self.stale_epochs += 1,
            _ => {
                self.best = Some((score, self.model.clone()));
                self.stale_epochs = 0;
            }
        }
        if config.patience > 0 && self.stale_epochs >= config.patience {
            debug!("device {} converged after round {round}", self.user);
            self.frozen = true;
        }

        Ok(RoundRecord {
            round,
            user: self.user,
            l_loc: breakdown.l_loc,
            l_geo: breakdown.l_geo,
            l_cat: breakdown.l_cat,
            l_mi: breakdown.l_mi,
            combined: breakdown.combined,
            bytes_in,
            resampled,
        })
    }
}

/// Round-start snapshot of every published bundle.
struct Board {
    bundles: BTreeMap<(UserId, RefKind), Arc<SoftDecisionBundle>>,
}

impl Board {
    fn get(&self, owner: UserId, kind: RefKind) -> Result<Arc<SoftDecisionBundle>> {
        self.bundles
            .get(&(owner, kind))
            .cloned()
            .ok_or_else(|| Error::Model(format!("user {owner} published no bundle for {kind:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub user: UserId,
    pub l_loc: f64,
    pub l_geo: f64,
    pub l_cat: f64,
    pub l_mi: f64,
    pub combined: f64,
    pub bytes_in: usize,
    pub resampled: bool,
}

impl RoundRecord {
    pub fn breakdown(&self, gamma: f64, mu: f64) -> LossBreakdown {
        LossBreakdown::assemble(self.l_loc, self.l_geo, self.l_cat, self.l_mi, gamma, mu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    /// One record per active (not frozen) device, by user id.
    pub records: Vec<RoundRecord>,
}

impl RoundLog {
    pub fn bytes_exchanged(&self) -> usize {
        self.records.iter().map(|r| r.bytes_in).sum()
    }
}

pub struct Simulation<'w> {
    world: &'w World,
    config: SimConfig,
    devices: Vec<Device>,
    round: u32,
    logs: Vec<RoundLog>,
    observer: Arc<dyn Observer>,
}

impl<'w> Simulation<'w> {
    /// Devices must already hold their packages.
    pub fn new(world: &'w World, config: SimConfig, mut devices: Vec<Device>, observer: Arc<dyn Observer>) -> Result<Self> {
        config.validate()?;
        devices.sort_by_key(|d| d.user);
        Ok(Simulation {
            world,
            config,
            devices,
            round: 0,
            logs: Vec::new(),
            observer,
        })
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn rounds_run(&self) -> u32 {
        self.round
    }

    pub fn all_frozen(&self) -> bool {
        self.devices.iter().all(|d| d.frozen)
    }

    /// One synchronous round: publish, train against round-start bundles,
    /// resample.
    pub fn run_round(&mut self) -> Result<&RoundLog> {
        let round = self.round;
        let observer = Arc::clone(&self.observer);
        observer.record(AuditEvent::RoundStart { round });

        let mut wanted: BTreeMap<UserId, BTreeSet<RefKind>> = BTreeMap::new();
        for d in self.devices.iter().filter(|d| !d.frozen) {
            for (owner, kind) in d.wanted(self.config.sampling) {
                wanted.entry(owner).or_default().insert(kind);
            }
        }
        let world = self.world;
        let published: Vec<Vec<SoftDecisionBundle>> = self
            .devices
            .par_iter()
            .map(|d| match wanted.get(&d.user) {
                Some(kinds) => d.publish(kinds, world, round).map_err(|e| Error::Device {
                    device: d.user.0,
                    source: Box::new(e),
                }),
                None => Ok(Vec::new()),
            })
            .collect::<Result<_>>()?;
        let mut bundles = BTreeMap::new();
        for b in published.into_iter().flatten() {
            observer.record(AuditEvent::Publish {
                round,
                owner: b.owner,
                kind: b.ref_kind,
            });
            bundles.insert((b.owner, b.ref_kind), Arc::new(b));
        }
        let board = Board { bundles };

        let config = &self.config;
        let records: Vec<RoundRecord> = self
            .devices
            .par_iter_mut()
            .filter(|d| !d.frozen)
            .map(|d| {
                d.train_round(&board, world, config, round, observer.as_ref())
                    .map_err(|e| Error::Device {
                        device: d.user.0,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        let log = RoundLog { round, records };
        info!(
            "round {round}: {} devices trained, {} bytes exchanged",
            log.records.len(),
            log.bytes_exchanged()
        );
        self.logs.push(log);
        self.round += 1;
        Ok(self.logs.last().expect("just pushed"))
    }

    /// Runs rounds until `max_epochs` or every device has converged.
    pub fn run_until_converged(&mut self) -> Result<()> {
        while self.round < self.config.max_epochs && !self.all_frozen() {
            self.run_round()?;
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<Vec<DeviceEval>> {
        let n = self.config.num_candidates;
        self.devices
            .par_iter()
            .map(|d| d.evaluate_test(self.world, n))
            .collect()
    }

    pub fn neighbor_states(&self) -> BTreeMap<UserId, NeighborState> {
        self.devices.iter().map(|d| (d.user, d.neighbors.clone())).collect()
    }
}

/// Builds devices, runs the server phase and installs packages.
pub fn setup(
    world: &World,
    users: &BTreeMap<UserId, UserSplit>,
    dims: &BTreeMap<UserId, usize>,
    server: Server<'_>,
    config: &SimConfig,
    observer: &dyn Observer,
) -> Result<(ServerState, Vec<Device>)> {
    let mut devices: Vec<Device> = users
        .par_iter()
        .map(|(u, split)| {
            let dim = *dims
                .get(u)
                .ok_or_else(|| Error::Config(format!("no latent dimension assigned to user {u}")))?;
            Device::new(*u, split.clone(), world, dim, config)
        })
        .collect::<Result<_>>()?;
    let summaries = devices.iter().map(Device::summary).collect();
    let (state, mut packages) = server.server_phase(summaries, observer)?;
    for d in &mut devices {
        let p = packages
            .remove(&d.user)
            .ok_or_else(|| Error::Generation(format!("no package for user {}", d.user)))?;
        d.install(p, config);
    }
    Ok((state, devices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_mode_round_trips() {
        for mode in [SamplingMode::Performance, SamplingMode::Similarity, SamplingMode::Full] {
            assert_eq!(mode.to_string().parse::<SamplingMode>().unwrap(), mode);
        }
        assert_eq!("none".parse::<SamplingMode>().unwrap(), SamplingMode::Full);
        assert!("random".parse::<SamplingMode>().is_err());
    }

    #[test]
    fn default_config_is_valid() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_settings() {
        let broken = [
            SimConfig { gamma: -0.1, ..SimConfig::default() },
            SimConfig { gamma: f64::NAN, ..SimConfig::default() },
            SimConfig { mu: 1.5, ..SimConfig::default() },
            SimConfig { tau_percent: 101.0, ..SimConfig::default() },
            SimConfig { lr: 0.0, ..SimConfig::default() },
            SimConfig { dropout: 1.0, ..SimConfig::default() },
            SimConfig { alpha: 0, ..SimConfig::default() },
            SimConfig { max_epochs: 0, ..SimConfig::default() },
        ];
        for c in broken {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn audit_log_keeps_order() {
        let log = AuditLog::default();
        log.record(AuditEvent::ServerCall { operation: "neighbors".into() });
        log.record(AuditEvent::RoundStart { round: 0 });
        let events = log.events();
        assert_eq!(events.len(), 2);
        assert!(matches!(events[0], AuditEvent::ServerCall { .. }));
        assert_eq!(events[1], AuditEvent::RoundStart { round: 0 });
    }

    #[test]
    fn round_bytes_sum_over_devices() {
        let rec = |user, bytes_in| RoundRecord {
            round: 3,
            user: UserId(user),
            l_loc: 1.0,
            l_geo: 0.5,
            l_cat: 0.25,
            l_mi: 0.25,
            combined: 0.0,
            bytes_in,
            resampled: false,
        };
        let log = RoundLog { round: 3, records: vec![rec(0, 100), rec(1, 0), rec(2, 41)] };
        assert_eq!(log.bytes_exchanged(), 141);
        let b = log.records[0].breakdown(2.0, 0.5);
        assert!((b.combined - (1.0 + 2.0 * (0.5 * 0.5 + 0.5 * 0.5))).abs() < 1e-12);
    }
}
