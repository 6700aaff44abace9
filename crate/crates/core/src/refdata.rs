//! Anonymous reference data generated on the server: one geographical
//! reference set per region and one semantic (category) reference set.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use log::{debug, warn};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CatId, CheckinSequence, Poi, PoiId, SocialGraph, UserId};
use crate::error::{Error, Result};
use crate::geo::{haversine_km, Region, RegionId, RegionMap};
use crate::rng::{self, SimRng};

pub const DEFAULT_SEQS_PER_REGION: usize = 20;
pub const DEFAULT_SEM_SEQS: usize = 50;
pub const DEFAULT_GEN_LENGTH: usize = 20;
pub const DEFAULT_MAX_HOP_KM: f64 = 5.0;
pub const MAX_BACKTRACKS: usize = 20;

/// A POI sequence with its parallel category ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RefSequence {
    pub pois: Vec<PoiId>,
    pub categories: Vec<CatId>,
}

impl RefSequence {
    pub fn from_pois(pois: Vec<PoiId>, poi_table: &[Poi]) -> Self {
        let categories = pois.iter().map(|p| poi_table[p.index()].category).collect();
        RefSequence { pois, categories }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoReferenceSet {
    pub region: RegionId,
    pub sequences: Vec<RefSequence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemReferenceSet {
    pub sequences: Vec<Vec<CatId>>,
}

impl SemReferenceSet {
    pub fn covered_categories(&self) -> BTreeSet<CatId> {
        self.sequences.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefGenMode {
    Transformative,
    Probabilistic,
    /// Raw pool sequences, region-restricted. Not anonymous; for ablations.
    Original,
}

impl fmt::Display for RefGenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefGenMode::Transformative => "transformative",
            RefGenMode::Probabilistic => "probabilistic",
            RefGenMode::Original => "original",
        })
    }
}

impl FromStr for RefGenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformative" => Ok(RefGenMode::Transformative),
            "probabilistic" => Ok(RefGenMode::Probabilistic),
            "original" => Ok(RefGenMode::Original),
            other => Err(Error::Config(format!("unknown reference generation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefGenConfig {
    pub mode: RefGenMode,
    pub seqs_per_region: usize,
    pub sem_seqs: usize,
    pub gen_length: usize,
    pub max_hop_km: f64,
    /// Top up under-filled sets with probabilistic generation.
    pub probabilistic_fallback: bool,
}

impl Default for RefGenConfig {
    fn default() -> Self {
        RefGenConfig {
            mode: RefGenMode::Transformative,
            seqs_per_region: DEFAULT_SEQS_PER_REGION,
            sem_seqs: DEFAULT_SEM_SEQS,
            gen_length: DEFAULT_GEN_LENGTH,
            max_hop_km: DEFAULT_MAX_HOP_KM,
            probabilistic_fallback: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceData {
    pub geo: BTreeMap<RegionId, GeoReferenceSet>,
    pub sem: SemReferenceSet,
}

/// Swaps the suffixes of two sequences at a uniformly chosen common element.
/// Each sequence is split at the first occurrence of that element, which is
/// kept once in each output. `None` when the sequences share nothing.
pub fn transformative_pair<T, R>(a: &[T], b: &[T], rng: &mut R) -> Option<(Vec<T>, Vec<T>)>
where
    T: Copy + Ord,
    R: Rng + ?Sized,
{
    let in_b: BTreeSet<T> = b.iter().copied().collect();
    let common: Vec<T> = a
        .iter()
        .copied()
        .filter(|x| in_b.contains(x))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pivot = *common.choose(rng)?;
    let ia = a.iter().position(|x| *x == pivot)?;
    let ib = b.iter().position(|x| *x == pivot)?;
    let first = a[..ia].iter().chain(&b[ib..]).copied().collect();
    let second = b[..ib].iter().chain(&a[ia..]).copied().collect();
    Some((first, second))
}

/// Keeps only the POIs of the sequence's most visited region (smaller id on
/// ties), preserving order.
pub fn region_restrict(seq: &[PoiId], region_map: &RegionMap) -> Result<(RegionId, Vec<PoiId>)> {
    if seq.is_empty() {
        return Err(Error::Generation("cannot restrict an empty sequence".into()));
    }
    let mut counts: BTreeMap<RegionId, usize> = BTreeMap::new();
    for p in seq {
        let r = region_map
            .region_of(*p)
            .ok_or_else(|| Error::Generation(format!("POI {p} has no region")))?;
        *counts.entry(r).or_default() += 1;
    }
    // max_by_key keeps the last maximum; iterate in reverse so the smallest id wins
    let (&region, _) = counts.iter().rev().max_by_key(|(_, c)| **c).expect("nonempty");
    let kept: Vec<PoiId> = seq
        .iter()
        .copied()
        .filter(|p| region_map.region_of(*p) == Some(region))
        .collect();
    if kept.len() < 2 {
        return Err(Error::Generation(format!(
            "only {} check-in(s) left in {region} after restriction",
            kept.len()
        )));
    }
    Ok((region, kept))
}

/// Row-stochastic category transition matrix. Row `n` is the distribution
/// of the category that follows `states[n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub states: Vec<CatId>,
    pub probs: Vec<Vec<f64>>,
}

fn normalize_rows(counts: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter().map(|c| c / total).collect()
            } else {
                vec![1.0 / row.len() as f64; row.len()]
            }
        })
        .collect()
}

/// Counts immediate successions over all sequences. Categories never seen
/// as a predecessor get a uniform row.
pub fn transition_matrix<S: AsRef<[CatId]>>(cat_seqs: &[S], num_categories: usize) -> Result<TransitionMatrix> {
    if num_categories == 0 {
        return Err(Error::Generation("no categories".into()));
    }
    let mut counts = vec![vec![0.0; num_categories]; num_categories];
    for seq in cat_seqs {
        for w in seq.as_ref().windows(2) {
            let (from, to) = (w[0].index(), w[1].index());
            if from >= num_categories || to >= num_categories {
                return Err(Error::Generation(format!("category id out of range 0..{num_categories}")));
            }
            counts[from][to] += 1.0;
        }
    }
    Ok(TransitionMatrix {
        states: (0..num_categories as u32).map(CatId).collect(),
        probs: normalize_rows(counts),
    })
}

impl TransitionMatrix {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The chain restricted to `keep` (a subset of the states), rows
    /// renormalized; rows left with no mass become uniform.
    pub fn restricted(&self, keep: &[CatId]) -> TransitionMatrix {
        let pos: BTreeMap<CatId, usize> = self.states.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let idx: Vec<Option<usize>> = keep.iter().map(|c| pos.get(c).copied()).collect();
        let counts = idx
            .iter()
            .map(|from| {
                idx.iter()
                    .map(|to| match (from, to) {
                        (Some(f), Some(t)) => self.probs[*f][*t],
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        TransitionMatrix {
            states: keep.to_vec(),
            probs: normalize_rows(counts),
        }
    }

    fn step<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        match WeightedIndex::new(&self.probs[from]) {
            Ok(dist) => dist.sample(rng),
            Err(_) => rng.gen_range(0..self.len()),
        }
    }

    fn chain_from<R: Rng + ?Sized>(&self, start: usize, length: usize, rng: &mut R) -> Vec<CatId> {
        let mut out = Vec::with_capacity(length);
        let mut cur = start;
        out.push(self.states[cur]);
        while out.len() < length {
            cur = self.step(cur, rng);
            out.push(self.states[cur]);
        }
        out
    }
}

/// Random walk on the chain from a uniformly chosen start state.
pub fn probabilistic_cat_seq<R: Rng + ?Sized>(matrix: &TransitionMatrix, length: usize, rng: &mut R) -> Result<Vec<CatId>> {
    if length < 2 {
        return Err(Error::Generation(format!("generated length must be at least 2, got {length}")));
    }
    if matrix.is_empty() {
        return Err(Error::Generation("empty transition matrix".into()));
    }
    let start = rng.gen_range(0..matrix.len());
    Ok(matrix.chain_from(start, length, rng))
}

/// Realizes a category sequence as POIs of `region`, each consecutive pair
/// closer than `max_hop_km`. Dead ends backtrack one position, at most
/// [`MAX_BACKTRACKS`] times per position. `None` if unsatisfiable.
pub fn probabilistic_poi_seq<R: Rng + ?Sized>(
    cat_seq: &[CatId],
    region: &Region,
    poi_table: &[Poi],
    max_hop_km: f64,
    rng: &mut R,
) -> Option<Vec<PoiId>> {
    if cat_seq.is_empty() || region.poi_ids.is_empty() {
        return None;
    }
    let mut by_cat: BTreeMap<CatId, Vec<PoiId>> = BTreeMap::new();
    for p in &region.poi_ids {
        by_cat.entry(poi_table[p.index()].category).or_default().push(*p);
    }
    let n = cat_seq.len();
    let mut chosen: Vec<PoiId> = Vec::with_capacity(n);
    // candidates already tried and rejected at each position, given the prefix
    let mut excluded: Vec<BTreeSet<PoiId>> = vec![BTreeSet::new(); n];
    let mut backtracks = vec![0usize; n];
    while chosen.len() < n {
        let t = chosen.len();
        let options: Vec<PoiId> = by_cat
            .get(&cat_seq[t])
            .map(|ps| {
                ps.iter()
                    .copied()
                    .filter(|p| !excluded[t].contains(p))
                    .filter(|p| match chosen.last() {
                        None => true,
                        Some(prev) => {
                            haversine_km(poi_table[prev.index()].coords(), poi_table[p.index()].coords()) < max_hop_km
                        }
                    })
                    .collect()
            })
            .unwrap_or_default();
        match options.choose(rng) {
            Some(p) => chosen.push(*p),
            None => {
                if t == 0 {
                    return None;
                }
                let back = t - 1;
                backtracks[back] += 1;
                if backtracks[back] > MAX_BACKTRACKS {
                    return None;
                }
                let dead = chosen.pop().expect("t > 0");
                excluded[back].insert(dead);
                excluded[t].clear();
            }
        }
    }
    Some(chosen)
}

struct Generator<'a> {
    pool: &'a [CheckinSequence],
    region_map: &'a RegionMap,
    poi_table: &'a [Poi],
    num_categories: usize,
    config: &'a RefGenConfig,
    raw_pois: HashSet<Vec<PoiId>>,
    raw_cats: HashSet<Vec<CatId>>,
    global: TransitionMatrix,
}

impl<'a> Generator<'a> {
    fn probabilistic_geo(&self, region: RegionId, seen: &mut HashSet<Vec<PoiId>>, rng: &mut SimRng) -> Result<RefSequence> {
        let reg = self.region_map.region(region);
        let cats: Vec<CatId> = reg
            .poi_ids
            .iter()
            .map(|p| self.poi_table[p.index()].category)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let local = self.global.restricted(&cats);
        let attempts = 200;
        let mut fallback = None;
        for _ in 0..attempts {
            let cat_seq = probabilistic_cat_seq(&local, self.config.gen_length, rng)?;
            if let Some(pois) = probabilistic_poi_seq(&cat_seq, reg, self.poi_table, self.config.max_hop_km, rng) {
                if self.raw_pois.contains(&pois) {
                    continue;
                }
                if seen.insert(pois.clone()) {
                    return Ok(RefSequence::from_pois(pois, self.poi_table));
                }
                fallback.get_or_insert(pois);
            }
        }
        // tiny regions may not admit enough distinct sequences
        fallback
            .map(|p| RefSequence::from_pois(p, self.poi_table))
            .ok_or_else(|| Error::Generation(format!("no valid probabilistic sequence for {region}")))
    }

    fn probabilistic_sem(&self, rng: &mut SimRng) -> Result<Vec<CatId>> {
        let mut last = Vec::new();
        for _ in 0..200 {
            last = probabilistic_cat_seq(&self.global, self.config.gen_length, rng)?;
            if !self.raw_cats.contains(&last) {
                return Ok(last);
            }
        }
        Err(Error::Generation(format!("every sampled category sequence copies the pool, e.g. {last:?}")))
    }

    /// A chain started at `cat` that is not a raw pool sequence.
    fn fresh_chain_from(&self, cat: CatId, rng: &mut SimRng) -> Result<Vec<CatId>> {
        for _ in 0..200 {
            let chain = self.global.chain_from(cat.index(), self.config.gen_length.max(2), rng);
            if !self.raw_cats.contains(&chain) {
                return Ok(chain);
            }
        }
        Err(Error::Generation(format!("every chain from category {cat} copies the pool")))
    }

    fn friend_pairs(&self, graph: &SocialGraph) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.pool.len() {
            for j in i + 1..self.pool.len() {
                if graph.are_friends(self.pool[i].user, self.pool[j].user) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    fn transformative(
        &self,
        graph: &SocialGraph,
        geo: &mut BTreeMap<RegionId, Vec<RefSequence>>,
        geo_seen: &mut BTreeMap<RegionId, HashSet<Vec<PoiId>>>,
        sem: &mut Vec<Vec<CatId>>,
        rng: &mut SimRng,
    ) {
        let friends = self.friend_pairs(graph);
        let share = |a: &[PoiId], b: &[PoiId]| {
            let s: BTreeSet<_> = a.iter().collect();
            b.iter().any(|p| s.contains(p))
        };
        let geo_pairs: Vec<(usize, usize)> = friends
            .iter()
            .copied()
            .filter(|&(i, j)| share(&self.pool[i].pois, &self.pool[j].pois))
            .collect();
        let sem_pairs: Vec<(usize, usize)> = friends
            .iter()
            .copied()
            .filter(|&(i, j)| {
                let a: BTreeSet<_> = self.pool[i].categories.iter().collect();
                self.pool[j].categories.iter().any(|c| a.contains(c))
            })
            .collect();
        debug!(
            "{} friend pairs in the pool, {} share a POI, {} share a category",
            friends.len(),
            geo_pairs.len(),
            sem_pairs.len()
        );
        let target = self.config.seqs_per_region;
        let budget = 20 * (self.region_map.len() * target + self.config.sem_seqs);
        let geo_full = |geo: &BTreeMap<RegionId, Vec<RefSequence>>| {
            self.region_map.regions.iter().all(|r| geo.get(&r.id).map_or(0, Vec::len) >= target)
        };
        if !geo_pairs.is_empty() {
            for _ in 0..budget {
                if geo_full(geo) {
                    break;
                }
                let &(i, j) = geo_pairs.choose(rng).expect("nonempty");
                let Some((x, y)) = transformative_pair(&self.pool[i].pois, &self.pool[j].pois, rng) else {
                    continue;
                };
                for out in [x, y] {
                    if self.raw_pois.contains(&out) {
                        continue;
                    }
                    let Ok((region, kept)) = region_restrict(&out, self.region_map) else {
                        continue;
                    };
                    if self.raw_pois.contains(&kept) {
                        continue;
                    }
                    let set = geo.entry(region).or_default();
                    if set.len() < target && geo_seen.entry(region).or_default().insert(kept.clone()) {
                        set.push(RefSequence::from_pois(kept, self.poi_table));
                    }
                }
            }
        }
        if !sem_pairs.is_empty() {
            let mut seen: HashSet<Vec<CatId>> = sem.iter().cloned().collect();
            for _ in 0..budget {
                if sem.len() >= self.config.sem_seqs {
                    break;
                }
                let &(i, j) = sem_pairs.choose(rng).expect("nonempty");
                let Some((x, y)) = transformative_pair(&self.pool[i].categories, &self.pool[j].categories, rng) else {
                    continue;
                };
                for out in [x, y] {
                    if out.len() >= 2
                        && sem.len() < self.config.sem_seqs
                        && !self.raw_cats.contains(&out)
                        && seen.insert(out.clone())
                    {
                        sem.push(out);
                    }
                }
            }
        }
    }

    fn original(
        &self,
        geo: &mut BTreeMap<RegionId, Vec<RefSequence>>,
        geo_seen: &mut BTreeMap<RegionId, HashSet<Vec<PoiId>>>,
        sem: &mut Vec<Vec<CatId>>,
    ) {
        for seq in self.pool {
            if let Ok((region, kept)) = region_restrict(&seq.pois, self.region_map) {
                let set = geo.entry(region).or_default();
                if set.len() < self.config.seqs_per_region && geo_seen.entry(region).or_default().insert(kept.clone()) {
                    set.push(RefSequence::from_pois(kept, self.poi_table));
                }
            }
            if sem.len() < self.config.sem_seqs && seq.len() >= 2 {
                sem.push(seq.categories.clone());
            }
        }
    }

    /// Replaces trailing sequences with chains started at missing categories
    /// until every category occurs. Replaced slots are never replaced again.
    fn repair_coverage(&self, sem: &mut [Vec<CatId>], rng: &mut SimRng) -> Result<()> {
        let coverage = |sem: &[Vec<CatId>]| sem.iter().flatten().copied().collect::<BTreeSet<CatId>>();
        let mut missing: Vec<CatId> = (0..self.num_categories as u32)
            .map(CatId)
            .filter(|c| !coverage(sem).contains(c))
            .collect();
        missing.reverse();
        let mut slot = sem.len();
        while let Some(cat) = missing.pop() {
            if coverage(sem).contains(&cat) {
                continue;
            }
            if slot == 0 {
                return Err(Error::Generation(format!(
                    "{} semantic sequences cannot cover {} categories",
                    sem.len(),
                    self.num_categories
                )));
            }
            slot -= 1;
            let before = coverage(sem);
            sem[slot] = self.fresh_chain_from(cat, rng)?;
            let after = coverage(sem);
            missing.extend(before.difference(&after).copied());
        }
        Ok(())
    }
}

/// Builds every region's geographical reference set and the semantic set.
pub fn build_reference_data(
    pool: &[CheckinSequence],
    graph: &SocialGraph,
    region_map: &RegionMap,
    poi_table: &[Poi],
    num_categories: usize,
    config: &RefGenConfig,
    seed: u64,
) -> Result<ReferenceData> {
    if pool.is_empty() {
        return Err(Error::Generation("reference pool is empty".into()));
    }
    if config.seqs_per_region == 0 || config.sem_seqs == 0 {
        return Err(Error::Config("reference set sizes must be positive".into()));
    }
    if config.sem_seqs * config.gen_length.max(2) < num_categories {
        return Err(Error::Config(format!(
            "{} semantic sequences of length {} cannot cover {num_categories} categories",
            config.sem_seqs, config.gen_length
        )));
    }
    let mut rng = rng::derive(seed, rng::stream::REFDATA, 0);
    let cat_seqs: Vec<&[CatId]> = pool.iter().map(|s| s.categories.as_slice()).collect();
    let gen = Generator {
        pool,
        region_map,
        poi_table,
        num_categories,
        config,
        raw_pois: pool.iter().map(|s| s.pois.clone()).collect(),
        raw_cats: pool.iter().map(|s| s.categories.clone()).collect(),
        global: transition_matrix(&cat_seqs, num_categories)?,
    };
    let mut geo: BTreeMap<RegionId, Vec<RefSequence>> = BTreeMap::new();
    let mut geo_seen: BTreeMap<RegionId, HashSet<Vec<PoiId>>> = BTreeMap::new();
    let mut sem: Vec<Vec<CatId>> = Vec::new();
    match config.mode {
        RefGenMode::Transformative => gen.transformative(graph, &mut geo, &mut geo_seen, &mut sem, &mut rng),
        RefGenMode::Original => gen.original(&mut geo, &mut geo_seen, &mut sem),
        RefGenMode::Probabilistic => {}
    }

    let short: Vec<String> = region_map
        .regions
        .iter()
        .filter(|r| geo.get(&r.id).map_or(0, Vec::len) < config.seqs_per_region)
        .map(|r| r.id.to_string())
        .collect();
    if config.mode != RefGenMode::Probabilistic && (!short.is_empty() || sem.len() < config.sem_seqs) {
        if !config.probabilistic_fallback {
            return Err(Error::Generation(format!(
                "{} generation left regions [{}] under-filled ({} of {} semantic sequences)",
                config.mode,
                short.join(", "),
                sem.len(),
                config.sem_seqs
            )));
        }
        warn!(
            "{} generation under-filled {} region(s) and {}/{} semantic sequences; topping up probabilistically",
            config.mode,
            short.len(),
            sem.len(),
            config.sem_seqs
        );
    }
    let mut out = BTreeMap::new();
    for r in &region_map.regions {
        let mut seqs = geo.remove(&r.id).unwrap_or_default();
        let seen = geo_seen.entry(r.id).or_default();
        while seqs.len() < config.seqs_per_region {
            seqs.push(gen.probabilistic_geo(r.id, seen, &mut rng)?);
        }
        out.insert(
            r.id,
            GeoReferenceSet {
                region: r.id,
                sequences: seqs,
            },
        );
    }
    while sem.len() < config.sem_seqs {
        sem.push(gen.probabilistic_sem(&mut rng)?);
    }
    gen.repair_coverage(&mut sem, &mut rng)?;
    Ok(ReferenceData {
        geo: out,
        sem: SemReferenceSet { sequences: sem },
    })
}

fn join_ids<I: IntoIterator<Item = u32>>(ids: I) -> String {
    ids.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Geographical sets as `region<TAB>poi poi ...` lines, one per sequence.
pub fn write_geo_refs<W: Write>(refs: &BTreeMap<RegionId, GeoReferenceSet>, mut w: W) -> Result<()> {
    for set in refs.values() {
        for s in &set.sequences {
            writeln!(w, "{}\t{}", set.region.0, join_ids(s.pois.iter().map(|p| p.0)))?;
        }
    }
    Ok(())
}

/// Semantic set as whitespace-separated category ids, one line per sequence.
pub fn write_sem_refs<W: Write>(refs: &SemReferenceSet, mut w: W) -> Result<()> {
    for s in &refs.sequences {
        writeln!(w, "{}", join_ids(s.iter().map(|c| c.0)))?;
    }
    Ok(())
}

fn parse_ids(line: &str, lineno: usize) -> Result<Vec<u32>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<u32>().map_err(|e| Error::Parse {
                path: "<reference set>".into(),
                line: lineno,
                message: format!("bad id `{t}`: {e}"),
            })
        })
        .collect()
}

pub fn read_geo_refs<R: Read>(r: R, poi_table: &[Poi]) -> Result<BTreeMap<RegionId, GeoReferenceSet>> {
    let mut out: BTreeMap<RegionId, GeoReferenceSet> = BTreeMap::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (region, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: "<reference set>".into(),
            line: i + 1,
            message: "expected `region<TAB>ids`".into(),
        })?;
        let region = RegionId(parse_ids(region, i + 1)?.first().copied().unwrap_or_default());
        let pois: Vec<PoiId> = parse_ids(rest, i + 1)?.into_iter().map(PoiId).collect();
        if let Some(bad) = pois.iter().find(|p| p.index() >= poi_table.len()) {
            return Err(Error::Parse {
                path: "<reference set>".into(),
                line: i + 1,
                message: format!("unknown POI {bad}"),
            });
        }
        out.entry(region)
            .or_insert_with(|| GeoReferenceSet {
                region,
                sequences: Vec::new(),
            })
            .sequences
            .push(RefSequence::from_pois(pois, poi_table));
    }
    Ok(out)
}

pub fn read_sem_refs<R: Read>(r: R) -> Result<SemReferenceSet> {
    let mut sequences = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sequences.push(parse_ids(&line, i + 1)?.into_iter().map(CatId).collect());
    }
    Ok(SemReferenceSet { sequences })
}

/// Users whose sequences fed the pool; used by audits.
pub fn pool_users(pool: &[CheckinSequence]) -> BTreeSet<UserId> {
    pool.iter().map(|s| s.user).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LonLat;
    use rand::SeedableRng;

    fn p(v: &[u32]) -> Vec<PoiId> {
        v.iter().copied().map(PoiId).collect()
    }

    fn c(v: &[u32]) -> Vec<CatId> {
        v.iter().copied().map(CatId).collect()
    }

    #[test]
    fn pair_swaps_suffixes_at_common_poi() {
        let mut rng = SimRng::seed_from_u64(1);
        let (x, y) = transformative_pair(&p(&[1, 2, 3]), &p(&[4, 2, 5]), &mut rng).unwrap();
        assert_eq!(x, p(&[1, 2, 5]));
        assert_eq!(y, p(&[4, 2, 3]));
        let same = p(&[1, 2, 3]);
        let (x, y) = transformative_pair(&same, &same, &mut rng).unwrap();
        assert_eq!((x, y), (same.clone(), same));
        assert!(transformative_pair(&p(&[1, 2]), &p(&[3, 4]), &mut rng).is_none());
    }

    #[test]
    fn pair_splits_at_first_occurrence() {
        let mut rng = SimRng::seed_from_u64(2);
        let (x, y) = transformative_pair(&p(&[1, 2, 7, 2]), &p(&[9, 2, 8]), &mut rng).unwrap();
        assert_eq!(x, p(&[1, 2, 8]));
        assert_eq!(y, p(&[9, 2, 7, 2]));
    }

    fn two_region_map() -> RegionMap {
        let a: Vec<_> = (0..8)
            .map(|i| {
                let r = if i < 4 { 0 } else { 1 };
                (PoiId(i), LonLat::new(r as f64, 0.001 * i as f64), RegionId(r))
            })
            .collect();
        RegionMap::from_assignments(&a).unwrap()
    }

    #[test]
    fn restriction_examples() {
        let map = two_region_map();
        assert_eq!(region_restrict(&p(&[0, 1, 2]), &map).unwrap(), (RegionId(0), p(&[0, 1, 2])));
        assert_eq!(region_restrict(&p(&[0, 5, 1, 2]), &map).unwrap(), (RegionId(0), p(&[0, 1, 2])));
        assert_eq!(region_restrict(&p(&[4, 0, 5, 1]), &map).unwrap(), (RegionId(0), p(&[0, 1])));
        assert_eq!(region_restrict(&p(&[4, 5, 1]), &map).unwrap(), (RegionId(1), p(&[4, 5])));
        assert!(region_restrict(&p(&[0, 5]), &map).is_err());
    }

    #[test]
    fn transition_counting() {
        // A=0 B=1 C=2
        let m = transition_matrix(&[c(&[0, 1, 0, 2])], 3).unwrap();
        assert_eq!(m.probs[0], vec![0.0, 0.5, 0.5]);
        assert_eq!(m.probs[1], vec![1.0, 0.0, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(m.probs[2], vec![third; 3]);
        let m = transition_matrix(&[c(&[0, 0, 0])], 1).unwrap();
        assert_eq!(m.probs[0], vec![1.0]);
    }

    #[test]
    fn restricted_chain_renormalizes() {
        let m = transition_matrix(&[c(&[0, 1, 0, 2, 2])], 3).unwrap();
        let r = m.restricted(&c(&[0, 2]));
        assert_eq!(r.states, c(&[0, 2]));
        assert_eq!(r.probs[0], vec![0.0, 1.0]);
        assert_eq!(r.probs[1], vec![0.0, 1.0]);
    }

    #[test]
    fn deterministic_chain_is_determined_by_start() {
        let m = TransitionMatrix {
            states: c(&[0, 1, 2]),
            probs: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
        };
        let mut rng = SimRng::seed_from_u64(3);
        for _ in 0..20 {
            let s = probabilistic_cat_seq(&m, 7, &mut rng).unwrap();
            assert_eq!(s.len(), 7);
            for w in s.windows(2) {
                assert_eq!(w[1].0, (w[0].0 + 1) % 3);
            }
        }
        assert!(probabilistic_cat_seq(&m, 1, &mut rng).is_err());
    }

    #[test]
    fn chain_frequencies_follow_row() {
        let m = TransitionMatrix {
            states: c(&[0, 1, 2]),
            probs: vec![vec![0.2, 0.5, 0.3], vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]],
        };
        let mut rng = SimRng::seed_from_u64(4);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[m.step(0, &mut rng)] += 1;
        }
        for (k, want) in [0.2, 0.5, 0.3].iter().enumerate() {
            assert!((counts[k] as f64 / 10_000.0 - want).abs() < 0.02);
        }
    }

    fn poi(id: u32, cat: u32, lon: f64, lat: f64) -> Poi {
        Poi {
            id: PoiId(id),
            raw_id: format!("p{id}"),
            category: CatId(cat),
            lon,
            lat,
            city: None,
        }
    }

    fn region_of(pois: &[Poi]) -> Region {
        Region {
            id: RegionId(0),
            centroid: LonLat::new(0.0, 0.0),
            poi_ids: pois.iter().map(|p| p.id).collect(),
        }
    }

    #[test]
    fn forced_choice_realization() {
        let table = vec![poi(0, 0, 0.0, 0.0), poi(1, 1, 0.001, 0.0), poi(2, 2, 0.0, 0.001)];
        let reg = region_of(&table);
        let mut rng = SimRng::seed_from_u64(5);
        let s = probabilistic_poi_seq(&c(&[2, 0, 1, 0]), &reg, &table, 5.0, &mut rng).unwrap();
        assert_eq!(s, p(&[2, 0, 1, 0]));
    }

    #[test]
    fn far_apart_categories_are_unsatisfiable() {
        // 0.1 degrees of latitude is about 11 km
        let table = vec![poi(0, 0, 0.0, 0.0), poi(1, 1, 0.0, 0.1)];
        let reg = region_of(&table);
        let mut rng = SimRng::seed_from_u64(6);
        assert!(probabilistic_poi_seq(&c(&[0, 1]), &reg, &table, 5.0, &mut rng).is_none());
    }

    #[test]
    fn backtracking_finds_the_only_route() {
        // category 0 has a near and a far POI; only the near one reaches category 1
        let table = vec![poi(0, 0, 0.0, 0.0), poi(1, 0, 0.0, 1.0), poi(2, 1, 0.0, 0.01)];
        let reg = region_of(&table);
        for seed in 0..20 {
            let mut rng = SimRng::seed_from_u64(seed);
            let s = probabilistic_poi_seq(&c(&[0, 1]), &reg, &table, 5.0, &mut rng).unwrap();
            assert_eq!(s, p(&[0, 2]));
        }
    }

    fn world() -> (Vec<Poi>, RegionMap, Vec<CheckinSequence>, SocialGraph) {
        // region 0: POIs 0..6 near (0,0); region 1: POIs 6..12 near (1,0)
        let table: Vec<Poi> = (0..12)
            .map(|i| {
                let base = if i < 6 { 0.0 } else { 1.0 };
                poi(i, i % 3, base + 0.002 * (i % 6) as f64, 0.001 * (i % 2) as f64)
            })
            .collect();
        let assign: Vec<_> = table.iter().map(|q| (q.id, q.coords(), RegionId(q.id.0 / 6))).collect();
        let map = RegionMap::from_assignments(&assign).unwrap();
        let seq = |user: u32, pois: &[u32]| {
            let pois = p(pois);
            CheckinSequence {
                user: UserId(user),
                categories: pois.iter().map(|q| table[q.index()].category).collect(),
                timestamps: (0..pois.len() as i64).collect(),
                pois,
            }
        };
        let pool = vec![
            seq(0, &[0, 1, 2, 3, 4]),
            seq(1, &[5, 2, 1, 0]),
            seq(2, &[6, 7, 8, 9]),
            seq(3, &[11, 9, 10, 6]),
        ];
        let mut g = SocialGraph::new();
        g.add_edge(UserId(0), UserId(1));
        g.add_edge(UserId(2), UserId(3));
        (table, map, pool, g)
    }

    fn check(refs: &ReferenceData, map: &RegionMap, pool: &[CheckinSequence], cfg: &RefGenConfig, n_cat: usize) {
        for (r, set) in &refs.geo {
            assert_eq!(set.sequences.len(), cfg.seqs_per_region);
            for s in &set.sequences {
                assert!(s.pois.iter().all(|q| map.region_of(*q) == Some(*r)));
                assert_eq!(s.pois.len(), s.categories.len());
                if cfg.mode != RefGenMode::Original {
                    assert!(pool.iter().all(|raw| raw.pois != s.pois));
                }
            }
        }
        assert_eq!(refs.geo.len(), map.len());
        assert_eq!(refs.sem.sequences.len(), cfg.sem_seqs);
        assert_eq!(refs.sem.covered_categories().len(), n_cat);
    }

    #[test]
    fn transformative_sets_are_pure_anonymous_and_covering() {
        let (table, map, pool, g) = world();
        let cfg = RefGenConfig {
            seqs_per_region: 4,
            sem_seqs: 6,
            gen_length: 6,
            ..RefGenConfig::default()
        };
        let refs = build_reference_data(&pool, &g, &map, &table, 3, &cfg, 11).unwrap();
        check(&refs, &map, &pool, &cfg, 3);
        let again = build_reference_data(&pool, &g, &map, &table, 3, &cfg, 11).unwrap();
        assert_eq!(refs, again);
    }

    #[test]
    fn single_friend_pair_yields_two_sequences() {
        let (table, map, pool, g) = world();
        let cfg = RefGenConfig {
            seqs_per_region: 2,
            sem_seqs: 2,
            gen_length: 6,
            probabilistic_fallback: false,
            ..RefGenConfig::default()
        };
        let refs = build_reference_data(&pool[..2], &g, &map, &table, 3, &cfg, 1);
        // region 1 has no pool data at all, so without fallback this fails and names it
        let err = refs.unwrap_err().to_string();
        assert!(err.contains("r1"), "{err}");
        let cfg = RefGenConfig {
            probabilistic_fallback: true,
            ..cfg
        };
        let refs = build_reference_data(&pool[..2], &g, &map, &table, 3, &cfg, 1).unwrap();
        assert_eq!(refs.geo[&RegionId(0)].sequences.len(), 2);
    }

    #[test]
    fn probabilistic_and_original_modes() {
        let (table, map, pool, g) = world();
        for mode in [RefGenMode::Probabilistic, RefGenMode::Original] {
            let cfg = RefGenConfig {
                mode,
                seqs_per_region: 3,
                sem_seqs: 4,
                gen_length: 5,
                ..RefGenConfig::default()
            };
            let refs = build_reference_data(&pool, &g, &map, &table, 3, &cfg, 2).unwrap();
            check(&refs, &map, &pool, &cfg, 3);
            if mode == RefGenMode::Probabilistic {
                for set in refs.geo.values() {
                    for s in &set.sequences {
                        for w in s.pois.windows(2) {
                            let d = haversine_km(table[w[0].index()].coords(), table[w[1].index()].coords());
                            assert!(d < 5.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_repair_reaches_every_category() {
        let (table, map, pool, g) = world();
        // pool only ever shows categories 0..3, ask for 5
        let cfg = RefGenConfig {
            seqs_per_region: 2,
            sem_seqs: 3,
            gen_length: 3,
            ..RefGenConfig::default()
        };
        let refs = build_reference_data(&pool, &g, &map, &table, 5, &cfg, 3).unwrap();
        assert_eq!(refs.sem.covered_categories().len(), 5);
        let tiny = RefGenConfig {
            sem_seqs: 1,
            gen_length: 2,
            ..cfg
        };
        assert!(build_reference_data(&pool, &g, &map, &table, 5, &tiny, 3).is_err());
    }

    #[test]
    fn serialization_roundtrip() {
        let (table, map, pool, g) = world();
        let cfg = RefGenConfig {
            seqs_per_region: 2,
            sem_seqs: 3,
            gen_length: 4,
            ..RefGenConfig::default()
        };
        let refs = build_reference_data(&pool, &g, &map, &table, 3, &cfg, 4).unwrap();
        let mut buf = Vec::new();
        write_geo_refs(&refs.geo, &mut buf).unwrap();
        assert_eq!(read_geo_refs(buf.as_slice(), &table).unwrap(), refs.geo);
        let mut buf = Vec::new();
        write_sem_refs(&refs.sem, &mut buf).unwrap();
        assert_eq!(read_sem_refs(buf.as_slice()).unwrap(), refs.sem);
    }
}
