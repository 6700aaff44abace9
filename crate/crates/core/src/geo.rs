//! Geospatial primitives: great-circle distance, k-means regions and the
//! region-restricted candidate lists used for ranking evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Poi, PoiId};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Self {
        LonLat { lon, lat }
    }
}

pub fn haversine_km(a: LonLat, b: LonLat) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub u32);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub centroid: LonLat,
    /// Member POIs in ascending id order.
    pub poi_ids: Vec<PoiId>,
}

/// A partition of the POI set into regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub regions: Vec<Region>,
    poi_to_region: BTreeMap<PoiId, RegionId>,
}

impl RegionMap {
    /// Builds a map from explicit assignments. Region ids must be dense from 0.
    pub fn from_assignments(assignments: &[(PoiId, LonLat, RegionId)]) -> Result<Self> {
        let k = assignments.iter().map(|a| a.2 .0 + 1).max().unwrap_or(0) as usize;
        let mut members: Vec<Vec<(PoiId, LonLat)>> = vec![Vec::new(); k];
        let mut poi_to_region = BTreeMap::new();
        for &(p, c, r) in assignments {
            if poi_to_region.insert(p, r).is_some() {
                return Err(Error::Dataset(format!("POI {p} assigned to two regions")));
            }
            members[r.0 as usize].push((p, c));
        }
        let regions = members
            .into_iter()
            .enumerate()
            .map(|(i, mut m)| {
                if m.is_empty() {
                    return Err(Error::Dataset(format!("region {i} has no POIs")));
                }
                m.sort_by_key(|x| x.0);
                let n = m.len() as f64;
                let centroid = LonLat::new(
                    m.iter().map(|x| x.1.lon).sum::<f64>() / n,
                    m.iter().map(|x| x.1.lat).sum::<f64>() / n,
                );
                Ok(Region {
                    id: RegionId(i as u32),
                    centroid,
                    poi_ids: m.into_iter().map(|x| x.0).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionMap {
            regions,
            poi_to_region,
        })
    }

    pub fn region_of(&self, poi: PoiId) -> Option<RegionId> {
        self.poi_to_region.get(&poi).copied()
    }

    pub fn region(&self, id: RegionId) -> &Region {
        &self.regions[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn num_pois(&self) -> usize {
        self.poi_to_region.len()
    }
}

/// Result of one Lloyd run, including the within-cluster sum of squares after
/// every assignment step.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

const MAX_KMEANS_ITERATIONS: usize = 100;

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| sq_dist(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[idx];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding on raw coordinates. Stops when
/// no assignment changes or after 100 iterations. An emptied cluster is
/// re-seeded at the point farthest from its nearest centroid.
pub fn kmeans<R: Rng>(points: &[[f64; 2]], k: usize, rng: &mut R) -> Result<KMeansFit> {
    if k == 0 || points.len() < k {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= #points (k = {k}, #points = {})",
            points.len()
        )));
    }
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_KMEANS_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        for (a, &p) in assignment.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            objective += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assignment.iter().zip(points) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (i, nearest(p, &centroids).1))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
                centroids[c] = points[far];
            }
        }
    }
    Ok(KMeansFit {
        assignment,
        centroids,
        objective_trace: trace,
        iterations,
    })
}

pub fn cluster_regions<R: Rng>(pois: &[(PoiId, LonLat)], k: usize, rng: &mut R) -> Result<RegionMap> {
    let points: Vec<[f64; 2]> = pois.iter().map(|(_, c)| [c.lon, c.lat]).collect();
    let fit = kmeans(&points, k, rng)?;
    // Compact labels so that regions that ended up empty do not leave holes.
    let mut label: BTreeMap<usize, u32> = BTreeMap::new();
    for &a in &fit.assignment {
        let next = label.len() as u32;
        label.entry(a).or_insert(next);
    }
    let assignments: Vec<(PoiId, LonLat, RegionId)> = pois
        .iter()
        .zip(&fit.assignment)
        .map(|(&(p, c), a)| (p, c, RegionId(label[a])))
        .collect();
    RegionMap::from_assignments(&assignments)
}

/// Clusters each city separately into `k` regions (fewer if a city has fewer
/// POIs) and numbers regions city by city, cities in name order. POIs without
/// a city form a single group.
pub fn cluster_by_city(pois: &[Poi], k: usize, seed: u64) -> Result<RegionMap> {
    let mut by_city: BTreeMap<Option<&str>, Vec<(PoiId, LonLat)>> = BTreeMap::new();
    for p in pois {
        by_city
            .entry(p.city.as_deref().filter(|c| !c.is_empty()))
            .or_default()
            .push((p.id, p.coords()));
    }
    let mut assignments = Vec::with_capacity(pois.len());
    let mut offset = 0u32;
    for (i, members) in by_city.values().enumerate() {
        let mut rng = rng::derive(seed, stream::KMEANS, i as u64);
        let local = cluster_regions(members, k.min(members.len()), &mut rng)?;
        for &(p, c) in members {
            assignments.push((p, c, RegionId(local.region_of(p).unwrap().0 + offset)));
        }
        offset += local.len() as u32;
    }
    RegionMap::from_assignments(&assignments)
}

/// Ranking candidates for one ground-truth POI: the target plus up to `n` POIs
/// of the target's region that the user has not visited, nearest to `anchor`
/// first. Distance ties are broken by POI id. The result is sorted by
/// `(distance, id)` and contains the target exactly once.
pub fn candidate_set(
    target: PoiId,
    history: &BTreeSet<PoiId>,
    anchor: LonLat,
    region_map: &RegionMap,
    pois: &[Poi],
    n: usize,
) -> Result<Vec<PoiId>> {
    let region = region_map
        .region_of(target)
        .ok_or_else(|| Error::Evaluation(format!("target POI {target} has no region")))?;
    let dist = |p: PoiId| haversine_km(anchor, pois[p.index()].coords());
    let mut pool: Vec<(f64, PoiId)> = region_map
        .region(region)
        .poi_ids
        .iter()
        .copied()
        .filter(|&p| p != target && !history.contains(&p))
        .map(|p| (dist(p), p))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pool.truncate(n);
    pool.push((dist(target), target));
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(pool.into_iter().map(|x| x.1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CatId;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn haversine_identity_equator_degree_and_symmetry() {
        let a = LonLat::new(-73.98, 40.75);
        assert_eq!(haversine_km(a, a), 0.0);
        // 6371 * pi / 180
        let d = haversine_km(LonLat::new(0.0, 0.0), LonLat::new(1.0, 0.0));
        assert!((d - 111.19).abs() < 0.01, "{d}");
        let b = LonLat::new(-118.24, 34.05);
        assert_eq!(haversine_km(a, b), haversine_km(b, a));
    }

    fn pts(coords: &[(f64, f64)]) -> Vec<(PoiId, LonLat)> {
        coords
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (PoiId(i as u32), LonLat::new(x, y)))
            .collect()
    }

    #[test]
    fn single_region_centroid_is_mean() {
        let p = pts(&[(0.0, 0.0), (2.0, 0.0), (1.0, 3.0)]);
        let m = cluster_regions(&p, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.len(), 1);
        assert!((m.regions[0].centroid.lon - 1.0).abs() < 1e-12);
        assert!((m.regions[0].centroid.lat - 1.0).abs() < 1e-12);
    }

    fn wcss(points: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
        (0..k)
            .map(|c| {
                let m: Vec<[f64; 2]> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
                if m.is_empty() {
                    return 0.0;
                }
                let cx = m.iter().map(|p| p[0]).sum::<f64>() / m.len() as f64;
                let cy = m.iter().map(|p| p[1]).sum::<f64>() / m.len() as f64;
                m.iter().map(|p| sq_dist(*p, [cx, cy])).sum()
            })
            .sum()
    }

    #[test]
    fn two_blobs_match_brute_force_optimal_partition() {
        let coords = [
            (0.0, 0.0),
            (0.1, 0.05),
            (0.05, 0.12),
            (-0.08, 0.02),
            (0.02, -0.1),
            (5.0, 5.0),
            (5.1, 4.9),
            (4.95, 5.08),
            (5.06, 5.02),
            (4.9, 4.97),
        ];
        let points: Vec<[f64; 2]> = coords.iter().map(|&(x, y)| [x, y]).collect();
        // Exhaustive search over all 2-partitions of 10 points.
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1..(1u32 << 10) - 1 {
            let labels: Vec<usize> = (0..10).map(|i| ((mask >> i) & 1) as usize).collect();
            let w = wcss(&points, &labels, 2);
            if w < best.0 {
                best = (w, mask);
            }
        }
        for seed in 0..10 {
            let m = cluster_regions(&pts(&coords), 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let labels: Vec<usize> = (0..10).map(|i| m.region_of(PoiId(i)).unwrap().0 as usize).collect();
            assert!((wcss(&points, &labels, 2) - best.0).abs() < 1e-12);
            assert_eq!(labels[0..5].iter().collect::<BTreeSet<_>>().len(), 1);
            assert_ne!(labels[0], labels[5]);
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (3.0, 3.0)]);
        let m = cluster_regions(&p, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(m.len(), 4);
        assert!(m.regions.iter().all(|r| r.poi_ids.len() == 1));
    }

    #[test]
    fn rejects_bad_k() {
        let p = pts(&[(0.0, 0.0)]);
        assert!(cluster_regions(&p, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(cluster_regions(&p, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn kmeans_partitions_and_objective_never_increases(
            coords in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 5..60),
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let p = pts(&coords);
            let points: Vec<[f64; 2]> = coords.iter().map(|&(x, y)| [x, y]).collect();
            let fit = kmeans(&points, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for w in fit.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let m = cluster_regions(&p, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let total: usize = m.regions.iter().map(|r| r.poi_ids.len()).sum();
            prop_assert_eq!(total, p.len());
            let all: BTreeSet<PoiId> = m.regions.iter().flat_map(|r| r.poi_ids.iter().copied()).collect();
            prop_assert_eq!(all.len(), p.len());
        }
    }

    fn line_pois(km: &[f64]) -> Vec<Poi> {
        // POIs along the equator at the given distances from the origin.
        km.iter()
            .enumerate()
            .map(|(i, &d)| Poi {
                id: PoiId(i as u32),
                raw_id: format!("p{i}"),
                category: CatId(0),
                lon: (d / EARTH_RADIUS_KM).to_degrees(),
                lat: 0.0,
                city: None,
            })
            .collect()
    }

    fn one_region(pois: &[Poi]) -> RegionMap {
        let a: Vec<_> = pois.iter().map(|p| (p.id, p.coords(), RegionId(0))).collect();
        RegionMap::from_assignments(&a).unwrap()
    }

    #[test]
    fn candidates_exhaust_small_region() {
        let pois = line_pois(&[0.0, 1.0, 2.0]);
        let map = one_region(&pois);
        let c = candidate_set(PoiId(2), &BTreeSet::new(), LonLat::new(0.0, 0.0), &map, &pois, 200).unwrap();
        assert_eq!(c, vec![PoiId(0), PoiId(1), PoiId(2)]);
    }

    #[test]
    fn candidates_degenerate_when_all_visited() {
        let pois = line_pois(&[0.0, 1.0, 2.0]);
        let map = one_region(&pois);
        let hist = BTreeSet::from([PoiId(0), PoiId(1)]);
        let c = candidate_set(PoiId(2), &hist, LonLat::new(0.0, 0.0), &map, &pois, 200).unwrap();
        assert_eq!(c, vec![PoiId(2)]);
    }

    #[test]
    fn candidates_pick_nearest_unvisited() {
        // Anchor at 0 km; POIs 0..4 at 1..5 km, target far away at 9 km.
        let pois = line_pois(&[3.0, 1.0, 5.0, 2.0, 4.0, 9.0]);
        let map = one_region(&pois);
        let anchor = LonLat::new(0.0, 0.0);
        let c = candidate_set(PoiId(5), &BTreeSet::new(), anchor, &map, &pois, 2).unwrap();
        // brute force: sort non-target by distance, take two
        let mut order: Vec<(f64, u32)> = (0..5).map(|i| (haversine_km(anchor, pois[i].coords()), i as u32)).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let expect: BTreeSet<PoiId> = order[..2].iter().map(|x| PoiId(x.1)).chain([PoiId(5)]).collect();
        assert_eq!(c.iter().copied().collect::<BTreeSet<_>>(), expect);
        assert_eq!(c, vec![PoiId(1), PoiId(3), PoiId(5)]);
    }

    #[test]
    fn candidates_stay_in_region_and_skip_visited() {
        let pois = line_pois(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let a: Vec<_> = pois
            .iter()
            .map(|p| (p.id, p.coords(), RegionId(if p.id.0 < 3 { 0 } else { 1 })))
            .collect();
        let map = RegionMap::from_assignments(&a).unwrap();
        let hist = BTreeSet::from([PoiId(4), PoiId(0)]);
        let c = candidate_set(PoiId(4), &hist, LonLat::new(0.0, 0.0), &map, &pois, 10).unwrap();
        assert_eq!(c, vec![PoiId(3), PoiId(4), PoiId(5)]);
        assert_eq!(c.iter().filter(|&&p| p == PoiId(4)).count(), 1);
    }
}
