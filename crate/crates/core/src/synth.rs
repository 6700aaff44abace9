//! Synthetic cities with planted transition structure, for experiments and
//! tests that need ground truth the model can actually learn.
//!
//! Each region is a cluster of spatial groups; a group's POIs share one
//! category. Regular users move between groups following a per-region
//! permutation (or stay in the current group), so users of one region share
//! their transition structure. Noise users wander uniformly.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{leave_one_out_split, CatId, CheckinSequence, Poi, PoiId, SocialGraph, UserId};
use crate::error::{Error, Result};
use crate::eval::Dataset;
use crate::rng::{self, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub regions: usize,
    pub groups_per_region: usize,
    pub pois_per_group: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of staying in the current group instead of following the
    /// region's group permutation.
    pub stay_prob: f64,
    /// Fraction of users whose trajectories are uniform random walks.
    pub noise_fraction: f64,
    pub friends_per_user: usize,
    pub reference_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 100,
            regions: 2,
            groups_per_region: 5,
            pois_per_group: 10,
            min_len: 12,
            max_len: 20,
            stay_prob: 0.8,
            noise_fraction: 0.0,
            friends_per_user: 3,
            reference_fraction: 0.1,
            seed: 0,
        }
    }
}

/// A generated dataset plus the ground truth behind it.
#[derive(Clone, Debug)]
pub struct SynthCity {
    pub dataset: Dataset,
    pub home_region: BTreeMap<UserId, usize>,
    pub noise_users: BTreeSet<UserId>,
    /// `group_successor[r][g]`: the group users of region `r` move to from `g`.
    pub group_successor: Vec<Vec<usize>>,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.users < 2 || self.regions == 0 || self.groups_per_region < 2 || self.pois_per_group == 0 {
            return Err(Error::Config("synthetic city needs >= 2 users, >= 1 region, >= 2 groups, >= 1 POI per group".into()));
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return Err(Error::Config("sequence lengths need 3 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) || !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn poi_of(cfg: &SynthConfig, region: usize, group: usize, k: usize) -> PoiId {
    PoiId(((region * cfg.groups_per_region + group) * cfg.pois_per_group + k) as u32)
}

/// Generates the city, its users and the leave-one-out split.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCity> {
    cfg.validate()?;
    let mut rng: SimRng = rng::derive(cfg.seed, rng::stream::SYNTH, 0);
    let g = cfg.groups_per_region;

    // regions one degree of longitude apart; groups on a 1.5 km ring
    let km_per_deg = 111.19;
    let mut pois = Vec::new();
    for r in 0..cfg.regions {
        for grp in 0..g {
            let angle = std::f64::consts::TAU * grp as f64 / g as f64;
            let (cx, cy) = (r as f64 + 1.5 * angle.cos() / km_per_deg, 1.5 * angle.sin() / km_per_deg);
            for k in 0..cfg.pois_per_group {
                let id = poi_of(cfg, r, grp, k);
                pois.push(Poi {
                    id,
                    raw_id: format!("p{}", id.0),
                    category: CatId((r * g + grp) as u32),
                    lon: cx + rng.gen_range(-0.3..0.3) / km_per_deg,
                    lat: cy + rng.gen_range(-0.3..0.3) / km_per_deg,
                    city: None,
                });
            }
        }
    }
    let categories = (0..cfg.regions * g).map(|c| format!("c{}_{}", c / g, c % g)).collect();

    // a random cyclic order of the groups, so moving always changes group
    let group_successor: Vec<Vec<usize>> = (0..cfg.regions)
        .map(|_| {
            let mut cycle: Vec<usize> = (0..g).collect();
            cycle.shuffle(&mut rng);
            let mut next = vec![0; g];
            for i in 0..g {
                next[cycle[i]] = cycle[(i + 1) % g];
            }
            next
        })
        .collect();

    let mut ids: Vec<usize> = (0..cfg.users).collect();
    ids.shuffle(&mut rng);
    let n_noise = (cfg.noise_fraction * cfg.users as f64).round() as usize;
    let noise_users: BTreeSet<UserId> = ids[..n_noise].iter().map(|&u| UserId(u as u32)).collect();

    let mut sequences = BTreeMap::new();
    let mut home_region = BTreeMap::new();
    for u in 0..cfg.users {
        let user = UserId(u as u32);
        let r = u % cfg.regions;
        home_region.insert(user, r);
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut seq = Vec::with_capacity(len);
        let mut grp = rng.gen_range(0..g);
        for step in 0..len {
            if noise_users.contains(&user) {
                grp = rng.gen_range(0..g);
            } else if step > 0 && !rng.gen_bool(cfg.stay_prob) {
                grp = group_successor[r][grp];
            }
            seq.push(poi_of(cfg, r, grp, rng.gen_range(0..cfg.pois_per_group)));
        }
        sequences.insert(
            user,
            CheckinSequence {
                user,
                categories: seq.iter().map(|p| pois[p.index()].category).collect(),
                timestamps: (0..len as i64).map(|t| 1_600_000_000 + 3600 * t).collect(),
                pois: seq,
            },
        );
    }

    let mut friends = SocialGraph::new();
    for u in 0..cfg.users {
        let same: Vec<usize> = (0..cfg.users).filter(|&v| v != u && v % cfg.regions == u % cfg.regions).collect();
        for &v in same.choose_multiple(&mut rng, cfg.friends_per_user) {
            friends.add_edge(UserId(u as u32), UserId(v as u32));
        }
    }

    let split = leave_one_out_split(&sequences, cfg.reference_fraction, &mut rng)?;
    Ok(SynthCity {
        dataset: Dataset {
            users: (0..cfg.users).map(|u| format!("u{u}")).collect(),
            categories,
            pois,
            split,
            friends,
        },
        home_region,
        noise_users,
        group_successor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{cluster_by_city, haversine_km};

    #[test]
    fn regions_are_recoverable_and_compact() {
        let city = generate(&SynthConfig::default()).unwrap();
        let map = cluster_by_city(&city.dataset.pois, 2, 0).unwrap();
        assert_eq!(map.len(), 2);
        for region in &map.regions {
            let cats: BTreeSet<u32> = region.poi_ids.iter().map(|p| city.dataset.pois[p.index()].category.0 / 5).collect();
            assert_eq!(cats.len(), 1, "a cluster mixes synthetic regions");
            for a in &region.poi_ids {
                for b in &region.poi_ids {
                    let d = haversine_km(city.dataset.pois[a.index()].coords(), city.dataset.pois[b.index()].coords());
                    assert!(d < 5.0);
                }
            }
        }
    }

    #[test]
    fn regular_users_follow_planted_moves() {
        let cfg = SynthConfig {
            stay_prob: 0.0,
            ..SynthConfig::default()
        };
        let city = generate(&cfg).unwrap();
        let group = |p: PoiId| (p.index() / cfg.pois_per_group) % cfg.groups_per_region;
        for (u, s) in &city.dataset.split.users {
            let r = city.home_region[u];
            for w in s.train.pois.windows(2) {
                assert_eq!(group(w[1]), city.group_successor[r][group(w[0])]);
            }
        }
    }

    #[test]
    fn noise_share_and_determinism() {
        let cfg = SynthConfig {
            noise_fraction: 0.2,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a.noise_users.len(), 20);
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert!(a.dataset.friends.len() >= 100);
    }
}
