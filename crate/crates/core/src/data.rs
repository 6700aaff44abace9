//! Check-in ingestion: parsing, interaction filtering, sequence construction
//! and the leave-one-out split with a withheld reference pool.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Dense user index assigned in first-appearance order.
    UserId
);
id_type!(
    /// Dense POI index assigned in first-appearance order.
    PoiId
);
id_type!(
    /// Dense category index assigned in first-appearance order.
    CatId
);

/// A venue. Coordinates are in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: PoiId,
    pub raw_id: String,
    pub category: CatId,
    pub lon: f64,
    pub lat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
}

impl Poi {
    pub fn coords(&self) -> crate::geo::LonLat {
        crate::geo::LonLat::new(self.lon, self.lat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkin {
    pub user: UserId,
    pub poi: PoiId,
    pub timestamp: i64,
}

/// All check-ins of a dataset together with the user, POI and category
/// vocabularies. Check-ins are kept in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckinTable {
    pub users: Vec<String>,
    pub pois: Vec<Poi>,
    pub categories: Vec<String>,
    pub checkins: Vec<Checkin>,
}

impl CheckinTable {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn user_lookup(&self) -> HashMap<String, UserId> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), UserId(i as u32)))
            .collect()
    }
}

/// Column names used to read a check-in CSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckinSchema {
    pub user: String,
    pub poi: String,
    pub category: String,
    pub lat: String,
    pub lon: String,
    pub timestamp: String,
    /// Optional city column; when present regions are clustered per city.
    pub city: Option<String>,
    pub delimiter: u8,
}

impl Default for CheckinSchema {
    fn default() -> Self {
        CheckinSchema {
            user: "user_id".into(),
            poi: "poi_id".into(),
            category: "category".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            timestamp: "timestamp".into(),
            city: Some("city".into()),
            delimiter: b',',
        }
    }
}

impl CheckinSchema {
    /// Looks up a built-in schema by name. Only `default` (header
    /// `user_id,poi_id,category,lat,lon,timestamp[,city]`) and `tsv`
    /// (same columns, tab separated) are known.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "default" | "csv" => Ok(Self::default()),
            "tsv" => Ok(CheckinSchema {
                delimiter: b'\t',
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown check-in schema `{other}`"))),
        }
    }
}

pub fn parse_checkins(path: &Path, schema: &CheckinSchema) -> Result<CheckinTable> {
    let file = std::fs::File::open(path)?;
    parse_checkins_from_reader(file, path, schema)
}

/// Parses check-ins from any reader. `origin` is only used in error messages.
pub fn parse_checkins_from_reader<R: Read>(
    reader: R,
    origin: &Path,
    schema: &CheckinSchema,
) -> Result<CheckinTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!(
                "{}: missing column `{name}` (header: {})",
                origin.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            ))
        })
    };
    let c_user = column(&schema.user)?;
    let c_poi = column(&schema.poi)?;
    let c_cat = column(&schema.category)?;
    let c_lat = column(&schema.lat)?;
    let c_lon = column(&schema.lon)?;
    let c_ts = column(&schema.timestamp)?;
    let c_city = schema
        .city
        .as_deref()
        .and_then(|name| headers.iter().position(|h| h == name));

    let mut users: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, UserId> = HashMap::new();
    let mut pois: Vec<Poi> = Vec::new();
    let mut poi_index: HashMap<String, PoiId> = HashMap::new();
    let mut categories: Vec<String> = Vec::new();
    let mut cat_index: HashMap<String, CatId> = HashMap::new();
    let mut checkins = Vec::new();

    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let field = |i: usize| record.get(i).unwrap_or("");

        let lat: f64 = field(c_lat)
            .parse()
            .map_err(|_| bad(format!("invalid latitude `{}`", field(c_lat))))?;
        let lon: f64 = field(c_lon)
            .parse()
            .map_err(|_| bad(format!("invalid longitude `{}`", field(c_lon))))?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(bad(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(bad(format!("longitude {lon} outside [-180, 180]")));
        }
        let timestamp = parse_timestamp(field(c_ts))
            .ok_or_else(|| bad(format!("invalid timestamp `{}`", field(c_ts))))?;
        let raw_user = field(c_user);
        let raw_poi = field(c_poi);
        let raw_cat = field(c_cat);
        if raw_user.is_empty() || raw_poi.is_empty() || raw_cat.is_empty() {
            return Err(bad("empty user, poi or category field".into()));
        }

        let user = *user_index.entry(raw_user.to_string()).or_insert_with(|| {
            users.push(raw_user.to_string());
            UserId(users.len() as u32 - 1)
        });
        let category = *cat_index.entry(raw_cat.to_string()).or_insert_with(|| {
            categories.push(raw_cat.to_string());
            CatId(categories.len() as u32 - 1)
        });
        let poi = match poi_index.get(raw_poi) {
            Some(&id) => id,
            None => {
                let id = PoiId(pois.len() as u32);
                pois.push(Poi {
                    id,
                    raw_id: raw_poi.to_string(),
                    category,
                    lon,
                    lat,
                    city: c_city.map(|c| field(c).to_string()),
                });
                poi_index.insert(raw_poi.to_string(), id);
                id
            }
        };
        checkins.push(Checkin {
            user,
            poi,
            timestamp,
        });
    }

    Ok(CheckinTable {
        users,
        pois,
        categories,
        checkins,
    })
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(|v| v.floor() as i64)
}

/// Removes users and POIs with fewer than `min_count` check-ins, repeating
/// until nothing changes. Surviving users, POIs and categories are re-indexed
/// densely, preserving their original relative order.
pub fn filter_min_interactions(table: &CheckinTable, min_count: usize) -> Result<CheckinTable> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut keep: Vec<bool> = vec![true; table.checkins.len()];
    loop {
        let mut user_count = vec![0usize; table.users.len()];
        let mut poi_count = vec![0usize; table.pois.len()];
        for (c, _) in table.checkins.iter().zip(&keep).filter(|(_, &k)| k) {
            user_count[c.user.index()] += 1;
            poi_count[c.poi.index()] += 1;
        }
        let mut changed = false;
        for (c, k) in table.checkins.iter().zip(keep.iter_mut()) {
            if *k && (user_count[c.user.index()] < min_count || poi_count[c.poi.index()] < min_count) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if !keep.iter().any(|&k| k) {
        return Err(Error::Dataset(format!(
            "no check-ins left after filtering with min_count = {min_count}"
        )));
    }
    Ok(compact(table, &keep))
}

fn compact(table: &CheckinTable, keep: &[bool]) -> CheckinTable {
    let mut user_alive = vec![false; table.users.len()];
    let mut poi_alive = vec![false; table.pois.len()];
    for (c, _) in table.checkins.iter().zip(keep).filter(|(_, &k)| k) {
        user_alive[c.user.index()] = true;
        poi_alive[c.poi.index()] = true;
    }
    let mut cat_alive = vec![false; table.categories.len()];
    for p in table.pois.iter().filter(|p| poi_alive[p.id.index()]) {
        cat_alive[p.category.index()] = true;
    }

    fn remap(alive: &[bool]) -> Vec<Option<u32>> {
        let mut next = 0u32;
        alive
            .iter()
            .map(|&a| {
                a.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }
    let user_map = remap(&user_alive);
    let poi_map = remap(&poi_alive);
    let cat_map = remap(&cat_alive);

    let users = table
        .users
        .iter()
        .zip(&user_alive)
        .filter(|(_, &a)| a)
        .map(|(u, _)| u.clone())
        .collect();
    let categories = table
        .categories
        .iter()
        .zip(&cat_alive)
        .filter(|(_, &a)| a)
        .map(|(c, _)| c.clone())
        .collect();
    let pois = table
        .pois
        .iter()
        .filter(|p| poi_alive[p.id.index()])
        .map(|p| Poi {
            id: PoiId(poi_map[p.id.index()].unwrap()),
            category: CatId(cat_map[p.category.index()].unwrap()),
            ..p.clone()
        })
        .collect();
    let checkins = table
        .checkins
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(c, _)| Checkin {
            user: UserId(user_map[c.user.index()].unwrap()),
            poi: PoiId(poi_map[c.poi.index()].unwrap()),
            timestamp: c.timestamp,
        })
        .collect();
    CheckinTable {
        users,
        pois,
        categories,
        checkins,
    }
}

/// One user's chronologically ordered visits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckinSequence {
    pub user: UserId,
    pub pois: Vec<PoiId>,
    pub categories: Vec<CatId>,
    pub timestamps: Vec<i64>,
}

impl CheckinSequence {
    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    /// The first `n` check-ins as a new sequence.
    pub fn prefix(&self, n: usize) -> CheckinSequence {
        CheckinSequence {
            user: self.user,
            pois: self.pois[..n].to_vec(),
            categories: self.categories[..n].to_vec(),
            timestamps: self.timestamps[..n].to_vec(),
        }
    }
}

/// Groups check-ins per user and sorts them by timestamp (stable, so equal
/// timestamps keep file order). Sequences longer than `max_seq_len` keep the
/// most recent `max_seq_len` check-ins.
pub fn build_sequences(table: &CheckinTable, max_seq_len: usize) -> BTreeMap<UserId, CheckinSequence> {
    let mut per_user: BTreeMap<UserId, Vec<Checkin>> = BTreeMap::new();
    for c in &table.checkins {
        per_user.entry(c.user).or_default().push(*c);
    }
    per_user
        .into_iter()
        .map(|(user, mut cs)| {
            cs.sort_by_key(|c| c.timestamp);
            let start = cs.len().saturating_sub(max_seq_len);
            let cs = &cs[start..];
            let seq = CheckinSequence {
                user,
                pois: cs.iter().map(|c| c.poi).collect(),
                categories: cs
                    .iter()
                    .map(|c| table.pois[c.poi.index()].category)
                    .collect(),
                timestamps: cs.iter().map(|c| c.timestamp).collect(),
            };
            (user, seq)
        })
        .collect()
}

/// Leave-one-out targets for one evaluation user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    /// All but the last two check-ins.
    pub train: CheckinSequence,
    /// Second-to-last check-in.
    pub valid: PoiId,
    /// Last check-in.
    pub test: PoiId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: BTreeMap<UserId, UserSplit>,
    /// Whole sequences withheld for reference-data generation.
    pub reference_pool: Vec<CheckinSequence>,
}

impl SplitDataset {
    pub fn eval_users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.users.keys().copied()
    }
}

fn split_user(seq: &CheckinSequence) -> UserSplit {
    let m = seq.len();
    UserSplit {
        train: seq.prefix(m - 2),
        valid: seq.pois[m - 2],
        test: seq.pois[m - 1],
    }
}

/// Withholds a random `reference_fraction` of whole sequences as the
/// reference pool and splits the rest leave-one-out.
///
/// After the random draw, POI coverage is repaired greedily: while some POI
/// of the corpus appears neither in the pool nor in any training prefix, the
/// remaining sequence covering the most such POIs (smallest user id on ties)
/// moves into the pool. Sequences shorter than three check-ins cannot be
/// evaluated and are dropped with a warning unless they end up in the pool.
pub fn leave_one_out_split<R: Rng>(
    sequences: &BTreeMap<UserId, CheckinSequence>,
    reference_fraction: f64,
    rng: &mut R,
) -> Result<SplitDataset> {
    if !(reference_fraction > 0.0 && reference_fraction < 1.0) {
        return Err(Error::Config(format!(
            "reference_fraction must lie in (0, 1), got {reference_fraction}"
        )));
    }
    if sequences.is_empty() {
        return Err(Error::Dataset("no sequences to split".into()));
    }
    let mut ids: Vec<UserId> = sequences.keys().copied().collect();
    ids.shuffle(rng);
    let k = ((reference_fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    let mut in_pool: BTreeSet<UserId> = ids[..k].iter().copied().collect();

    let universe: BTreeSet<PoiId> = sequences.values().flat_map(|s| s.pois.iter().copied()).collect();
    loop {
        let mut covered: BTreeSet<PoiId> = BTreeSet::new();
        for (u, s) in sequences {
            if in_pool.contains(u) {
                covered.extend(s.pois.iter().copied());
            } else if s.len() >= 3 {
                covered.extend(s.pois[..s.len() - 2].iter().copied());
            }
        }
        if covered.len() == universe.len() {
            break;
        }
        let uncovered: BTreeSet<PoiId> = universe.difference(&covered).copied().collect();
        let best = sequences
            .iter()
            .filter(|(u, _)| !in_pool.contains(u))
            .map(|(u, s)| {
                let gain = s
                    .pois
                    .iter()
                    .copied()
                    .collect::<BTreeSet<_>>()
                    .intersection(&uncovered)
                    .count();
                (gain, *u)
            })
            .filter(|(gain, _)| *gain > 0)
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        match best {
            Some((_, u)) => {
                in_pool.insert(u);
            }
            None => break,
        }
    }

    let mut users = BTreeMap::new();
    let mut reference_pool = Vec::new();
    for (u, s) in sequences {
        if in_pool.contains(u) {
            reference_pool.push(s.clone());
        } else if s.len() >= 3 {
            users.insert(*u, split_user(s));
        } else {
            warn!("user {u}: sequence of length {} is too short to evaluate; dropped", s.len());
        }
    }
    Ok(SplitDataset {
        users,
        reference_pool,
    })
}

/// Undirected friendship graph over dense user ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialGraph {
    edges: BTreeSet<(UserId, UserId)>,
}

impl SocialGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an undirected edge. Returns false for self-loops and duplicates.
    pub fn add_edge(&mut self, a: UserId, b: UserId) -> bool {
        if a == b {
            return false;
        }
        self.edges.insert((a.min(b), a.max(b)))
    }

    pub fn are_friends(&self, a: UserId, b: UserId) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn friends(&self, u: UserId) -> BTreeSet<UserId> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == u {
                    Some(b)
                } else if b == u {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = (UserId, UserId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Subgraph induced by `keep`.
    pub fn restricted_to(&self, keep: &BTreeSet<UserId>) -> SocialGraph {
        SocialGraph {
            edges: self
                .edges
                .iter()
                .filter(|(a, b)| keep.contains(a) && keep.contains(b))
                .copied()
                .collect(),
        }
    }
}

pub fn parse_friendships(path: &Path, users: &HashMap<String, UserId>) -> Result<SocialGraph> {
    let file = std::fs::File::open(path)?;
    parse_friendships_from_reader(file, path, users)
}

/// Reads a `user_a,user_b` edge list. Rows naming users absent from `users`
/// are dropped; self-loops are skipped with a warning.
pub fn parse_friendships_from_reader<R: Read>(
    reader: R,
    origin: &Path,
    users: &HashMap<String, UserId>,
) -> Result<SocialGraph> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut graph = SocialGraph::new();
    let mut dropped = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let (Some(a), Some(b)) = (record.get(0), record.get(1)) else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: "expected two columns".into(),
            });
        };
        if a == b {
            warn!("{}: line {line}: self-loop for user `{a}` skipped", origin.display());
            continue;
        }
        match (users.get(a), users.get(b)) {
            (Some(&ua), Some(&ub)) => {
                graph.add_edge(ua, ub);
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::debug!("{dropped} friendship rows referenced unknown users");
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HEADER: &str = "user_id,poi_id,category,lat,lon,timestamp\n";

    fn parse(body: &str) -> Result<CheckinTable> {
        let text = format!("{HEADER}{body}");
        parse_checkins_from_reader(text.as_bytes(), Path::new("test.csv"), &CheckinSchema::default())
    }

    fn table(rows: &[(&str, &str, i64)]) -> CheckinTable {
        let body: String = rows
            .iter()
            .map(|(u, p, t)| format!("{u},{p},cat_{p},40.0,-73.0,{t}\n"))
            .collect();
        parse(&body).unwrap()
    }

    #[test]
    fn parses_small_file() {
        let t = parse("a,p1,food,40.7,-74.0,10\na,p2,bar,40.8,-74.1,20\nb,p1,food,40.7,-74.0,30\n").unwrap();
        assert_eq!(t.checkins.len(), 3);
        assert_eq!(t.pois.len(), 2);
        assert_eq!(t.users, vec!["a", "b"]);
        assert_eq!(t.categories, vec!["food", "bar"]);
        assert_eq!(t.pois[1].category, CatId(1));
        assert_eq!(t.checkins[2].poi, PoiId(0));
    }

    #[test]
    fn rejects_out_of_range_latitude_with_line_number() {
        let err = parse("a,p1,food,40.7,-74.0,10\na,p2,bar,95,-74.1,20\n").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("latitude"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_unknown_schema_are_config_errors() {
        let err = parse_checkins_from_reader(
            "user,poi\na,b\n".as_bytes(),
            Path::new("x.csv"),
            &CheckinSchema::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(matches!(CheckinSchema::named("gowalla"), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_timestamp_is_parse_error() {
        assert!(matches!(
            parse("a,p1,food,40.7,-74.0,yesterday\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn filter_fixed_point_immediately() {
        let rows: Vec<(&str, &str, i64)> = (0..4).map(|i| ("u", "p", i)).chain((0..4).map(|i| ("v", "p", i))).collect();
        let t = table(&rows);
        assert_eq!(filter_min_interactions(&t, 2).unwrap(), t);
    }

    #[test]
    fn filter_removes_sparse_user_and_pois() {
        // u1 has 3 check-ins on POIs nobody else visits; u2 and u3 share q.
        let t = table(&[
            ("u1", "a", 1),
            ("u1", "b", 2),
            ("u1", "c", 3),
            ("u2", "q", 1),
            ("u2", "q", 2),
            ("u3", "q", 3),
            ("u3", "q", 4),
        ]);
        let f = filter_min_interactions(&t, 2).unwrap();
        assert_eq!(f.users, vec!["u2", "u3"]);
        assert_eq!(f.pois.len(), 1);
        assert_eq!(f.pois[0].raw_id, "q");
        assert_eq!(f.checkins.len(), 4);
    }

    #[test]
    fn filter_cascades_in_second_pass() {
        // POI z has one visit; removing it leaves u2 with a single check-in,
        // which in turn drops POI y below the threshold for nobody else.
        let t = table(&[
            ("u1", "x", 1),
            ("u1", "x", 2),
            ("u1", "y", 3),
            ("u1", "y", 4),
            ("u2", "y", 1),
            ("u2", "z", 2),
        ]);
        let f = filter_min_interactions(&t, 2).unwrap();
        assert_eq!(f.users, vec!["u1"]);
        assert_eq!(f.checkins.len(), 4);
        let g = filter_min_interactions(&t, 3).unwrap_err();
        assert!(matches!(g, Error::Dataset(_)));
    }

    #[test]
    fn sequences_are_sorted_stably_and_truncated() {
        let t = table(&[("u", "c", 3), ("u", "a", 1), ("u", "b", 2), ("u", "d", 2)]);
        let s = &build_sequences(&t, 200)[&UserId(0)];
        assert_eq!(s.timestamps, vec![1, 2, 2, 3]);
        // b precedes d: equal timestamps keep file order.
        let names: Vec<&str> = s.pois.iter().map(|p| t.pois[p.index()].raw_id.as_str()).collect();
        assert_eq!(names, vec!["a", "b", "d", "c"]);

        let rows: Vec<(String, String, i64)> = (0..250).map(|i| ("u".into(), format!("p{i}"), i)).collect();
        let rows_ref: Vec<(&str, &str, i64)> = rows.iter().map(|(u, p, t)| (u.as_str(), p.as_str(), *t)).collect();
        let t = table(&rows_ref);
        let s = &build_sequences(&t, 200)[&UserId(0)];
        assert_eq!(s.len(), 200);
        assert_eq!(s.timestamps[0], 50);
        assert_eq!(*s.timestamps.last().unwrap(), 249);
    }

    fn seq(user: u32, pois: &[u32]) -> CheckinSequence {
        CheckinSequence {
            user: UserId(user),
            pois: pois.iter().map(|&p| PoiId(p)).collect(),
            categories: pois.iter().map(|_| CatId(0)).collect(),
            timestamps: (0..pois.len() as i64).collect(),
        }
    }

    #[test]
    fn split_targets_are_last_two() {
        let s = split_user(&seq(0, &[1, 2, 3, 4]));
        assert_eq!(s.train.pois, vec![PoiId(1), PoiId(2)]);
        assert_eq!(s.valid, PoiId(3));
        assert_eq!(s.test, PoiId(4));
    }

    #[test]
    fn pool_size_lower_bound_and_disjointness() {
        let seqs: BTreeMap<UserId, CheckinSequence> =
            (0..100).map(|u| (UserId(u), seq(u, &[0, 1, 2, 3, 4]))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let split = leave_one_out_split(&seqs, 0.1, &mut rng).unwrap();
        assert!(split.reference_pool.len() >= 10);
        for s in &split.reference_pool {
            assert!(!split.users.contains_key(&s.user));
        }
        assert_eq!(split.reference_pool.len() + split.users.len(), 100);
    }

    #[test]
    fn coverage_repair_pulls_unique_poi_into_pool_or_train() {
        // POI 99 appears only as the test target of user 7.
        let mut seqs: BTreeMap<UserId, CheckinSequence> =
            (0..20).map(|u| (UserId(u), seq(u, &[0, 1, 2, 3]))).collect();
        seqs.insert(UserId(7), seq(7, &[0, 1, 2, 99]));
        for s in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let split = leave_one_out_split(&seqs, 0.1, &mut rng).unwrap();
            let covered = split.reference_pool.iter().any(|s| s.pois.contains(&PoiId(99)))
                || split.users.values().any(|u| u.train.pois.contains(&PoiId(99)));
            assert!(covered, "seed {s}");
        }
    }

    #[test]
    fn short_sequences_are_dropped() {
        let mut seqs: BTreeMap<UserId, CheckinSequence> =
            (0..10).map(|u| (UserId(u), seq(u, &[0, 1, 2, 3]))).collect();
        seqs.insert(UserId(10), seq(10, &[0, 1]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let split = leave_one_out_split(&seqs, 0.1, &mut rng).unwrap();
        let in_pool = split.reference_pool.iter().any(|s| s.user == UserId(10));
        assert!(in_pool || !split.users.contains_key(&UserId(10)));
        assert!(!split.users.contains_key(&UserId(10)));
    }

    #[test]
    fn friendships_are_symmetric_deduplicated_and_filtered() {
        let users: HashMap<String, UserId> =
            [("a", 0), ("b", 1), ("c", 2)].iter().map(|(k, v)| (k.to_string(), UserId(*v))).collect();
        let text = "user_a,user_b\na,b\nb,a\na,b\nc,c\na,zz\n";
        let g = parse_friendships_from_reader(text.as_bytes(), Path::new("f.csv"), &users).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.friends(UserId(0)), BTreeSet::from([UserId(1)]));
        assert_eq!(g.friends(UserId(1)), BTreeSet::from([UserId(0)]));
        assert!(g.friends(UserId(2)).is_empty());
        assert!(g.are_friends(UserId(1), UserId(0)));
    }
}
