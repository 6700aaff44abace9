//! Ranking metrics, experiment configuration and the end-to-end pipeline
//! from raw check-ins to a metrics report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_sequences, filter_min_interactions, leave_one_out_split, parse_checkins, parse_friendships, CheckinSchema,
    Poi, PoiId, SocialGraph, SplitDataset, UserId,
};
use crate::error::{Error, Result};
use crate::geo::cluster_by_city;
use crate::model::DeviceModel;
use crate::neighbors::NeighborState;
use crate::refdata::{write_geo_refs, write_sem_refs, RefGenConfig, RefGenMode};
use crate::rng;
use crate::sim::{setup, NoopObserver, Observer, RoundLog, SamplingMode, Server, SimConfig, Simulation, World};

/// 1 iff the target made the top `k`.
pub fn hr_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(rank + 1)` inside the top `k`, else 0.
pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// 1-based rank of `target` among `candidates` given aligned scores. Every
/// other candidate scoring at least as high ranks above it.
pub fn rank_target(candidates: &[PoiId], scores: &[f64], target: PoiId) -> Result<usize> {
    if candidates.len() != scores.len() {
        return Err(Error::Evaluation("scores and candidates differ in length".into()));
    }
    let at = candidates
        .iter()
        .position(|&p| p == target)
        .ok_or_else(|| Error::Evaluation(format!("target POI {target} is not among the candidates")))?;
    let s = scores[at];
    if !s.is_finite() {
        return Err(Error::Numerical {
            component: "ranking score".into(),
        });
    }
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| i != at && x >= s)
        .count();
    Ok(1 + above)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceEval {
    pub user: UserId,
    pub dim: usize,
    pub rank: usize,
    pub num_candidates: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl DeviceEval {
    pub fn from_rank(user: UserId, dim: usize, rank: usize, num_candidates: usize) -> Self {
        let r = Some(rank);
        DeviceEval {
            user,
            dim,
            rank,
            num_candidates,
            hr5: hr_at_k(r, 5),
            hr10: hr_at_k(r, 10),
            ndcg5: ndcg_at_k(r, 5),
            ndcg10: ndcg_at_k(r, 10),
        }
    }
}

/// Scores every candidate after `prefix` in eval mode and ranks `target`.
pub fn evaluate_device(model: &DeviceModel, prefix: &[PoiId], target: PoiId, candidates: &[PoiId]) -> Result<DeviceEval> {
    if !candidates.contains(&target) {
        return Err(Error::Evaluation(format!("target POI {target} is not among the candidates")));
    }
    let scores = model.poi_scores(prefix, candidates)?;
    let rank = rank_target(candidates, &scores, target)?;
    Ok(DeviceEval::from_rank(model.owner(), model.dim(), rank, candidates.len()))
}

/// Where the experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Raw check-ins and friendships, ingested on the fly.
    Raw { checkins: PathBuf, friends: PathBuf },
    /// Output directory of a previous ingest.
    Ingested(PathBuf),
}

/// Every knob of a run. Parsed from a flat `key = value` file; `#` starts
/// a comment. See [`ExperimentConfig::KEYS`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `(dimension, fraction)` pairs; fractions sum to 1.
    pub dims: Vec<(usize, f64)>,
    pub alpha: usize,
    pub beta: usize,
    pub gamma: f64,
    pub mu: f64,
    pub tau_percent: f64,
    pub top_h: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub patience: u32,
    pub k_regions: usize,
    pub seqs_per_region: usize,
    pub sem_seqs: usize,
    pub gen_length: usize,
    pub max_hop_km: f64,
    pub refgen: RefGenMode,
    pub probabilistic_fallback: bool,
    pub sampling: SamplingMode,
    pub num_candidates: usize,
    pub min_interactions: usize,
    pub max_seq_len: usize,
    pub reference_fraction: f64,
    pub schema: String,
    pub data: Option<DataSource>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let refgen = RefGenConfig::default();
        ExperimentConfig {
            seed: sim.seed,
            dims: [8, 16, 32, 64, 128].iter().map(|&d| (d, 0.2)).collect(),
            alpha: sim.alpha,
            beta: sim.beta,
            gamma: sim.gamma,
            mu: sim.mu,
            tau_percent: sim.tau_percent,
            top_h: 50,
            lr: sim.lr,
            dropout: sim.dropout,
            batch_size: sim.batch_size,
            max_epochs: sim.max_epochs,
            patience: sim.patience,
            k_regions: 5,
            seqs_per_region: refgen.seqs_per_region,
            sem_seqs: refgen.sem_seqs,
            gen_length: refgen.gen_length,
            max_hop_km: refgen.max_hop_km,
            refgen: refgen.mode,
            probabilistic_fallback: refgen.probabilistic_fallback,
            sampling: sim.sampling,
            num_candidates: sim.num_candidates,
            min_interactions: 10,
            max_seq_len: 200,
            reference_fraction: 0.10,
            schema: "default".into(),
            data: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_dims(value: &str) -> Result<Vec<(usize, f64)>> {
    value
        .split(',')
        .map(|item| {
            let (d, f) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("dims entry `{item}` must be `dim:fraction`")))?;
            Ok((parse_value("dims", d.trim())?, parse_value("dims", f.trim())?))
        })
        .collect()
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "dims",
        "alpha",
        "beta",
        "gamma",
        "mu",
        "tau",
        "h",
        "lr",
        "dropout",
        "batch_size",
        "max_epochs",
        "patience",
        "k_regions",
        "seqs_per_region",
        "sem_seqs",
        "gen_length",
        "max_hop_km",
        "refgen",
        "probabilistic_fallback",
        "sampling",
        "candidates",
        "min_interactions",
        "max_seq_len",
        "reference_fraction",
        "schema",
        "checkins",
        "friends",
        "dataset",
    ];

    /// Parses `key = value` lines. Relative data paths resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let (mut checkins, mut friends, mut dataset) = (None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value, base_dir, &mut checkins, &mut friends, &mut dataset)?;
        }
        cfg.data = match (checkins, friends, dataset) {
            (None, None, None) => None,
            (Some(c), Some(f), None) => Some(DataSource::Raw { checkins: c, friends: f }),
            (None, None, Some(d)) => Some(DataSource::Ingested(d)),
            _ => {
                return Err(Error::Config(
                    "give either `checkins` and `friends`, or `dataset`".into(),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies one `key = value` override. A `dataset` path is taken as is.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let (mut c, mut f, mut d) = (None, None, None);
        self.set(key, value, Path::new(""), &mut c, &mut f, &mut d)?;
        if let Some(dir) = d {
            self.data = Some(DataSource::Ingested(dir));
        }
        if c.is_some() || f.is_some() {
            return Err(Error::Config(format!("`{key}` cannot be overridden; use a config file")));
        }
        self.validate()
    }

    fn set(
        &mut self,
        key: &str,
        value: &str,
        base: &Path,
        checkins: &mut Option<PathBuf>,
        friends: &mut Option<PathBuf>,
        dataset: &mut Option<PathBuf>,
    ) -> Result<()> {
        let path = |v: &str| base.join(v);
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "dims" => self.dims = parse_dims(value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "mu" => self.mu = parse_value(key, value)?,
            "tau" => self.tau_percent = parse_value(key, value.trim_end_matches('%'))?,
            "h" => self.top_h = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "k_regions" => self.k_regions = parse_value(key, value)?,
            "seqs_per_region" => self.seqs_per_region = parse_value(key, value)?,
            "sem_seqs" => self.sem_seqs = parse_value(key, value)?,
            "gen_length" => self.gen_length = parse_value(key, value)?,
            "max_hop_km" => self.max_hop_km = parse_value(key, value)?,
            "refgen" => self.refgen = value.parse()?,
            "probabilistic_fallback" => self.probabilistic_fallback = parse_value(key, value)?,
            "sampling" => self.sampling = value.parse()?,
            "candidates" => self.num_candidates = parse_value(key, value)?,
            "min_interactions" => self.min_interactions = parse_value(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, value)?,
            "reference_fraction" => self.reference_fraction = parse_value(key, value)?,
            "schema" => self.schema = value.to_string(),
            "checkins" => *checkins = Some(path(value)),
            "friends" => *friends = Some(path(value)),
            "dataset" => *dataset = Some(path(value)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("dims must not be empty".into()));
        }
        if self.dims.iter().any(|&(d, f)| d == 0 || !(0.0..=1.0).contains(&f)) {
            return Err(Error::Config("dims need positive dimensions and fractions in [0, 1]".into()));
        }
        let total: f64 = self.dims.iter().map(|x| x.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("dimension fractions sum to {total}, not 1")));
        }
        if self.top_h == 0 || self.k_regions == 0 || self.min_interactions == 0 || self.max_seq_len < 3 {
            return Err(Error::Config("h, k_regions and min_interactions must be positive, max_seq_len >= 3".into()));
        }
        if !(self.reference_fraction > 0.0 && self.reference_fraction < 1.0) {
            return Err(Error::Config("reference_fraction must lie in (0, 1)".into()));
        }
        if self.gen_length < 2 || self.max_hop_km <= 0.0 {
            return Err(Error::Config("gen_length must be >= 2 and max_hop_km positive".into()));
        }
        CheckinSchema::named(&self.schema)?;
        self.sim_config().validate()
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            gamma: self.gamma,
            mu: self.mu,
            alpha: self.alpha,
            beta: self.beta,
            tau_percent: self.tau_percent,
            lr: self.lr,
            dropout: self.dropout,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            sampling: self.sampling,
            num_candidates: self.num_candidates,
        }
    }

    pub fn refgen_config(&self) -> RefGenConfig {
        RefGenConfig {
            mode: self.refgen,
            seqs_per_region: self.seqs_per_region,
            sem_seqs: self.sem_seqs,
            gen_length: self.gen_length,
            max_hop_km: self.max_hop_km,
            probabilistic_fallback: self.probabilistic_fallback,
        }
    }

    /// The header echoed into every report: all hyperparameters, no paths.
    pub fn header(&self) -> ReportHeader {
        ReportHeader {
            seed: self.seed,
            dims: self.dims.clone(),
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            mu: self.mu,
            tau_percent: self.tau_percent,
            h: self.top_h,
            lr: self.lr,
            dropout: self.dropout,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            k_regions: self.k_regions,
            seqs_per_region: self.seqs_per_region,
            sem_seqs: self.sem_seqs,
            refgen: self.refgen,
            sampling: self.sampling,
            candidates: self.num_candidates,
        }
    }
}

/// Splits `n` users over dimension buckets by largest remainder, then
/// shuffles the users with the run seed.
pub fn assign_dims(users: &[UserId], dims: &[(usize, f64)], seed: u64) -> Result<BTreeMap<UserId, usize>> {
    let n = users.len();
    let exact: Vec<f64> = dims.iter().map(|&(_, f)| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..dims.len()).collect();
    // largest fractional part first; earlier buckets win ties
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle().take(dims.len() * 2) {
        if missing == 0 {
            break;
        }
        if dims[i].1 > 0.0 {
            counts[i] += 1;
            missing -= 1;
        }
    }
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Config("cannot distribute users over dimension buckets".into()));
    }
    let mut shuffled = users.to_vec();
    shuffled.shuffle(&mut rng::derive(seed, rng::stream::DIMS, 0));
    let mut out = BTreeMap::new();
    let mut it = shuffled.into_iter();
    for (&(d, _), &c) in dims.iter().zip(&counts) {
        for u in it.by_ref().take(c) {
            out.insert(u, d);
        }
    }
    Ok(out)
}

/// Ingested, split data ready for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Raw user ids by dense index.
    pub users: Vec<String>,
    pub categories: Vec<String>,
    pub pois: Vec<Poi>,
    pub split: SplitDataset,
    pub friends: SocialGraph,
}

impl Dataset {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let w = BufWriter::new(File::create(dir.join("dataset.json"))?);
        serde_json::to_writer(w, self)?;
        let summary = serde_json::json!({
            "users": self.users.len(),
            "evaluation_users": self.split.users.len(),
            "reference_sequences": self.split.reference_pool.len(),
            "pois": self.pois.len(),
            "categories": self.categories.len(),
            "friendships": self.friends.len(),
        });
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = File::open(dir.join("dataset.json"))
            .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", dir.join("dataset.json").display())))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub schema: CheckinSchema,
    pub min_interactions: usize,
    pub max_seq_len: usize,
    pub reference_fraction: f64,
    pub seed: u64,
}

/// Parse, filter, sequence and split raw files.
pub fn ingest(checkins: &Path, friends: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let table = parse_checkins(checkins, &opts.schema)?;
    let table = filter_min_interactions(&table, opts.min_interactions)?;
    let graph = parse_friendships(friends, &table.user_lookup())?;
    let seqs = build_sequences(&table, opts.max_seq_len);
    let split = leave_one_out_split(
        &seqs,
        opts.reference_fraction,
        &mut rng::derive(opts.seed, rng::stream::SPLIT, 0),
    )?;
    info!(
        "ingested {} users ({} evaluated), {} POIs, {} categories, {} friendships",
        table.users.len(),
        split.users.len(),
        table.pois.len(),
        table.categories.len(),
        graph.len()
    );
    Ok(Dataset {
        users: table.users,
        categories: table.categories,
        pois: table.pois,
        split,
        friends: graph,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub seed: u64,
    pub dims: Vec<(usize, f64)>,
    pub alpha: usize,
    pub beta: usize,
    pub gamma: f64,
    pub mu: f64,
    pub tau_percent: f64,
    pub h: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub patience: u32,
    pub k_regions: usize,
    pub seqs_per_region: usize,
    pub sem_seqs: usize,
    pub refgen: RefGenMode,
    pub sampling: SamplingMode,
    pub candidates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub users: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl Metrics {
    /// Equal-weight mean over devices.
    pub fn mean_of(evals: &[&DeviceEval]) -> Self {
        let n = evals.len();
        if n == 0 {
            return Metrics::default();
        }
        let avg = |f: fn(&DeviceEval) -> f64| evals.iter().map(|e| f(e)).sum::<f64>() / n as f64;
        Metrics {
            users: n,
            hr5: avg(|e| e.hr5),
            hr10: avg(|e| e.hr10),
            ndcg5: avg(|e| e.ndcg5),
            ndcg10: avg(|e| e.ndcg10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub dim: usize,
    pub metrics: Metrics,
    pub mean_model_size_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    pub overall: Metrics,
    pub per_dim: Vec<BucketReport>,
    pub mean_model_size_bytes: f64,
    pub total_bytes_exchanged: u64,
    pub rounds: u32,
    /// Devices that stopped early, and the mean round at which they did.
    pub converged_devices: usize,
    pub mean_epochs_to_convergence: f64,
    pub per_device: Vec<DeviceEval>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let h = &self.header;
        let _ = writeln!(
            s,
            "seed={} alpha={} beta={} gamma={} mu={} tau={}% h={} lr={} dropout={} batch={} epochs={} refgen={} sampling={}",
            h.seed, h.alpha, h.beta, h.gamma, h.mu, h.tau_percent, h.h, h.lr, h.dropout, h.batch_size, h.max_epochs, h.refgen, h.sampling
        );
        let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>12}", "dim", "users", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "size(bytes)");
        let mut row = |name: String, m: &Metrics, size: f64| {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12.1}",
                name, m.users, m.hr5, m.hr10, m.ndcg5, m.ndcg10, size
            );
        };
        for b in &self.per_dim {
            row(b.dim.to_string(), &b.metrics, b.mean_model_size_bytes);
        }
        row("all".into(), &self.overall, self.mean_model_size_bytes);
        let _ = writeln!(
            s,
            "rounds={} bytes_exchanged={} converged={} mean_epochs_to_convergence={:.2}",
            self.rounds, self.total_bytes_exchanged, self.converged_devices, self.mean_epochs_to_convergence
        );
        s
    }
}

/// Everything a run produces.
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub logs: Vec<RoundLog>,
    pub neighbors: BTreeMap<UserId, NeighborState>,
    pub references: crate::refdata::ReferenceData,
}

impl ExperimentOutput {
    /// Writes `report.json`, `report.txt`, `rounds.ndjson`, `neighbors.json`
    /// and the reference sets.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        fs::write(dir.join("report.txt"), self.report.to_table())?;
        let mut w = BufWriter::new(File::create(dir.join("rounds.ndjson"))?);
        for log in &self.logs {
            for r in &log.records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        fs::write(dir.join("neighbors.json"), serde_json::to_string_pretty(&self.neighbors)? + "\n")?;
        write_geo_refs(&self.references.geo, BufWriter::new(File::create(dir.join("geo_refs.txt"))?))?;
        write_sem_refs(&self.references.sem, BufWriter::new(File::create(dir.join("sem_refs.txt"))?))?;
        Ok(())
    }
}

/// Regions, server phase, rounds and evaluation on an ingested dataset.
pub fn run_on_dataset(config: &ExperimentConfig, data: &Dataset, observer: Arc<dyn Observer>) -> Result<ExperimentOutput> {
    config.validate()?;
    let region_map = cluster_by_city(&data.pois, config.k_regions, config.seed).map_err(|e| e.in_stage("regions"))?;
    let world = World {
        region_map,
        pois: data.pois.clone(),
        num_categories: data.num_categories(),
    };
    let users: Vec<UserId> = data.split.users.keys().copied().collect();
    let dims = assign_dims(&users, &config.dims, config.seed).map_err(|e| e.in_stage("config"))?;
    let sim_config = config.sim_config();
    let server = Server::new(
        &world,
        &data.split.reference_pool,
        &data.friends,
        config.refgen_config(),
        config.top_h,
        config.seed,
    );
    let (state, devices) = setup(&world, &data.split.users, &dims, server, &sim_config, observer.as_ref())
        .map_err(|e| e.in_stage("server"))?;
    let mut sim = Simulation::new(&world, sim_config, devices, observer).map_err(|e| e.in_stage("rounds"))?;
    sim.run_until_converged().map_err(|e| e.in_stage("rounds"))?;
    let evals = sim.evaluate().map_err(|e| e.in_stage("evaluation"))?;
    let report = build_report(config, &sim, &evals);
    Ok(ExperimentOutput {
        report,
        logs: sim.logs().to_vec(),
        neighbors: sim.neighbor_states(),
        references: state.references,
    })
}

fn build_report(config: &ExperimentConfig, sim: &Simulation<'_>, evals: &[DeviceEval]) -> MetricsReport {
    let all: Vec<&DeviceEval> = evals.iter().collect();
    let sizes: BTreeMap<UserId, usize> = sim.devices().iter().map(|d| (d.user(), d.model_size_bytes())).collect();
    let mut per_dim = Vec::new();
    let mut dims: Vec<usize> = evals.iter().map(|e| e.dim).collect();
    dims.sort_unstable();
    dims.dedup();
    for d in dims {
        let bucket: Vec<&DeviceEval> = evals.iter().filter(|e| e.dim == d).collect();
        let size = bucket.iter().map(|e| sizes[&e.user] as f64).sum::<f64>() / bucket.len() as f64;
        per_dim.push(BucketReport {
            dim: d,
            metrics: Metrics::mean_of(&bucket),
            mean_model_size_bytes: size,
        });
    }
    let mean_size = if sizes.is_empty() {
        0.0
    } else {
        sizes.values().map(|&s| s as f64).sum::<f64>() / sizes.len() as f64
    };
    let converged: Vec<usize> = sim
        .devices()
        .iter()
        .filter(|d| d.is_frozen())
        .map(|d| d.loss_history().len())
        .collect();
    MetricsReport {
        header: config.header(),
        overall: Metrics::mean_of(&all),
        per_dim,
        mean_model_size_bytes: mean_size,
        total_bytes_exchanged: sim.logs().iter().map(|l| l.bytes_exchanged() as u64).sum(),
        rounds: sim.rounds_run(),
        converged_devices: converged.len(),
        mean_epochs_to_convergence: if converged.is_empty() {
            0.0
        } else {
            converged.iter().sum::<usize>() as f64 / converged.len() as f64
        },
        per_device: evals.to_vec(),
    }
}

/// Full pipeline from a config file's data source.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let data = match &config.data {
        None => return Err(Error::Config("no data source: set `checkins`/`friends` or `dataset`".into()).in_stage("ingest")),
        Some(DataSource::Ingested(dir)) => Dataset::load(dir).map_err(|e| e.in_stage("ingest"))?,
        Some(DataSource::Raw { checkins, friends }) => {
            let opts = IngestOptions {
                schema: CheckinSchema::named(&config.schema)?,
                min_interactions: config.min_interactions,
                max_seq_len: config.max_seq_len,
                reference_fraction: config.reference_fraction,
                seed: config.seed,
            };
            ingest(checkins, friends, &opts).map_err(|e| e.in_stage("ingest"))?
        }
    };
    run_on_dataset(config, &data, Arc::new(NoopObserver))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(hr_at_k(Some(1), 5), 1.0);
        assert_eq!(hr_at_k(Some(6), 5), 0.0);
        assert_eq!(hr_at_k(None, 5), 0.0);
        assert_eq!(ndcg_at_k(Some(1), 10), 1.0);
        assert_eq!(ndcg_at_k(Some(3), 10), 0.5);
        assert_eq!(ndcg_at_k(Some(11), 10), 0.0);
    }

    #[test]
    fn ties_rank_pessimistically() {
        let c = [PoiId(0), PoiId(1), PoiId(2)];
        assert_eq!(rank_target(&c, &[1.0, 1.0, 0.0], PoiId(0)).unwrap(), 2);
        assert_eq!(rank_target(&c, &[2.0, 1.0, 0.0], PoiId(0)).unwrap(), 1);
        assert_eq!(rank_target(&c, &[0.0, 1.0, 2.0], PoiId(0)).unwrap(), 3);
        assert!(rank_target(&c, &[0.0, 1.0, 2.0], PoiId(7)).is_err());
    }

    #[test]
    fn default_config_carries_reference_hyperparameters() {
        let cfg = ExperimentConfig::default();
        let h = cfg.header();
        assert_eq!((h.alpha, h.beta, h.h, h.batch_size, h.max_epochs), (5, 10, 50, 16, 50));
        assert_eq!((h.gamma, h.mu, h.tau_percent, h.lr, h.dropout), (0.5, 0.7, 1.0, 0.002, 0.2));
        assert_eq!(h.dims.iter().map(|d| d.0).collect::<Vec<_>>(), vec![8, 16, 32, 64, 128]);
        assert_eq!(h.candidates, 200);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_parsing() {
        let text = "# comment\nseed = 9\ndims = 8:0.5, 16:0.5\ntau = 2%\nsampling = similarity\nrefgen = probabilistic\ncheckins = a.csv\nfriends = f.txt\n";
        let cfg = ExperimentConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dims, vec![(8, 0.5), (16, 0.5)]);
        assert_eq!(cfg.tau_percent, 2.0);
        assert_eq!(cfg.sampling, SamplingMode::Similarity);
        assert_eq!(cfg.refgen, RefGenMode::Probabilistic);
        assert_eq!(
            cfg.data,
            Some(DataSource::Raw {
                checkins: "/data/a.csv".into(),
                friends: "/data/f.txt".into()
            })
        );
        assert!(ExperimentConfig::parse("dims = 8:0.5", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("colour = red", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("mu = 2", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("checkins = a.csv", Path::new(".")).is_err());
    }

    #[test]
    fn dims_follow_fractions() {
        let users: Vec<UserId> = (0..23).map(UserId).collect();
        let dims = [(8, 0.2), (16, 0.2), (32, 0.2), (64, 0.2), (128, 0.2)];
        let a = assign_dims(&users, &dims, 1).unwrap();
        assert_eq!(a.len(), 23);
        for (d, _) in dims {
            let n = a.values().filter(|&&x| x == d).count();
            assert!(n == 4 || n == 5, "{d}: {n}");
        }
        assert_eq!(a, assign_dims(&users, &dims, 1).unwrap());
        assert_ne!(a, assign_dims(&users, &dims, 2).unwrap());
        let one = assign_dims(&users, &[(8, 1.0)], 1).unwrap();
        assert!(one.values().all(|&d| d == 8));
    }
}
