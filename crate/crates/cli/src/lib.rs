//! Config-driven experiment runs: replicas, reports and sweeps.
//!
//! Layout of a run directory `<out>/<run-id>/`:
//!
//! ```text
//! config.toml          effective configuration after command-line overrides
//! provenance.json      config hash, seed and crate versions
//! replica_<k>.json     per-replica errors and convergence flags
//! fields/replica_<k>_<name>.csv
//! report.csv           median and IQR per method and metric
//! ```
//!
//! Field CSVs hold one grid row per line (`x2` index increasing downwards,
//! `x1` along the line). Every CSV starts with a `#` provenance line.
//!
//! Cached expansions (`--cache DIR`) are stored one file per expansion as
//! `<key>.ckle`: a little-endian binary dump of the grid size, mean,
//! eigenvalues and mode matrix, where the key hashes every input.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use pickle_core::experiment::{self, Cache, ExperimentConfig, Method, ReplicaResult, Variant};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub replicas: Option<usize>,
    pub threads: Option<usize>,
    pub cache: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Parses a TOML experiment file. Unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    Ok(cfg)
}

fn apply(mut cfg: ExperimentConfig, o: &Overrides) -> Result<ExperimentConfig> {
    if let Some(r) = o.replicas {
        cfg.replicas = r;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
}

impl Provenance {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let canonical = serde_json::to_vec(cfg)?;
        let hash = Sha256::digest(&canonical);
        let mut versions = BTreeMap::new();
        versions.insert("pickle-core".to_string(), pickle_core::VERSION.to_string());
        versions.insert("pickle-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Ok(Self {
            config_sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
            seed: cfg.seed,
            versions,
        })
    }

    fn csv_header(&self) -> String {
        let versions: Vec<String> = self.versions.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("# config_sha256={} seed={} {}\n", self.config_sha256, self.seed, versions.join(" "))
    }

    fn run_id(&self, name: &str) -> String {
        let clean: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{clean}-{}", &self.config_sha256[..12])
    }
}

#[derive(Serialize)]
struct ReplicaFile<'a> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    result: &'a ReplicaResult,
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = threads.unwrap_or(1);
    if n == 0 {
        bail!("--threads must be positive");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
}

fn cache(o: &Overrides) -> Result<Cache> {
    match &o.cache {
        Some(dir) => Cache::at(dir).with_context(|| format!("opening cache {}", dir.display())),
        None => Ok(Cache::disabled()),
    }
}

/// Runs every replica of `cfg` in parallel; results come back in replica order.
fn run_replicas(cfg: &ExperimentConfig, o: &Overrides) -> Result<Vec<ReplicaResult>> {
    let cache = cache(o)?;
    pool(o.threads)?.install(|| {
        (0..cfg.replicas)
            .into_par_iter()
            .map(|k| {
                info!("replica {k} started");
                experiment::run_replica(cfg, k, &cache)
                    .with_context(|| format!("replica {k} (seed {})", cfg.replica_seed(k)))
            })
            .collect()
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn field_csv(prov: &Provenance, nx: usize, values: &[f64]) -> String {
    let mut s = prov.csv_header();
    for row in values.chunks(nx) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Median and IQR of `rel_l2` and `rel_l1` for every method, with the full and
/// subsampled variants side by side.
pub fn report_csv(prov: &Provenance, replicas: &[ReplicaResult]) -> String {
    let mut methods: Vec<Method> = replicas.iter().flat_map(|r| r.results.iter().map(|m| m.method)).collect();
    methods.sort();
    methods.dedup();
    let mut s = prov.csv_header();
    s.push_str("method,metric,full_median,full_iqr,subsampled_median,subsampled_iqr,replicas\n");
    for method in methods {
        for metric in ["rel_l2", "rel_l1"] {
            let stats = |variant: Variant| {
                let v: Vec<f64> = replicas
                    .iter()
                    .filter_map(|r| r.get(method, variant))
                    .map(|m| if metric == "rel_l2" { m.rel_l2 } else { m.rel_l1 })
                    .collect();
                (!v.is_empty()).then(|| experiment::median_iqr(&v))
            };
            let full = stats(Variant::Full);
            let sub = stats(Variant::Subsampled);
            let _ = writeln!(
                s,
                "{method},{metric},{},{},{},{},{}",
                fmt_opt(full.map(|x| x.0)),
                fmt_opt(full.map(|x| x.1)),
                fmt_opt(sub.map(|x| x.0)),
                fmt_opt(sub.map(|x| x.1)),
                replicas.len()
            );
        }
    }
    s
}

fn prepare_dir(out: &Path, prov: &Provenance, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = out.join(prov.run_id(&cfg.name));
    fs::create_dir_all(dir.join("fields")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
    write_json(&dir.join("provenance.json"), prov)?;
    Ok(dir)
}

/// Runs the experiment and writes all artifacts. Returns the run directory.
pub fn run(cfg: ExperimentConfig, o: &Overrides, out: &Path) -> Result<PathBuf> {
    let cfg = apply(cfg, o)?;
    let prov = Provenance::new(&cfg)?;
    let dir = prepare_dir(out, &prov, &cfg)?;
    let replicas = run_replicas(&cfg, o)?;
    for r in &replicas {
        write_json(
            &dir.join(format!("replica_{}.json", r.replica)),
            &ReplicaFile {
                provenance: &prov,
                result: r,
            },
        )?;
        for (name, values) in &r.fields {
            let path = dir.join("fields").join(format!("replica_{}_{name}.csv", r.replica));
            fs::write(&path, field_csv(&prov, cfg.nx, values)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    fs::write(dir.join("report.csv"), report_csv(&prov, &replicas))?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_xi: usize,
    pub method: Method,
    /// Largest number of modes actually used across replicas.
    pub n_xi_used: Option<usize>,
    pub median: f64,
    pub iqr: f64,
}

/// Relative l2 error against the number of parameter modes. MAP does not
/// depend on `N_xi`; it is computed once and repeated on every row as a
/// reference line.
pub fn sweep(cfg: ExperimentConfig, n_xi: &[usize], o: &Overrides, out: &Path) -> Result<(PathBuf, Vec<SweepRow>)> {
    if n_xi.is_empty() {
        bail!("no N_xi values given");
    }
    let cfg = apply(cfg, o)?;
    let continuous: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| matches!(m, Method::Ckli | Method::CkliTheta))
        .collect();
    let with_map = cfg.methods.contains(&Method::Map);
    let prov = Provenance::new(&cfg)?;
    let dir = prepare_dir(out, &prov, &cfg)?;

    let mut rows = Vec::new();
    if !continuous.is_empty() {
        for &n in n_xi {
            let c = ExperimentConfig {
                n_xi: n,
                methods: continuous.clone(),
                subsample_factor: None,
                ..cfg.clone()
            };
            c.validate().with_context(|| format!("N_xi = {n}"))?;
            let reps = run_replicas(&c, o)?;
            for &m in &continuous {
                let res: Vec<_> = reps.iter().filter_map(|r| r.get(m, Variant::Full)).collect();
                let used = res.iter().map(|r| r.n_xi).max();
                if let Some(u) = used {
                    if u < n {
                        warn!("N_xi = {n} exceeds the available modes for {m}; capped at {u}");
                    }
                }
                let (median, iqr) = experiment::median_iqr(&res.iter().map(|r| r.rel_l2).collect::<Vec<_>>());
                rows.push(SweepRow {
                    n_xi: n,
                    method: m,
                    n_xi_used: used,
                    median,
                    iqr,
                });
            }
        }
    }
    if with_map {
        let c = ExperimentConfig {
            methods: vec![Method::Map],
            ..cfg.clone()
        };
        let reps = run_replicas(&c, o)?;
        let errs: Vec<f64> = reps.iter().filter_map(|r| r.get(Method::Map, Variant::Full)).map(|r| r.rel_l2).collect();
        let (median, iqr) = experiment::median_iqr(&errs);
        for &n in n_xi {
            rows.push(SweepRow {
                n_xi: n,
                method: Method::Map,
                n_xi_used: None,
                median,
                iqr,
            });
        }
    }
    rows.sort_by_key(|r| (r.n_xi, r.method));

    let mut s = prov.csv_header();
    s.push_str("n_xi,method,n_xi_used,median_rel_l2,iqr_rel_l2,replicas\n");
    for r in &rows {
        let used = r.n_xi_used.map(|u| u.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{used},{},{},{}", r.n_xi, r.method, r.median, r.iqr, cfg.replicas);
    }
    fs::write(dir.join("sweep.csv"), s)?;
    Ok((dir, rows))
}
