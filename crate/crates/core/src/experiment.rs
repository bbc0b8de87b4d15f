//! Synthetic twin experiments: draw a reference field, observe it, run the
//! requested estimators and score them against the reference.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{self, EnsembleConfig};
use crate::error::{Error, Result};
use crate::fieldgen::{self, ReferenceSampler};
use crate::fv::ResidualOperator;
use crate::gpr::{self, FitOptions, GaussianFieldModel, ObservationSet};
use crate::grid::Grid;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::kle::{self, Ckle, Truncation};
use crate::latent::{self, BinaryFieldSpec};
use crate::map::{self, MapConfig};
use crate::pickle::{self, InversionConfig, Optimizer, ParamMap};
use crate::random;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// PICKLE with the true kernel.
    Ckli,
    /// PICKLE with kernel hyperparameters fitted to the `y` data.
    CkliTheta,
    Map,
    /// PICKLE through the logistic latent-field map.
    Binary,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ckli => "cKLI",
            Method::CkliTheta => "cKLI-theta",
            Method::Map => "MAP",
            Method::Binary => "binary",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Subsampled,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "Full",
            Variant::Subsampled => "Subsampled",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinarySettings {
    pub y1: f64,
    pub y2: f64,
    /// Sharpness `1/epsilon` used to generate the reference.
    pub reference_sharpness: f64,
    /// Sharpness used by the inversion.
    pub inversion_sharpness: f64,
}

impl Default for BinarySettings {
    fn default() -> Self {
        Self {
            y1: 0.0,
            y2: -(10f64.ln()),
            reference_sharpness: 100.0,
            inversion_sharpness: 30.0,
        }
    }
}

impl BinarySettings {
    pub fn reference_spec(&self) -> Result<BinaryFieldSpec> {
        BinaryFieldSpec::new(self.y1, self.y2, 1.0 / self.reference_sharpness)
    }

    pub fn inversion_spec(&self) -> Result<BinaryFieldSpec> {
        BinaryFieldSpec::new(self.y1, self.y2, 1.0 / self.inversion_sharpness)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub nx: usize,
    pub ny: usize,
    /// Kernel of the reference field (of the latent field for binary runs).
    pub kernel: KernelSpec,
    /// Family used when fitting hyperparameters; defaults to the true family.
    pub assumed_family: Option<KernelFamily>,
    pub n_y_obs: usize,
    pub n_u_obs: usize,
    pub n_xi: usize,
    pub n_eta: usize,
    pub n_ens: usize,
    pub gamma: f64,
    pub subsample_factor: Option<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub replicas: usize,
    /// Parallel forward-solve lanes inside one ensemble.
    pub workers: usize,
    pub optimizer: Optimizer,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub map_max_iters: usize,
    pub map_grad_tol: f64,
    pub fit_starts: usize,
    pub binary: BinarySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            nx: 32,
            ny: 32,
            kernel: KernelSpec {
                family: KernelFamily::Gaussian,
                sigma: 1.0,
                length: 0.2,
            },
            assumed_family: None,
            n_y_obs: 50,
            n_u_obs: 50,
            n_xi: 100,
            n_eta: 100,
            n_ens: 5000,
            gamma: 1e-6,
            subsample_factor: None,
            methods: vec![Method::Ckli, Method::CkliTheta, Method::Map],
            seed: 0,
            replicas: 10,
            workers: 1,
            optimizer: Optimizer::GaussNewton,
            max_iters: 200,
            grad_tol: 1e-8,
            map_max_iters: 50_000,
            map_grad_tol: 1e-9,
            fit_starts: 8,
            binary: BinarySettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn is_binary(&self) -> bool {
        self.methods.contains(&Method::Binary)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        Grid::new(self.nx, self.ny)?;
        self.kernel.validate()?;
        let n = self.nx * self.ny;
        if self.n_y_obs > n || self.n_u_obs > n {
            return bad(format!("observation counts ({}, {}) exceed the {n} cells", self.n_y_obs, self.n_u_obs));
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.is_binary() && self.methods.iter().any(|m| matches!(m, Method::Ckli | Method::CkliTheta)) {
            return bad("binary runs support only the binary and map methods".into());
        }
        if self.replicas == 0 {
            return bad("replicas must be positive".into());
        }
        if let Some(f) = self.subsample_factor {
            if f == 0 || !self.nx.is_multiple_of(f) || !self.ny.is_multiple_of(f) {
                return Err(Error::InvalidSubsample {
                    factor: f,
                    nx: self.nx,
                    ny: self.ny,
                });
            }
        }
        if self.fit_starts == 0 {
            return bad("fit_starts must be positive".into());
        }
        self.inversion_config().validate()?;
        self.map_config().validate()?;
        self.ensemble_config(0).validate()?;
        self.ensemble_config(0).check_rank(self.n_u_obs)?;
        if self.is_binary() {
            self.binary.reference_spec()?;
            self.binary.inversion_spec()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.nx, self.ny)
    }

    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig {
            gamma: self.gamma,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            n_xi: self.n_xi,
            n_eta: self.n_eta,
            optimizer: self.optimizer,
        }
    }

    pub fn map_config(&self) -> MapConfig {
        MapConfig {
            gamma: self.gamma,
            max_iters: self.map_max_iters,
            grad_tol: self.map_grad_tol,
        }
    }

    pub fn ensemble_config(&self, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            n_ens: self.n_ens,
            seed,
            workers: self.workers,
        }
    }

    /// Seed of replica `k`.
    pub fn replica_seed(&self, k: usize) -> u64 {
        random::derive_seed(self.seed, k as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub variant: Variant,
    pub rel_l2: f64,
    pub rel_l1: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    /// Expansion sizes actually used (after capping at the covariance rank).
    pub n_xi: usize,
    pub n_eta: usize,
    /// Kernel used to build the parameter expansion.
    pub kernel: Option<KernelSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub replica: usize,
    pub seed: u64,
    pub results: Vec<MethodResult>,
    /// Named fields (reference and estimates) for plotting.
    #[serde(skip)]
    pub fields: Vec<(String, Vec<f64>)>,
}

impl ReplicaResult {
    pub fn get(&self, method: Method, variant: Variant) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method && r.variant == variant)
    }
}

// tags for per-replica seed derivation
const TAG_REFERENCE: u64 = 1;
const TAG_Y_OBS: u64 = 2;
const TAG_U_OBS: u64 = 3;
const TAG_ENSEMBLE: u64 = 4;
const TAG_FIT: u64 = 5;

/// Reference fields and observations of one replica.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub grid: Grid,
    pub y_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub y_obs: ObservationSet,
    pub u_obs: ObservationSet,
}

pub fn scenario(cfg: &ExperimentConfig, seed: u64) -> Result<Scenario> {
    let grid = cfg.grid()?;
    let draw = ReferenceSampler::new(&cfg.kernel, &grid)?.draw(random::derive_seed(seed, TAG_REFERENCE));
    let y_ref = if cfg.is_binary() {
        cfg.binary.reference_spec()?.latent_to_y(&draw)
    } else {
        draw
    };
    let u_ref = ResidualOperator::new(&grid).solve(&y_ref)?;
    let y_obs = fieldgen::sample_observations(&y_ref, &grid, cfg.n_y_obs, random::derive_seed(seed, TAG_Y_OBS))?;
    let u_obs = fieldgen::sample_observations(&u_ref, &grid, cfg.n_u_obs, random::derive_seed(seed, TAG_U_OBS))?;
    Ok(Scenario {
        grid,
        y_ref,
        u_ref,
        y_obs,
        u_obs,
    })
}

/// Optional on-disk store for expansions, keyed by a hash of their inputs.
#[derive(Clone, Debug, Default)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn at(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: Some(dir.as_ref().to_path_buf()),
        })
    }

    fn get_or_build(&self, key: &str, build: impl FnOnce() -> Result<Ckle>) -> Result<Ckle> {
        let Some(dir) = &self.dir else {
            return build();
        };
        let path = dir.join(format!("{key}.ckle"));
        if let Ok(file) = fs::File::open(&path) {
            match Ckle::read_from(std::io::BufReader::new(file)) {
                Ok(c) => {
                    debug!("cache hit {key}");
                    return Ok(c);
                }
                Err(e) => warn!("ignoring unreadable cache entry {}: {e}", path.display()),
            }
        }
        let c = build()?;
        let tmp = dir.join(format!("{key}.ckle.tmp"));
        c.write_to(std::io::BufWriter::new(fs::File::create(&tmp)?))?;
        fs::rename(&tmp, &path)?;
        Ok(c)
    }
}

/// Builds cache keys from the inputs of an artifact.
struct KeyHasher(Sha256);

impl KeyHasher {
    fn new(kind: &str) -> Self {
        let mut h = KeyHasher(Sha256::new());
        h.str(env!("CARGO_PKG_VERSION")).str(kind);
        h
    }

    fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.0.update(s.as_bytes());
        self
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    fn grid(&mut self, g: &Grid) -> &mut Self {
        self.u64(g.nx() as u64).u64(g.ny() as u64)
    }

    fn kernel(&mut self, k: &KernelSpec) -> &mut Self {
        self.str(&format!("{:?}", k.family)).f64(k.sigma).f64(k.length)
    }

    fn obs(&mut self, o: &ObservationSet) -> &mut Self {
        self.u64(o.len() as u64);
        for p in o.locations() {
            self.f64(p.x1).f64(p.x2);
        }
        for &v in o.values().iter().chain(o.noise_cov().iter()) {
            self.f64(v);
        }
        self
    }

    fn finish(&self) -> String {
        self.0.clone().finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

struct Expansions {
    y: Ckle,
    u: Ckle,
}

/// Conditional expansions of `y` (kernel `kernel`) and of `u` (by ensemble).
fn continuous_expansions(
    cfg: &ExperimentConfig,
    sc: &Scenario,
    kernel: &KernelSpec,
    ens_seed: u64,
    cache: &Cache,
) -> Result<Expansions> {
    let y_key = KeyHasher::new("y")
        .grid(&sc.grid)
        .kernel(kernel)
        .obs(&sc.y_obs)
        .u64(cfg.n_xi as u64)
        .finish();
    let y = cache.get_or_build(&y_key, || {
        let prior = GaussianFieldModel::from_kernel(&sc.grid, kernel);
        let conditional = gpr::condition(&prior, &sc.y_obs)?;
        kle::decompose(&conditional, Truncation::terms(cfg.n_xi))
    })?;
    if y.terms() < cfg.n_xi {
        warn!("n_xi = {} exceeds the {} available modes; capped", cfg.n_xi, y.terms());
    }
    let u_key = KeyHasher::new("u")
        .str(&y_key)
        .obs(&sc.u_obs)
        .u64(cfg.n_eta as u64)
        .u64(cfg.n_ens as u64)
        .u64(ens_seed)
        .finish();
    let u = cache.get_or_build(&u_key, || {
        let op = ResidualOperator::new(&sc.grid);
        let model = ensemble::build_u_model(&y, &op, &cfg.ensemble_config(ens_seed))?;
        ensemble::build_u_ckle(&model, &sc.u_obs, cfg.n_eta)
    })?;
    Ok(Expansions { y, u })
}

/// Rounds observed values to the nearer facies value. A sharp but smooth
/// reference leaves a few observations slightly off either facies.
fn snap_to_facies(obs: &ObservationSet, spec: &BinaryFieldSpec) -> Result<ObservationSet> {
    let mid = 0.5 * (spec.y1 + spec.y2);
    let values = obs
        .values()
        .map(|v| if v >= mid { spec.y1 } else { spec.y2 });
    ObservationSet::new(obs.locations().to_vec(), values, obs.noise_cov().clone())
}

fn latent_expansions(cfg: &ExperimentConfig, sc: &Scenario, ens_seed: u64, cache: &Cache) -> Result<Expansions> {
    let spec = cfg.binary.inversion_spec()?;
    let f_key = KeyHasher::new("latent")
        .grid(&sc.grid)
        .kernel(&cfg.kernel)
        .obs(&sc.y_obs)
        .f64(spec.y1)
        .f64(spec.y2)
        .u64(cfg.n_xi as u64)
        .finish();
    let f = cache.get_or_build(&f_key, || {
        let model = latent::classify_latent(&snap_to_facies(&sc.y_obs, &spec)?, &spec, &cfg.kernel, &sc.grid)?;
        match kle::decompose(&model, Truncation::terms(cfg.n_xi)) {
            Err(Error::DegenerateField) => Ckle::deterministic(&sc.grid, model.mean().clone()),
            other => other,
        }
    })?;
    let u_key = KeyHasher::new("u-latent")
        .str(&f_key)
        .f64(spec.epsilon)
        .obs(&sc.u_obs)
        .u64(cfg.n_eta as u64)
        .u64(cfg.n_ens as u64)
        .u64(ens_seed)
        .finish();
    let u = cache.get_or_build(&u_key, || {
        let op = ResidualOperator::new(&sc.grid);
        let model = ensemble::build_u_model_with(&f, &op, &cfg.ensemble_config(ens_seed), |v| spec.latent_to_y(v))?;
        ensemble::build_u_ckle(&model, &sc.u_obs, cfg.n_eta)
    })?;
    Ok(Expansions { y: f, u })
}

fn score(
    sc: &Scenario,
    method: Method,
    variant: Variant,
    y_est: &[f64],
    converged: bool,
    history_len: usize,
    grad: f64,
    sizes: (usize, usize),
    kernel: Option<KernelSpec>,
) -> Result<MethodResult> {
    Ok(MethodResult {
        method,
        variant,
        rel_l2: fieldgen::relative_lp_error(sc.y_ref.as_slice(), y_est, 2)?,
        rel_l1: fieldgen::relative_lp_error(sc.y_ref.as_slice(), y_est, 1)?,
        converged,
        iterations: history_len.saturating_sub(1),
        final_grad_norm: grad,
        n_xi: sizes.0,
        n_eta: sizes.1,
        kernel,
    })
}

fn field_name(method: Method, variant: Variant) -> String {
    let m = match method {
        Method::Ckli => "ckli",
        Method::CkliTheta => "ckli_theta",
        Method::Map => "map",
        Method::Binary => "binary",
    };
    match variant {
        Variant::Full => format!("y_{m}"),
        Variant::Subsampled => format!("y_{m}_subsampled"),
    }
}

/// Runs every configured method on replica `k`.
pub fn run_replica(cfg: &ExperimentConfig, k: usize, cache: &Cache) -> Result<ReplicaResult> {
    cfg.validate()?;
    let seed = cfg.replica_seed(k);
    let sc = scenario(cfg, seed)?;
    let full = ResidualOperator::new(&sc.grid);
    let sub = cfg.subsample_factor.map(|f| full.subsample(f)).transpose()?;
    let ens_seed = random::derive_seed(seed, TAG_ENSEMBLE);
    let inv = cfg.inversion_config();

    let mut results = Vec::new();
    let mut fields = vec![
        ("y_ref".to_string(), sc.y_ref.as_slice().to_vec()),
        ("u_ref".to_string(), sc.u_ref.as_slice().to_vec()),
    ];
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    for method in methods {
        debug!("replica {k}: {method}");
        if method == Method::Map {
            let res = map::map_invert(&sc.y_obs, &sc.u_obs, &full, &cfg.map_config())?;
            results.push(score(
                &sc,
                method,
                Variant::Full,
                &res.y_est,
                res.converged,
                res.objective_history.len(),
                res.final_grad_norm,
                (0, 0),
                None,
            )?);
            fields.push((field_name(method, Variant::Full), res.y_est));
            continue;
        }
        let (exp, map, kernel) = match method {
            Method::Ckli => (continuous_expansions(cfg, &sc, &cfg.kernel, ens_seed, cache)?, ParamMap::Identity, cfg.kernel),
            Method::CkliTheta => {
                let opts = FitOptions {
                    starts: cfg.fit_starts,
                    seed: random::derive_seed(seed, TAG_FIT),
                    ..Default::default()
                };
                let family = cfg.assumed_family.unwrap_or(cfg.kernel.family);
                let fitted = gpr::fit_hyperparameters(family, &sc.y_obs, &opts)?;
                debug!("replica {k}: fitted {fitted:?}");
                (continuous_expansions(cfg, &sc, &fitted, ens_seed, cache)?, ParamMap::Identity, fitted)
            }
            Method::Binary => (
                latent_expansions(cfg, &sc, ens_seed, cache)?,
                ParamMap::Logistic(cfg.binary.inversion_spec()?),
                cfg.kernel,
            ),
            Method::Map => unreachable!(),
        };
        let sizes = (exp.y.terms(), exp.u.terms());
        let mut variants = vec![(Variant::Full, &full)];
        if let Some(s) = &sub {
            variants.push((Variant::Subsampled, s));
        }
        for (variant, op) in variants {
            let res = pickle::invert_mapped(&exp.y, &exp.u, op, map, &inv)?;
            results.push(score(
                &sc,
                method,
                variant,
                &res.y_est,
                res.converged,
                res.objective_history.len(),
                res.final_grad_norm,
                sizes,
                Some(kernel),
            )?);
            fields.push((field_name(method, variant), res.y_est));
        }
    }
    Ok(ReplicaResult {
        replica: k,
        seed,
        results,
        fields,
    })
}

/// Median and interquartile range (linear interpolation between order statistics).
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}
