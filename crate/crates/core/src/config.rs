//! Experiment configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; omitted keys keep the desk-scale defaults. Lists are comma
//! separated. Unknown keys are rejected.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `mesh` | nodes per axis | 41 |
//! | `ro`, `re`, `dt` | model parameters | 1e-3, 100, 0.1 |
//! | `newton_tol`, `newton_max_iter` | nonlinear solver | 1e-10, 25 |
//! | `filter` | enkf, ml, mf, reference-ml, reference-mf, memoryless-ml, memoryless-mf | ml |
//! | `prior` | smooth, invariant | smooth |
//! | `n_p`, `n_a` | principal and ancillary sizes | 16, 200 |
//! | `eps_r` | relative tolerance | 1e-3 |
//! | `level_sizes` | sizes of levels `0..L-1` for `L > 1` (finest is `n_p`) | empty |
//! | `level_eps_r` | relative tolerance per level `0..L-1` | empty |
//! | `window`, `windows` | window length and count | 1.0, 100 |
//! | `sigma` | measurement noise | 1e-4 |
//! | `spin_up` | time before the first window | 50 |
//! | `archive_horizon` | length of the archive run after the last window | 20 |
//! | `seed`, `replicates` | randomness | 1, 4 |
//! | `inflate_ratio`, `deflate_ratio` | tolerance split | 0.5, 0.5 |
//! | `initial_space` | empty, full, archive-pod | empty |
//! | `psd_for_mf` | regularize multi-fidelity covariances | false |
//! | `prior_modes` | Laplacian modes used by the smooth prior | 400 |
//! | `jitter` | smooth-prior jitter on archive draws | 0 |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::qge::QgeParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Enkf,
    Ml,
    Mf,
    ReferenceMl,
    ReferenceMf,
    MemorylessMl,
    MemorylessMf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 7] = [
        FilterKind::Enkf,
        FilterKind::Ml,
        FilterKind::Mf,
        FilterKind::ReferenceMl,
        FilterKind::ReferenceMf,
        FilterKind::MemorylessMl,
        FilterKind::MemorylessMf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Enkf => "enkf",
            FilterKind::Ml => "ml",
            FilterKind::Mf => "mf",
            FilterKind::ReferenceMl => "reference-ml",
            FilterKind::ReferenceMf => "reference-mf",
            FilterKind::MemorylessMl => "memoryless-ml",
            FilterKind::MemorylessMf => "memoryless-mf",
        }
    }
}

impl FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config(format!("unknown filter `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Smooth,
    Invariant,
}

impl FromStr for PriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "invariant" => Ok(Self::Invariant),
            _ => Err(Error::Config(format!("unknown prior `{s}`"))),
        }
    }
}

/// Initial deflated space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialSpace {
    Empty,
    Full,
    ArchivePod,
}

impl FromStr for InitialSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empty" => Ok(Self::Empty),
            "full" => Ok(Self::Full),
            "archive-pod" => Ok(Self::ArchivePod),
            _ => Err(Error::Config(format!("unknown initial space `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mesh: usize,
    pub qge: QgeParams,
    pub filter: FilterKind,
    pub prior: PriorKind,
    pub n_p: usize,
    pub n_a: usize,
    pub eps_r: f64,
    pub level_sizes: Vec<usize>,
    pub level_eps_r: Vec<f64>,
    pub window: f64,
    pub windows: usize,
    pub sigma: f64,
    pub spin_up: f64,
    pub archive_horizon: f64,
    pub seed: u64,
    pub replicates: usize,
    pub inflate_ratio: f64,
    pub deflate_ratio: f64,
    pub initial_space: InitialSpace,
    pub psd_for_mf: bool,
    pub prior_modes: usize,
    pub jitter: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mesh: 41,
            qge: QgeParams::default(),
            filter: FilterKind::Ml,
            prior: PriorKind::Smooth,
            n_p: 16,
            n_a: 200,
            eps_r: 1e-3,
            level_sizes: Vec::new(),
            level_eps_r: Vec::new(),
            window: 1.0,
            windows: 100,
            sigma: 1e-4,
            spin_up: 50.0,
            archive_horizon: 20.0,
            seed: 1,
            replicates: 4,
            inflate_ratio: 0.5,
            deflate_ratio: 0.5,
            initial_space: InitialSpace::Empty,
            psd_for_mf: false,
            prior_modes: 400,
            jitter: 0.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses the flat format on top of the defaults and validates.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "mesh" => self.mesh = parse(key, v)?,
            "ro" => self.qge.ro = parse(key, v)?,
            "re" => self.qge.re = parse(key, v)?,
            "dt" => self.qge.dt = parse(key, v)?,
            "newton_tol" => self.qge.newton_tol = parse(key, v)?,
            "newton_max_iter" => self.qge.newton_max_iter = parse(key, v)?,
            "filter" => self.filter = v.parse()?,
            "prior" => self.prior = v.parse()?,
            "n_p" => self.n_p = parse(key, v)?,
            "n_a" => self.n_a = parse(key, v)?,
            "eps_r" => self.eps_r = parse(key, v)?,
            "level_sizes" => self.level_sizes = parse_list(key, v)?,
            "level_eps_r" => self.level_eps_r = parse_list(key, v)?,
            "window" => self.window = parse(key, v)?,
            "windows" => self.windows = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "spin_up" => self.spin_up = parse(key, v)?,
            "archive_horizon" => self.archive_horizon = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "replicates" => self.replicates = parse(key, v)?,
            "inflate_ratio" => self.inflate_ratio = parse(key, v)?,
            "deflate_ratio" => self.deflate_ratio = parse(key, v)?,
            "initial_space" => self.initial_space = v.parse()?,
            "psd_for_mf" => self.psd_for_mf = parse(key, v)?,
            "prior_modes" => self.prior_modes = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let q = &self.qge;
        BTreeMap::from([
            ("mesh", self.mesh.to_string()),
            ("ro", q.ro.to_string()),
            ("re", q.re.to_string()),
            ("dt", q.dt.to_string()),
            ("newton_tol", q.newton_tol.to_string()),
            ("newton_max_iter", q.newton_max_iter.to_string()),
            ("filter", self.filter.name().to_string()),
            ("prior", match self.prior {
                PriorKind::Smooth => "smooth",
                PriorKind::Invariant => "invariant",
            }
            .to_string()),
            ("n_p", self.n_p.to_string()),
            ("n_a", self.n_a.to_string()),
            ("eps_r", self.eps_r.to_string()),
            ("level_sizes", join(&self.level_sizes)),
            ("level_eps_r", join(&self.level_eps_r)),
            ("window", self.window.to_string()),
            ("windows", self.windows.to_string()),
            ("sigma", self.sigma.to_string()),
            ("spin_up", self.spin_up.to_string()),
            ("archive_horizon", self.archive_horizon.to_string()),
            ("seed", self.seed.to_string()),
            ("replicates", self.replicates.to_string()),
            ("inflate_ratio", self.inflate_ratio.to_string()),
            ("deflate_ratio", self.deflate_ratio.to_string()),
            ("initial_space", match self.initial_space {
                InitialSpace::Empty => "empty",
                InitialSpace::Full => "full",
                InitialSpace::ArchivePod => "archive-pod",
            }
            .to_string()),
            ("psd_for_mf", self.psd_for_mf.to_string()),
            ("prior_modes", self.prior_modes.to_string()),
            ("jitter", self.jitter.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.qge.validate()?;
        if self.mesh < 21 || (self.mesh - 1) % 20 != 0 {
            return bad("mesh - 1 must be a positive multiple of 20");
        }
        if self.n_p < 2 || self.n_a < 2 {
            return bad("ensembles need at least two members");
        }
        if !(self.eps_r >= 0.0 && self.sigma >= 0.0 && self.window > 0.0 && self.spin_up >= 0.0 && self.archive_horizon >= 0.0) {
            return bad("eps_r, sigma, spin_up and archive_horizon must be non-negative; window positive");
        }
        if self.windows == 0 || self.replicates == 0 {
            return bad("windows and replicates must be positive");
        }
        if !(self.inflate_ratio > 0.0 && self.deflate_ratio > 0.0 && (self.inflate_ratio + self.deflate_ratio - 1.0).abs() < 1e-12) {
            return bad("inflate_ratio and deflate_ratio must be positive and sum to 1");
        }
        if self.level_sizes.len() != self.level_eps_r.len() {
            return bad("level_sizes and level_eps_r must have equal length");
        }
        if self.level_sizes.iter().any(|&m| m < 2) {
            return bad("level sizes must be at least 2");
        }
        if self.level_eps_r.iter().any(|&e| e < 0.0) || self.level_eps_r.windows(2).any(|w| w[0] > w[1]) {
            return bad("level_eps_r must be non-negative and ascending");
        }
        if self.prior_modes == 0 || self.jitter < 0.0 {
            return bad("prior_modes must be positive and jitter non-negative");
        }
        self.qge.n_steps(self.window)?;
        Ok(())
    }

    /// Number of levels `L` of the hierarchy.
    pub fn levels(&self) -> usize {
        self.level_sizes.len().max(1)
    }

    /// Sizes `M_0..M_L`, the last being the principal size.
    pub fn hierarchy_sizes(&self) -> Vec<usize> {
        let mut s = if self.level_sizes.is_empty() { vec![self.n_a] } else { self.level_sizes.clone() };
        s.push(self.n_p);
        s
    }

    /// Relative tolerance per level `0..L`.
    pub fn hierarchy_eps_r(&self) -> Vec<f64> {
        if self.level_eps_r.is_empty() {
            vec![self.eps_r]
        } else {
            self.level_eps_r.clone()
        }
    }

    pub fn config_hash(&self) -> String {
        hex(&Sha256::digest(self.to_kv_string().as_bytes()))
    }

    /// Hash of the settings that determine the truth and archive.
    pub fn truth_hash(&self) -> String {
        let m = self.to_map();
        let mut s = String::from("truth-v1\n");
        for k in ["mesh", "ro", "re", "dt", "newton_tol", "newton_max_iter", "window", "windows", "spin_up", "archive_horizon"] {
            let _ = writeln!(s, "{k} = {}", m[k]);
        }
        hex(&Sha256::digest(s.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
