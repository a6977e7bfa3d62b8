//! Experiment configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `problem` | `schrodinger`, `synthetic` or `lattice` | required |
//! | `n` | Schrödinger grid size, synthetic column count | 100 |
//! | `m` | synthetic row count | `n` |
//! | `kind` | synthetic flow: `skew`, `two_sided`, `scalar:<a>` | `skew` |
//! | `n_xy`, `order` | lattice cells per side, P_N order | 70, 9 |
//! | `cfl` | lattice macro step `h = cfl * dx` | 0.5 |
//! | `layout` | lattice material overrides file, relative to the config file | none |
//! | `variants` | comma list of integrator names | `parallel1, parallel2_v1, parallel2_v2`; lattice: `parallel2_v2, augmented_bug` |
//! | `ranks` | comma list of ranks | `10` |
//! | `t_final` | final time | 1 |
//! | `h_max`, `h_min`, `h_points` | geometric step-size grid | 1e-1, 1e-3, 8 |
//! | `truncation` | `fixed` or `tolerance:<theta>` | `fixed` |
//! | `r_max` | rank cap for tolerance truncation | none |
//! | `solver` | substep solver, e.g. `embedded45:1e-10,1e-10`, `heun:1` | `embedded45:1e-10,1e-10`; lattice: `heun:1` |
//! | `reference` | dense reference solver | `embedded45:1e-10,1e-10` |
//! | `drift` | norm-drift measure: `trajectory` or `step` | `trajectory` |
//! | `seed` | initial-value seed | 1 |
//! | `threads` | worker threads | 1 |
//! | `out` | output directory | `results` |
//! | `cache` | reference cache directory | `<out>/cache` |

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use dlra::problems::SyntheticKind;
use dlra::{IntegratorVariant, SolverConfig, TruncationPolicy};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    Schrodinger { n: usize },
    Synthetic { m: usize, n: usize, kind: SyntheticKind },
    Lattice { n_xy: usize, order: usize, cfl: f64, layout: Option<PathBuf> },
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemSpec::Schrodinger { n } => write!(f, "schrodinger n={n}"),
            ProblemSpec::Synthetic { m, n, kind } => write!(f, "synthetic {m}x{n} {}", kind_name(kind)),
            ProblemSpec::Lattice { n_xy, order, cfl, layout } => {
                write!(f, "lattice n_xy={n_xy} order={order} cfl={cfl:e}")?;
                if let Some(p) = layout {
                    write!(f, " layout={}", p.display())?;
                }
                Ok(())
            }
        }
    }
}

fn kind_name(kind: &SyntheticKind) -> String {
    match kind {
        SyntheticKind::ScalarExponential { a } => format!("scalar:{a:e}"),
        SyntheticKind::TwoSided => "two_sided".into(),
        SyntheticKind::Skew => "skew".into(),
    }
}

fn parse_kind(s: &str) -> Option<SyntheticKind> {
    match s {
        "skew" => Some(SyntheticKind::Skew),
        "two_sided" => Some(SyntheticKind::TwoSided),
        _ => {
            let a = s.strip_prefix("scalar:")?.trim().parse().ok()?;
            Some(SyntheticKind::ScalarExponential { a })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationSpec {
    Fixed,
    Tolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMeasure {
    /// `max_k | ||Y_k|| - ||Y_0|| |` along a trajectory to `t_final`.
    Trajectory,
    /// `| ||Y_1|| - ||Y_0|| |` after a single step of size `h`.
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub variants: Vec<IntegratorVariant>,
    pub ranks: Vec<usize>,
    pub t_final: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub h_points: usize,
    pub truncation: TruncationSpec,
    pub r_max: Option<usize>,
    pub solver: SolverConfig,
    pub reference: SolverConfig,
    pub drift: DriftMeasure,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults; the lattice problem defaults to the two compared integrators with Heun substeps.
    pub fn new(problem: ProblemSpec) -> Self {
        let lattice = matches!(problem, ProblemSpec::Lattice { .. });
        let variants = if lattice {
            vec![IntegratorVariant::Parallel2V2, IntegratorVariant::AugmentedBug]
        } else {
            vec![IntegratorVariant::Parallel1, IntegratorVariant::Parallel2V1, IntegratorVariant::Parallel2V2]
        };
        Self {
            problem,
            variants,
            ranks: vec![10],
            t_final: 1.0,
            h_max: 1e-1,
            h_min: 1e-3,
            h_points: 8,
            truncation: TruncationSpec::Fixed,
            r_max: None,
            solver: if lattice { SolverConfig::heun(1) } else { SolverConfig::embedded45(1e-10, 1e-10) },
            reference: SolverConfig::embedded45(1e-10, 1e-10),
            drift: DriftMeasure::Trajectory,
            seed: 1,
            threads: 1,
            out: PathBuf::from("results"),
            cache: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a config; relative `layout` paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config { line: idx + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            let key = k.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(HarnessError::Config { line: idx + 1, msg: format!("unknown key `{key}`") });
            }
            if entries.insert(key.clone(), (idx + 1, v.trim().to_string())).is_some() {
                return Err(HarnessError::Config { line: idx + 1, msg: format!("duplicate key `{key}`") });
            }
        }
        let get = |k: &str| entries.get(k).map(|(l, v)| (*l, v.as_str()));
        fn num<T: std::str::FromStr>(e: Option<(usize, &str)>, key: &str, default: T) -> Result<T> {
            match e {
                None => Ok(default),
                Some((line, v)) => v
                    .parse()
                    .map_err(|_| HarnessError::Config { line, msg: format!("`{key}`: cannot parse `{v}`") }),
            }
        }

        let (pline, pname) = get("problem").ok_or_else(|| HarnessError::config("missing `problem`"))?;
        let n = num(get("n"), "n", 100usize)?;
        let problem = match pname {
            "schrodinger" => ProblemSpec::Schrodinger { n },
            "synthetic" => {
                let kind = match get("kind") {
                    None => SyntheticKind::Skew,
                    Some((line, v)) => parse_kind(v)
                        .ok_or_else(|| HarnessError::Config { line, msg: format!("unknown synthetic kind `{v}`") })?,
                };
                ProblemSpec::Synthetic { m: num(get("m"), "m", n)?, n, kind }
            }
            "lattice" => ProblemSpec::Lattice {
                n_xy: num(get("n_xy"), "n_xy", 70)?,
                order: num(get("order"), "order", 9)?,
                cfl: num(get("cfl"), "cfl", 0.5)?,
                layout: get("layout").map(|(_, v)| base.join(v)),
            },
            other => return Err(HarnessError::Config { line: pline, msg: format!("unknown problem `{other}`") }),
        };

        let mut cfg = Self::new(problem);
        if let Some((line, v)) = get("variants") {
            cfg.variants = split_list(v)
                .map(|s| s.parse().map_err(|e: dlra::DlraError| HarnessError::Config { line, msg: e.to_string() }))
                .collect::<Result<_>>()?;
        }
        if let Some((line, v)) = get("ranks") {
            cfg.ranks = split_list(v)
                .map(|s| s.parse().map_err(|_| HarnessError::Config { line, msg: format!("bad rank `{s}`") }))
                .collect::<Result<_>>()?;
        }
        cfg.t_final = num(get("t_final"), "t_final", cfg.t_final)?;
        cfg.h_max = num(get("h_max"), "h_max", cfg.h_max)?;
        cfg.h_min = num(get("h_min"), "h_min", cfg.h_min)?;
        cfg.h_points = num(get("h_points"), "h_points", cfg.h_points)?;
        if let Some((line, v)) = get("truncation") {
            cfg.truncation = match v {
                "fixed" => TruncationSpec::Fixed,
                _ => match v.strip_prefix("tolerance:").and_then(|t| t.trim().parse().ok()) {
                    Some(theta) => TruncationSpec::Tolerance(theta),
                    None => return Err(HarnessError::Config { line, msg: format!("bad truncation `{v}`") }),
                },
            };
        }
        cfg.r_max = get("r_max").map(|e| num(Some(e), "r_max", 0usize)).transpose()?;
        for (key, slot) in [("solver", &mut cfg.solver), ("reference", &mut cfg.reference)] {
            if let Some((line, v)) = get(key) {
                *slot = v.parse().map_err(|e: dlra::DlraError| HarnessError::Config { line, msg: e.to_string() })?;
            }
        }
        if let Some((line, v)) = get("drift") {
            cfg.drift = match v {
                "trajectory" => DriftMeasure::Trajectory,
                "step" => DriftMeasure::Step,
                _ => return Err(HarnessError::Config { line, msg: format!("bad drift measure `{v}`") }),
            };
        }
        cfg.seed = num(get("seed"), "seed", cfg.seed)?;
        cfg.threads = num(get("threads"), "threads", cfg.threads)?;
        if let Some((_, v)) = get("out") {
            cfg.out = PathBuf::from(v);
        }
        cfg.cache = get("cache").map(|(_, v)| PathBuf::from(v));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::config(m));
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final must be positive, got {}", self.t_final));
        }
        if self.variants.is_empty() || self.ranks.is_empty() {
            return bad("need at least one variant and one rank".into());
        }
        if self.ranks.contains(&0) {
            return bad("ranks must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if let TruncationSpec::Tolerance(theta) = self.truncation {
            if !(theta >= 0.0) {
                return bad(format!("tolerance must be >= 0, got {theta}"));
            }
        }
        self.solver.validate()?;
        self.reference.validate()?;
        if !matches!(self.problem, ProblemSpec::Lattice { .. }) {
            self.step_counts()?;
        }
        Ok(())
    }

    /// Step counts `N = round(T / h)` for the geometric grid; the grid is the
    /// strictly decreasing `h = T / N`.
    pub fn step_counts(&self) -> Result<Vec<usize>> {
        let p = self.h_points;
        if p == 0 || !(self.h_max > 0.0) || !(self.h_min > 0.0) || (p > 1 && self.h_min >= self.h_max) {
            return Err(HarnessError::config(format!(
                "need h_max > h_min > 0 and h_points >= 1, got {:e}, {:e}, {p}",
                self.h_max, self.h_min
            )));
        }
        let mut counts: Vec<usize> = Vec::with_capacity(p);
        for i in 0..p {
            let frac = if p == 1 { 0.0 } else { i as f64 / (p - 1) as f64 };
            let h = self.h_max * (self.h_min / self.h_max).powf(frac);
            let n = ((self.t_final / h).round() as usize).max(1);
            if counts.last().is_some_and(|&last| last >= n) {
                return Err(HarnessError::config(format!(
                    "step-size grid collapses to repeated step count {n}; widen the grid or lower h_points"
                )));
            }
            counts.push(n);
        }
        Ok(counts)
    }

    pub fn h_grid(&self) -> Result<Vec<f64>> {
        Ok(self.step_counts()?.into_iter().map(|n| self.t_final / n as f64).collect())
    }

    pub fn policy(&self, rank: usize) -> TruncationPolicy {
        match self.truncation {
            TruncationSpec::Fixed => TruncationPolicy::fixed_rank(rank),
            TruncationSpec::Tolerance(theta) => TruncationPolicy::tolerance(theta).with_bounds(1, self.r_max),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("cache"))
    }
}

const KEYS: &[&str] = &[
    "problem", "n", "m", "kind", "n_xy", "order", "cfl", "layout", "variants", "ranks", "t_final", "h_max", "h_min",
    "h_points", "truncation", "r_max", "solver", "reference", "drift", "seed", "threads", "out", "cache",
];

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}
