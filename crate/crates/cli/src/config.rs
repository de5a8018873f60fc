//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys and defaults:
//!
//! ```text
//! warp_grid      4x4     interior anchor grid, rows x columns
//! outer_iters    5
//! inner_iters    3
//! init_tau2      1.0     starting value for the intensity variance ratio
//! init_gamma2    0.1     starting value for the warp variance ratio
//! seed           0
//! mask_path      (none)  image; pixels above 0.5 carry intensity variation
//! mask_radius    (none)  centered disk mask instead of mask_path
//! output_dir     out
//! template_path  (none)  simulate/benchmark template; synthetic brain if unset
//! size           64x64   lattice of the synthetic template
//! n              20      images per simulated dataset
//! sigma2         0.001
//! sigma2_tau2    0.1
//! sigma2_gamma2  0.01
//! reps           5       benchmark repetitions
//! methods        proposed,procrustes_free,procrustes_reg,pointwise
//! timing         false   fill the benchmark seconds column
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use warpmix::sim::Method;
use warpmix::AnchorGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub warp_grid: (usize, usize),
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub init_tau2: f64,
    pub init_gamma2: f64,
    pub seed: u64,
    pub mask_path: Option<PathBuf>,
    pub mask_radius: Option<f64>,
    pub output_dir: PathBuf,
    pub template_path: Option<PathBuf>,
    pub size: (usize, usize),
    pub n: usize,
    pub sigma2: f64,
    pub sigma2_tau2: f64,
    pub sigma2_gamma2: f64,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            warp_grid: (4, 4),
            outer_iters: 5,
            inner_iters: 3,
            init_tau2: 1.0,
            init_gamma2: 0.1,
            seed: 0,
            mask_path: None,
            mask_radius: None,
            output_dir: PathBuf::from("out"),
            template_path: None,
            size: (64, 64),
            n: 20,
            sigma2: 0.001,
            sigma2_tau2: 0.1,
            sigma2_gamma2: 0.01,
            reps: 5,
            methods: Method::ALL.to_vec(),
            timing: false,
        }
    }
}

/// Malformed configuration text, as opposed to an unreadable file.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse_pair(v: &str) -> Option<(usize, usize)> {
    let (a, b) = v.split_once(['x', 'X'])?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    pub fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| ConfigError(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), ConfigError> {
        match key {
            "warp_grid" => {
                self.warp_grid = parse_pair(v)
                    .ok_or_else(|| ConfigError(format!("warp_grid: expected RxC, got {v:?}")))?
            }
            "size" => {
                self.size = parse_pair(v)
                    .ok_or_else(|| ConfigError(format!("size: expected RxC, got {v:?}")))?
            }
            "outer_iters" => self.outer_iters = parse_num(key, v)?,
            "inner_iters" => self.inner_iters = parse_num(key, v)?,
            "init_tau2" => self.init_tau2 = parse_num(key, v)?,
            "init_gamma2" => self.init_gamma2 = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "mask_path" => self.mask_path = Some(PathBuf::from(v)),
            "mask_radius" => self.mask_radius = Some(parse_num(key, v)?),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "template_path" => self.template_path = Some(PathBuf::from(v)),
            "n" => self.n = parse_num(key, v)?,
            "sigma2" => self.sigma2 = parse_num(key, v)?,
            "sigma2_tau2" => self.sigma2_tau2 = parse_num(key, v)?,
            "sigma2_gamma2" => self.sigma2_gamma2 = parse_num(key, v)?,
            "reps" => self.reps = parse_num(key, v)?,
            "timing" => self.timing = parse_num(key, v)?,
            "methods" => {
                self.methods = v
                    .split(',')
                    .map(|m| {
                        m.trim()
                            .parse::<Method>()
                            .map_err(|e| ConfigError(e.to_string()))
                    })
                    .collect::<std::result::Result<_, _>>()?
            }
            _ => return Err(ConfigError(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn check(&self) -> std::result::Result<(), ConfigError> {
        let positive = [
            ("init_tau2", self.init_tau2),
            ("init_gamma2", self.init_gamma2),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("sigma2", self.sigma2),
            ("sigma2_tau2", self.sigma2_tau2),
            ("sigma2_gamma2", self.sigma2_gamma2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError(format!("{k} must be nonnegative, got {v}")));
            }
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(ConfigError(
                "outer_iters and inner_iters must be at least 1".into(),
            ));
        }
        if self.warp_grid.0 == 0 || self.warp_grid.1 == 0 || self.size.0 < 2 || self.size.1 < 2 {
            return Err(ConfigError(
                "grid and lattice sizes must be positive".into(),
            ));
        }
        if self.mask_path.is_some() && self.mask_radius.is_some() {
            return Err(ConfigError(
                "mask_path and mask_radius are mutually exclusive".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(ConfigError("methods must not be empty".into()));
        }
        Ok(())
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(self.warp_grid.0, self.warp_grid.1).map_err(|e| anyhow!(e))
    }

    pub fn fit_config(&self) -> Result<warpmix::FitConfig> {
        let cfg = warpmix::FitConfig {
            warp_grid: self.anchor_grid()?,
            outer_iters: self.outer_iters,
            inner_iters: self.inner_iters,
            init_tau2: self.init_tau2,
            init_gamma2: self.init_gamma2,
            ..Default::default()
        };
        if let Err(e) = cfg.validate() {
            bail!(ConfigError(e.to_string()));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_when_empty() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn parses_every_key() {
        let text = "warp_grid = 5x5\nouter_iters=2\ninner_iters = 1\ninit_tau2 = 2.5\ninit_gamma2 = 0.5\nseed = 9\n\
                    mask_radius = 0.3\noutput_dir = res\ntemplate_path = t.pgm\nsize = 32x16\nn = 7\nsigma2 = 0.002\n\
                    sigma2_tau2 = 0.2\nsigma2_gamma2 = 0.02\nreps = 3\nmethods = proposed, pointwise\ntiming = true\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.warp_grid, (5, 5));
        assert_eq!((c.outer_iters, c.inner_iters), (2, 1));
        assert_eq!((c.init_tau2, c.init_gamma2, c.seed), (2.5, 0.5, 9));
        assert_eq!(c.mask_radius, Some(0.3));
        assert_eq!(c.output_dir, PathBuf::from("res"));
        assert_eq!(c.template_path, Some(PathBuf::from("t.pgm")));
        assert_eq!((c.size, c.n, c.reps), ((32, 16), 7, 3));
        assert_eq!(
            (c.sigma2, c.sigma2_tau2, c.sigma2_gamma2),
            (0.002, 0.2, 0.02)
        );
        assert_eq!(c.methods, vec![Method::Proposed, Method::Pointwise]);
        assert!(c.timing);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "warpgrid = 4x4",
            "warp_grid = 4",
            "outer_iters = -1",
            "outer_iters = 0",
            "init_tau2 = 0",
            "sigma2 = -1",
            "no equals sign",
            "seed = 1\nseed = 2",
            "methods = proposed,magic",
            "mask_path = m.pgm\nmask_radius = 0.3",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
