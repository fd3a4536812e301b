//! Plain-text run configuration: sectioned key=value files, dotted
//! command-line overrides, canonical serialization, and validation.
//!
//! The canonical text is what gets persisted next to every artifact and
//! embedded in checkpoints, so parsing the canonical form must reproduce
//! the exact same configuration.

use crate::error::{Error, Result};
use crate::models::CnnConfig;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Adam => write!(f, "adam"),
            OptimizerKind::Sgd => write!(f, "sgd"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected adam or sgd)"
            ))),
        }
    }
}

/// The `[data]` section: synthetic dataset shape, content, and location.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub samples: usize,
    pub malignant_fraction: f64,
    /// Probability that a sample carries benign distractor lesions.
    pub benign_fraction: f64,
    /// Coarse lattice resolution of the background texture.
    pub texture_cells: usize,
    pub seed: u64,
    /// Dataset directory: where gen-data writes and every consumer reads.
    /// Lives in the config so persisted artifacts record their dataset.
    pub dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 256,
            samples: 500,
            malignant_fraction: 0.5,
            benign_fraction: 0.6,
            texture_cells: 8,
            seed: 42,
            dir: "data".to_string(),
        }
    }
}

/// The `[model]` + `[train]` sections: hierarchy shape, architecture
/// widths, and optimization knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Maximum zoom level; the root sits at level 1.
    pub r: usize,
    /// Side length node features are resized to.
    pub d: usize,
    /// Zoom grid splits a region into s x s children.
    pub s: usize,
    pub hdim: usize,
    pub lr: f64,
    /// Weight of the node-level zoom loss in the total.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub node_cap: usize,
    pub optimizer: OptimizerKind,
    /// Fraction of samples assigned to the training split.
    pub split: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            r: 3,
            d: 32,
            s: 3,
            hdim: 64,
            lr: 1e-3,
            lambda: 1.0,
            epochs: 30,
            batch_size: 8,
            seed: 42,
            node_cap: 256,
            optimizer: OptimizerKind::Adam,
            split: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub data: DataConfig,
    pub run: RunConfig,
}

impl Config {
    /// Parses sectioned key=value text. Every key must belong to a known
    /// section; later assignments win.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", lineno + 1))
                })?;
                if !matches!(name, "data" | "model" | "train") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got '{line}'",
                    lineno + 1
                ))
            })?;
            let section = section.as_deref().ok_or_else(|| {
                Error::Config(format!(
                    "line {}: key '{}' appears before any section header",
                    lineno + 1,
                    key.trim()
                ))
            })?;
            cfg.set(section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Config::parse(&text)
    }

    /// Applies one `section.key=value` override on top of file values.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "override '{spec}' is not of the form section.key=value"
            ))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            Error::Config(format!(
                "override '{spec}' is not of the form section.key=value"
            ))
        })?;
        self.set(section, key, value.trim())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] {key}: invalid value '{value}'")))
        }
        match (section, key) {
            ("data", "image_size") => self.data.image_size = num(section, key, value)?,
            ("data", "samples") => self.data.samples = num(section, key, value)?,
            ("data", "malignant_fraction") => {
                self.data.malignant_fraction = num(section, key, value)?
            }
            ("data", "benign_fraction") => self.data.benign_fraction = num(section, key, value)?,
            ("data", "texture_cells") => self.data.texture_cells = num(section, key, value)?,
            ("data", "seed") => self.data.seed = num(section, key, value)?,
            ("data", "dir") => self.data.dir = value.to_string(),
            ("model", "r") => self.run.r = num(section, key, value)?,
            ("model", "d") => self.run.d = num(section, key, value)?,
            ("model", "s") => self.run.s = num(section, key, value)?,
            ("model", "hdim") => self.run.hdim = num(section, key, value)?,
            ("train", "lr") => self.run.lr = num(section, key, value)?,
            ("train", "lambda") => self.run.lambda = num(section, key, value)?,
            ("train", "epochs") => self.run.epochs = num(section, key, value)?,
            ("train", "batch_size") => self.run.batch_size = num(section, key, value)?,
            ("train", "seed") => self.run.seed = num(section, key, value)?,
            ("train", "node_cap") => self.run.node_cap = num(section, key, value)?,
            ("train", "optimizer") => self.run.optimizer = value.parse()?,
            ("train", "split") => self.run.split = num(section, key, value)?,
            ("data" | "model" | "train", _) => {
                return Err(Error::Config(format!("unknown key '{key}' in [{section}]")))
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Fixed-order serialization; parsing it reproduces `self` exactly.
    pub fn canonical_text(&self) -> String {
        let d = &self.data;
        let r = &self.run;
        format!(
            "[data]\n\
             image_size = {}\n\
             samples = {}\n\
             malignant_fraction = {}\n\
             benign_fraction = {}\n\
             texture_cells = {}\n\
             seed = {}\n\
             dir = {}\n\
             \n\
             [model]\n\
             r = {}\n\
             d = {}\n\
             s = {}\n\
             hdim = {}\n\
             \n\
             [train]\n\
             lr = {}\n\
             lambda = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             seed = {}\n\
             node_cap = {}\n\
             optimizer = {}\n\
             split = {}\n",
            d.image_size,
            d.samples,
            d.malignant_fraction,
            d.benign_fraction,
            d.texture_cells,
            d.seed,
            d.dir,
            r.r,
            r.d,
            r.s,
            r.hdim,
            r.lr,
            r.lambda,
            r.epochs,
            r.batch_size,
            r.seed,
            r.node_cap,
            r.optimizer,
            r.split,
        )
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = &self.data;
        let r = &self.run;
        if r.r < 1 {
            problems.push("r must be at least 1".to_string());
        }
        if r.s < 1 {
            problems.push("s must be at least 1".to_string());
        }
        if r.d < 8 {
            problems.push(format!("d must be at least 8, got {}", r.d));
        }
        if r.hdim < 1 {
            problems.push("hdim must be at least 1".to_string());
        }
        if !(r.lambda >= 0.0 && r.lambda.is_finite()) {
            problems.push(format!(
                "lambda must be finite and nonnegative, got {}",
                r.lambda
            ));
        }
        if !(r.lr > 0.0 && r.lr.is_finite()) {
            problems.push(format!("lr must be finite and positive, got {}", r.lr));
        }
        if !(r.split > 0.0 && r.split < 1.0) {
            problems.push(format!(
                "split must lie strictly between 0 and 1, got {}",
                r.split
            ));
        }
        if r.batch_size < 1 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if r.node_cap < 1 {
            problems.push("node_cap must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&d.malignant_fraction) {
            problems.push(format!(
                "malignant_fraction must lie in [0, 1], got {}",
                d.malignant_fraction
            ));
        }
        if !(0.0..=1.0).contains(&d.benign_fraction) {
            problems.push(format!(
                "benign_fraction must lie in [0, 1], got {}",
                d.benign_fraction
            ));
        }
        if d.samples < 1 {
            problems.push("samples must be at least 1".to_string());
        }
        if d.texture_cells < 2 {
            problems.push("texture_cells must be at least 2".to_string());
        }
        if d.dir.is_empty() {
            problems.push("dir must name the dataset directory".to_string());
        }
        if d.image_size < r.d.saturating_mul(r.s) {
            problems.push(format!(
                "image_size must be at least d*s = {} so zoomed cells stay informative, got {}",
                r.d * r.s,
                d.image_size
            ));
        }
        if let Err(e) = CnnConfig::desk_default(r.d, r.hdim).flat_dim() {
            problems.push(format!("d = {} does not fit the conv stack: {e}", r.d));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
