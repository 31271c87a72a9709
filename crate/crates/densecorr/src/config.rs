//! Experiment configuration: a strict `key = value` text format in which
//! every key has a default, unknown keys are rejected by name, and the
//! resolved configuration echoes back to a string that re-parses to the same
//! value (so an echoed config reproduces the run).

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::decoder::RefineMode;
use crate::error::{Error, Result};
use crate::head::LossConfig;
use crate::transfer::KtmMode;

/// Region-based (multi-instance, crops per box) or fully-convolutional
/// (single-instance, whole map) pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Rcnn,
    Fcn,
}

impl Pipeline {
    pub fn parse(s: &str) -> Result<Pipeline> {
        match s {
            "rcnn" => Ok(Pipeline::Rcnn),
            "fcn" => Ok(Pipeline::Fcn),
            other => Err(Error::Parse(format!("unknown pipeline {other:?} (expected rcnn|fcn)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Rcnn => "rcnn",
            Pipeline::Fcn => "fcn",
        }
    }
}

/// Cross-resolution refinement flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MidMode {
    Off,
    /// Strided-convolution resampling.
    V1,
    /// Lossless parity rearrangement.
    V2,
}

impl MidMode {
    pub fn parse(s: &str) -> Result<MidMode> {
        match s {
            "off" => Ok(MidMode::Off),
            "v1" => Ok(MidMode::V1),
            "v2" => Ok(MidMode::V2),
            other => Err(Error::Parse(format!("unknown mid mode {other:?} (expected off|v1|v2)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MidMode::Off => "off",
            MidMode::V1 => "v1",
            MidMode::V2 => "v2",
        }
    }

    pub fn refine_mode(&self) -> RefineMode {
        match self {
            MidMode::Off => RefineMode::Off,
            MidMode::V1 => RefineMode::Strided,
            MidMode::V2 => RefineMode::Parity,
        }
    }
}

/// Long-tail strategy for the surface task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImbalanceMode {
    None,
    Reweight,
    Resample,
    Ohem,
    /// No explicit countermeasure; the transfer module is the treatment.
    KtmOnly,
}

impl ImbalanceMode {
    pub fn parse(s: &str) -> Result<ImbalanceMode> {
        match s {
            "none" => Ok(ImbalanceMode::None),
            "reweight" => Ok(ImbalanceMode::Reweight),
            "resample" => Ok(ImbalanceMode::Resample),
            "ohem" => Ok(ImbalanceMode::Ohem),
            "ktm-only" => Ok(ImbalanceMode::KtmOnly),
            other => Err(Error::Parse(format!(
                "unknown imbalance strategy {other:?} (expected none|reweight|resample|ohem|ktm-only)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ImbalanceMode::None => "none",
            ImbalanceMode::Reweight => "reweight",
            ImbalanceMode::Resample => "resample",
            ImbalanceMode::Ohem => "ohem",
            ImbalanceMode::KtmOnly => "ktm-only",
        }
    }
}

/// Everything a run needs. Every field has a default.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub pipeline: Pipeline,
    pub channels: usize,
    pub unified_channels: usize,
    pub head_channels: usize,
    pub region_size: usize,
    pub dilations: Vec<usize>,
    pub mid: MidMode,
    pub ktm: KtmMode,
    pub imbalance: ImbalanceMode,
    pub omega: f64,
    pub tau: f64,
    pub kappa: f64,
    pub size_boundary: f64,
    pub lr: f64,
    pub momentum: f64,
    pub iters: usize,
    pub seed: u64,
    pub lambda_body: f64,
    pub lambda_part: f64,
    pub lambda_kpt: f64,
    pub lambda_surface: f64,
    pub lambda_uv: f64,
    pub lambda_seg: f64,
    pub lambda_instance: f64,
    pub lambda_triplet: f64,
    pub triplet_margin: f64,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            pipeline: Pipeline::Rcnn,
            channels: 8,
            unified_channels: 16,
            head_channels: 16,
            region_size: 16,
            dilations: vec![1, 2, 3],
            mid: MidMode::V2,
            ktm: KtmMode::Full,
            imbalance: ImbalanceMode::None,
            omega: 0.5,
            tau: 0.5,
            kappa: crate::metrics::KAPPA,
            size_boundary: crate::metrics::SIZE_BOUNDARY,
            lr: 0.01,
            momentum: 0.9,
            iters: 2000,
            seed: 0,
            lambda_body: 1.0,
            lambda_part: 1.0,
            lambda_kpt: 1.0,
            lambda_surface: 1.0,
            lambda_uv: 10.0,
            lambda_seg: 1.0,
            lambda_instance: 1.0,
            lambda_triplet: 1.0,
            triplet_margin: 0.5,
            train_data: PathBuf::from("data/train.scenes"),
            eval_data: PathBuf::from("data/eval.scenes"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("config key {key:?}: invalid value {v:?}")))
}

impl Config {
    /// Parses `key = value` lines (`#` comments and blank lines allowed) over
    /// the defaults. Unknown keys and repeated keys are errors naming the key.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "config line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::Parse(format!("config key {key:?} given twice")));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "pipeline" => self.pipeline = Pipeline::parse(v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "unified_channels" => self.unified_channels = parse_num(key, v)?,
            "head_channels" => self.head_channels = parse_num(key, v)?,
            "region_size" => self.region_size = parse_num(key, v)?,
            "dilations" => {
                self.dilations = v
                    .split(',')
                    .map(|d| parse_num::<usize>(key, d.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "mid" => self.mid = MidMode::parse(v)?,
            "ktm" => self.ktm = KtmMode::parse(v)?,
            "imbalance" => self.imbalance = ImbalanceMode::parse(v)?,
            "omega" => self.omega = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "kappa" => self.kappa = parse_num(key, v)?,
            "size_boundary" => self.size_boundary = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "iters" => self.iters = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lambda_body" => self.lambda_body = parse_num(key, v)?,
            "lambda_part" => self.lambda_part = parse_num(key, v)?,
            "lambda_kpt" => self.lambda_kpt = parse_num(key, v)?,
            "lambda_surface" => self.lambda_surface = parse_num(key, v)?,
            "lambda_uv" => self.lambda_uv = parse_num(key, v)?,
            "lambda_seg" => self.lambda_seg = parse_num(key, v)?,
            "lambda_instance" => self.lambda_instance = parse_num(key, v)?,
            "lambda_triplet" => self.lambda_triplet = parse_num(key, v)?,
            "triplet_margin" => self.triplet_margin = parse_num(key, v)?,
            "train_data" => self.train_data = PathBuf::from(v),
            "eval_data" => self.eval_data = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Parse(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("unified_channels", self.unified_channels),
            ("head_channels", self.head_channels),
            ("region_size", self.region_size),
            ("iters", self.iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parse(format!("config key {name:?} must be positive")));
            }
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Parse("config key \"dilations\" must be positive integers".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parse("config key \"lr\" must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parse("config key \"momentum\" must be in [0,1)".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Parse("config key \"kappa\" must be positive".into()));
        }
        Ok(())
    }

    /// The resolved configuration, one `key = value` line per field, in a
    /// fixed order. `parse(echo())` reproduces the config exactly.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let dil =
            self.dilations.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "pipeline = {}", self.pipeline.name());
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "unified_channels = {}", self.unified_channels);
        let _ = writeln!(s, "head_channels = {}", self.head_channels);
        let _ = writeln!(s, "region_size = {}", self.region_size);
        let _ = writeln!(s, "dilations = {dil}");
        let _ = writeln!(s, "mid = {}", self.mid.name());
        let _ = writeln!(s, "ktm = {}", self.ktm.name());
        let _ = writeln!(s, "imbalance = {}", self.imbalance.name());
        let _ = writeln!(s, "omega = {}", self.omega);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "kappa = {}", self.kappa);
        let _ = writeln!(s, "size_boundary = {}", self.size_boundary);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "iters = {}", self.iters);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lambda_body = {}", self.lambda_body);
        let _ = writeln!(s, "lambda_part = {}", self.lambda_part);
        let _ = writeln!(s, "lambda_kpt = {}", self.lambda_kpt);
        let _ = writeln!(s, "lambda_surface = {}", self.lambda_surface);
        let _ = writeln!(s, "lambda_uv = {}", self.lambda_uv);
        let _ = writeln!(s, "lambda_seg = {}", self.lambda_seg);
        let _ = writeln!(s, "lambda_instance = {}", self.lambda_instance);
        let _ = writeln!(s, "lambda_triplet = {}", self.lambda_triplet);
        let _ = writeln!(s, "triplet_margin = {}", self.triplet_margin);
        let _ = writeln!(s, "train_data = {}", self.train_data.display());
        let _ = writeln!(s, "eval_data = {}", self.eval_data.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_b: self.lambda_body,
            lambda_bp: self.lambda_part,
            lambda_k: self.lambda_kpt,
            lambda_s: self.lambda_surface,
            lambda_uv: self.lambda_uv,
            surface_class_weights: None,
        }
    }

    /// The learning rate at an iteration: ×0.1 at 75% and again at 92% of
    /// the schedule.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let frac = iter as f64 / self.iters as f64;
        if frac >= 0.92 {
            self.lr * 0.01
        } else if frac >= 0.75 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}
