//! Preset experiment grids: module on/off comparisons, dilation-rate sweeps,
//! relation-graph variants, and long-tail strategy baselines, each run over
//! several seeds with per-seed and median columns in plot-ready CSV.

use std::collections::HashMap;

use crate::body;
use crate::config::{Config, ImbalanceMode, MidMode};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::synth::{generate_scene, SceneAnnotation, SceneCfg};
use crate::train::{train, LogRow};
use crate::transfer::KtmMode;

/// A named grid of configuration variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Refinement and transfer modules toggled independently.
    Modules,
    /// Uniform vs mixed dilation rates in the unification block.
    Dilations,
    /// Relation-graph variants of the classifier-weight transfer.
    GraphVariants,
    /// Long-tail strategies: transfer vs reweight/resample/hard-mining.
    LongTail,
}

pub const PRESETS: [Preset; 4] = [
    Preset::Modules,
    Preset::Dilations,
    Preset::GraphVariants,
    Preset::LongTail,
];

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        Ok(match s {
            "table1" => Preset::Modules,
            "table3" => Preset::Dilations,
            "table4" => Preset::GraphVariants,
            "fig7" => Preset::LongTail,
            other => {
                return Err(Error::Parse(format!(
                    "unknown preset {other:?} (expected table1|table3|table4|fig7)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Modules => "table1",
            Preset::Dilations => "table3",
            Preset::GraphVariants => "table4",
            Preset::LongTail => "fig7",
        }
    }
}

/// The configuration rows of a preset, derived from a base config. Rows only
/// touch the ablated fields, so rows shared between presets (for example the
/// fully-equipped model) come out identical and can share one training run.
pub fn preset_rows(preset: Preset, base: &Config) -> Vec<(String, Config)> {
    let row = |name: &str, f: &dyn Fn(&mut Config)| {
        let mut cfg = base.clone();
        cfg.mid = MidMode::V2;
        cfg.ktm = KtmMode::Full;
        cfg.imbalance = ImbalanceMode::None;
        f(&mut cfg);
        (name.to_string(), cfg)
    };
    match preset {
        Preset::Modules => vec![
            row("baseline", &|c| {
                c.mid = MidMode::Off;
                c.ktm = KtmMode::Off;
            }),
            row("+mid", &|c| c.ktm = KtmMode::Off),
            row("+ktm", &|c| c.mid = MidMode::Off),
            row("+mid+ktm", &|_| {}),
        ],
        Preset::Dilations => vec![
            row("dilations-1-1-1", &|c| c.dilations = vec![1, 1, 1]),
            row("dilations-2-2-2", &|c| c.dilations = vec![2, 2, 2]),
            row("dilations-3-3-3", &|c| c.dilations = vec![3, 3, 3]),
            row("dilations-1-2-3", &|c| c.dilations = vec![1, 2, 3]),
        ],
        Preset::GraphVariants => vec![
            row("crkg-s+kt", &|_| {}),
            row("crkg-a+kt", &|c| c.ktm = KtmMode::AveragingGraph),
            row("crkg-s-only", &|c| c.ktm = KtmMode::GraphOnly),
            row("no-ktm", &|c| c.ktm = KtmMode::Off),
        ],
        Preset::LongTail => vec![
            row("no-ktm", &|c| c.ktm = KtmMode::Off),
            row("ktm", &|_| {}),
            row("reweight", &|c| {
                c.ktm = KtmMode::Off;
                c.imbalance = ImbalanceMode::Reweight;
            }),
            row("resample", &|c| {
                c.ktm = KtmMode::Off;
                c.imbalance = ImbalanceMode::Resample;
            }),
            row("ohem", &|c| {
                c.ktm = KtmMode::Off;
                c.imbalance = ImbalanceMode::Ohem;
            }),
        ],
    }
}

/// One full run: fresh model under the config's seed, trained, evaluated.
pub struct RunOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub report: EvalReport,
}

pub fn run_config(
    cfg: &Config,
    train_scenes: &[SceneAnnotation],
    eval_scenes: &[SceneAnnotation],
) -> Result<RunOutcome> {
    let model = Model::new(cfg)?;
    let log = train(&model, train_scenes, cfg)?;
    let report = evaluate(&model, eval_scenes, cfg)?;
    Ok(RunOutcome { model, log, report })
}

/// One preset row after running: the per-seed reports in seed order.
pub struct GridRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
}

impl GridRow {
    pub fn aps(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.ap).collect()
    }

    pub fn ars(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.ar).collect()
    }

    pub fn median_ap(&self) -> f64 {
        median(&self.aps())
    }

    pub fn median_ar(&self) -> f64 {
        median(&self.ars())
    }

    /// Median per-part recall across seeds; `None` when any seed lacks the
    /// part entirely.
    pub fn median_part_ar(&self, part: usize) -> Option<f64> {
        let vals: Option<Vec<f64>> =
            self.reports.iter().map(|r| r.per_category.ar[part]).collect();
        vals.map(|v| median(&v))
    }
}

/// Middle value (mean of the central pair for even counts).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of no samples");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every `(name, config)` row under each seed, deduplicating identical
/// configurations through `cache` (keyed by the echoed config, so rows shared
/// between presets train once). The cache can be reused across presets.
pub fn run_grid(
    rows: &[(String, Config)],
    seeds: &[u64],
    train_scenes: &[SceneAnnotation],
    eval_scenes: &[SceneAnnotation],
    cache: &mut HashMap<String, EvalReport>,
) -> Result<Vec<GridRow>> {
    let mut out = Vec::with_capacity(rows.len());
    for (name, cfg) in rows {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let key = cfg.echo();
            let report = match cache.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let r = run_config(&cfg, train_scenes, eval_scenes)?.report;
                    cache.insert(key, r.clone());
                    r
                }
            };
            reports.push(report);
        }
        out.push(GridRow { name: name.clone(), seeds: seeds.to_vec(), reports });
    }
    Ok(out)
}

/// Seeds used for a grid: `base`, `base+1`, ... deterministic and disjoint
/// from the dataset seeds.
pub fn grid_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Comparison CSV: one row per config, AP/AR per seed plus medians.
pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("config");
    if let Some(first) = rows.first() {
        for seed in &first.seeds {
            s.push_str(&format!(",ap_seed{seed}"));
        }
        s.push_str(",ap_median");
        for seed in &first.seeds {
            s.push_str(&format!(",ar_seed{seed}"));
        }
        s.push_str(",ar_median");
    }
    s.push('\n');
    for row in rows {
        s.push_str(&row.name);
        for ap in row.aps() {
            s.push_str(&format!(",{ap}"));
        }
        s.push_str(&format!(",{}", row.median_ap()));
        for ar in row.ars() {
            s.push_str(&format!(",{ar}"));
        }
        s.push_str(&format!(",{}\n", row.median_ar()));
    }
    s
}

/// Per-part recall CSV: one row per (config, part), per-seed columns and the
/// median; parts with no annotated points in some seed leave cells empty.
pub fn category_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("config,part");
    if let Some(first) = rows.first() {
        for seed in &first.seeds {
            s.push_str(&format!(",ar_seed{seed}"));
        }
    }
    s.push_str(",ar_median\n");
    for row in rows {
        for (part, part_name) in body::STANDARD_PART_NAMES.iter().enumerate() {
            s.push_str(&format!("{},{part_name}", row.name));
            for report in &row.reports {
                match report.per_category.ar[part] {
                    Some(v) => s.push_str(&format!(",{v}")),
                    None => s.push(','),
                }
            }
            match row.median_part_ar(part) {
                Some(v) => s.push_str(&format!(",{v}\n")),
                None => s.push_str(",\n"),
            }
        }
    }
    s
}

/// Deterministic scene list: seeds `base..base+count`.
pub fn standard_scenes(count: usize, base_seed: u64, cfg: &SceneCfg) -> Result<Vec<SceneAnnotation>> {
    (0..count as u64).map(|i| generate_scene(base_seed + i, cfg)).collect()
}

/// Dataset seeds: train and eval scene streams never overlap.
pub const TRAIN_SCENE_SEED: u64 = 10_000;
pub const EVAL_SCENE_SEED: u64 = 2_000_000;

/// The desk-scale benchmark configuration the preset grids run at: small
/// channel counts and a short schedule so a full grid finishes on a laptop,
/// with the size boundary lowered to split 64×64 figures into two strata.
pub fn benchmark_config() -> Config {
    Config {
        channels: 8,
        unified_channels: 16,
        head_channels: 16,
        region_size: 16,
        iters: 400,
        size_boundary: 1600.0,
        ..Config::default()
    }
}
