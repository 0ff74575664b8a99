//! Grid sweeps over feature scale, angular margin and top-D.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::recognition::{evaluate, EvalConfig, Protocol};
use crate::trainer::{fit, Checkpoint, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Feature scales `r`.
    pub scale: Vec<f64>,
    /// Angular margins `d`.
    pub margin: Vec<f64>,
    pub top_d: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Episode budget per grid point; the train section's when unset.
    pub episodes: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            scale: vec![32.0],
            margin: vec![0.2],
            top_d: vec![10],
            seeds: vec![0],
            episodes: None,
        }
    }
}

impl SweepConfig {
    /// Applies `key=v1,v2,...` overrides; keys are `r`, `d` and `D`.
    pub fn apply_grid(&mut self, specs: &[String]) -> Result<()> {
        for spec in specs {
            let (key, values) = spec
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("grid entry {spec:?} is not key=v1,v2,...")))?;
            let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if items.is_empty() {
                return Err(Error::Argument(format!("grid entry {spec:?} lists no values")));
            }
            let bad = |v: &str| Error::Argument(format!("grid value {v:?} for {key} is not a number"));
            match key.trim() {
                "r" => self.scale = items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                "d" => self.margin = items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                "D" => self.top_d = items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                other => return Err(Error::Argument(format!("unknown grid key {other:?} (expected r, d or D)"))),
            }
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &scale in &self.scale {
            for &margin in &self.margin {
                for &top_d in &self.top_d {
                    out.push(GridPoint { scale, margin, top_d });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub scale: f64,
    pub margin: f64,
    pub top_d: usize,
}

impl GridPoint {
    fn dir_name(&self, seed: u64) -> String {
        format!("r{}-d{}-D{}-seed{seed}", self.scale, self.margin, self.top_d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: GridPoint,
    pub seed: u64,
    pub config_hash: String,
    /// Image-to-attribute Top-P accuracy at each cut-off.
    pub i2a: Vec<f64>,
    /// Attribute-to-image CMC at each cut-off.
    pub a2i: Vec<Option<f64>>,
    pub a2i_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub top: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

impl SweepTable {
    /// Tab-separated table, one row per grid point and seed.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("r\td\tD\tseed");
        for p in &self.top {
            write!(s, "\ti2a_top{p}").unwrap();
        }
        for p in &self.top {
            write!(s, "\ta2i_R@{p}").unwrap();
        }
        s.push_str("\ta2i_mAP\tconfig\n");
        for row in &self.rows {
            write!(s, "{}\t{}\t{}\t{}", row.point.scale, row.point.margin, row.point.top_d, row.seed).unwrap();
            for v in &row.i2a {
                write!(s, "\t{}", cell(Some(*v))).unwrap();
            }
            for v in &row.a2i {
                write!(s, "\t{}", cell(*v)).unwrap();
            }
            writeln!(s, "\t{}\t{}", cell(row.a2i_map), row.config_hash).unwrap();
        }
        s
    }

    /// True when every metric cell holds a value.
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| {
            r.i2a.len() == self.top.len()
                && r.a2i.len() == self.top.len()
                && r.a2i.iter().all(Option::is_some)
                && r.a2i_map.is_some()
        })
    }
}

/// Result of [`run_sweep`] with the files it wrote.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub table: SweepTable,
    pub tsv: PathBuf,
    pub json: PathBuf,
}

/// Trains and evaluates every grid point for every seed. Models land in
/// `out/<point>-seed<s>/`; the table in `out/sweep-<hash>.tsv` and `.json`.
pub fn run_sweep(
    dataset: &Dataset,
    base: &TrainConfig,
    sweep: &SweepConfig,
    eval: &EvalConfig,
    out: &Path,
) -> Result<SweepOutcome> {
    if sweep.seeds.is_empty() {
        return Err(Error::Config("sweep lists no seeds".into()));
    }
    let points = sweep.points();
    if points.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(points.len() * sweep.seeds.len());
    for point in &points {
        for &seed in &sweep.seeds {
            let mut cfg = base.clone();
            cfg.dcm.scale = point.scale;
            cfg.dcm.margin = point.margin;
            cfg.attention.top_d = point.top_d;
            cfg.seed = seed;
            if let Some(e) = sweep.episodes {
                cfg.episodes = e;
            }
            cfg.checkpoint_every = 0;
            let run_dir = out.join(point.dir_name(seed));
            let summary = fit(dataset, &cfg, &run_dir, None)?;
            let ckpt = Checkpoint::load(&summary.model_dir)?;
            let i2a = evaluate(Protocol::I2a, &ckpt, dataset, eval)?;
            let a2i = evaluate(Protocol::A2i, &ckpt, dataset, eval)?;
            rows.push(SweepRow {
                point: *point,
                seed,
                config_hash: summary.config_hash,
                i2a: i2a.top_p_accuracy.unwrap_or_default(),
                a2i: a2i.cmc.unwrap_or_default(),
                a2i_map: a2i.map,
            });
        }
    }
    let table = SweepTable {
        top: eval.top.clone(),
        rows,
    };
    let hash = config_hash(&(base.hash(), sweep, eval));
    let tsv = out.join(format!("sweep-{hash}.tsv"));
    let json = out.join(format!("sweep-{hash}.json"));
    std::fs::write(&tsv, table.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    let mut body = serde_json::to_string_pretty(&table).expect("sweep table serializes");
    body.push('\n');
    std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
    Ok(SweepOutcome { table, tsv, json })
}
