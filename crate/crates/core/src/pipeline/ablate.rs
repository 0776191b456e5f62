//! Ablation matrix: train+evaluate per graph variant with shared seeds,
//! emitting a machine-readable table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stgraph::RegionConfig;

use super::evaluate::{evaluate, EvalProtocol};
use super::ingest::{ingest, Dataset};
use super::train::train_model;
use super::TrainConfig;

/// One matrix entry: a display name and the full region tag to train
/// with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub region: String,
}

impl AblationVariant {
    /// Variant that keeps `base` but swaps the edge scheme.
    pub fn edge(base: &RegionConfig, edge_tag: &str) -> Result<Self> {
        let mut region = *base;
        region.edge_scheme = Some(crate::stgraph::EdgeScheme::from_tag(edge_tag)?);
        region.validate()?;
        Ok(Self {
            name: edge_tag.to_string(),
            region: region.tag(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub region: String,
    pub seeds: Vec<u64>,
    /// Test MAE per seed, over per-clip pulse rates.
    pub clip_mae: Vec<f64>,
    /// Test MAE per seed, over per-video pulse rates.
    pub video_mae: Vec<f64>,
    pub mean_clip_mae: f64,
    pub mean_video_mae: f64,
    /// Split the metrics were computed on.
    pub eval_split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// The split ablation metrics come from: `test` when present, else
/// `val`, else everything.
fn pick_eval_split(dataset: &Dataset) -> Option<String> {
    for want in ["test", "val"] {
        if dataset.videos.iter().any(|v| v.split == want) {
            return Some(want.to_string());
        }
    }
    None
}

/// Runs train+evaluate for every `variant x seed` cell. Checkpoints land
/// in `out_dir` as `<variant>_seed<k>.ckpt`, the table as
/// `ablation.toml`.
pub fn ablate(
    base: &TrainConfig,
    manifest: &Path,
    variants: &[AblationVariant],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs variants and seeds".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let region = RegionConfig::from_tag(&variant.region)?;
        let dataset = ingest(manifest, &region, true)?;
        let split = pick_eval_split(&dataset);
        let mut config = base.clone();
        config.graph.region = variant.region.clone();
        let protocol = EvalProtocol::from_config(&config);

        let mut row = AblationRow {
            name: variant.name.clone(),
            region: variant.region.clone(),
            seeds: seeds.to_vec(),
            clip_mae: Vec::with_capacity(seeds.len()),
            video_mae: Vec::with_capacity(seeds.len()),
            mean_clip_mae: 0.0,
            mean_video_mae: 0.0,
            eval_split: split.clone().unwrap_or_else(|| "all".into()),
        };
        for &seed in seeds {
            config.seed = seed;
            let safe_name: String = variant
                .name
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { '-' })
                .collect();
            let ckpt = out_dir.join(format!("{safe_name}_seed{seed}.ckpt"));
            let report = train_model(&config, &dataset, &ckpt)?;
            let (model, _) = crate::model::load_checkpoint::<f32>(&ckpt)?;
            let eval = evaluate(&model, &dataset, split.as_deref(), &protocol)?;
            log::info!(
                "ablation {} seed {seed}: best epoch {}, clip MAE {:.3}, video MAE {:.3}",
                variant.name,
                report.best_epoch,
                eval.clip_metrics.mae,
                eval.video_metrics.mae
            );
            row.clip_mae.push(eval.clip_metrics.mae);
            row.video_mae.push(eval.video_metrics.mae);
        }
        row.mean_clip_mae = row.clip_mae.iter().sum::<f64>() / row.clip_mae.len() as f64;
        row.mean_video_mae = row.video_mae.iter().sum::<f64>() / row.video_mae.len() as f64;
        rows.push(row);
    }
    let table = AblationTable { rows: rows.clone() };
    let text = toml::to_string_pretty(&table)
        .map_err(|e| Error::Config(format!("ablation table serialize: {e}")))?;
    let table_path = out_dir.join("ablation.toml");
    std::fs::write(&table_path, text)
        .map_err(|e| Error::io(table_path.display().to_string(), e))?;
    Ok(rows)
}
