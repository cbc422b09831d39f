//! Ablation harness: the K sweep over the group shuffle hyperparameter and
//! the 2x2 GSMA / multi-modal-supervision grid, every cell trained and
//! evaluated with the same seed and budget.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate_checkpoint;
use crate::train::train;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    /// Set when the cell could not run (e.g. K does not divide the width).
    pub skipped: Option<String>,
    pub mr2: f64,
    pub map50: f64,
    pub map: f64,
}

pub const DEFAULT_K_LIST: [&str; 7] = ["1", "2", "4", "8", "16", "32", "C"];

fn run_cell(cfg: &RunConfig, data_root: &Path, cell_dir: &Path, label: &str) -> Result<AblationRow> {
    let out = train(cfg, data_root, cell_dir, None, true)?;
    let eval = evaluate_checkpoint(cfg, &out.final_checkpoint, data_root, cell_dir)?;
    Ok(AblationRow {
        label: label.to_string(),
        skipped: None,
        mr2: eval.report.mr2,
        map50: eval.report.map50,
        map: eval.report.map,
    })
}

/// One row per requested K; invalid K values are kept as skipped rows with
/// the rejection reason.
pub fn ablate_k(
    base: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
    k_list: &[String],
) -> Result<Vec<AblationRow>> {
    let out_dir = crate::train::resolve_run_dir(out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut rows = Vec::with_capacity(k_list.len());
    for k in k_list {
        let mut cfg = base.clone();
        cfg.set("shuffle_groups", k)?;
        let label = format!("K={k}");
        match cfg.network_config(None).and_then(|c| c.validate()) {
            Err(e) => rows.push(AblationRow {
                label,
                skipped: Some(e.to_string()),
                mr2: f64::NAN,
                map50: f64::NAN,
                map: f64::NAN,
            }),
            Ok(()) => {
                let cell = out_dir.join(format!("k_{k}"));
                rows.push(run_cell(&cfg, data_root, &cell, &label)?);
            }
        }
    }
    write_table(&out_dir.join("ablate_k.txt"), "group shuffle K sweep", &rows)?;
    Ok(rows)
}

/// The 2x2 grid: GSMA on/off (off = plain concatenation at P3/P4) times MS
/// on/off (off = a single union-supervised fusion branch).
pub fn ablate_components(
    base: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let out_dir = crate::train::resolve_run_dir(out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut rows = Vec::with_capacity(4);
    for (gsma, ms) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut cfg = base.clone();
        cfg.set("gsma_enabled", if gsma { "true" } else { "false" })?;
        cfg.set("ms_enabled", if ms { "true" } else { "false" })?;
        if !ms {
            // single-branch model: decode the fusion branch alone
            cfg.set("branch", "fusion")?;
        }
        let label = format!(
            "gsma={} ms={}",
            if gsma { "on" } else { "off" },
            if ms { "on" } else { "off" }
        );
        let cell = out_dir.join(format!(
            "gsma_{}_ms_{}",
            if gsma { "on" } else { "off" },
            if ms { "on" } else { "off" }
        ));
        rows.push(run_cell(&cfg, data_root, &cell, &label)?);
    }
    write_table(
        &out_dir.join("ablate_components.txt"),
        "GSMA / MS component grid",
        &rows,
    )?;
    Ok(rows)
}

pub fn format_table(title: &str, rows: &[AblationRow]) -> String {
    let mut s = format!("# {title}\n");
    s.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>12}\n",
        "variant", "MR2", "mAP50", "mAP"
    ));
    for r in rows {
        match &r.skipped {
            Some(reason) => s.push_str(&format!("{:<16} skipped: {reason}\n", r.label)),
            None => s.push_str(&format!(
                "{:<16} {:>12.4} {:>12.4} {:>12.4}\n",
                r.label, r.mr2, r.map50, r.map
            )),
        }
    }
    s
}

fn write_table(path: &Path, title: &str, rows: &[AblationRow]) -> Result<()> {
    std::fs::write(path, format_table(title, rows)).map_err(|e| Error::io(path, e))
}
