//! Component ablations: each configuration is trained on the same corpus
//! with the same seeds and scored on a held-out split.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{FbgVariant, RunConfig};
use crate::error::{FobaError, Result};
use crate::metrics::{format_score, MetricReport};
use crate::trainer::{evaluate, write_predictions, MaskMonitor, RunDir, Trainer};
use crate::types::BiTemporalSample;

pub const ABLATION_COLUMNS: [&str; 8] = [
    "GIF",
    "F-BG (attention)",
    "F-BG (SSM)",
    "Consistency loss",
    "F_scd",
    "mIoU",
    "SeK",
    "OA",
];

#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub name: String,
    pub config: RunConfig,
}

impl AblationEntry {
    pub fn new(name: &str, config: RunConfig) -> Self {
        Self {
            name: name.to_string(),
            config,
        }
    }
}

/// Everything off, then GIF, then each decoder variant, then each with the
/// consistency term.
pub fn standard_grid(base: &RunConfig) -> Vec<AblationEntry> {
    let with = |gif: bool, fbg: Option<FbgVariant>, cons: bool| {
        let mut c = base.clone();
        c.model.gif_enabled = [gif; 4];
        c.model.fbg_enabled = [fbg.is_some(); 3];
        if let Some(v) = fbg {
            c.model.fbg_variant = v;
        }
        c.model.consistency_loss_enabled = cons;
        c
    };
    let (a, s) = (Some(FbgVariant::Attention), Some(FbgVariant::Ssm));
    vec![
        AblationEntry::new("baseline", with(false, None, false)),
        AblationEntry::new("gif", with(true, None, false)),
        AblationEntry::new("gif_fbg_attention", with(true, a, false)),
        AblationEntry::new("gif_fbg_ssm", with(true, s, false)),
        AblationEntry::new("full_attention", with(true, a, true)),
        AblationEntry::new("full_ssm", with(true, s, true)),
    ]
}

/// Baseline against the full model with `base`'s decoder variant.
pub fn baseline_vs_full(base: &RunConfig) -> Vec<AblationEntry> {
    let mut full = base.clone();
    full.model.gif_enabled = [true; 4];
    full.model.fbg_enabled = [true; 3];
    full.model.consistency_loss_enabled = true;
    let mut baseline = base.clone();
    baseline.model = baseline.model.baseline();
    vec![AblationEntry::new("baseline", baseline), AblationEntry::new("full", full)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub gif: bool,
    pub fbg: Option<FbgVariant>,
    pub consistency: bool,
    pub config_hash: String,
    pub steps: usize,
    pub report: MetricReport,
    /// Invariant counts over training and test passes.
    pub monitor: MaskMonitor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n", ABLATION_COLUMNS.join(" | "));
        out.push_str(&format!("|{}\n", ":---:|".repeat(ABLATION_COLUMNS.len())));
        let mark = |b: bool| if b { "✓" } else { "" };
        for r in &self.rows {
            let cells = [
                mark(r.gif).to_string(),
                mark(r.fbg == Some(FbgVariant::Attention)).to_string(),
                mark(r.fbg == Some(FbgVariant::Ssm)).to_string(),
                mark(r.consistency).to_string(),
                format_score(r.report.f_scd),
                format_score(r.report.miou),
                format_score(r.report.sek),
                format_score(r.report.oa),
            ];
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }
}

/// Trains every entry on `train` and scores it on `test`. With `out`, each
/// entry gets its own run directory `out/<name>`.
pub fn run_ablation(
    grid: &[AblationEntry],
    train: &[BiTemporalSample],
    test: &[BiTemporalSample],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let mut seen = BTreeSet::new();
    for e in grid {
        if !seen.insert(e.config.hash()) {
            return Err(FobaError::config("ablation", format!("entry {} duplicates an earlier configuration", e.name)));
        }
    }
    if test.is_empty() {
        return Err(FobaError::EmptySplit("ablation test split is empty".into()));
    }
    let mut table = AblationTable::default();
    for e in grid {
        log::info!("ablation entry {}", e.name);
        let run = out.map(|root| RunDir::create(&root.join(&e.name), &e.config)).transpose()?;
        let mut trainer = Trainer::new(e.config.clone())?;
        let summary = trainer.fit(train, run.as_ref())?;
        let result = evaluate(&trainer.model, &trainer.store, test, Some(&mut trainer.monitor))?;
        if let Some(run) = &run {
            run.write_report("test_metrics", &result.report)?;
            run.write_monitor(&trainer.monitor)?;
            let palette = crate::dataset::Palette::default_for(e.config.model.n_classes);
            write_predictions(&run.predictions_dir(), &result.predictions, &palette)?;
        }
        let m = &e.config.model;
        let fbg_on = m.fbg_enabled.iter().any(|&b| b);
        table.rows.push(AblationRow {
            name: e.name.clone(),
            gif: m.gif_enabled.iter().any(|&b| b),
            fbg: fbg_on.then_some(m.fbg_variant),
            consistency: m.consistency_loss_enabled,
            config_hash: e.config.hash(),
            steps: summary.steps,
            report: result.report,
            monitor: trainer.monitor,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_generate;
    use crate::trainer::tests::tiny_run;

    #[test]
    fn grids_have_distinct_hashes() {
        let base = RunConfig::default();
        let grid = standard_grid(&base);
        let hashes: BTreeSet<String> = grid.iter().map(|e| e.config.hash()).collect();
        assert_eq!(hashes.len(), grid.len());
        let pair = baseline_vs_full(&base);
        assert_ne!(pair[0].config.hash(), pair[1].config.hash());
        assert_eq!(pair[1].config.hash(), base.hash());
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        let base = RunConfig::default();
        let grid = vec![AblationEntry::new("a", base.clone()), AblationEntry::new("b", base)];
        assert!(matches!(run_ablation(&grid, &[], &[], None), Err(FobaError::Config { .. })));
    }

    #[test]
    fn two_row_grid_emits_two_rows() {
        let mut base = tiny_run(FbgVariant::Attention);
        base.train.max_steps = 2;
        let data = synth_generate(&base.synth).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let table = run_ablation(&baseline_vs_full(&base), &data[..3], &data[3..], Some(dir.path())).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(!table.rows[0].gif && table.rows[0].fbg.is_none() && !table.rows[0].consistency);
        assert!(table.rows[1].gif && table.rows[1].fbg == Some(FbgVariant::Attention));
        let md = table.to_markdown();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], format!("| {} |", ABLATION_COLUMNS.join(" | ")));
        assert!(lines.iter().all(|l| l.matches('|').count() == 9));
        assert!(dir.path().join("full").join("test_metrics.txt").exists());
    }
}
