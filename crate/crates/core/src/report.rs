//! Run reports: structured results plus human-readable and CSV emission.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::EpisodeStats;
use crate::objective::LossBreakdown;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SupervisedMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// One logged optimization unit: an episode (episodic mode) or an epoch
/// average (supervised mode).
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: String,
    /// Ablation tag when the run belongs to a variant sweep.
    pub variant: Option<String>,
    pub seed: u64,
    /// Number of scales actually mixed by this run's model.
    pub k_effective: usize,
    /// Exact configuration echo; a rerun from this text and seed reproduces
    /// the numbers below in deterministic mode.
    pub config_text: String,
    pub config: RunConfig,
    pub steps: Vec<StepRecord>,
    pub supervised: Option<SupervisedMetrics>,
    pub episodes: Option<EpisodeStats>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl RunReport {
    pub fn new(mode: &str, config: &RunConfig) -> Self {
        RunReport {
            mode: mode.to_string(),
            variant: None,
            seed: config.seed,
            k_effective: config.pool_grids.len(),
            config_text: config.to_text(),
            config: config.clone(),
            steps: Vec::new(),
            supervised: None,
            episodes: None,
            wall_clock_secs: 0.0,
            checkpoint: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run: {}{}", self.mode, match &self.variant {
            Some(v) => format!(" [{v}]"),
            None => String::new(),
        });
        let _ = writeln!(out, "seed: {}   k_effective: {}   wall_clock: {:.1}s",
            self.seed, self.k_effective, self.wall_clock_secs);
        if let Some(last) = self.steps.last() {
            let _ = writeln!(
                out,
                "final loss: total {:.5} = task {:.5} + {} * (recon {:.5} + kl {:.5})",
                last.loss.total, last.loss.task_loss, last.loss.alpha,
                last.loss.recon_loss, last.loss.kl_loss
            );
        }
        if let Some(m) = &self.supervised {
            let _ = writeln!(
                out,
                "test accuracy {:.4}   macro P {:.4}  R {:.4}  F1 {:.4}",
                m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
            );
        }
        if let Some(e) = &self.episodes {
            let _ = writeln!(
                out,
                "episode accuracy {:.4} +/- {:.4} (95% CI over {} episodes)",
                e.mean,
                e.ci95,
                e.per_episode_acc.len()
            );
        }
        out
    }

    pub fn losses_csv(&self) -> String {
        let mut out = String::from("index,task,recon,kl,total,lr\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.index, s.loss.task_loss, s.loss.recon_loss, s.loss.kl_loss, s.loss.total, s.lr
            );
        }
        out
    }

    /// Write `report.json`, `report.txt`, and `losses.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, content: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::io(&path, e))
        };
        write("report.json", self.to_json())?;
        write("report.txt", self.to_table())?;
        write("losses.csv", self.losses_csv())
    }
}

/// Side-by-side comparison of ablation variants.
pub fn ablation_table(reports: &[RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>10} {:>10} {:>6}", "variant", "mean_acc", "ci95", "K_eff");
    for r in reports {
        let (mean, ci) = r
            .episodes
            .as_ref()
            .map(|e| (e.mean, e.ci95))
            .unwrap_or((f64::NAN, f64::NAN));
        let _ = writeln!(
            out,
            "{:<18} {:>10.4} {:>10.4} {:>6}",
            r.variant.as_deref().unwrap_or("full"),
            mean,
            ci,
            r.k_effective
        );
    }
    out
}
