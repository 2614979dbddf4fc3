//! Machine-readable outputs: a per-episode CSV and a JSON summary with
//! per-cell aggregates and the headline return orderings. Both embed the
//! config hash and tool version, contain no timestamps, and render floats
//! with shortest-round-trip formatting, so re-runs are byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpisodeRecord;
use crate::error::Result;

pub const CSV_HEADER: &str = "condition,schedule,seed,episode_return,length,done_reason,\
attacked_steps,flagged_steps,true_positives,false_positives,mean_residual,max_residual,\
state_loss,action_loss";

fn opt(v: Option<f32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Render records as CSV with two leading metadata comment lines.
pub fn render_csv(records: &[EpisodeRecord], config_hash: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str(&format!("# tool_version={}\n", crate::VERSION));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.condition,
            r.schedule_label,
            r.seed,
            r.episode_return,
            r.length,
            r.done_reason,
            r.attacked_steps,
            r.flagged_steps,
            r.true_positives,
            r.false_positives,
            opt(r.mean_residual),
            opt(r.max_residual),
            opt(r.state_loss),
            opt(r.action_loss),
        ));
    }
    out
}

pub fn write_csv(records: &[EpisodeRecord], path: &Path, config_hash: &str) -> Result<()> {
    std::fs::write(path, render_csv(records, config_hash))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub attacked_steps: usize,
    pub clean_steps: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub condition: String,
    pub schedule: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_length: f64,
    pub failure_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_loss: Option<f64>,
}

/// Headline return comparison for one attack schedule, all against the clean
/// unprotected baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleOrdering {
    pub schedule: String,
    pub clean_mean: f64,
    pub attacked_mean: f64,
    pub single_mean: f64,
    pub dual_mean: f64,
    pub dual_ge_single: bool,
    pub single_ge_attacked: bool,
    pub dual_ge_085_clean: bool,
    pub headline_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean_policy_mean_return: Option<f64>,
    pub cells: Vec<CellSummary>,
    pub orderings: Vec<ScheduleOrdering>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Group records by (condition, schedule) in first-appearance order and
/// aggregate each group.
pub fn build_summary(records: &[EpisodeRecord], seeds: &[u64], config_hash: &str) -> Summary {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in records {
        let key = (r.condition.to_string(), r.schedule_label.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }

    let mut cells = Vec::new();
    for (condition, schedule) in &keys {
        let group: Vec<&EpisodeRecord> = records
            .iter()
            .filter(|r| r.condition == condition && &r.schedule_label == schedule)
            .collect();
        let (mean_return, std_return, episodes) =
            mean_std(group.iter().map(|r| r.episode_return as f64));
        let (mean_length, _, _) = mean_std(group.iter().map(|r| r.length as f64));
        let failures = group.iter().filter(|r| r.done_reason == "failure").count();

        let has_detection = group.iter().any(|r| r.mean_residual.is_some());
        let detection = if has_detection {
            let attacked: usize = group.iter().map(|r| r.attacked_steps).sum();
            let flagged: usize = group.iter().map(|r| r.flagged_steps).sum();
            let tp: usize = group.iter().map(|r| r.true_positives).sum();
            let fp: usize = group.iter().map(|r| r.false_positives).sum();
            let total_steps: usize = group.iter().map(|r| r.trace.len()).sum();
            let clean_steps = total_steps - attacked;
            Some(DetectionSummary {
                attacked_steps: attacked,
                clean_steps,
                recall: (attacked > 0).then(|| tp as f64 / attacked as f64),
                precision: (flagged > 0).then(|| tp as f64 / flagged as f64),
                false_positive_rate: if clean_steps > 0 {
                    fp as f64 / clean_steps as f64
                } else {
                    0.0
                },
            })
        } else {
            None
        };

        let state_losses: Vec<f64> = group
            .iter()
            .filter_map(|r| r.state_loss.map(|v| v as f64))
            .collect();
        let action_losses: Vec<f64> = group
            .iter()
            .filter_map(|r| r.action_loss.map(|v| v as f64))
            .collect();

        cells.push(CellSummary {
            condition: condition.clone(),
            schedule: schedule.clone(),
            episodes,
            mean_return,
            std_return,
            mean_length,
            failure_rate: failures as f64 / episodes.max(1) as f64,
            detection,
            state_loss: (!state_losses.is_empty())
                .then(|| state_losses.iter().sum::<f64>() / state_losses.len() as f64),
            action_loss: (!action_losses.is_empty())
                .then(|| action_losses.iter().sum::<f64>() / action_losses.len() as f64),
        });
    }

    let clean_mean = cells
        .iter()
        .find(|c| c.condition == "unprotected-clean")
        .map(|c| c.mean_return)
        .unwrap_or(0.0);
    let mut schedules: Vec<String> = Vec::new();
    for c in &cells {
        if c.schedule != "none" && !schedules.contains(&c.schedule) {
            schedules.push(c.schedule.clone());
        }
    }
    let mean_of = |cond: &str, sched: &str| -> f64 {
        cells
            .iter()
            .find(|c| c.condition == cond && c.schedule == sched)
            .map(|c| c.mean_return)
            .unwrap_or(f64::NAN)
    };
    let orderings = schedules
        .iter()
        .map(|sched| {
            let attacked_mean = mean_of("unprotected-attacked", sched);
            let single_mean = mean_of("single-objective-defended", sched);
            let dual_mean = mean_of("dual-objective-defended", sched);
            let dual_ge_single = dual_mean >= single_mean;
            let single_ge_attacked = single_mean >= attacked_mean;
            let dual_ge_085_clean = dual_mean >= 0.85 * clean_mean;
            ScheduleOrdering {
                schedule: sched.clone(),
                clean_mean,
                attacked_mean,
                single_mean,
                dual_mean,
                dual_ge_single,
                single_ge_attacked,
                dual_ge_085_clean,
                headline_ok: dual_ge_single && single_ge_attacked && dual_ge_085_clean,
            }
        })
        .collect();

    Summary {
        tool_version: crate::VERSION.to_string(),
        config_hash: config_hash.to_string(),
        seeds: seeds.to_vec(),
        clean_policy_mean_return: None,
        cells,
        orderings,
    }
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::StepTrace;

    fn record(condition: &'static str, schedule: &str, seed: u64, ret: f32) -> EpisodeRecord {
        EpisodeRecord {
            condition,
            schedule_label: schedule.to_string(),
            seed,
            episode_return: ret,
            length: 10,
            done_reason: "horizon",
            attacked_steps: 2,
            flagged_steps: 2,
            true_positives: 2,
            false_positives: 0,
            mean_residual: Some(0.5),
            max_residual: Some(1.0),
            state_loss: Some(0.1),
            action_loss: Some(0.2),
            trace: (1..10)
                .map(|i| StepTrace {
                    step: i,
                    attacked: i == 2 || i == 3,
                    flagged: i == 2 || i == 3,
                    residual: Some(0.5),
                    true_next: vec![0.0],
                    incoming: vec![0.0],
                    chosen: vec![0.0],
                    diag_pred: Some(vec![0.0]),
                })
                .collect(),
        }
    }

    #[test]
    fn csv_is_deterministic_and_one_row_per_episode() {
        let records = vec![
            record("unprotected-clean", "none", 1, 100.0),
            record("dual-objective-defended", "p20b1", 1, 95.0),
        ];
        let a = render_csv(&records, "abc");
        let b = render_csv(&records, "abc");
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 2 + 1 + records.len());
        assert!(lines[0].starts_with("# config_hash=abc"));
        assert_eq!(lines[2], CSV_HEADER);
    }

    #[test]
    fn summary_groups_and_orders() {
        let mut records = Vec::new();
        for seed in 0..4 {
            records.push(record("unprotected-clean", "none", seed, 100.0));
            records.push(record("unprotected-attacked", "p20b2", seed, 10.0));
            records.push(record("single-objective-defended", "p20b2", seed, 40.0));
            records.push(record("dual-objective-defended", "p20b2", seed, 95.0));
        }
        let summary = build_summary(&records, &[0, 1, 2, 3], "abc");
        assert_eq!(summary.cells.len(), 4);
        assert_eq!(summary.orderings.len(), 1);
        let o = &summary.orderings[0];
        assert!(o.headline_ok);
        assert_eq!(o.clean_mean, 100.0);
        assert_eq!(o.dual_mean, 95.0);
        let detection = summary.cells[3].detection.as_ref().unwrap();
        assert_eq!(detection.recall, Some(1.0));
        assert_eq!(detection.precision, Some(1.0));
        assert_eq!(detection.false_positive_rate, 0.0);
    }
}
