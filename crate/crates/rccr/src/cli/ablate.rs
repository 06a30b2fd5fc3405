//! Ablation sweep driver: replays the cumulative component rows (plus the
//! source-only and feature-route variants) as independent runs and emits a
//! consolidated table.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{load_config, write_run_metadata, CliError, CommonArgs, RunConfigFile};
use crate::data::load_bundle;
use crate::trainer::{train_loop, AblationFlags, TrainConfig, TrainState};

/// Sweep description: which rows to run and over which seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_rows")]
    pub rows: Vec<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_rows() -> Vec<String> {
    ["source_only", "baseline", "I", "II", "III", "IV", "V"]
        .map(str::to_string)
        .to_vec()
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            rows: default_rows(),
            seeds: Vec::new(),
        }
    }
}

/// Applies a named row to a base config.
pub fn row_config(base: &TrainConfig, row: &str) -> Result<TrainConfig, CliError> {
    let cfg = base.clone();
    let cfg = match row {
        "source_only" => cfg.source_only(),
        "baseline" => cfg.with_flags(AblationFlags::baseline()),
        "I" => cfg.with_flags(AblationFlags::row_i()),
        "II" => cfg.with_flags(AblationFlags::row_ii()),
        "III" => cfg.with_flags(AblationFlags::row_iii()),
        "IV" => cfg.with_flags(AblationFlags::row_iv()),
        "V" => cfg.with_flags(AblationFlags::row_v()),
        "V_on_z" => cfg.with_flags(AblationFlags::row_v_on_z()),
        other => {
            return Err(CliError::Config(format!(
                "unknown ablation row '{other}' (expected source_only, baseline, I..V, V_on_z)"
            )))
        }
    };
    Ok(cfg)
}

/// One row's aggregated result.
#[derive(Debug, Clone, Serialize)]
pub struct RowResult {
    pub row: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_miou: f64,
    pub spread: f64,
}

/// Runs the sweep sequentially and returns the consolidated rows. Failures
/// abort the sweep but the table collected so far is still written.
pub fn run_sweep(
    base: &RunConfigFile,
    base_dir: &Path,
    spec: &SweepSpec,
    out_dir: &Path,
) -> (Vec<RowResult>, Option<CliError>) {
    let seeds = if spec.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        spec.seeds.clone()
    };
    let mut rows = Vec::new();
    for row_name in &spec.rows {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let train_cfg = match row_config(&base.train, row_name) {
                Ok(cfg) => cfg.with_seed(seed),
                Err(e) => return (rows, Some(e)),
            };
            let run_dir = out_dir.join(format!("{row_name}_seed{seed}"));
            let mut run_cfg = base.clone();
            run_cfg.train = train_cfg.clone();
            run_cfg.output.dir = run_dir.clone();
            if let Err(e) = write_run_metadata(&run_cfg, &run_dir) {
                return (rows, Some(e));
            }
            let result = (|| -> Result<f64, CliError> {
                let data =
                    load_bundle(&run_cfg.data, base_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
                let mut state = TrainState::init(&train_cfg)?;
                let artifacts = train_loop(&mut state, &train_cfg, &data, Some(&run_dir))?;
                Ok(artifacts.final_eval.report.mean_percent())
            })();
            match result {
                Ok(miou) => {
                    println!("row {row_name} seed {seed}: mIoU {miou:.2}");
                    per_seed.push((seed, miou));
                }
                Err(e) => return (rows, Some(e)),
            }
        }
        let mean = per_seed.iter().map(|(_, m)| m).sum::<f64>() / per_seed.len() as f64;
        let spread = per_seed
            .iter()
            .map(|(_, m)| (m - mean).abs())
            .fold(0.0, f64::max);
        rows.push(RowResult {
            row: row_name.clone(),
            per_seed,
            mean_miou: mean,
            spread,
        });
    }
    (rows, None)
}

/// Renders the consolidated table as tab-separated text.
pub fn render_table(rows: &[RowResult], seeds: usize) -> String {
    let mut out = String::from("row\tmean_mIoU\tspread");
    for i in 0..seeds {
        out.push_str(&format!("\tseed{i}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{}\t{:.2}\t{:.2}",
            row.row, row.mean_miou, row.spread
        ));
        for (_, m) in &row.per_seed {
            out.push_str(&format!("\t{m:.2}"));
        }
        out.push('\n');
    }
    out
}

/// `rccr ablate`
pub fn cmd_ablate(common: &CommonArgs, sweep_path: Option<&Path>) -> Result<(), CliError> {
    let (cfg, base_dir) = load_config(common)?;
    let spec = match sweep_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("read {}: {e}", path.display())))?;
            toml::from_str::<SweepSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => SweepSpec::default(),
    };
    for row in &spec.rows {
        row_config(&cfg.train, row)?; // fail on unknown rows before running
    }
    let out_dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", out_dir.display())))?;
    let (rows, failure) = run_sweep(&cfg, &base_dir, &spec, &out_dir);
    let seeds = if spec.seeds.is_empty() { 1 } else { spec.seeds.len() };
    let table = render_table(&rows, seeds);
    print!("{table}");
    // partial tables are preserved even when a run fails
    std::fs::write(out_dir.join("table.tsv"), &table)
        .map_err(|e| CliError::Runtime(format!("write table.tsv: {e}")))?;
    std::fs::write(
        out_dir.join("table.json"),
        serde_json::to_string_pretty(&rows).expect("json"),
    )
    .map_err(|e| CliError::Runtime(format!("write table.json: {e}")))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rows_cover_the_ablation_table() {
        let spec = SweepSpec::default();
        assert_eq!(
            spec.rows,
            vec!["source_only", "baseline", "I", "II", "III", "IV", "V"]
        );
    }

    #[test]
    fn row_configs_toggle_cumulatively() {
        let base = TrainConfig::default();
        let i = row_config(&base, "I").unwrap();
        assert!(i.ablation.rwc && !i.ablation.ns_random);
        let v = row_config(&base, "V").unwrap();
        assert!(v.ablation.memory_bank && v.ablation.positive_sampling);
        let z = row_config(&base, "V_on_z").unwrap();
        assert!(z.ablation.contrast_on_z && !z.ablation.use_projector);
        let src = row_config(&base, "source_only").unwrap();
        assert_eq!(src.loss.lambda_cons, 0.0);
        assert!(!src.ablation.rwc);
        assert!(row_config(&base, "nonsense").is_err());
    }

    #[test]
    fn table_renders_one_line_per_row() {
        let rows = vec![
            RowResult {
                row: "baseline".into(),
                per_seed: vec![(0, 50.0), (1, 52.0)],
                mean_miou: 51.0,
                spread: 1.0,
            },
            RowResult {
                row: "I".into(),
                per_seed: vec![(0, 53.0), (1, 55.0)],
                mean_miou: 54.0,
                spread: 1.0,
            },
        ];
        let table = render_table(&rows, 2);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("baseline\t51.00\t1.00\t50.00\t52.00"));
    }
}
