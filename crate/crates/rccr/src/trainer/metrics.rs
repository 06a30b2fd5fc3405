//! Step reports, call-count probes, and the append-only metrics stream.

use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::eval::EvalReport;

/// Which representation the contrastive loss ran over this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastRoute {
    /// Contrastive branch disabled.
    None,
    /// Raw encoder features z.
    Feature,
    /// Projector embeddings e.
    Embedding,
}

/// Call counts recorded while executing one step. Ablation tests assert on
/// these to show that disabled components never run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StepProbes {
    pub teacher_seg_forwards: u32,
    pub student_seg_forwards: u32,
    pub student_cut_encoder_forwards: u32,
    pub student_projector_forwards: u32,
    pub teacher_projector_forwards: u32,
    pub plans_built: u32,
    pub ns_random_applications: u32,
    pub ns_category_applications: u32,
    pub positive_filter_applications: u32,
    pub bank_pushes: u32,
    pub contrast_route: Option<ContrastRoute>,
}

impl Default for ContrastRoute {
    fn default() -> Self {
        ContrastRoute::None
    }
}

/// Deterministic per-step data: equal seeds and config must reproduce these
/// fields bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss_ce: f64,
    pub loss_cons: f64,
    pub loss_cont: f64,
    pub loss_total: f64,
    pub cons_weight: f64,
    pub lr: f64,
    pub anchor_count: usize,
    pub mean_negatives: f64,
    pub bank_size: usize,
    pub ema_step: u64,
    pub probes: StepProbes,
}

/// One executed training step: the deterministic stats plus wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    #[serde(flatten)]
    pub stats: StepStats,
    pub timing_ms: f64,
}

/// Evaluation snapshot emitted alongside step lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_iou: f64,
    pub report: EvalReport,
}

/// Append-only line-delimited JSON metrics stream.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum MetricsLine<'a> {
    Step(&'a StepReport),
    Eval(&'a EvalPoint),
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn step(&mut self, report: &StepReport) -> std::io::Result<()> {
        self.line(&MetricsLine::Step(report))
    }

    pub fn eval(&mut self, point: &EvalPoint) -> std::io::Result<()> {
        self.line(&MetricsLine::Eval(point))
    }

    fn line(&mut self, line: &MetricsLine) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}
