//! Corpus-level benchmarking and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::config::{PipelineConfig, VariantSpec};
use super::cost::{CostCalibration, LatencyInputs, Profile};
use super::run::{run_pipeline, Pipeline, StageMetrics};
use crate::corpus::{QuerySample, SceneSpec};
use crate::error::{Error, Result};

/// One variant's averaged counters and modeled latency. Flat so it maps
/// one-to-one onto a CSV record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub variant: String,
    pub precision: Profile,
    pub keep_ratio: Option<f64>,
    pub samples: usize,
    pub patches: f64,
    pub text_tokens: f64,
    pub visual_total: f64,
    pub visual_kept: f64,
    pub input_tokens: f64,
    pub generated_tokens: f64,
    pub decode_iterations: f64,
    pub accepted_per_iteration: f64,
    pub fallback_rate: f64,
    pub vit_madds: f64,
    pub selection_madds: f64,
    pub pruning_madds: f64,
    pub prefill_madds: f64,
    pub decode_madds: f64,
    pub draft_madds: f64,
    pub vit_ms: f64,
    pub prefill_ms: f64,
    pub extend_one_ms: f64,
    pub decode_ms: f64,
    pub selection_ms: f64,
    pub total_ms: f64,
    pub speedup: f64,
    /// Mean measured seconds per sample; absent from canonical reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub samples: usize,
    pub baseline_total_ms: f64,
    pub rows: Vec<ReportRow>,
    /// Summed accepted-length histograms per row label.
    pub accepted_hist: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    pub threads: usize,
    pub record_wall: bool,
    pub calibration: Option<CostCalibration>,
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

fn merge_hist(into: &mut Vec<usize>, h: &[usize]) {
    if into.len() < h.len() {
        into.resize(h.len(), 0);
    }
    for (a, b) in into.iter_mut().zip(h) {
        *a += b;
    }
}

/// Averages per-sample metrics of one variant into a row, without latency.
pub fn average_metrics(label: &str, config: &PipelineConfig, metrics: &[StageMetrics]) -> Result<ReportRow> {
    let n = metrics.len();
    if n == 0 {
        return Err(Error::InvalidArgument("bench needs at least one sample".into()));
    }
    let avg = |f: &dyn Fn(&StageMetrics) -> f64| mean(metrics.iter().map(f), n);
    let generated = avg(&|m| m.generated_tokens as f64);
    let iterations = avg(&|m| m.decode_iterations as f64);
    Ok(ReportRow {
        label: label.to_string(),
        variant: config.variant.name().to_string(),
        precision: config.precision,
        keep_ratio: config.variant.prunes().then(|| config.effective_keep_ratio()),
        samples: n,
        patches: avg(&|m| m.vit_patches as f64),
        text_tokens: avg(&|m| m.text_tokens as f64),
        visual_total: avg(&|m| m.visual_total as f64),
        visual_kept: avg(&|m| m.visual_kept as f64),
        input_tokens: avg(&|m| m.prefill_tokens as f64),
        generated_tokens: generated,
        decode_iterations: iterations,
        accepted_per_iteration: if iterations > 0.0 { generated / iterations } else { 0.0 },
        fallback_rate: avg(&|m| f64::from(u8::from(m.selection_fallback))),
        vit_madds: avg(&|m| m.vit_madds as f64),
        selection_madds: avg(&|m| m.selection_madds as f64),
        pruning_madds: avg(&|m| m.pruning_madds as f64),
        prefill_madds: avg(&|m| m.prefill_madds as f64),
        decode_madds: avg(&|m| m.decode_madds as f64),
        draft_madds: avg(&|m| m.draft_madds as f64),
        vit_ms: 0.0,
        prefill_ms: 0.0,
        extend_one_ms: 0.0,
        decode_ms: 0.0,
        selection_ms: 0.0,
        total_ms: 0.0,
        speedup: 0.0,
        wall_s: None,
    })
}

/// Fills the modeled-latency columns of a row from its averaged counters.
pub fn apply_latency(row: &mut ReportRow, calib: &CostCalibration, speculative: bool, selection: bool) -> Result<()> {
    let l = calib.model_latency(
        &LatencyInputs {
            patches: row.patches,
            input_tokens: row.input_tokens,
            generated_tokens: row.generated_tokens,
            iterations: row.decode_iterations,
            speculative,
            selection,
        },
        row.precision,
    )?;
    row.vit_ms = l.vit_ms;
    row.prefill_ms = l.prefill_ms;
    row.extend_one_ms = l.extend_one_ms;
    row.decode_ms = l.decode_ms;
    row.selection_ms = l.selection_ms;
    row.total_ms = l.total_ms;
    Ok(())
}

/// Runs every variant over every sample and aggregates.
///
/// Samples run on a pool of `threads` workers; results are merged in
/// sample order so the report does not depend on scheduling. Speedups are
/// relative to the fp16 baseline row when present, otherwise to the
/// calibration's baseline total.
pub fn bench(
    samples: &[(SceneSpec, QuerySample)],
    specs: &[VariantSpec],
    base: &PipelineConfig,
    bundle: &ModelBundle,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one sample".into()));
    }
    let calib = match (&opts.calibration, &base.calibration) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => CostCalibration::load(Path::new(p))?,
        (None, None) => CostCalibration::shipped(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let mut rows = Vec::new();
    let mut hists = BTreeMap::new();
    for spec in specs {
        let config = spec.apply(base);
        let pipe = Pipeline::new(&config, bundle)?;
        let results: Vec<Result<StageMetrics>> = pool.install(|| {
            samples
                .par_iter()
                .map(|(scene, q)| run_pipeline(&pipe, scene, &q.raw).map(|(_, m)| m))
                .collect()
        });
        let metrics = results.into_iter().collect::<Result<Vec<_>>>()?;
        let label = spec.label();
        let mut row = average_metrics(&label, &config, &metrics)?;
        apply_latency(&mut row, &calib, config.variant.speculative(), config.variant.selects_patches())?;
        if opts.record_wall {
            let w = |m: &StageMetrics| {
                let t = m.wall;
                t.selection_s + t.vit_s + t.pruning_s + t.prefill_s + t.decode_s
            };
            row.wall_s = Some(mean(metrics.iter().map(w), metrics.len()));
        }
        let mut hist = Vec::new();
        for m in &metrics {
            merge_hist(&mut hist, &m.accepted_hist);
        }
        hists.insert(label, hist);
        rows.push(row);
    }

    let baseline_total_ms = rows
        .iter()
        .find(|r| r.variant == "baseline" && r.precision == Profile::Fp16)
        .map_or_else(|| calib.baseline_total_ms(), |r| r.total_ms);
    for r in &mut rows {
        r.speedup = baseline_total_ms / r.total_ms;
    }
    Ok(BenchReport {
        seed: base.seed,
        samples: samples.len(),
        baseline_total_ms,
        rows,
        accepted_hist: hists,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

impl ReportFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension()?.to_str()?.parse().ok()
    }
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One header plus one record per row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Variant | Patches | ViT (ms) | Input tokens | Prefill (ms) | Extend-one (ms) | Decode (ms) | Selection (ms) | Total (ms) | Speed-up |\n",
        );
        s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.1} | {:.1} | {:.0} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.2} |",
                r.label,
                r.patches,
                r.vit_ms,
                r.input_tokens,
                r.prefill_ms,
                r.extend_one_ms,
                r.decode_ms,
                r.selection_ms,
                r.total_ms,
                r.speedup
            );
        }
        s
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => Ok(self.to_json()),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => Ok(self.to_markdown()),
        }
    }
}

/// Parses rows written by [`BenchReport::to_csv`].
pub fn rows_from_csv(s: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(s.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = report.render(format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
