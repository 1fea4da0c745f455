//! Confusion matrices, classification metrics, the baseline comparison and
//! report rendering. The positive class is genuine (label 1).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{encode_samples, Corpus, EncodedSample};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::fusion::{label_name, GENUINE};
use crate::model::{Mode, Model};
use crate::train::{predict_all, EpochRecord, TrainReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds one (gold, predicted) pair.
    pub fn record(&mut self, gold: usize, pred: usize) -> Result<()> {
        for l in [gold, pred] {
            if l > 1 {
                return Err(Error::Label(l));
            }
        }
        match (gold == GENUINE, pred == GENUINE) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
        Ok(())
    }

    /// Two-by-two grid with gold classes as rows.
    pub fn render(&self) -> String {
        let cells = [
            ["".to_string(), format!("pred {}", label_name(0)), format!("pred {}", label_name(1))],
            [format!("gold {}", label_name(0)), self.tn.to_string(), self.fp.to_string()],
            [format!("gold {}", label_name(1)), self.fn_.to_string(), self.tp.to_string()],
        ];
        let widths: Vec<usize> = (0..3).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap()).collect();
        let mut out = String::new();
        for row in &cells {
            let line = format!(
                "{:<w0$}  {:>w1$}  {:>w2$}",
                row[0],
                row[1],
                row[2],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2]
            );
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(preds: &[usize], golds: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &g) in preds.iter().zip(golds) {
        cm.record(g, p)?;
    }
    Ok(cm)
}

/// Published test-set figures for a mode at full scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub accuracy: f64,
    pub f1: f64,
}

pub fn benchmark(mode: Mode) -> Benchmark {
    let (accuracy, f1) = match mode {
        Mode::Fused => (0.934, 0.934),
        Mode::TextOnly => (0.893, 0.884),
        Mode::ImageOnly => (0.845, 0.830),
    };
    Benchmark { accuracy, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub split: String,
    pub samples: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
    pub positive_class: String,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<Benchmark>,
}

impl MetricsReport {
    pub fn tagged(mut self, model: &str, split: &str) -> Self {
        self.model = model.to_string();
        self.split = split.to_string();
        self
    }
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1 from counts. Zero denominators give 0
/// and set the degenerate flag.
pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let mut degenerate = false;
    let accuracy = ratio(cm.tp + cm.tn, cm.total(), &mut degenerate);
    let precision = ratio(cm.tp, cm.tp + cm.fp, &mut degenerate);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &mut degenerate);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        model: String::new(),
        split: String::new(),
        samples: cm.total(),
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
        positive_class: label_name(GENUINE).to_string(),
        confusion: *cm,
        benchmark: None,
    }
}

/// Eval-mode metrics of `model` on an encoded split. The model must have
/// been built for `mode`.
pub fn evaluate(model: &Model, split: &[EncodedSample], mode: Mode, split_name: &str) -> Result<MetricsReport> {
    if model.mode() != mode {
        return Err(Error::Contract(format!(
            "model was trained as {}, asked to evaluate as {mode}",
            model.mode()
        )));
    }
    if split.is_empty() {
        return Err(Error::Contract(format!("split {split_name:?} is empty")));
    }
    let preds = predict_all(model, split)?;
    let golds: Vec<usize> = split.iter().map(|s| s.label).collect();
    let mut report = compute_metrics(&confusion_matrix(&preds, &golds)?).tagged(mode.as_str(), split_name);
    report.benchmark = Some(benchmark(mode));
    Ok(report)
}

/// One row of the baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub metrics: MetricsReport,
    pub training: TrainReport,
}

/// Trains a fused, a text-only and an image-only model under the same
/// configuration and seed and scores each on the test split.
pub fn compare_baselines<E: FnMut(Mode, &EpochRecord)>(
    corpus: &Corpus,
    exp: &ExperimentConfig,
    mut on_epoch: E,
) -> Result<Vec<BaselineRun>> {
    if corpus.train.is_empty() || corpus.val.is_empty() || corpus.test.is_empty() {
        return Err(Error::Contract("comparison needs non-empty train, val and test splits".into()));
    }
    Mode::ALL
        .iter()
        .map(|&mode| {
            let (model, training) = exp.train_mode(corpus, mode, |r| on_epoch(mode, r))?;
            let test = encode_samples(&corpus.test, &model)?;
            let metrics = evaluate(&model, &test, mode, "test")?;
            Ok(BaselineRun { metrics, training })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Plain,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ReportFormat::Plain),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?} (plain, csv, json)"))),
        }
    }
}

const COLUMNS: [&str; 5] = ["model", "accuracy", "precision", "recall", "f1"];

fn row_values(r: &MetricsReport) -> [f64; 4] {
    [r.accuracy, r.precision, r.recall, r.f1]
}

pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&COLUMNS.join(","));
            out.push('\n');
            for r in reports {
                out.push_str(&r.model);
                for v in row_values(r) {
                    write!(out, ",{v:.4}").unwrap();
                }
                out.push('\n');
            }
        }
        ReportFormat::Plain => {
            let w = reports.iter().map(|r| r.model.len()).chain([COLUMNS[0].len()]).max().unwrap();
            write!(out, "{:<w$}", COLUMNS[0]).unwrap();
            for c in &COLUMNS[1..] {
                write!(out, "  {c:>9}").unwrap();
            }
            out.push('\n');
            for r in reports {
                write!(out, "{:<w$}", r.model).unwrap();
                for v in row_values(r) {
                    write!(out, "  {v:>9.4}").unwrap();
                }
                out.push('\n');
            }
        }
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(reports).map_err(|e| Error::Format(e.to_string()))?;
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn emit_report(reports: &[MetricsReport], format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(reports, format)?).map_err(|e| Error::io(path, e))
}
