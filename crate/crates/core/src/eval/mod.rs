//! Evaluation metrics and run-level scoring of prediction files.

mod assign;
mod spotting;
mod table;
mod text;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{parse_instances, parse_markup, PromptTask, TextInstance, Vocab};
use crate::data::{read_jsonl_lenient, DatasetRecord};
use crate::error::{Error, Result};

pub use assign::min_cost_assignment;
pub use spotting::{point_matches, spotting_matches, spotting_pos, spotting_prf, SpottingMatchMode};
pub use table::{entry_similarity, rms_f1, rms_prf, value_similarity, DataTable, EXHAUSTIVE_LIMIT};
pub use text::{anls, levenshtein, nls, normalized_distance, one_minus_ned, relaxed_accuracy, ANLS_THRESHOLD, RELAXED_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<usize>,
}

impl MetricReport {
    /// Precision `matched / predicted`, recall `matched / ground_truth`,
    /// value F1; empty denominators give 0.
    pub fn prf(name: &str, matched: usize, predicted: usize, ground_truth: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(matched, predicted), ratio(matched, ground_truth));
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        MetricReport {
            name: name.to_string(),
            value: f1,
            precision: Some(p),
            recall: Some(r),
            matched: Some(matched),
            predicted: Some(predicted),
            ground_truth: Some(ground_truth),
        }
    }

    pub fn score(name: &str, value: f64) -> Self {
        MetricReport {
            name: name.to_string(),
            value,
            precision: None,
            recall: None,
            matched: None,
            predicted: None,
            ground_truth: None,
        }
    }
}

/// One model output. Dataset records are accepted too, reading their
/// target as the output, so a ground-truth file can be scored against
/// itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(alias = "target")]
    pub output: String,
}

/// Scores for the records of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: PromptTask,
    pub records: usize,
    /// Ground-truth records with no prediction (scored as empty output).
    pub missing_predictions: usize,
    /// Problems met while reading predictions: parser diagnostics for
    /// instance outputs, unparseable tables.
    pub diagnostics: usize,
    pub metrics: Vec<MetricReport>,
}

impl TaskReport {
    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Malformed lines skipped in the prediction and ground-truth files.
    pub skipped_predictions: usize,
    pub skipped_ground_truth: usize,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, task: PromptTask) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Every metric value, for blanket checks.
    pub fn values(&self) -> impl Iterator<Item = (&str, f64)> {
        self.tasks.iter().flat_map(|t| t.metrics.iter().map(|m| (m.name.as_str(), m.value)))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Instances read leniently from a model output; the second value counts
/// parser diagnostics.
pub fn output_instances(output: &str, vocab: &Vocab, width: f64, height: f64) -> (Vec<TextInstance>, usize) {
    match parse_markup(output, vocab) {
        Ok(ids) => {
            let (inst, diags) = parse_instances(&ids, vocab, width, height);
            (inst, diags.len())
        }
        Err(_) => (Vec::new(), 1),
    }
}

/// Scores aligned `(ground truth, output)` pairs of one task.
pub fn score_task(task: PromptTask, pairs: &[(&DatasetRecord, &str)], vocab: &Vocab) -> Result<TaskReport> {
    let mut diagnostics = 0;
    let mut metrics = Vec::new();
    match task {
        PromptTask::Spotting | PromptTask::DetectTranslate | PromptTask::DetectRecognizeTranslate => {
            let (mut trans, mut point, mut pos) = ([0usize; 3], [0usize; 3], [0usize; 3]);
            for (gt, out) in pairs {
                let (w, h) = gt
                    .extent()
                    .ok_or_else(|| Error::Contract(format!("record {} lacks an image size", gt.id)))?;
                let gts = gt.instances.as_deref().unwrap_or_default();
                let (preds, d) = output_instances(out, vocab, w, h);
                diagnostics += d;
                let t = spotting_matches(&preds, gts, SpottingMatchMode::TranscriptionOnly);
                let p = spotting_matches(&preds, gts, SpottingMatchMode::PointAndTranscription);
                let g = point_matches(&preds, gts, false);
                for (acc, m) in [(&mut trans, t), (&mut point, p), (&mut pos, g)] {
                    acc[0] += m;
                    acc[1] += preds.len();
                    acc[2] += gts.len();
                }
            }
            metrics.push(MetricReport::prf("spotting_f1_transcription", trans[0], trans[1], trans[2]));
            metrics.push(MetricReport::prf("spotting_f1_point_trans", point[0], point[1], point[2]));
            metrics.push(MetricReport::prf("spotting_f1_point_pos", pos[0], pos[1], pos[2]));
        }
        PromptTask::DocParse | PromptTask::Translate => {
            let s: Vec<f64> = pairs.iter().map(|(g, o)| one_minus_ned(o, &g.target)).collect();
            metrics.push(MetricReport::score("one_minus_ned", mean(&s)));
        }
        PromptTask::ChartParse => {
            let mut s = Vec::with_capacity(pairs.len());
            for (g, o) in pairs {
                let gt = DataTable::parse(&g.target)?;
                let v = match DataTable::parse(o) {
                    Ok(pred) => rms_f1(&pred, &gt).unwrap_or(0.0),
                    Err(_) => {
                        diagnostics += 1;
                        0.0
                    }
                };
                s.push(v);
            }
            metrics.push(MetricReport::score("rms_f1", mean(&s)));
        }
        PromptTask::Kie | PromptTask::DocVqa | PromptTask::TableQa | PromptTask::PureText => {
            let qa: Vec<(String, Vec<String>)> =
                pairs.iter().map(|(g, o)| (o.to_string(), vec![g.target.clone()])).collect();
            metrics.push(MetricReport::score("anls", anls(&qa, ANLS_THRESHOLD)));
            let relaxed: Vec<f64> = pairs
                .iter()
                .map(|(g, o)| f64::from(u8::from(relaxed_accuracy(o, &g.target, RELAXED_TOLERANCE))))
                .collect();
            metrics.push(MetricReport::score("relaxed_accuracy", mean(&relaxed)));
            let exact: Vec<f64> = pairs.iter().map(|(g, o)| f64::from(u8::from(*o == g.target))).collect();
            metrics.push(MetricReport::score("exact_match", mean(&exact)));
        }
    }
    Ok(TaskReport { task, records: pairs.len(), missing_predictions: 0, diagnostics, metrics })
}

/// Scores a prediction file against a ground-truth dataset, optionally
/// restricted to one task. Predictions are aligned by id.
pub fn evaluate_run(pred_path: &Path, gt_path: &Path, task: Option<PromptTask>, vocab: &Vocab) -> Result<EvalReport> {
    let (gts, skipped_ground_truth) = read_jsonl_lenient::<DatasetRecord>(gt_path)?;
    let (preds, skipped_predictions) = read_jsonl_lenient::<PredictionRecord>(pred_path)?;
    let mut gt_ids = HashSet::new();
    for g in &gts {
        if !gt_ids.insert(g.id.as_str()) {
            return Err(Error::Alignment(format!("duplicate ground-truth id {}", g.id)));
        }
    }
    let mut outputs: HashMap<&str, &str> = HashMap::new();
    for p in &preds {
        if !gt_ids.contains(p.id.as_str()) {
            return Err(Error::Alignment(format!("prediction {} has no ground truth", p.id)));
        }
        if outputs.insert(p.id.as_str(), p.output.as_str()).is_some() {
            return Err(Error::Alignment(format!("duplicate prediction id {}", p.id)));
        }
    }
    let mut by_task: BTreeMap<PromptTask, (Vec<(&DatasetRecord, &str)>, usize)> = BTreeMap::new();
    for g in gts.iter().filter(|g| task.is_none_or(|t| t == g.task)) {
        let entry = by_task.entry(g.task).or_default();
        match outputs.get(g.id.as_str()) {
            Some(o) => entry.0.push((g, o)),
            None => {
                entry.0.push((g, ""));
                entry.1 += 1;
            }
        }
    }
    if let Some(t) = task {
        by_task.entry(t).or_default();
    }
    let mut tasks = Vec::new();
    for (t, (pairs, missing)) in by_task {
        let mut report = score_task(t, &pairs, vocab)?;
        report.missing_predictions = missing;
        tasks.push(report);
    }
    Ok(EvalReport { skipped_predictions, skipped_ground_truth, tasks })
}
