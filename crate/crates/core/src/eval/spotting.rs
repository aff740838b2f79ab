//! Word-level spotting precision, recall and F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::assign::min_cost_assignment;
use super::MetricReport;
use crate::codec::TextInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpottingMatchMode {
    /// Multiset intersection of transcriptions; geometry ignored.
    TranscriptionOnly,
    /// Prediction centre inside the ground-truth box and equal
    /// transcription, assigned one-to-one with minimal total centre distance.
    PointAndTranscription,
}

/// Matched count under `mode`.
pub fn spotting_matches(preds: &[TextInstance], gts: &[TextInstance], mode: SpottingMatchMode) -> usize {
    match mode {
        SpottingMatchMode::TranscriptionOnly => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for g in gts {
                *counts.entry(g.transcription.as_str()).or_default() += 1;
            }
            preds
                .iter()
                .filter(|p| match counts.get_mut(p.transcription.as_str()) {
                    Some(c) if *c > 0 => {
                        *c -= 1;
                        true
                    }
                    _ => false,
                })
                .count()
        }
        SpottingMatchMode::PointAndTranscription => point_matches(preds, gts, true),
    }
}

/// Geometric candidates: the prediction's centre lies inside the
/// ground-truth box (and, if `same_text`, the transcriptions agree).
fn is_edge(p: &TextInstance, g: &TextInstance, same_text: bool) -> bool {
    let (cx, cy) = p.center();
    g.contains_point(cx, cy) && (!same_text || p.transcription == g.transcription)
}

fn center_distance(p: &TextInstance, g: &TextInstance) -> f64 {
    let ((a, b), (c, d)) = (p.center(), g.center());
    ((a - c).powi(2) + (b - d).powi(2)).sqrt()
}

/// Size of the maximum one-to-one matching over candidate edges; among
/// maximum matchings the one with minimal total centre distance is chosen.
pub fn point_matches(preds: &[TextInstance], gts: &[TextInstance], same_text: bool) -> usize {
    if preds.is_empty() || gts.is_empty() {
        return 0;
    }
    let mut max_d: f64 = 0.0;
    let mut edges = 0usize;
    for p in preds {
        for g in gts {
            if is_edge(p, g, same_text) {
                max_d = max_d.max(center_distance(p, g));
                edges += 1;
            }
        }
    }
    // Any non-edge costs more than all edges together.
    let absent = (edges as f64 + 1.0) * (max_d + 1.0);
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| if is_edge(p, g, same_text) { center_distance(p, g) } else { absent }).collect())
        .collect();
    min_cost_assignment(&cost)
        .iter()
        .enumerate()
        .filter(|(i, j)| j.is_some_and(|j| is_edge(&preds[*i], &gts[j], same_text)))
        .count()
}

/// P/R/F1 report under `mode`.
pub fn spotting_prf(preds: &[TextInstance], gts: &[TextInstance], mode: SpottingMatchMode) -> MetricReport {
    let name = match mode {
        SpottingMatchMode::TranscriptionOnly => "spotting_f1_transcription",
        SpottingMatchMode::PointAndTranscription => "spotting_f1_point_trans",
    };
    MetricReport::prf(name, spotting_matches(preds, gts, mode), preds.len(), gts.len())
}

/// Geometric ("Pos") score of the point protocol: transcriptions ignored.
pub fn spotting_pos(preds: &[TextInstance], gts: &[TextInstance]) -> MetricReport {
    MetricReport::prf("spotting_f1_point_pos", point_matches(preds, gts, false), preds.len(), gts.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(x1: f64, y1: f64, x2: f64, y2: f64, t: &str) -> TextInstance {
        TextInstance::new(x1, y1, x2, y2, t).unwrap()
    }

    #[test]
    fn identical_sets_score_one() {
        let g = vec![inst(0., 0., 10., 10., "ab"), inst(20., 0., 30., 10., "cd")];
        for mode in [SpottingMatchMode::TranscriptionOnly, SpottingMatchMode::PointAndTranscription] {
            let r = spotting_prf(&g, &g, mode);
            assert_eq!((r.precision, r.recall, r.value), (Some(1.0), Some(1.0), 1.0));
        }
    }

    #[test]
    fn partial_and_misplaced_predictions() {
        let g = vec![inst(0., 0., 10., 10., "ab"), inst(20., 0., 30., 10., "cd")];
        let p = vec![inst(0., 0., 10., 10., "ab")];
        let r = spotting_prf(&p, &g, SpottingMatchMode::TranscriptionOnly);
        assert_eq!((r.precision, r.recall), (Some(1.0), Some(0.5)));
        assert!((r.value - 2.0 / 3.0).abs() < 1e-12);

        let far = vec![inst(50., 50., 60., 60., "ab")];
        assert_eq!(spotting_prf(&far, &g, SpottingMatchMode::TranscriptionOnly).matched, Some(1));
        assert_eq!(spotting_prf(&far, &g, SpottingMatchMode::PointAndTranscription).matched, Some(0));

        let wrong_text = vec![inst(1., 1., 9., 9., "zz")];
        assert_eq!(spotting_prf(&wrong_text, &g, SpottingMatchMode::PointAndTranscription).matched, Some(0));
        assert_eq!(spotting_pos(&wrong_text, &g).matched, Some(1));
    }

    #[test]
    fn duplicates_count_once() {
        let g = vec![inst(0., 0., 10., 10., "ab")];
        let p = vec![inst(0., 0., 10., 10., "ab"), inst(1., 1., 9., 9., "ab")];
        for mode in [SpottingMatchMode::TranscriptionOnly, SpottingMatchMode::PointAndTranscription] {
            let r = spotting_prf(&p, &g, mode);
            assert_eq!((r.matched, r.precision, r.recall), (Some(1), Some(0.5), Some(1.0)));
        }
    }

    #[test]
    fn empty_inputs_are_zero() {
        let g = vec![inst(0., 0., 10., 10., "ab")];
        let r = spotting_prf(&[], &g, SpottingMatchMode::PointAndTranscription);
        assert_eq!((r.value, r.recall), (0.0, Some(0.0)));
        assert_eq!(spotting_prf(&[], &[], SpottingMatchMode::TranscriptionOnly).value, 0.0);
    }
}
