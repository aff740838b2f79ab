//! Data tables parsed from CSV, pipe-markdown or JSON, and the RMS-F1
//! chart-to-table score.

use serde_json::Value;

use super::assign::min_cost_assignment;
use super::text::{normalized_distance, number};
use crate::error::{Error, Result};

/// Column headers and `(row header, cells)` rows; the row-header column's
/// own title is kept apart from `columns`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataTable {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl DataTable {
    pub fn new(corner: impl Into<String>, columns: Vec<String>, rows: Vec<(String, Vec<String>)>) -> Result<Self> {
        if let Some((h, r)) = rows.iter().find(|(_, r)| r.len() != columns.len()) {
            return Err(Error::Metric(format!(
                "row {h:?} has {} cells for {} columns",
                r.len(),
                columns.len()
            )));
        }
        Ok(DataTable { corner: corner.into(), columns, rows })
    }

    fn from_grid(grid: Vec<Vec<String>>) -> Result<Self> {
        let mut it = grid.into_iter();
        let header = it.next().ok_or_else(|| Error::Metric("table has no header".into()))?;
        let (corner, columns) = header.split_first().ok_or_else(|| Error::Metric("empty header".into()))?;
        let rows = it
            .map(|r| {
                let mut r = r.into_iter();
                let h = r.next().unwrap_or_default();
                (h, r.collect())
            })
            .collect();
        DataTable::new(corner.clone(), columns.to_vec(), rows)
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let grid = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
            .collect();
        Self::from_grid(grid)
    }

    pub fn from_markdown(s: &str) -> Result<Self> {
        let is_rule = |cells: &[String]| {
            cells.iter().all(|c| !c.is_empty() && c.chars().all(|ch| matches!(ch, '-' | ':')))
        };
        let grid: Vec<Vec<String>> = s
            .lines()
            .map(str::trim)
            .filter(|l| l.starts_with('|'))
            .map(|l| {
                let inner = l.trim_start_matches('|').trim_end_matches('|');
                inner.split('|').map(|c| c.trim().to_string()).collect::<Vec<_>>()
            })
            .filter(|cells| !is_rule(cells))
            .collect();
        Self::from_grid(grid)
    }

    /// A list of flat objects. The `category` field (or else the first
    /// field) heads each row; the remaining keys form the columns.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::Metric(format!("table JSON: {e}")))?;
        let recs = v.as_array().ok_or_else(|| Error::Metric("table JSON is not a list".into()))?;
        let objs: Vec<&serde_json::Map<String, Value>> = recs
            .iter()
            .map(|r| r.as_object().ok_or_else(|| Error::Metric("table JSON record is not an object".into())))
            .collect::<Result<_>>()?;
        let first = objs.first().ok_or_else(|| Error::Metric("table JSON is empty".into()))?;
        let corner = if first.contains_key("category") {
            "category".to_string()
        } else {
            first.keys().next().cloned().ok_or_else(|| Error::Metric("empty JSON record".into()))?
        };
        let columns: Vec<String> = first.keys().filter(|k| **k != corner).cloned().collect();
        let text = |v: Option<&Value>| match v {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => String::new(),
            Some(other) => other.to_string(),
        };
        let rows = objs
            .iter()
            .map(|o| (text(o.get(&corner)), columns.iter().map(|c| text(o.get(c))).collect()))
            .collect();
        DataTable::new(corner, columns, rows)
    }

    /// Parses by shape: `[` opens JSON, a leading `|` a markdown table,
    /// anything else is CSV.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim_start();
        if t.starts_with('[') {
            Self::from_json(t)
        } else if t.starts_with('|') {
            Self::from_markdown(t)
        } else {
            Self::from_csv(t)
        }
    }

    /// `(row header + " " + column header, value)` for every cell.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (h, cells) in &self.rows {
            for (c, v) in self.columns.iter().zip(cells) {
                out.push((format!("{h} {c}"), v.clone()));
            }
        }
        out
    }
}

/// Similarity of two values: relative numeric closeness when both are
/// numbers, otherwise normalized edit similarity.
pub fn value_similarity(pred: &str, gt: &str) -> f64 {
    match (number(pred), number(gt)) {
        (Some(p), Some(g)) => {
            let rel = if g == 0.0 {
                if p == 0.0 { 0.0 } else { 1.0 }
            } else {
                (p - g).abs() / g.abs()
            };
            1.0 - rel.min(1.0)
        }
        _ => 1.0 - normalized_distance(pred, gt),
    }
}

pub fn entry_similarity(pred: &(String, String), gt: &(String, String)) -> f64 {
    (1.0 - normalized_distance(&pred.0, &gt.0)) * value_similarity(&pred.1, &gt.1)
}

/// Largest entry count on either side solved by enumeration.
pub const EXHAUSTIVE_LIMIT: usize = 6;

fn best_total_exhaustive(sim: &[Vec<f64>]) -> f64 {
    fn rec(i: usize, sim: &[Vec<f64>], used: &mut [bool]) -> f64 {
        if i == sim.len() {
            return 0.0;
        }
        let mut best = rec(i + 1, sim, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(sim[i][j] + rec(i + 1, sim, used));
                used[j] = false;
            }
        }
        best
    }
    let m = sim.first().map_or(0, Vec::len);
    rec(0, sim, &mut vec![false; m])
}

/// `(precision, recall, f1)` of the best one-to-one entry matching.
pub fn rms_prf(pred: &DataTable, gt: &DataTable) -> Result<(f64, f64, f64)> {
    let (p, g) = (pred.entries(), gt.entries());
    if p.is_empty() || g.is_empty() {
        return Err(Error::Metric("RMS-F1 needs at least one cell on each side".into()));
    }
    let sim: Vec<Vec<f64>> = p.iter().map(|a| g.iter().map(|b| entry_similarity(a, b)).collect()).collect();
    let total = if p.len().max(g.len()) <= EXHAUSTIVE_LIMIT {
        best_total_exhaustive(&sim)
    } else {
        let cost: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|s| -s).collect()).collect();
        min_cost_assignment(&cost)
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| sim[i][j]))
            .sum()
    };
    let precision = total / p.len() as f64;
    let recall = total / g.len() as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok((precision, recall, f1))
}

pub fn rms_f1(pred: &DataTable, gt: &DataTable) -> Result<f64> {
    Ok(rms_prf(pred, gt)?.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bar(a: &str, b: &str) -> DataTable {
        DataTable::from_csv(&format!("category,value\nA,{a}\nB,{b}")).unwrap()
    }

    #[test]
    fn formats_parse_to_the_same_table() {
        let csv = DataTable::parse("category,value\nA,3\nB,6").unwrap();
        let md = DataTable::parse("| category | value |\n| --- | --- |\n| A | 3 |\n| B | 6 |").unwrap();
        let js = DataTable::parse(r#"[{"category":"A","value":3},{"category":"B","value":6}]"#).unwrap();
        assert_eq!(csv, md);
        assert_eq!(csv, js);
        assert_eq!(csv.entries(), vec![("A value".to_string(), "3".to_string()), ("B value".into(), "6".into())]);
        assert!(DataTable::from_csv("a,b\nx").is_err());
        assert!(DataTable::parse("").is_err());
    }

    #[test]
    fn rms_fixtures() {
        let gt = two_bar("3", "6");
        assert_eq!(rms_f1(&gt, &gt).unwrap(), 1.0);
        assert!((rms_f1(&two_bar("3", "12"), &gt).unwrap() - 0.5).abs() < 1e-12);
        let swapped = DataTable::from_csv("category,value\nB,6\nA,3").unwrap();
        assert_eq!(rms_f1(&swapped, &gt).unwrap(), 1.0);
        let empty = DataTable::new("c", vec![], vec![]).unwrap();
        assert!(rms_f1(&empty, &gt).is_err());
    }

    #[test]
    fn exhaustive_and_assignment_agree() {
        let gt = DataTable::from_csv("c,x,y\nA,1,2\nB,3,4\nC,5,6\nD,7,8").unwrap();
        let pred = DataTable::from_csv("c,x,y\nA,1,2\nB,3,9\nC,5,6\nE,7,8").unwrap();
        let (p, g) = (pred.entries(), gt.entries());
        let sim: Vec<Vec<f64>> = p.iter().map(|a| g.iter().map(|b| entry_similarity(a, b)).collect()).collect();
        let cost: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|s| -s).collect()).collect();
        let hungarian: f64 =
            min_cost_assignment(&cost).iter().enumerate().filter_map(|(i, j)| j.map(|j| sim[i][j])).sum();
        assert!((hungarian - best_total_exhaustive(&sim)).abs() < 1e-9);
    }
}
