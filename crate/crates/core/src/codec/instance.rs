use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned text box in pixels plus its transcription.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(rename = "text")]
    pub transcription: String,
}

impl TextInstance {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, transcription: impl Into<String>) -> Result<Self> {
        let inst = TextInstance {
            x1,
            y1,
            x2,
            y2,
            transcription: transcription.into(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Contract(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if self.transcription.is_empty() {
            return Err(Error::Contract("empty transcription".into()));
        }
        Ok(())
    }

    pub fn validate_within(&self, width: f64, height: f64) -> Result<()> {
        self.validate()?;
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > width || self.y2 > height {
            return Err(Error::Contract(format!(
                "box ({}, {}, {}, {}) outside {width}x{height} image",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn iou(&self, other: &TextInstance) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.width() * self.height() + other.width() * other.height() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
            .then_with(|| self.transcription.cmp(&other.transcription))
    }
}

/// Two boxes share a line when their vertical overlap is at least this
/// fraction of the shorter box's height.
pub const LINE_OVERLAP: f64 = 0.5;

fn same_line(a: &TextInstance, b: &TextInstance) -> bool {
    let overlap = a.y2.min(b.y2) - a.y1.max(b.y1);
    overlap >= LINE_OVERLAP * a.height().min(b.height())
}

/// Top-to-bottom, left-to-right ordering. Boxes are grouped into lines
/// (transitively, by the vertical-overlap rule), lines are ordered by mean
/// top edge, and boxes within a line by left edge.
pub fn reading_order_sort(instances: &[TextInstance]) -> Vec<TextInstance> {
    let n = instances.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if same_line(&instances[i], &instances[j]) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut lines: Vec<Vec<TextInstance>> = Vec::new();
    let mut root_line: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        let line = *root_line[r].get_or_insert_with(|| {
            lines.push(Vec::new());
            lines.len() - 1
        });
        lines[line].push(instances[i].clone());
    }
    for line in &mut lines {
        line.sort_by(TextInstance::total_cmp);
    }
    let mean_top = |line: &Vec<TextInstance>| line.iter().map(|b| b.y1).sum::<f64>() / line.len() as f64;
    lines.sort_by(|a, b| {
        mean_top(a).total_cmp(&mean_top(b)).then_with(|| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or_else(|| a.len().cmp(&b.len()))
        })
    });
    lines.into_iter().flatten().collect()
}
