//! Deterministic synthetic data for every task family: rendered with a
//! bitmap font, labelled from the generator's own ground truth.

mod families;
pub mod font;
mod image;
mod oracle;
mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{PromptTask, TextInstance};
use crate::error::{Error, Result};

pub use families::{build_sample, chart_layout, generate};
pub use image::{Image, Rgb};
pub use oracle::{check_glyphs_in_boxes, check_sample, expected_target};
pub use render::{draw_text, ink_box};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Spotting,
    DocParse,
    ChartParse,
    Kie,
    DocVqa,
    TableQa,
    Translation,
    PureText,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Spotting,
        Family::DocParse,
        Family::ChartParse,
        Family::Kie,
        Family::DocVqa,
        Family::TableQa,
        Family::Translation,
        Family::PureText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Spotting => "spotting",
            Family::DocParse => "doc_parse",
            Family::ChartParse => "chart_parse",
            Family::Kie => "kie",
            Family::DocVqa => "doc_vqa",
            Family::TableQa => "table_qa",
            Family::Translation => "translation",
            Family::PureText => "pure_text",
        }
    }

    fn index(self) -> u64 {
        Family::ALL.iter().position(|&f| f == self).unwrap() as u64
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
            Error::Config(format!("unknown family {s:?}; valid families: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChartFormat {
    #[serde(rename = "CSV")]
    Csv,
    Markdown,
    #[serde(rename = "JSON")]
    Json,
}

impl ChartFormat {
    pub fn name(self) -> &'static str {
        match self {
            ChartFormat::Csv => "CSV",
            ChartFormat::Markdown => "Markdown",
            ChartFormat::Json => "JSON",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Inclusive range of words per spotting or translation image.
    pub word_count: (usize, usize),
    /// Inclusive range of characters per spotting word.
    pub word_len: (usize, usize),
    /// Glyph scales to draw spotting and translation words at.
    pub scales: Vec<usize>,
    pub chart_formats: Vec<ChartFormat>,
    pub bars: (usize, usize),
    pub table_rows: (usize, usize),
    pub table_cols: (usize, usize),
    pub kie_keys: Vec<String>,
    pub dictionary: BTreeMap<String, String>,
    /// Probability that a translation sample asks for detection as well.
    pub detection_ratio: f64,
    pub bins: u32,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let dictionary = [
            ("uno", "one"),
            ("dos", "two"),
            ("tres", "three"),
            ("sol", "sun"),
            ("mar", "sea"),
            ("casa", "house"),
            ("gato", "cat"),
            ("perro", "dog"),
            ("rojo", "red"),
            ("azul", "blue"),
            ("libro", "book"),
            ("luz", "light"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        GeneratorConfig {
            image_size: 64,
            word_count: (1, 5),
            word_len: (2, 5),
            scales: vec![1, 2],
            chart_formats: vec![ChartFormat::Csv, ChartFormat::Markdown, ChartFormat::Json],
            bars: (2, 5),
            table_rows: (2, 3),
            table_cols: (2, 3),
            kie_keys: ["total", "date", "name", "tax", "id", "code"].iter().map(|s| s.to_string()).collect(),
            dictionary,
            detection_ratio: 0.5,
            bins: crate::codec::DEFAULT_BINS,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (usize, usize)| {
            if lo == 0 || lo > hi {
                Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty or starts at zero")))
            } else {
                Ok(())
            }
        };
        range("word_count", self.word_count)?;
        range("word_len", self.word_len)?;
        range("bars", self.bars)?;
        range("table_rows", self.table_rows)?;
        range("table_cols", self.table_cols)?;
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image size {} must be a multiple of 8, at least 32", self.image_size)));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config("scales must be non-empty and positive".into()));
        }
        if self.chart_formats.is_empty() {
            return Err(Error::Config("no chart formats".into()));
        }
        if self.kie_keys.is_empty() || self.kie_keys.iter().any(|k| k.is_empty() || !font::supports(k)) {
            return Err(Error::Config("KIE keys must be non-empty and drawable".into()));
        }
        if self.dictionary.is_empty()
            || self.dictionary.iter().any(|(k, v)| k.is_empty() || v.is_empty() || !font::supports(k))
        {
            return Err(Error::Config("translation dictionary must be non-empty with drawable keys".into()));
        }
        if self.bars.1 > 26 {
            return Err(Error::Config("at most 26 bars".into()));
        }
        if !(0.0..=1.0).contains(&self.detection_ratio) {
            return Err(Error::Config("detection_ratio must lie in [0, 1]".into()));
        }
        crate::codec::Vocab::new(self.bins)?;
        Ok(())
    }
}

/// A word drawn at `(x, y)` (top-left of its first glyph cell). `label` is
/// the transcription the sample is annotated with: the word itself for
/// spotting, its dictionary translation for translation samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacedWord {
    pub rendered: String,
    pub label: String,
    pub x: usize,
    pub y: usize,
    pub scale: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub header: Vec<String>,
    pub rows: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocQuestion {
    Title,
    LineCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableQuestion {
    /// 0-based body row and column.
    Cell { row: usize, col: usize },
    ColumnSum { col: usize },
    Summary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bar {
    pub label: char,
    pub value: u32,
    pub x: usize,
    pub width: usize,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextTask {
    Copy(String),
    Add(u32, u32),
}

/// Everything the generator decided, from which the target is recomputed by
/// the self-check oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Words { words: Vec<PlacedWord>, detection: bool },
    Document { title: String, lines: Vec<String>, table: Option<(Grid, usize)>, question: Option<DocQuestion> },
    Chart { bars: Vec<Bar>, baseline: usize, unit: usize, format: ChartFormat },
    Kie { pairs: Vec<(String, String)>, query: usize },
    Table { grid: Grid, x: usize, y: usize, question: TableQuestion },
    Text(TextTask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub family: Family,
    pub task: PromptTask,
    pub image: Option<Image>,
    pub prompt: String,
    pub target: String,
    pub instances: Option<Vec<TextInstance>>,
    pub truth: Truth,
    /// Background and ink colours used for text.
    pub palette: (Rgb, Rgb),
}

/// Seed for sample `index` of `family`; decorrelated across families.
pub fn sample_seed(base: u64, family: Family, index: u64) -> u64 {
    let mut z = base ^ family.index().wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` samples of each listed family, in family order.
pub fn generate_dataset(config: &GeneratorConfig, counts: &[(Family, usize)]) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut out = Vec::new();
    for &(family, n) in counts {
        for i in 0..n {
            out.push(generate(family, i as u64, config)?);
        }
    }
    Ok(out)
}
