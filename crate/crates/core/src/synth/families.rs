use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::font::{self, text_width, ADVANCE, GLYPH_H, GLYPH_W};
use super::image::{Image, Rgb};
use super::render::{draw_grid, draw_text, grid_size, ink_box, text_cell};
use super::{
    sample_seed, Bar, ChartFormat, DocQuestion, Family, GeneratorConfig, Grid, PlacedWord, Sample, TableQuestion,
    TextTask, Truth,
};
use crate::codec::{build_prompt_with, decode_text, reading_order_sort, serialize_instances, PromptTask, TextInstance, Vocab};
use crate::error::{Error, Result};

const WORD_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const PLACEMENT_TRIES: usize = 200;
const LAYOUT_RESTARTS: usize = 50;
const MARGIN: usize = 2;
const LINE_PITCH: usize = GLYPH_H + 2;

/// Sample `index` of `family`, fully determined by `(config, family, index)`.
pub fn generate(family: Family, index: u64, config: &GeneratorConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, family, index));
    let palette = palette(&mut rng);
    let mut g = Gen { rng, config };
    let truth = match family {
        Family::Spotting => g.spotting()?,
        Family::DocParse => g.doc(false)?,
        Family::ChartParse => g.chart()?,
        Family::Kie => g.kie()?,
        Family::DocVqa => g.doc(true)?,
        Family::TableQa => g.table_qa()?,
        Family::Translation => g.translation()?,
        Family::PureText => g.pure_text(),
    };
    build_sample(format!("{}-{index:05}", family.name()), family, truth, palette, config)
}

/// Renders `truth` and derives prompt, target and instances from it.
pub fn build_sample(
    id: String,
    family: Family,
    truth: Truth,
    palette: (Rgb, Rgb),
    config: &GeneratorConfig,
) -> Result<Sample> {
    let vocab = Vocab::new(config.bins)?;
    let size = config.image_size;
    let (bg, ink) = palette;
    let canvas = || Image::new_rgb(size, size, bg);
    let mismatch = || Error::Generation(format!("ground truth does not describe a {} sample", family.name()));
    let (task, image, prompt, target, instances) = match (&truth, family) {
        (Truth::Words { words, detection }, Family::Spotting | Family::Translation) => {
            let mut img = canvas();
            let mut instances = Vec::with_capacity(words.len());
            for w in words {
                if !font::supports(&w.rendered) || w.label.is_empty() {
                    return Err(Error::Generation(format!("cannot render word {:?}", w.rendered)));
                }
                let (x2, y2) = (w.x + text_width(&w.rendered, w.scale), w.y + GLYPH_H * w.scale);
                if x2 > size || y2 > size {
                    return Err(Error::Generation(format!("word {:?} leaves the image", w.rendered)));
                }
                draw_text(&mut img, &w.rendered, w.x, w.y, w.scale, ink);
                let (x1, y1, x2, y2) = ink_box(&w.rendered, w.x, w.y, w.scale)
                    .ok_or_else(|| Error::Generation(format!("word {:?} has no ink", w.rendered)))?;
                instances.push(TextInstance::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64, w.label.clone())?);
            }
            let s = size as f64;
            let serialized = || -> Result<String> {
                Ok(decode_text(&serialize_instances(&instances, s, s, &vocab)?, &vocab))
            };
            let bind = [("language", "English")];
            let (task, target) = match (family, detection) {
                (Family::Spotting, true) => (PromptTask::Spotting, serialized()?),
                (Family::Spotting, false) => return Err(mismatch()),
                (_, true) => (PromptTask::DetectTranslate, serialized()?),
                (_, false) => {
                    let ordered = reading_order_sort(&instances);
                    let t: Vec<&str> = ordered.iter().map(|i| i.transcription.as_str()).collect();
                    (PromptTask::Translate, t.join(" "))
                }
            };
            let prompt = build_prompt_with(task, &bind)?;
            (task, Some(img), prompt, target, detection.then_some(instances))
        }
        (Truth::Document { title, lines, table, question }, Family::DocParse | Family::DocVqa) => {
            let mut img = canvas();
            let max = line_chars(size);
            for (i, l) in std::iter::once(title).chain(lines).enumerate() {
                if l.chars().count() > max || !font::supports(l) {
                    return Err(Error::Generation(format!("document line {l:?} does not fit")));
                }
                draw_text(&mut img, l, MARGIN, MARGIN + i * LINE_PITCH, 1, ink);
            }
            if let Some((grid, top)) = table {
                let (gw, gh) = grid_size(grid.rows.len() + 1, grid.header.len());
                if top + gh > size || MARGIN + gw > size || *top < MARGIN + (lines.len() + 1) * LINE_PITCH {
                    return Err(Error::Generation("document table does not fit".into()));
                }
                draw_grid(&mut img, MARGIN, *top, &grid_cells(grid), ink);
            }
            match (question, family) {
                (None, Family::DocParse) => {
                    let mut md = format!("# {title}");
                    for l in lines {
                        md.push('\n');
                        md.push_str(l);
                    }
                    if let Some((grid, _)) = table {
                        md.push('\n');
                        md.push_str(&markdown_table(&grid.header, &grid_body(grid)));
                    }
                    (PromptTask::DocParse, Some(img), build_prompt_with(PromptTask::DocParse, &[])?, md, None)
                }
                (Some(q), Family::DocVqa) => {
                    let (text, answer) = match q {
                        DocQuestion::Title => ("What is the title?", title.clone()),
                        DocQuestion::LineCount => ("How many lines are there?", lines.len().to_string()),
                    };
                    let prompt = build_prompt_with(PromptTask::DocVqa, &[("question", text)])?;
                    (PromptTask::DocVqa, Some(img), prompt, answer, None)
                }
                _ => return Err(mismatch()),
            }
        }
        (Truth::Chart { bars, baseline, unit, format }, Family::ChartParse) => {
            let mut img = canvas();
            let (baseline, unit) = (*baseline, *unit);
            if baseline + 2 + GLYPH_H > size || 9 * unit + 3 > baseline {
                return Err(Error::Generation("chart axes do not fit".into()));
            }
            img.fill_rect(2, 2, 1, baseline - 1, ink);
            img.fill_rect(2, baseline, size - 4, 1, ink);
            for b in bars {
                if !(1..=9).contains(&b.value) || b.width < GLYPH_W || b.x + b.width > size || b.color == bg || b.color == ink {
                    return Err(Error::Generation(format!("bar {:?} cannot be drawn", b.label)));
                }
                let h = b.value as usize * unit;
                img.fill_rect(b.x, baseline - h, b.width, h, b.color);
                draw_text(&mut img, &b.label.to_string(), b.x + (b.width - GLYPH_W) / 2, baseline + 2, 1, ink);
            }
            let prompt = build_prompt_with(PromptTask::ChartParse, &[("format", format.name())])?;
            (PromptTask::ChartParse, Some(img), prompt, chart_table(bars, *format), None)
        }
        (Truth::Kie { pairs, query }, Family::Kie) => {
            let mut img = canvas();
            for (i, (k, v)) in pairs.iter().enumerate() {
                let line = format!("{k}: {v}");
                if line.chars().count() > line_chars(size) || MARGIN + (i + 1) * LINE_PITCH > size {
                    return Err(Error::Generation(format!("KIE line {line:?} does not fit")));
                }
                draw_text(&mut img, &line, MARGIN, MARGIN + i * LINE_PITCH, 1, ink);
            }
            let (key, value) = pairs.get(*query).ok_or_else(mismatch)?;
            let prompt = build_prompt_with(PromptTask::Kie, &[("key", key.as_str())])?;
            (PromptTask::Kie, Some(img), prompt, value.clone(), None)
        }
        (Truth::Table { grid, x, y, question }, Family::TableQa) => {
            let (gw, gh) = grid_size(grid.rows.len() + 1, grid.header.len());
            if x + gw > size || y + gh > size {
                return Err(Error::Generation("table does not fit".into()));
            }
            let mut img = canvas();
            draw_grid(&mut img, *x, *y, &grid_cells(grid), ink);
            let column = |c: usize| grid.rows.iter().map(move |r| r[c]);
            let (text, answer) = match *question {
                TableQuestion::Cell { row, col } => (
                    format!("What is the value in row {}, column {}?", row + 1, grid.header[col]),
                    grid.rows[row][col].to_string(),
                ),
                TableQuestion::ColumnSum { col } => (
                    format!("What is the sum of column {}?", grid.header[col]),
                    column(col).sum::<u32>().to_string(),
                ),
                TableQuestion::Summary => {
                    let parts: Vec<String> = grid
                        .header
                        .iter()
                        .enumerate()
                        .map(|(c, h)| format!("{h}={}", column(c).max().unwrap_or(0)))
                        .collect();
                    ("Summarize the table.".to_string(), format!("Maximum values: {}.", parts.join(", ")))
                }
            };
            let prompt = build_prompt_with(PromptTask::TableQa, &[("question", text.as_str())])?;
            (PromptTask::TableQa, Some(img), prompt, answer, None)
        }
        (Truth::Text(t), Family::PureText) => {
            let (text, target) = match t {
                TextTask::Copy(s) => (format!("repeat: {s}"), s.clone()),
                TextTask::Add(a, b) => (format!("add: {a}+{b}"), (a + b).to_string()),
            };
            let prompt = build_prompt_with(PromptTask::PureText, &[("text", text.as_str())])?;
            (PromptTask::PureText, None, prompt, target, None)
        }
        _ => return Err(mismatch()),
    };
    Ok(Sample { id, family, task, image, prompt, target, instances, truth, palette })
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    config: &'a GeneratorConfig,
}

fn palette(rng: &mut impl Rng) -> (Rgb, Rgb) {
    let bg = [rng.gen_range(200..=255), rng.gen_range(200..=255), rng.gen_range(200..=255)];
    let ink = [rng.gen_range(0..=60), rng.gen_range(0..=60), rng.gen_range(0..=60)];
    (bg, ink)
}

/// Longest text that fits on one line at scale 1 with margins.
fn line_chars(size: usize) -> usize {
    (size - 2 * MARGIN + 1) / ADVANCE
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), gap: usize) -> bool {
    a.0 < b.0 + b.2 + gap && b.0 < a.0 + a.2 + gap && a.1 < b.1 + b.3 + gap && b.1 < a.1 + a.3 + gap
}

impl Gen<'_> {
    fn size(&self) -> usize {
        self.config.image_size
    }

    fn range(&mut self, (lo, hi): (usize, usize)) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    fn word(&mut self, chars: &[u8], len: usize) -> String {
        (0..len).map(|_| chars[self.rng.gen_range(0..chars.len())] as char).collect()
    }

    /// Random non-overlapping placement of `(rendered, label)` pairs. Words
    /// that keep colliding fall back to the smallest scale; a stuck layout
    /// is restarted from scratch.
    fn place(&mut self, texts: &[(String, String)]) -> Result<Vec<PlacedWord>> {
        for _ in 0..LAYOUT_RESTARTS {
            if let Some(words) = self.try_place(texts) {
                return Ok(words);
            }
        }
        Err(Error::Generation(format!("could not place {} words on a {}px image", texts.len(), self.size())))
    }

    fn try_place(&mut self, texts: &[(String, String)]) -> Option<Vec<PlacedWord>> {
        let size = self.size();
        let smallest = *self.config.scales.iter().min().unwrap();
        let mut placed: Vec<PlacedWord> = Vec::new();
        for (rendered, label) in texts {
            let found = (0..PLACEMENT_TRIES).find_map(|attempt| {
                let scale = if attempt < PLACEMENT_TRIES / 2 {
                    *self.config.scales.choose(&mut self.rng).unwrap()
                } else {
                    smallest
                };
                let (w, h) = (text_width(rendered, scale), GLYPH_H * scale);
                if w + 2 > size || h + 2 > size {
                    return None;
                }
                let x = self.rng.gen_range(1..=size - 1 - w);
                let y = self.rng.gen_range(1..=size - 1 - h);
                let cell = text_cell(rendered, x, y, scale);
                placed
                    .iter()
                    .all(|p| !overlaps(cell, text_cell(&p.rendered, p.x, p.y, p.scale), 1))
                    .then(|| PlacedWord { rendered: rendered.clone(), label: label.clone(), x, y, scale })
            })?;
            placed.push(found);
        }
        Some(placed)
    }

    fn spotting(&mut self) -> Result<Truth> {
        let n = self.range(self.config.word_count);
        let texts: Vec<(String, String)> = (0..n)
            .map(|_| {
                let len = self.range(self.config.word_len);
                let w = self.word(WORD_CHARS, len);
                (w.clone(), w)
            })
            .collect();
        Ok(Truth::Words { words: self.place(&texts)?, detection: true })
    }

    fn translation(&mut self) -> Result<Truth> {
        let n = self.range(self.config.word_count);
        let keys: Vec<&String> = self.config.dictionary.keys().collect();
        let texts: Vec<(String, String)> = (0..n)
            .map(|_| {
                let k = keys[self.rng.gen_range(0..keys.len())];
                (k.clone(), self.config.dictionary[k].clone())
            })
            .collect();
        let detection = self.rng.gen_bool(self.config.detection_ratio);
        Ok(Truth::Words { words: self.place(&texts)?, detection })
    }

    fn doc(&mut self, vqa: bool) -> Result<Truth> {
        let max = line_chars(self.size());
        let title_len = self.rng.gen_range(2..=6.min(max));
        let mut title = self.word(b"ABCDEFGHIJKLMNOPQRSTUVWXYZ", 1);
        title.push_str(&self.word(LOWER, title_len - 1));
        let with_table = !vqa && self.rng.gen_bool(0.5);
        let n_lines = if with_table { 1 } else { self.rng.gen_range(2..=4) };
        if MARGIN + (n_lines + 1) * LINE_PITCH > self.size() {
            return Err(Error::Generation("document lines do not fit".into()));
        }
        let lines: Vec<String> = (0..n_lines).map(|_| self.sentence(max)).collect();
        let table = if with_table {
            Some((self.grid()?, MARGIN + (n_lines + 1) * LINE_PITCH))
        } else {
            None
        };
        let question = vqa.then(|| if self.rng.gen_bool(0.5) { DocQuestion::Title } else { DocQuestion::LineCount });
        Ok(Truth::Document { title, lines, table, question })
    }

    /// One or two lowercase words totalling at most `max` characters.
    fn sentence(&mut self, max: usize) -> String {
        let a = self.rng.gen_range(2..=4.min(max));
        let mut s = self.word(LOWER, a);
        if max >= a + 3 && self.rng.gen_bool(0.5) {
            let b = self.rng.gen_range(2..=(max - a - 1).min(4));
            s.push(' ');
            s.push_str(&self.word(LOWER, b));
        }
        s
    }

    fn grid(&mut self) -> Result<Grid> {
        let cols = self.range(self.config.table_cols);
        let rows = self.range(self.config.table_rows);
        if cols > 26 {
            return Err(Error::Generation("at most 26 table columns".into()));
        }
        let header = (0..cols).map(|c| ((b'A' + c as u8) as char).to_string()).collect();
        let rows = (0..rows).map(|_| (0..cols).map(|_| self.rng.gen_range(1..=9)).collect()).collect();
        Ok(Grid { header, rows })
    }

    fn chart(&mut self) -> Result<Truth> {
        let size = self.size();
        let n = self.range(self.config.bars);
        let mut letters: Vec<u8> = (b'A'..=b'Z').collect();
        letters.shuffle(&mut self.rng);
        let mut labels: Vec<char> = letters[..n].iter().map(|&b| b as char).collect();
        labels.sort_unstable();
        let format = *self.config.chart_formats.choose(&mut self.rng).unwrap();
        let (baseline, unit, pitch, width) = chart_layout(size, n)?;
        let mut bars = Vec::with_capacity(n);
        for (i, &label) in labels.iter().enumerate() {
            let value = self.rng.gen_range(1..=9);
            let color: Rgb = [self.rng.gen_range(70..=190), self.rng.gen_range(70..=190), self.rng.gen_range(70..=190)];
            bars.push(Bar { label, value, x: 4 + i * pitch + (pitch - width) / 2, width, color });
        }
        Ok(Truth::Chart { bars, baseline, unit, format })
    }

    fn kie(&mut self) -> Result<Truth> {
        let max = line_chars(self.size());
        let mut keys = self.config.kie_keys.clone();
        keys.shuffle(&mut self.rng);
        let rows_fit = (self.size() - 2 * MARGIN) / LINE_PITCH;
        let n = self.rng.gen_range(2..=4).min(keys.len()).min(rows_fit);
        let mut pairs = Vec::with_capacity(n);
        for key in keys.into_iter().take(n) {
            let room = max.saturating_sub(key.chars().count() + 2);
            if room == 0 {
                return Err(Error::Generation(format!("key {key:?} leaves no room for a value")));
            }
            let len = self.rng.gen_range(1..=room.min(4));
            let value = self.word(b"0123456789", len);
            pairs.push((key, value));
        }
        let query = self.rng.gen_range(0..pairs.len());
        Ok(Truth::Kie { pairs, query })
    }

    fn table_qa(&mut self) -> Result<Truth> {
        let grid = self.grid()?;
        let (gw, gh) = grid_size(grid.rows.len() + 1, grid.header.len());
        let size = self.size();
        if gw + 2 > size || gh + 2 > size {
            return Err(Error::Generation("table does not fit".into()));
        }
        let x = self.rng.gen_range(1..=size - 1 - gw);
        let y = self.rng.gen_range(1..=size - 1 - gh);
        let question = match self.rng.gen_range(0..3) {
            0 => TableQuestion::Cell {
                row: self.rng.gen_range(0..grid.rows.len()),
                col: self.rng.gen_range(0..grid.header.len()),
            },
            1 => TableQuestion::ColumnSum { col: self.rng.gen_range(0..grid.header.len()) },
            _ => TableQuestion::Summary,
        };
        Ok(Truth::Table { grid, x, y, question })
    }

    fn pure_text(&mut self) -> Truth {
        Truth::Text(if self.rng.gen_bool(0.5) {
            let len = self.rng.gen_range(2..=6);
            TextTask::Copy(self.word(LOWER, len))
        } else {
            TextTask::Add(self.rng.gen_range(0..=9), self.rng.gen_range(0..=9))
        })
    }
}

/// `(baseline, unit, pitch, bar width)` for `n` bars on a `size` canvas.
pub fn chart_layout(size: usize, n: usize) -> Result<(usize, usize, usize, usize)> {
    let baseline = size - (GLYPH_H + 3);
    let unit = (baseline - 4) / 9;
    let pitch = (size - 6) / n.max(1);
    let width = pitch.saturating_sub(2).min(8);
    if n == 0 || unit == 0 || width < GLYPH_W {
        return Err(Error::Generation(format!("{n} bars do not fit a {size}px chart")));
    }
    Ok((baseline, unit, pitch, width))
}

pub(super) fn grid_cells(grid: &Grid) -> Vec<Vec<String>> {
    let mut cells = vec![grid.header.clone()];
    cells.extend(grid_body(grid));
    cells
}

fn grid_body(grid: &Grid) -> Vec<Vec<String>> {
    grid.rows.iter().map(|r| r.iter().map(u32::to_string).collect()).collect()
}

fn markdown_table(header: &[String], body: &[Vec<String>]) -> String {
    let row = |cells: &[String]| format!("| {} |", cells.join(" | "));
    let mut lines = vec![row(header), row(&vec!["---".to_string(); header.len()])];
    lines.extend(body.iter().map(|r| row(r)));
    lines.join("\n")
}

#[derive(Serialize)]
struct ChartRecord {
    category: String,
    value: u32,
}

fn chart_table(bars: &[Bar], format: ChartFormat) -> String {
    match format {
        ChartFormat::Csv => {
            let mut s = "category,value".to_string();
            for b in bars {
                s.push_str(&format!("\n{},{}", b.label, b.value));
            }
            s
        }
        ChartFormat::Markdown => {
            let header = ["category".to_string(), "value".to_string()];
            let body: Vec<Vec<String>> = bars.iter().map(|b| vec![b.label.to_string(), b.value.to_string()]).collect();
            markdown_table(&header, &body)
        }
        ChartFormat::Json => {
            let recs: Vec<ChartRecord> =
                bars.iter().map(|b| ChartRecord { category: b.label.to_string(), value: b.value }).collect();
            serde_json::to_string(&recs).expect("records serialize")
        }
    }
}
