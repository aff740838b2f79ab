//! Independent recomputation of every sample's label from its ground truth.
//! Measurements come from the rendered pixels wherever possible.

use super::font::{glyph, ADVANCE, GLYPH_H, GLYPH_W};
use super::{ChartFormat, DocQuestion, Family, GeneratorConfig, Image, Rgb, Sample, TableQuestion, TextTask, Truth};
use crate::codec::{reading_order_sort, TextInstance};
use crate::error::{Error, Result};

fn fail(id: &str, msg: impl std::fmt::Display) -> Error {
    Error::Generation(format!("{id}: {msg}"))
}

/// Pixels of `word` drawn with its first cell at `(x, y)`, from the raw
/// bitmap rows.
fn glyph_pixels(word: &str, x: usize, y: usize, scale: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    for (i, c) in word.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    let (gx, gy) = (x + (i * ADVANCE + col) * scale, y + r * scale);
                    for dy in 0..scale {
                        for dx in 0..scale {
                            px.push((gx + dx, gy + dy));
                        }
                    }
                }
            }
        }
    }
    px
}

/// Tight box (exclusive end) of pixels with colour `ink` inside the region.
fn measured_box(img: &Image, region: (usize, usize, usize, usize), ink: Rgb) -> Option<(usize, usize, usize, usize)> {
    let (x0, y0, x1, y1) = region;
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in y0..y1.min(img.height) {
        for x in x0..x1.min(img.width) {
            if img.get(x, y) == ink {
                let (a, c, d, e) = b.unwrap_or((x, y, x + 1, y + 1));
                b = Some((a.min(x), c.min(y), d.max(x + 1), e.max(y + 1)));
            }
        }
    }
    b
}

fn bin(v: usize, extent: usize, bins: u32) -> u64 {
    ((v as u64 * bins as u64) / extent as u64).min(bins as u64 - 1)
}

fn pipe_row(cells: &[String]) -> String {
    let mut s = String::from("|");
    for c in cells {
        s += " ";
        s += c;
        s += " |";
    }
    s
}

fn pipe_table(header: &[String], body: &[Vec<String>]) -> String {
    let mut rows = vec![pipe_row(header), pipe_row(&vec!["---".to_string(); header.len()])];
    for r in body {
        rows.push(pipe_row(r));
    }
    rows.join("\n")
}

/// The target a correct generator must emit for `sample`, recomputed from
/// its ground truth and rendered pixels.
pub fn expected_target(sample: &Sample, config: &GeneratorConfig) -> Result<String> {
    let id = sample.id.as_str();
    let need_image = || sample.image.as_ref().ok_or_else(|| fail(id, "image missing"));
    let (_, ink) = sample.palette;
    Ok(match &sample.truth {
        Truth::Words { words, detection } => {
            let img = need_image()?;
            let mut found = Vec::with_capacity(words.len());
            for w in words {
                let n = w.rendered.chars().count();
                let region = (w.x, w.y, w.x + (n * ADVANCE - 1) * w.scale, w.y + GLYPH_H * w.scale);
                let (x1, y1, x2, y2) = measured_box(img, region, ink).ok_or_else(|| fail(id, "word has no ink"))?;
                found.push(TextInstance {
                    x1: x1 as f64,
                    y1: y1 as f64,
                    x2: x2 as f64,
                    y2: y2 as f64,
                    transcription: w.label.clone(),
                });
            }
            let ordered = reading_order_sort(&found);
            if *detection {
                let (wd, ht) = (img.width, img.height);
                let mut s = String::new();
                for t in &ordered {
                    s += &format!(
                        "<pos_x_{}><pos_y_{}><pos_x_{}><pos_y_{}><ref>{}</ref>",
                        bin(t.x1 as usize, wd, config.bins),
                        bin(t.y1 as usize, ht, config.bins),
                        bin(t.x2 as usize, wd, config.bins),
                        bin(t.y2 as usize, ht, config.bins),
                        t.transcription
                    );
                }
                s
            } else {
                ordered.iter().map(|t| t.transcription.clone()).collect::<Vec<_>>().join(" ")
            }
        }
        Truth::Document { title, lines, table, question } => match question {
            Some(DocQuestion::Title) => title.clone(),
            Some(DocQuestion::LineCount) => format!("{}", lines.len()),
            None => {
                let mut parts = vec![format!("# {title}")];
                parts.extend(lines.iter().cloned());
                if let Some((grid, _)) = table {
                    let body: Vec<Vec<String>> =
                        grid.rows.iter().map(|r| r.iter().map(|v| format!("{v}")).collect()).collect();
                    parts.push(pipe_table(&grid.header, &body));
                }
                parts.join("\n")
            }
        },
        Truth::Chart { bars, baseline, unit, format } => {
            let img = need_image()?;
            let mut measured = Vec::with_capacity(bars.len());
            for b in bars {
                let col = b.x + b.width / 2;
                let mut h = 0;
                while h < *baseline && img.get(col, baseline - 1 - h) == b.color {
                    h += 1;
                }
                if h == 0 || h % unit != 0 {
                    return Err(fail(id, format!("bar {} has height {h}, not a multiple of {unit}", b.label)));
                }
                measured.push((b.label, h / unit));
            }
            match format {
                ChartFormat::Csv => {
                    let mut s = "category,value".to_string();
                    for (l, v) in &measured {
                        s += &format!("\n{l},{v}");
                    }
                    s
                }
                ChartFormat::Markdown => {
                    let body: Vec<Vec<String>> = measured.iter().map(|(l, v)| vec![l.to_string(), v.to_string()]).collect();
                    pipe_table(&["category".into(), "value".into()], &body)
                }
                ChartFormat::Json => {
                    let recs: Vec<String> =
                        measured.iter().map(|(l, v)| format!("{{\"category\":\"{l}\",\"value\":{v}}}")).collect();
                    format!("[{}]", recs.join(","))
                }
            }
        }
        Truth::Kie { pairs, query } => {
            let (key, value) = pairs.get(*query).ok_or_else(|| fail(id, "query out of range"))?;
            if !sample.prompt.contains(&format!("the {key}?")) {
                return Err(fail(id, "prompt does not name the queried key"));
            }
            value.clone()
        }
        Truth::Table { grid, question, .. } => match *question {
            TableQuestion::Cell { row, col } => format!("{}", grid.rows[row][col]),
            TableQuestion::ColumnSum { col } => {
                let mut total = 0;
                for r in &grid.rows {
                    total += r[col];
                }
                format!("{total}")
            }
            TableQuestion::Summary => {
                let mut parts = Vec::new();
                for (c, h) in grid.header.iter().enumerate() {
                    let mut m = 0;
                    for r in &grid.rows {
                        m = m.max(r[c]);
                    }
                    parts.push(format!("{h}={m}"));
                }
                format!("Maximum values: {}.", parts.join(", "))
            }
        },
        Truth::Text(TextTask::Copy(s)) => s.clone(),
        Truth::Text(TextTask::Add(a, b)) => format!("{}", a + b),
    })
}

/// Checks that every ink pixel of each placed word sits inside that word's
/// instance box and that the words account for every ink pixel in the
/// image. Returns the number of instances checked.
pub fn check_glyphs_in_boxes(sample: &Sample) -> Result<usize> {
    let id = sample.id.as_str();
    let Truth::Words { words, .. } = &sample.truth else {
        return Ok(0);
    };
    let img = sample.image.as_ref().ok_or_else(|| fail(id, "image missing"))?;
    let (_, ink) = sample.palette;
    let mut covered = vec![false; img.width * img.height];
    // Instances are stored in placement order, one per word.
    let boxes = sample.instances.as_ref();
    if boxes.is_some_and(|b| b.len() != words.len()) {
        return Err(fail(id, "one instance per word expected"));
    }
    for (i, w) in words.iter().enumerate() {
        for (x, y) in glyph_pixels(&w.rendered, w.x, w.y, w.scale) {
            if x >= img.width || y >= img.height || img.get(x, y) != ink {
                return Err(fail(id, format!("glyph pixel ({x}, {y}) of {:?} is not inked", w.rendered)));
            }
            if let Some(b) = &boxes {
                let t = &b[i];
                let (fx, fy) = (x as f64, y as f64);
                if !(fx >= t.x1 && fx < t.x2 && fy >= t.y1 && fy < t.y2) {
                    return Err(fail(id, format!("glyph pixel ({x}, {y}) of {:?} lies outside its box", w.rendered)));
                }
            }
            covered[y * img.width + x] = true;
        }
    }
    for y in 0..img.height {
        for x in 0..img.width {
            if img.get(x, y) == ink && !covered[y * img.width + x] {
                return Err(fail(id, format!("ink pixel ({x}, {y}) belongs to no word")));
            }
        }
    }
    Ok(boxes.map_or(0, |b| b.len()))
}

/// Full soundness check of one sample: recomputed target, family-specific
/// shape constraints and the glyph-box invariant.
pub fn check_sample(sample: &Sample, config: &GeneratorConfig) -> Result<()> {
    let id = sample.id.as_str();
    let expected = expected_target(sample, config)?;
    if expected != sample.target {
        return Err(fail(id, format!("target {:?} differs from recomputed {expected:?}", sample.target)));
    }
    match (&sample.image, sample.family) {
        (None, Family::PureText) => {}
        (Some(img), f) if f != Family::PureText => {
            if img.width != config.image_size || img.height != config.image_size || img.channels != 3 {
                return Err(fail(id, "image has the wrong shape"));
            }
        }
        _ => return Err(fail(id, "image presence does not match the family")),
    }
    if let Some(inst) = &sample.instances {
        let words = match &sample.truth {
            Truth::Words { words, .. } => words.len(),
            _ => return Err(fail(id, "instances on a non-word sample")),
        };
        if inst.len() != words {
            return Err(fail(id, "one instance per word expected"));
        }
        let s = config.image_size as f64;
        for t in inst {
            t.validate_within(s, s).map_err(|e| fail(id, e))?;
        }
    }
    if sample.family == Family::Spotting && sample.instances.is_none() {
        return Err(fail(id, "spotting sample without instances"));
    }
    check_glyphs_in_boxes(sample)?;
    Ok(())
}
