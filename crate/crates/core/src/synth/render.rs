use super::font::{ink, text_width, ADVANCE, GLYPH_H, GLYPH_W};
use super::image::{Image, Rgb};

/// Draws `s` with its first glyph cell at `(x, y)`. Pixels outside the
/// image are clipped.
pub fn draw_text(img: &mut Image, s: &str, x: usize, y: usize, scale: usize, color: Rgb) {
    for (i, c) in s.chars().enumerate() {
        let cx = x + i * ADVANCE * scale;
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if ink(c, col, row) {
                    img.fill_rect(cx + col * scale, y + row * scale, scale, scale, color);
                }
            }
        }
    }
}

/// Tight pixel box `(x1, y1, x2, y2)` (exclusive end) around the inked
/// pixels of `s` drawn at `(x, y)`; `None` if nothing is inked.
pub fn ink_box(s: &str, x: usize, y: usize, scale: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, c) in s.chars().enumerate() {
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if ink(c, col, row) {
                    let px = x + (i * ADVANCE + col) * scale;
                    let py = y + row * scale;
                    let (x2, y2) = (px + scale, py + scale);
                    b = Some(match b {
                        None => (px, py, x2, y2),
                        Some((a, b1, c1, d)) => (a.min(px), b1.min(py), c1.max(x2), d.max(y2)),
                    });
                }
            }
        }
    }
    b
}

/// Cell rectangle `(x, y, w, h)` occupied by `s` at `scale`.
pub fn text_cell(s: &str, x: usize, y: usize, scale: usize) -> (usize, usize, usize, usize) {
    (x, y, text_width(s, scale), GLYPH_H * scale)
}

pub const CELL_W: usize = 9;
pub const CELL_H: usize = 10;

/// Pixel size of a grid with `rows` text rows (header included) and `cols`
/// columns of single-character cells.
pub fn grid_size(rows: usize, cols: usize) -> (usize, usize) {
    (cols * CELL_W + 1, rows * CELL_H + 1)
}

/// Draws ruled single-character cells; `cells[r][c]` is one character.
pub fn draw_grid(img: &mut Image, x: usize, y: usize, cells: &[Vec<String>], color: Rgb) {
    let rows = cells.len();
    let cols = cells.first().map_or(0, Vec::len);
    let (w, h) = grid_size(rows, cols);
    for r in 0..=rows {
        img.fill_rect(x, y + r * CELL_H, w, 1, color);
    }
    for c in 0..=cols {
        img.fill_rect(x + c * CELL_W, y, 1, h, color);
    }
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            draw_text(img, cell, x + c * CELL_W + 3, y + r * CELL_H + 2, 1, color);
        }
    }
}
