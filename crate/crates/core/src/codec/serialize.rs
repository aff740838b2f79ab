//! Token-level format for text instances:
//! `<pos_x1><pos_y1><pos_x2><pos_y2><ref>transcription</ref>`, one token per
//! coordinate, instances concatenated in reading order.

use serde::{Deserialize, Serialize};

use super::instance::{reading_order_sort, TextInstance};
use super::vocab::{Control, Token, Vocab};
use crate::error::{Error, Result};

/// `min(floor(v / extent * bins), bins - 1)`.
pub fn quantize_coord(v: f64, extent: f64, bins: u32) -> Result<u32> {
    if bins < 2 {
        return Err(Error::Config(format!("coordinate bins must be >= 2, got {bins}")));
    }
    if !(extent > 0.0) || !(0.0..=extent).contains(&v) {
        return Err(Error::Range { value: v, extent });
    }
    let idx = (v / extent * bins as f64).floor() as u32;
    Ok(idx.min(bins - 1))
}

/// Centre of bin `index`, in pixels.
pub fn dequantize_coord(index: u32, extent: f64, bins: u32) -> f64 {
    (index as f64 + 0.5) / bins as f64 * extent
}

/// Serializes instances after sorting them into reading order.
pub fn serialize_instances(instances: &[TextInstance], img_w: f64, img_h: f64, vocab: &Vocab) -> Result<Vec<u32>> {
    let bins = vocab.bins();
    let mut out = Vec::new();
    for inst in reading_order_sort(instances) {
        inst.validate()?;
        out.push(vocab.id_of(Token::PosX(quantize_coord(inst.x1, img_w, bins)?))?);
        out.push(vocab.id_of(Token::PosY(quantize_coord(inst.y1, img_h, bins)?))?);
        out.push(vocab.id_of(Token::PosX(quantize_coord(inst.x2, img_w, bins)?))?);
        out.push(vocab.id_of(Token::PosY(quantize_coord(inst.y2, img_h, bins)?))?);
        out.push(vocab.control(Control::Ref));
        out.extend(inst.transcription.bytes().map(u32::from));
        out.push(vocab.control(Control::RefEnd));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticKind {
    /// Stream ended (or an end-of-sequence token arrived) inside an instance.
    TruncatedInstance,
    /// `<ref>` or `</ref>` without the coordinates that must precede it.
    OrphanRef,
    /// A token of the wrong class where a coordinate was required.
    NonCoordinateWhereExpected,
    /// Syntactically complete instance whose box or text is unusable.
    InvalidInstance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    /// Token offset where the problem was detected.
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    X1,
    Y1,
    X2,
    Y2,
    Ref,
    Text,
}

/// Greedy left-to-right parse. Never fails: malformed fragments are dropped
/// and reported.
pub fn parse_instances(ids: &[u32], vocab: &Vocab, img_w: f64, img_h: f64) -> (Vec<TextInstance>, Vec<Diagnostic>) {
    let bins = vocab.bins();
    let mut instances = Vec::new();
    let mut diags = Vec::new();
    let mut state = Expect::X1;
    let mut coords = [0u32; 4];
    let mut text: Vec<u8> = Vec::new();
    let mut diag = |kind, position| diags.push(Diagnostic { kind, position });

    let mut pos = 0;
    while pos < ids.len() {
        let tok = vocab.token_of(ids[pos]).ok();
        let mid_instance = state != Expect::X1;
        match (state, tok) {
            (_, Some(Token::Control(Control::Eos))) => {
                if mid_instance {
                    diag(DiagnosticKind::TruncatedInstance, pos);
                }
                state = Expect::X1;
                break;
            }
            (_, Some(Token::Control(Control::Pad | Control::Bos))) if !matches!(state, Expect::Text) => {}
            (Expect::X1, Some(Token::PosX(v))) => {
                coords[0] = v;
                state = Expect::Y1;
            }
            (Expect::Y1, Some(Token::PosY(v))) => {
                coords[1] = v;
                state = Expect::X2;
            }
            (Expect::X2, Some(Token::PosX(v))) => {
                coords[2] = v;
                state = Expect::Y2;
            }
            (Expect::Y2, Some(Token::PosY(v))) => {
                coords[3] = v;
                state = Expect::Ref;
            }
            (Expect::Ref, Some(Token::Control(Control::Ref))) => {
                text.clear();
                state = Expect::Text;
            }
            (Expect::Text, Some(Token::Byte(b))) => text.push(b),
            (Expect::Text, Some(Token::Control(Control::RefEnd))) => {
                let inst = TextInstance {
                    x1: dequantize_coord(coords[0], img_w, bins),
                    y1: dequantize_coord(coords[1], img_h, bins),
                    x2: dequantize_coord(coords[2], img_w, bins),
                    y2: dequantize_coord(coords[3], img_h, bins),
                    transcription: String::from_utf8_lossy(&text).into_owned(),
                };
                if inst.validate().is_ok() {
                    instances.push(inst);
                } else {
                    diag(DiagnosticKind::InvalidInstance, pos);
                }
                state = Expect::X1;
            }
            (Expect::Text, _) => {
                // Anything but a byte or </ref> cuts the transcription short;
                // re-read this token as the start of something new.
                diag(DiagnosticKind::TruncatedInstance, pos);
                state = Expect::X1;
                continue;
            }
            (_, Some(Token::Control(Control::Ref | Control::RefEnd))) => {
                diag(DiagnosticKind::OrphanRef, pos);
                state = Expect::X1;
            }
            (_, Some(Token::PosX(_))) if mid_instance => {
                // A fresh x coordinate restarts the instance.
                diag(DiagnosticKind::NonCoordinateWhereExpected, pos);
                state = Expect::X1;
                continue;
            }
            (_, _) => {
                diag(DiagnosticKind::NonCoordinateWhereExpected, pos);
                state = Expect::X1;
            }
        }
        pos += 1;
    }
    if state != Expect::X1 {
        diag(DiagnosticKind::TruncatedInstance, ids.len());
    }
    (instances, diags)
}
