use super::vocab::{Control, Token, Vocab};
use crate::error::{Error, Result};

/// Byte-level encoding; every byte of `s` becomes one token.
pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

/// Inverse of [`encode_text`]. Control and coordinate tokens are rendered as
/// bracketed escapes such as `<ref>` or `<pos_x_12>`; invalid UTF-8 is
/// replaced lossily.
pub fn decode_text(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &id in ids {
        match vocab.token_of(id) {
            Ok(Token::Byte(b)) => bytes.push(b),
            Ok(tok) => {
                flush(&mut bytes, &mut out);
                out.push_str(&tok.to_string());
            }
            Err(_) => {
                flush(&mut bytes, &mut out);
                out.push_str(&format!("<unk_{id}>"));
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// Parses text produced by [`decode_text`] back into ids, turning the
/// control and coordinate escapes into their tokens. Everything else is
/// byte-encoded, so text must not itself contain those escapes.
pub fn parse_markup(s: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(s.len());
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(len) = s[i..].find('>') {
                if let Some(tok) = escape_token(&s[i..i + len + 1]) {
                    ids.push(vocab.id_of(tok).map_err(|_| {
                        Error::Encoding(format!("coordinate escape {} outside vocabulary", &s[i..i + len + 1]))
                    })?);
                    i += len + 1;
                    continue;
                }
            }
        }
        ids.push(bytes[i] as u32);
        i += 1;
    }
    Ok(ids)
}

fn escape_token(s: &str) -> Option<Token> {
    if let Some(c) = Control::ALL.iter().find(|c| c.text() == s) {
        return Some(Token::Control(*c));
    }
    let inner = s.strip_prefix('<')?.strip_suffix('>')?;
    let num = |p: &str| -> Option<u32> {
        let digits = inner.strip_prefix(p)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok()
    };
    num("pos_x_")
        .map(Token::PosX)
        .or_else(|| num("pos_y_").map(Token::PosY))
}
