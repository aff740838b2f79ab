use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of coordinate bins per axis (thousandth precision).
pub const DEFAULT_BINS: u32 = 1000;

/// Vocabulary size of the full-scale tokenizer; kept for reference only.
pub const FULL_SCALE_VOCAB_SIZE: usize = 160_000;

const BYTE_COUNT: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Control {
    Ref,
    RefEnd,
    Bos,
    Eos,
    Pad,
}

impl Control {
    pub const ALL: [Control; 5] = [Control::Ref, Control::RefEnd, Control::Bos, Control::Eos, Control::Pad];

    pub fn text(self) -> &'static str {
        match self {
            Control::Ref => "<ref>",
            Control::RefEnd => "</ref>",
            Control::Bos => "<bos>",
            Control::Eos => "<eos>",
            Control::Pad => "<pad>",
        }
    }

    fn offset(self) -> u32 {
        Control::ALL.iter().position(|&c| c == self).unwrap() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Byte(u8),
    Control(Control),
    PosX(u32),
    PosY(u32),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Byte(b) => write!(f, "<0x{b:02X}>"),
            Token::Control(c) => f.write_str(c.text()),
            Token::PosX(i) => write!(f, "<pos_x_{i}>"),
            Token::PosY(i) => write!(f, "<pos_y_{i}>"),
        }
    }
}

/// Token table laid out as: 256 byte tokens, 5 control tokens, then the
/// x-coordinate bins, then the y-coordinate bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    bins: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { bins: DEFAULT_BINS }
    }
}

impl Vocab {
    pub fn new(bins: u32) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("coordinate bins must be >= 2, got {bins}")));
        }
        Ok(Vocab { bins })
    }

    pub fn bins(&self) -> u32 {
        self.bins
    }

    pub fn size(&self) -> usize {
        (BYTE_COUNT + Control::ALL.len() as u32 + 2 * self.bins) as usize
    }

    fn control_base(&self) -> u32 {
        BYTE_COUNT
    }

    fn pos_x_base(&self) -> u32 {
        BYTE_COUNT + Control::ALL.len() as u32
    }

    fn pos_y_base(&self) -> u32 {
        self.pos_x_base() + self.bins
    }

    pub fn pos_x_range(&self) -> std::ops::Range<u32> {
        self.pos_x_base()..self.pos_y_base()
    }

    pub fn pos_y_range(&self) -> std::ops::Range<u32> {
        self.pos_y_base()..self.pos_y_base() + self.bins
    }

    pub fn control(&self, c: Control) -> u32 {
        self.control_base() + c.offset()
    }

    pub fn bos(&self) -> u32 {
        self.control(Control::Bos)
    }

    pub fn eos(&self) -> u32 {
        self.control(Control::Eos)
    }

    pub fn id_of(&self, token: Token) -> Result<u32> {
        match token {
            Token::Byte(b) => Ok(b as u32),
            Token::Control(c) => Ok(self.control(c)),
            Token::PosX(i) | Token::PosY(i) if i >= self.bins => Err(Error::Vocabulary {
                id: i as usize,
                size: self.bins as usize,
            }),
            Token::PosX(i) => Ok(self.pos_x_base() + i),
            Token::PosY(i) => Ok(self.pos_y_base() + i),
        }
    }

    pub fn token_of(&self, id: u32) -> Result<Token> {
        let n_ctrl = Control::ALL.len() as u32;
        match id {
            _ if id < BYTE_COUNT => Ok(Token::Byte(id as u8)),
            _ if id < BYTE_COUNT + n_ctrl => Ok(Token::Control(Control::ALL[(id - BYTE_COUNT) as usize])),
            _ if self.pos_x_range().contains(&id) => Ok(Token::PosX(id - self.pos_x_base())),
            _ if self.pos_y_range().contains(&id) => Ok(Token::PosY(id - self.pos_y_base())),
            _ => Err(Error::Vocabulary {
                id: id as usize,
                size: self.size(),
            }),
        }
    }

    /// Text manifest: a header declaring the token ranges, then one token per
    /// line in id order.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        s.push_str("# stxv3-vocab 1\n");
        s.push_str(&format!("# size {}\n", self.size()));
        s.push_str(&format!("# bytes {} {}\n", 0, BYTE_COUNT));
        s.push_str(&format!("# control {} {}\n", self.control_base(), Control::ALL.len()));
        s.push_str(&format!("# pos_x {} {}\n", self.pos_x_base(), self.bins));
        s.push_str(&format!("# pos_y {} {}\n", self.pos_y_base(), self.bins));
        s.push_str("# end\n");
        for id in 0..self.size() as u32 {
            s.push_str(&self.token_of(id).expect("id in range").to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("vocab manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("# stxv3-vocab 1") {
            return Err(bad("missing magic line"));
        }
        let mut bins = None;
        for line in lines.by_ref() {
            if line == "# end" {
                break;
            }
            let parts: Vec<&str> = line.trim_start_matches("# ").split_whitespace().collect();
            if parts.first() == Some(&"pos_x") {
                bins = parts.get(2).and_then(|v| v.parse::<u32>().ok());
            }
        }
        let vocab = Vocab::new(bins.ok_or_else(|| bad("no pos_x range"))?)?;
        let body: Vec<&str> = lines.collect();
        if body.len() != vocab.size() {
            return Err(bad(&format!("expected {} tokens, found {}", vocab.size(), body.len())));
        }
        for (id, line) in body.iter().enumerate() {
            if *line != vocab.token_of(id as u32)?.to_string() {
                return Err(bad(&format!("token {id} is {line:?}")));
            }
        }
        if text != vocab.manifest() {
            return Err(bad("header does not match the token layout"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(&text)
    }
}
