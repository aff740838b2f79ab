//! JSONL dataset records and their conversion to model examples.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_text, parse_markup, PromptTask, TextInstance, Vocab};
use crate::error::{Error, Result};
use crate::model::Example;
use crate::synth::{Image, Sample};
use crate::tensor::Real;

/// Prefix marking an inline image; anything else is a path relative to the
/// dataset file.
pub const INLINE_IMAGE_PREFIX: &str = "data:image/x-portable-anymap;base64,";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub task: PromptTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub prompt: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<TextInstance>>,
    /// Image extent, needed to read coordinate tokens back into pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
}

impl DatasetRecord {
    /// Record for `sample` with its image referenced by `image` (a relative
    /// path or an inline string from [`inline_image`]).
    pub fn from_sample(sample: &Sample, image: Option<String>) -> Self {
        DatasetRecord {
            id: sample.id.clone(),
            task: sample.task,
            image,
            prompt: sample.prompt.clone(),
            target: sample.target.clone(),
            instances: sample.instances.clone(),
            width: sample.image.as_ref().map(|i| i.width),
            height: sample.image.as_ref().map(|i| i.height),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Contract("record without id".into()));
        }
        if self.instances.is_some() != self.task.emits_instances() {
            return Err(Error::Contract(format!(
                "record {}: instances must be present exactly for instance-emitting tasks",
                self.id
            )));
        }
        if let Some(inst) = &self.instances {
            for t in inst {
                match (self.width, self.height) {
                    (Some(w), Some(h)) => t.validate_within(w as f64, h as f64)?,
                    _ => t.validate()?,
                }
            }
        }
        Ok(())
    }

    /// Decodes the referenced image; paths resolve against `base`.
    pub fn load_image(&self, base: &Path) -> Result<Option<Image>> {
        let Some(src) = &self.image else { return Ok(None) };
        let img = if let Some(b64) = src.strip_prefix(INLINE_IMAGE_PREFIX) {
            let bytes = STANDARD
                .decode(b64)
                .map_err(|e| Error::Encoding(format!("record {}: bad inline image: {e}", self.id)))?;
            Image::from_pnm(&bytes)?
        } else {
            Image::load(&base.join(src))?
        };
        if self.width.is_some_and(|w| w != img.width) || self.height.is_some_and(|h| h != img.height) {
            return Err(Error::Contract(format!("record {}: image size differs from the record", self.id)));
        }
        Ok(Some(img))
    }

    /// Pixel extent for coordinate decoding.
    pub fn extent(&self) -> Option<(f64, f64)> {
        Some((self.width? as f64, self.height? as f64))
    }
}

pub fn inline_image(img: &Image) -> String {
    format!("{INLINE_IMAGE_PREFIX}{}", STANDARD.encode(img.to_pnm()))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Lines of a JSONL file that parse as `T`, plus how many did not. Blank
/// lines are ignored.
pub fn read_jsonl_lenient<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<T>, usize)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut bad = 0;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => items.push(v),
            Err(_) => bad += 1,
        }
    }
    Ok((items, bad))
}

/// A dataset file loaded strictly: every record must parse and validate,
/// and ids must be unique.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub path: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord = serde_json::from_str(line)
                .map_err(|e| Error::Encoding(format!("{}:{}: {e}", path.display(), n + 1)))?;
            r.validate()?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::Contract(format!("duplicate record id {}", r.id)));
            }
            records.push(r);
        }
        Ok(Dataset { path: path.to_path_buf(), records })
    }

    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }
}

/// A record ready for training: decoded image and token ids.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub task: PromptTask,
    pub image: Option<Image>,
    pub prompt_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
}

impl TrainItem {
    pub fn from_record(record: &DatasetRecord, base: &Path, vocab: &Vocab) -> Result<Self> {
        Ok(TrainItem {
            id: record.id.clone(),
            task: record.task,
            image: record.load_image(base)?,
            prompt_ids: encode_text(&record.prompt),
            response_ids: parse_markup(&record.target, vocab)?,
        })
    }

    /// Example at image side `size` (halving the stored image as needed).
    pub fn example<R: Real>(&self, size: usize) -> Result<Example<R>> {
        let image = match &self.image {
            Some(img) if img.width == size => Some(img.to_tensor()),
            Some(img) => Some(img.downsample_to(size)?.to_tensor()),
            None => None,
        };
        Ok(Example { image, prompt_ids: self.prompt_ids.clone(), response_ids: self.response_ids.clone() })
    }
}

pub fn load_items(dataset: &Dataset, vocab: &Vocab) -> Result<Vec<TrainItem>> {
    dataset.records.iter().map(|r| TrainItem::from_record(r, dataset.base_dir(), vocab)).collect()
}
