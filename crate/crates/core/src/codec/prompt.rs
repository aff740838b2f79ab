use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instruction families, each with one fixed prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    Spotting,
    DocParse,
    ChartParse,
    Kie,
    DocVqa,
    TableQa,
    Translate,
    DetectTranslate,
    DetectRecognizeTranslate,
    PureText,
}

impl PromptTask {
    pub const ALL: [PromptTask; 10] = [
        PromptTask::Spotting,
        PromptTask::DocParse,
        PromptTask::ChartParse,
        PromptTask::Kie,
        PromptTask::DocVqa,
        PromptTask::TableQa,
        PromptTask::Translate,
        PromptTask::DetectTranslate,
        PromptTask::DetectRecognizeTranslate,
        PromptTask::PureText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptTask::Spotting => "spotting",
            PromptTask::DocParse => "doc_parse",
            PromptTask::ChartParse => "chart_parse",
            PromptTask::Kie => "kie",
            PromptTask::DocVqa => "doc_vqa",
            PromptTask::TableQa => "table_qa",
            PromptTask::Translate => "translate",
            PromptTask::DetectTranslate => "detect_translate",
            PromptTask::DetectRecognizeTranslate => "detect_recognize_translate",
            PromptTask::PureText => "pure_text",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            PromptTask::Spotting => "Detect and recognize text in image",
            PromptTask::DocParse => "Convert the textual content of the image into markdown.",
            PromptTask::ChartParse => "Convert the chart of the image into {format}",
            PromptTask::Kie => "What is the value of the {key}?",
            PromptTask::DocVqa | PromptTask::TableQa => "{question}",
            PromptTask::Translate => "Translate the text in the image into {language}.",
            PromptTask::DetectTranslate => "Detect and translate the text in the image into {language}.",
            PromptTask::DetectRecognizeTranslate => {
                "Detect, recognize, and translate the text in the image into {language}."
            }
            PromptTask::PureText => "{text}",
        }
    }

    /// Whether the expected answer uses the coordinate-token instance format.
    pub fn emits_instances(self) -> bool {
        matches!(
            self,
            PromptTask::Spotting | PromptTask::DetectTranslate | PromptTask::DetectRecognizeTranslate
        )
    }
}

impl fmt::Display for PromptTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptTask::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = PromptTask::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown task {s:?}; valid tasks: {}", valid.join(", ")))
        })
    }
}

/// Substitutes every `{name}` placeholder from `params`. Substituted text is
/// not rescanned.
pub fn render_template(template: &str, params: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed placeholder in {template:?}")))?;
        let key = &rest[open + 1..open + close];
        let value = params
            .get(key)
            .ok_or_else(|| Error::Template(format!("no binding for placeholder {{{key}}}")))?;
        out.push_str(value);
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn build_prompt(task: PromptTask, params: &BTreeMap<String, String>) -> Result<String> {
    render_template(task.template(), params)
}

/// Convenience for the common single-binding case.
pub fn build_prompt_with(task: PromptTask, bindings: &[(&str, &str)]) -> Result<String> {
    let params = bindings
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    build_prompt(task, &params)
}
