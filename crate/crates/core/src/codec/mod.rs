//! Vocabulary with coordinate tokens, text-instance serialization, reading
//! order and prompt templates.

mod instance;
mod prompt;
mod serialize;
mod text;
mod vocab;

pub use instance::{reading_order_sort, TextInstance, LINE_OVERLAP};
pub use prompt::{build_prompt, build_prompt_with, render_template, PromptTask};
pub use serialize::{
    dequantize_coord, parse_instances, quantize_coord, serialize_instances, Diagnostic, DiagnosticKind,
};
pub use text::{decode_text, encode_text, parse_markup};
pub use vocab::{Control, Token, Vocab, DEFAULT_BINS, FULL_SCALE_VOCAB_SIZE};
