//! Prompt assembly, length admission, and tagged-output parsing.
//!
//! A prompt is four sections in fixed order: schema DDL, external knowledge,
//! the natural-language question, and the response format instruction.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

pub const DDL_HEADER: &str = "### Database Schema";
pub const KNOWLEDGE_HEADER: &str = "### External Knowledge";
pub const QUESTION_HEADER: &str = "### Question";
pub const FORMAT_HEADER: &str = "### Response Format";
pub const EMPTY_KNOWLEDGE: &str = "External Knowledge: (none)";

/// Default format instruction. `{reasoning}` and `{answer}` are replaced by the
/// tag names.
pub const DEFAULT_TEMPLATE: &str = "Think step by step inside <{reasoning}></{reasoning}> tags, \
then give the final SQL query inside <{answer}></{answer}> tags:\n\
<{reasoning}>...</{reasoning}><{answer}>...</{answer}>";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("record {0} has an empty schema")]
    EmptySchema(String),
    #[error("record {0} has an empty question")]
    EmptyQuestion(String),
    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One Text-to-SQL training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Stable identifier; filled from the line number when absent in the file.
    #[serde(default)]
    pub id: String,
    pub db_id: String,
    pub ddl: Vec<String>,
    #[serde(default)]
    pub knowledge: Option<String>,
    pub question: String,
    pub gold_sql: String,
    /// Optional stratification label (e.g. "simple", "join").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.ddl.iter().all(|d| d.trim().is_empty()) {
            return Err(PromptError::EmptySchema(self.id.clone()));
        }
        if self.question.trim().is_empty() {
            return Err(PromptError::EmptyQuestion(self.id.clone()));
        }
        Ok(())
    }
}

/// Reads line-delimited JSON records. Blank lines are skipped; records without
/// an `id` get `"<db_id>#<line>"`.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, PromptError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|source| PromptError::Parse { line: idx + 1, source })?;
        if rec.id.is_empty() {
            rec.id = format!("{}#{}", rec.db_id, idx + 1);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Counts tokens in a piece of text.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Splits on Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Format instruction with `{reasoning}` / `{answer}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatTemplate {
    raw: String,
}

impl FormatTemplate {
    pub fn new(raw: impl Into<String>) -> Result<Self, PromptError> {
        let raw = raw.into();
        if !raw.contains("{reasoning}") {
            return Err(PromptError::MissingPlaceholder("{reasoning}"));
        }
        if !raw.contains("{answer}") {
            return Err(PromptError::MissingPlaceholder("{answer}"));
        }
        Ok(Self { raw })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Self::new(fs::read_to_string(path)?)
    }

    pub fn render(&self, reasoning_tag: &str, answer_tag: &str) -> String {
        self.raw
            .replace("{reasoning}", reasoning_tag)
            .replace("{answer}", answer_tag)
    }
}

impl Default for FormatTemplate {
    fn default() -> Self {
        Self { raw: DEFAULT_TEMPLATE.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub token_count: usize,
    pub record_ref: String,
}

/// Assembles the four-section prompt for `record`.
pub fn build_prompt(
    record: &DatasetRecord,
    template: &FormatTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<Prompt, PromptError> {
    record.validate()?;
    let mut text = String::new();
    text.push_str(DDL_HEADER);
    text.push('\n');
    for ddl in &record.ddl {
        text.push_str(ddl.trim_end());
        text.push('\n');
    }
    text.push('\n');
    text.push_str(KNOWLEDGE_HEADER);
    text.push('\n');
    match record.knowledge.as_deref().map(str::trim) {
        Some(k) if !k.is_empty() => text.push_str(k),
        _ => text.push_str(EMPTY_KNOWLEDGE),
    }
    text.push_str("\n\n");
    text.push_str(QUESTION_HEADER);
    text.push('\n');
    text.push_str(record.question.trim());
    text.push_str("\n\n");
    text.push_str(FORMAT_HEADER);
    text.push('\n');
    text.push_str(&template.render("reasoning", "answer"));
    text.push('\n');

    let token_count = tokenizer.count(&text);
    Ok(Prompt { text, token_count, record_ref: record.id.clone() })
}

/// Keeps prompts with `token_count <= max_tokens`, preserving order.
pub fn filter_by_length(prompts: Vec<Prompt>, max_tokens: usize) -> (Vec<Prompt>, usize) {
    assert!(max_tokens > 0, "max_tokens must be positive");
    let before = prompts.len();
    let kept: Vec<Prompt> = prompts.into_iter().filter(|p| p.token_count <= max_tokens).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedOutput {
    pub reasoning: String,
    pub answer: String,
    pub strict_match: bool,
    pub soft_match: bool,
}

static STRICT: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?s)\A\s*<reasoning>(.*?)</reasoning>\s*<answer>(.*?)</answer>\s*\z").unwrap()
});
static REASONING: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?s)<reasoning>(.*?)</reasoning>").unwrap());
static ANSWER: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap());

/// Splits a model output into reasoning and answer parts.
///
/// Strict: the whole output (modulo surrounding whitespace) is a reasoning pair
/// followed by an answer pair. Soft: a complete reasoning pair occurs somewhere
/// before a complete answer pair.
pub fn parse_tagged_output(text: &str) -> TaggedOutput {
    let reasoning_m = REASONING.captures(text);
    let answer_m = ANSWER.captures(text);

    let answer = answer_m
        .as_ref()
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default();
    let reasoning = reasoning_m
        .as_ref()
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default();

    let soft_match = match &reasoning_m {
        Some(r) => {
            let end = r.get(0).unwrap().end();
            ANSWER.is_match(&text[end..])
        }
        None => false,
    };

    let strict_match = soft_match
        && STRICT
            .captures(text)
            .map(|c| !c[1].contains("<reasoning>") && !c[2].contains("<answer>"))
            .unwrap_or(false);

    TaggedOutput { reasoning, answer, strict_match, soft_match }
}
