//! Demonstration prompt rendering and reply parsing.
//!
//! Each demonstration is an image followed by a question block that already
//! carries its answer; the query image is followed by the same question and
//! a format template the model is asked to fill in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::Task;
use crate::retriever::DemoExample;

pub const ANSWER_MARKER: &str = "Answer Choice:";
pub const CONFIDENCE_MARKER: &str = "Confidence Score:";
pub const CHOICES_MARKER: &str = "Choices:";
pub const TEMPLATE_BEGIN: &str = "---BEGIN FORMAT TEMPLATE---";
pub const TEMPLATE_END: &str = "---END FORMAT TEMPLATE---";
pub const IMAGE_PLACEHOLDER: &str = "<<IMG>>";

const PREAMBLE: &str = "Given the image above, answer the following question-\n\
using the specified format.\n\
\n\
Question: What is in the image above?\n";

const QUERY_INSTRUCTIONS: &str = "Please respond with the following format:\n\
---BEGIN FORMAT TEMPLATE---\n\
Answer Choice: [Your Answer Choice Here]\n\
Confidence Score: [Your Numerical Prediction Confidence Score Here From 0 To 1]\n\
---END FORMAT TEMPLATE---\n\
Do not deviate from the above format. Repeat the format template for the answer.";

/// Separator used for multi-label answers, both in demo blocks and replies.
pub const MULTI_LABEL_SEPARATOR: &str = ", ";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("class vocabulary is empty")]
    EmptyClassNames,
    #[error("reply has no `Answer Choice:` line")]
    Format { raw: String },
    #[error("answer {choice:?} is not in the class vocabulary")]
    UnknownChoice { choice: String, raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPart {
    ImageRef(String),
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub parts: Vec<PromptPart>,
}

impl PromptDocument {
    pub fn image_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, PromptPart::ImageRef(_)))
            .count()
    }

    /// Flattens the document to one string with `<<IMG>>` standing in for
    /// each image part.
    pub fn to_marked_text(&self) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                PromptPart::ImageRef(_) => IMAGE_PLACEHOLDER,
                PromptPart::Text(t) => t.as_str(),
            })
            .collect()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Text(t) => Some(t.as_str()),
            PromptPart::ImageRef(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub choices: Vec<String>,
    pub confidence: Option<f64>,
    pub raw: String,
}

/// Renders `names` the way Python's `str(list)` would.
pub fn format_class_list(names: &[String]) -> String {
    let items: Vec<String> = names.iter().map(|n| python_str_repr(n)).collect();
    format!("[{}]", items.join(", "))
}

fn python_str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Inverse of [`format_class_list`]. Returns `None` on malformed input.
pub fn parse_class_list(s: &str) -> Option<Vec<String>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    let mut out = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let quote = match chars.next() {
            None => break,
            Some(q @ ('\'' | '"')) => q,
            Some(_) => return None,
        };
        let mut item = String::new();
        loop {
            match chars.next()? {
                '\\' => match chars.next()? {
                    'n' => item.push('\n'),
                    'r' => item.push('\r'),
                    't' => item.push('\t'),
                    c => item.push(c),
                },
                c if c == quote => break,
                c => item.push(c),
            }
        }
        out.push(item);
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => break,
            Some(',') => continue,
            Some(_) => return None,
        }
    }
    Some(out)
}

/// How a demo's labels appear after `Answer Choice:`.
pub fn answer_text(labels: &[String]) -> String {
    labels.join(MULTI_LABEL_SEPARATOR)
}

pub fn render_prompt(
    demos: &[DemoExample],
    class_names: &[String],
    query_image: &str,
) -> Result<PromptDocument, PromptError> {
    if class_names.is_empty() {
        return Err(PromptError::EmptyClassNames);
    }
    let choices = format_class_list(class_names);
    let mut parts = Vec::with_capacity(2 * demos.len() + 2);
    for demo in demos {
        parts.push(PromptPart::ImageRef(demo.entry.image_ref.clone()));
        parts.push(PromptPart::Text(format!(
            "{PREAMBLE}{CHOICES_MARKER} {choices}\n{ANSWER_MARKER} {}\n",
            answer_text(&demo.entry.labels)
        )));
    }
    parts.push(PromptPart::ImageRef(query_image.to_string()));
    parts.push(PromptPart::Text(format!(
        "{PREAMBLE}{CHOICES_MARKER} {choices}\n{QUERY_INSTRUCTIONS}"
    )));
    Ok(PromptDocument { parts })
}

fn match_class<'a>(choice: &str, class_names: &'a [String]) -> Option<&'a String> {
    class_names
        .iter()
        .find(|c| c.as_str() == choice)
        .or_else(|| {
            class_names
                .iter()
                .find(|c| c.to_lowercase() == choice.to_lowercase())
        })
}

fn value_after_last<'a>(raw: &'a str, marker: &str) -> Option<&'a str> {
    let start = raw.rfind(marker)? + marker.len();
    let rest = &raw[start..];
    Some(rest.split(['\n', '\r']).next().unwrap_or(""))
}

/// Extracts the answer from a generator reply.
///
/// Uses the last `Answer Choice:` line, since replies may echo the template.
/// Multi-label answers are comma separated. Vocabulary matching is exact
/// after trimming, falling back to case-insensitive.
pub fn parse_answer(
    raw: &str,
    class_names: &[String],
    task: Task,
) -> Result<ParsedAnswer, PromptError> {
    let answer = value_after_last(raw, ANSWER_MARKER)
        .ok_or_else(|| PromptError::Format {
            raw: raw.to_string(),
        })?
        .trim();
    let pieces: Vec<&str> = match task {
        Task::SingleLabel => vec![answer],
        Task::MultiLabel => answer
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect(),
    };
    if pieces.is_empty() {
        return Err(PromptError::UnknownChoice {
            choice: answer.to_string(),
            raw: raw.to_string(),
        });
    }
    let mut choices: Vec<String> = Vec::with_capacity(pieces.len());
    for piece in pieces {
        let class = match_class(piece, class_names).ok_or_else(|| PromptError::UnknownChoice {
            choice: piece.to_string(),
            raw: raw.to_string(),
        })?;
        if !choices.contains(class) {
            choices.push(class.clone());
        }
    }
    let confidence = value_after_last(raw, CONFIDENCE_MARKER)
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|c| (0.0..=1.0).contains(c));
    Ok(ParsedAnswer {
        choices,
        confidence,
        raw: raw.to_string(),
    })
}

/// A reply that follows the requested format exactly.
pub fn compliant_reply(answer: &str, confidence: f64) -> String {
    format!("{ANSWER_MARKER} {answer}\n{CONFIDENCE_MARKER} {confidence:?}")
}

/// Checks that a compliant reply naming `choice`, plain or padded with
/// whitespace, parses back to exactly `[choice]`.
pub fn roundtrip_check(choice: &str, class_names: &[String]) -> bool {
    let expected = [choice.to_string()];
    [
        compliant_reply(choice, 1.0),
        compliant_reply(&format!("  {choice} \t"), 1.0),
    ]
    .iter()
    .all(|reply| {
        parse_answer(reply, class_names, Task::SingleLabel)
            .map(|p| p.choices == expected)
            .unwrap_or(false)
    })
}
