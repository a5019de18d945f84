//! Paraphrase elicitation: the fixed prompt template and a tolerant parser
//! for the indexed-map output format.

use crate::backends::{GenerationBackend, GenerationRequest};
use crate::records::DecodingPolicy;

use super::CollectError;

/// System prompt requesting `k` rewordings. The wording is fixed; only the
/// count is formatted in.
pub fn paraphrase_system_prompt(k: usize) -> String {
    format!(
        "For question Q, provide {k} semantically equivalent questions. Preserve the \
         original meaning and context of the question while changing the structure and \
         words. Output format: {{0: \"question1\", 1: \"question2\", 2: \"question3\", ...}}."
    )
}

pub fn paraphrase_user_prompt(question: &str) -> String {
    format!("Q: {question}")
}

/// Extracts the indexed map from a paraphrase response, tolerating single or
/// double quotes, quoted or bare integer keys, backslash escapes, trailing
/// commas, and prose around the braces. Entries come back in index order;
/// a repeated index keeps its first value.
pub fn parse_paraphrase_map(raw: &str) -> Option<Vec<String>> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end <= start {
        return None;
    }
    let inner = &raw[start + 1..end];

    let mut entries: Vec<(u64, String)> = Vec::new();
    let mut chars = inner.chars().peekable();
    'scan: loop {
        // Seek the next key: the first digit outside a value.
        let mut index: Option<u64> = None;
        for c in chars.by_ref() {
            if c.is_ascii_digit() {
                index = Some(c.to_digit(10).unwrap() as u64);
                break;
            }
        }
        let Some(mut index) = index else { break };
        while let Some(c) = chars.peek() {
            match c.to_digit(10) {
                Some(d) => {
                    index = index * 10 + d as u64;
                    chars.next();
                }
                None => break,
            }
        }
        // Seek the separating colon, then the opening quote.
        loop {
            match chars.next() {
                Some(':') => break,
                Some(c) if c.is_whitespace() || c == '"' || c == '\'' => continue,
                _ => break 'scan,
            }
        }
        let quote = loop {
            match chars.next() {
                Some(c) if c == '"' || c == '\'' => break c,
                Some(c) if c.is_whitespace() => continue,
                _ => break 'scan,
            }
        };
        let mut text = String::new();
        loop {
            match chars.next() {
                Some('\\') => match chars.next() {
                    Some('n') => text.push('\n'),
                    Some(escaped) => text.push(escaped),
                    None => break 'scan,
                },
                Some(c) if c == quote => break,
                Some(c) => text.push(c),
                None => break 'scan,
            }
        }
        if !entries.iter().any(|(i, _)| *i == index) {
            entries.push((index, text));
        }
    }

    if entries.is_empty() {
        return None;
    }
    entries.sort_by_key(|(i, _)| *i);
    Some(entries.into_iter().map(|(_, text)| text).collect())
}

/// Asks the paraphraser for `k` rewordings of `question` and parses them.
///
/// An unparsable response is retried once with the same prompt; fewer than
/// `k` non-empty paraphrases after parsing is an error (extras beyond `k`
/// are truncated in index order).
pub fn generate_paraphrases(
    question: &str,
    k: usize,
    backend: &dyn GenerationBackend,
    max_tokens: u32,
    mut on_call: impl FnMut(),
) -> Result<Vec<String>, CollectError> {
    let request = GenerationRequest {
        prompt_text: paraphrase_user_prompt(question),
        system_text: Some(paraphrase_system_prompt(k)),
        policy: DecodingPolicy::greedy(),
        max_tokens,
        want_logprobs: false,
        backend_id: backend.id().to_owned(),
    };

    let mut raw = String::new();
    for attempt in 0..2 {
        on_call();
        let record = backend.generate(&request)?;
        raw = record.text;
        if let Some(parsed) = parse_paraphrase_map(&raw) {
            let usable: Vec<String> = parsed.into_iter().filter(|p| !p.trim().is_empty()).collect();
            if usable.len() < k {
                return Err(CollectError::InsufficientParaphrases {
                    got: usable.len(),
                    want: k,
                });
            }
            return Ok(usable.into_iter().take(k).collect());
        }
        if attempt == 0 {
            tracing::warn!(question, "paraphrase output unparsable; retrying once");
        }
    }
    Err(CollectError::ParaphraseUnparsable { raw })
}
