use super::{LlmVerdict, PromptMode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("response has no Applicable: Yes/No line")]
    MissingVerdict,
    /// The verdict was found but no explanation text followed it.
    #[error("response has no explanation")]
    MissingExplanation(Box<LlmVerdict>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Applicable,
    Explanation,
    Aspects,
}

const MARKERS: [(Marker, &str); 3] = [
    (Marker::Applicable, "applicable"),
    (Marker::Explanation, "explanation"),
    (Marker::Aspects, "common aspects"),
];

fn decoration(c: char) -> bool {
    matches!(c, '*' | '_' | '#' | '>' | '-' | '`') || c.is_whitespace()
}

/// Recognizes `Name: rest` at the start of a line, allowing markdown
/// emphasis, headings and bullets around the name. Returns the rest.
fn marker(line: &str) -> Option<(Marker, &str)> {
    let body = line.trim_start_matches(decoration);
    for (m, name) in MARKERS {
        let Some(head) = body.get(..name.len()) else { continue };
        if !head.eq_ignore_ascii_case(name) {
            continue;
        }
        let after = body[name.len()..].trim_start_matches(['*', '_', ' ', '\t']);
        if let Some(rest) = after.strip_prefix(':') {
            let rest = rest.trim_start_matches(['*', '_']).trim();
            let rest = rest.trim_end_matches(['*', '_']).trim_end();
            return Some((m, rest));
        }
    }
    None
}

fn yes_no(rest: &str) -> Option<bool> {
    let word: String = rest
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    match word.to_ascii_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Text of the section opened by the first `which` marker: the rest of that
/// line plus following lines up to the next marker.
fn section(lines: &[&str], which: Marker) -> Option<String> {
    let start = lines.iter().position(|l| matches!(marker(l), Some((m, _)) if m == which))?;
    let (_, first) = marker(lines[start]).expect("matched above");
    let mut parts = vec![first.to_string()];
    for l in &lines[start + 1..] {
        if marker(l).is_some() {
            break;
        }
        parts.push(l.trim().to_string());
    }
    Some(parts.join("\n").trim().to_string())
}

fn split_aspects(text: &str) -> Vec<String> {
    let text = text.trim();
    let text = text.strip_suffix('.').unwrap_or(text).trim();
    if text.eq_ignore_ascii_case("none") || text.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            _ => {}
        }
        if (c == ',' || c == ';' || c == '\n') && depth == 0 {
            out.push(std::mem::take(&mut current));
        } else {
            current.push(c);
        }
    }
    out.push(current);
    out.into_iter()
        .map(|s| s.trim().trim_start_matches(decoration).trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Extracts the verdict from a raw reply. The first line of the form
/// `Applicable: Yes|No` wins (case-insensitive, markdown tolerated).
pub fn parse_response(raw: &str, mode: PromptMode) -> Result<LlmVerdict, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let applicable = lines
        .iter()
        .filter_map(|l| match marker(l) {
            Some((Marker::Applicable, rest)) => yes_no(rest),
            _ => None,
        })
        .next()
        .ok_or(ParseError::MissingVerdict)?;
    let explanation = section(&lines, Marker::Explanation).unwrap_or_default();
    let common_aspects = match mode {
        PromptMode::Standard => None,
        PromptMode::Cot => section(&lines, Marker::Aspects).map(|t| split_aspects(&t)),
    };
    let verdict = LlmVerdict {
        applicable,
        explanation,
        common_aspects,
        raw: raw.to_string(),
    };
    if verdict.explanation.is_empty() {
        return Err(ParseError::MissingExplanation(Box::new(verdict)));
    }
    Ok(verdict)
}

/// Like [`parse_response`], but always yields a verdict: a reply with no
/// verdict line counts as not applicable. The error, if any, is returned for
/// logging.
pub fn parse_lenient(raw: &str, mode: PromptMode) -> (LlmVerdict, Option<ParseError>) {
    match parse_response(raw, mode) {
        Ok(v) => (v, None),
        Err(ParseError::MissingExplanation(v)) => {
            let v = (*v).clone();
            (v.clone(), Some(ParseError::MissingExplanation(Box::new(v))))
        }
        Err(e @ ParseError::MissingVerdict) => (
            LlmVerdict {
                applicable: false,
                explanation: String::new(),
                common_aspects: None,
                raw: raw.to_string(),
            },
            Some(e),
        ),
    }
}

/// Writes a reply in the requested response format.
pub fn render_response(applicable: bool, explanation: &str, aspects: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(a) = aspects {
        let list = if a.is_empty() { "None".to_string() } else { a.join(", ") };
        out.push_str(&format!("Common Aspects: {list}\n"));
    }
    out.push_str(if applicable { "Applicable: Yes\n" } else { "Applicable: No\n" });
    out.push_str(&format!("Explanation: {explanation}"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_yes() {
        let v = parse_response(
            "Applicable: Yes\nExplanation: The conditions described imply degrading treatment.",
            PromptMode::Standard,
        )
        .unwrap();
        assert!(v.applicable);
        assert_eq!(v.explanation, "The conditions described imply degrading treatment.");
        assert_eq!(v.common_aspects, None);
    }

    #[test]
    fn cot_none_and_no() {
        let v = parse_response("Common Aspects: None\nApplicable: No\nExplanation: Nothing matches.", PromptMode::Cot).unwrap();
        assert!(!v.applicable);
        assert_eq!(v.common_aspects, Some(vec![]));
    }

    #[test]
    fn aspects_split_outside_parentheses() {
        let v = parse_response(
            "Common Aspects: Conditions of detention, small space, lack of basic amenities (water, sanitation, communication).\nApplicable: Yes\nExplanation: x",
            PromptMode::Cot,
        )
        .unwrap();
        assert_eq!(
            v.common_aspects.unwrap(),
            vec![
                "Conditions of detention",
                "small space",
                "lack of basic amenities (water, sanitation, communication)"
            ]
        );
    }

    #[test]
    fn missing_verdict_is_not_applicable() {
        assert_eq!(parse_response("I cannot determine this.", PromptMode::Standard), Err(ParseError::MissingVerdict));
        let (v, e) = parse_lenient("I cannot determine this.", PromptMode::Standard);
        assert!(!v.applicable);
        assert_eq!(e, Some(ParseError::MissingVerdict));
    }

    #[test]
    fn missing_explanation_keeps_verdict() {
        let (v, e) = parse_lenient("Applicable: Yes", PromptMode::Standard);
        assert!(v.applicable);
        assert!(matches!(e, Some(ParseError::MissingExplanation(_))));
    }

    #[test]
    fn markdown_and_case() {
        let raw = "  **Applicable:** yes\n\n**Explanation**: It fits.\nSecond line.\n";
        let v = parse_response(raw, PromptMode::Standard).unwrap();
        assert!(v.applicable);
        assert_eq!(v.explanation, "It fits.\nSecond line.");
        let v = parse_response("### APPLICABLE: NO.\nexplanation: nope", PromptMode::Standard).unwrap();
        assert!(!v.applicable);
    }

    #[test]
    fn line_anchored_and_first_wins() {
        let raw = "The word Applicable: Yes appears mid-line.\nApplicable: No\nApplicable: Yes\nExplanation: e";
        assert!(!parse_response(raw, PromptMode::Standard).unwrap().applicable);
        let raw = "Applicable: maybe\nApplicable: Yes\nExplanation: e";
        assert!(parse_response(raw, PromptMode::Standard).unwrap().applicable);
    }

    #[test]
    fn render_round_trip() {
        let aspects = vec!["theft".to_string(), "custody (pre-trial, extended)".to_string()];
        let raw = render_response(true, "Because.", Some(&aspects));
        let v = parse_response(&raw, PromptMode::Cot).unwrap();
        assert!(v.applicable);
        assert_eq!(v.common_aspects.unwrap(), aspects);
        assert_eq!(v.explanation, "Because.");
    }
}
