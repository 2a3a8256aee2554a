//! `{Placeholder_Name}` substitution shared by the prompt catalog and the
//! aspect library.

use crate::error::{Error, Result};

/// Placeholder names appearing in `template`: `{` followed by a letter, then
/// letters/digits/underscores, closed by `}`. JSON-style braces (`{ "k": ...`)
/// do not match.
pub fn find_placeholders(template: &str) -> Vec<String> {
    let chars: Vec<char> = template.chars().collect();
    let mut found = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '{' && i + 1 < chars.len() && chars[i + 1].is_ascii_alphabetic() {
            let start = i + 1;
            let mut end = start;
            while end < chars.len() && (chars[end].is_ascii_alphanumeric() || chars[end] == '_') {
                end += 1;
            }
            if end < chars.len() && chars[end] == '}' {
                let name: String = chars[start..end].iter().collect();
                if !found.contains(&name) {
                    found.push(name);
                }
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    found
}

/// Replace each `{name}` with its value. Errors if the template contains a
/// placeholder with no substitution.
pub fn substitute(template: &str, substitutions: &[(&str, &str)]) -> Result<String> {
    for name in find_placeholders(template) {
        if !substitutions.iter().any(|(key, _)| *key == name) {
            return Err(Error::UnknownPlaceholder(name));
        }
    }
    let mut rendered = template.to_string();
    for (name, value) in substitutions {
        rendered = rendered.replace(&format!("{{{name}}}"), value);
    }
    Ok(rendered)
}
