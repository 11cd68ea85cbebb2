//! `%{name}` placeholder expansion.

use std::collections::BTreeMap;

use super::{ModelError, ParamValue};

/// Names of all `%{...}` placeholders in `text`, in order of appearance.
/// An unterminated `%{` is plain text.
pub fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("%{") {
        let after = &rest[start + 2..];
        match after.find('}') {
            Some(end) => {
                out.push(&after[..end]);
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

/// Replaces every `%{name}` with the canonical rendering of its binding.
///
/// Substitution is a single left-to-right pass; text inserted from a value is
/// never rescanned.
pub fn substitute_params(
    template_text: &str,
    bindings: &BTreeMap<String, ParamValue>,
) -> Result<String, ModelError> {
    let mut out = String::with_capacity(template_text.len());
    let mut rest = template_text;
    while let Some(start) = rest.find("%{") {
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            break;
        };
        let name = &after[..end];
        let value = bindings
            .get(name)
            .ok_or_else(|| ModelError::MissingBinding(name.to_string()))?;
        out.push_str(&rest[..start]);
        out.push_str(&value.to_string());
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
