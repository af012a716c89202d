use std::collections::BTreeMap;

use thiserror::Error;

use super::Purpose;

/// Bumped whenever a shipped template changes.
pub const PROMPT_VERSION: &str = "1";

const EXPLORE: &str = include_str!("../../prompts/explore.txt");
const SELECT: &str = include_str!("../../prompts/select.txt");
const PATTERN: &str = include_str!("../../prompts/pattern.txt");
const MERGE: &str = include_str!("../../prompts/merge.txt");
const MUTATE: &str = include_str!("../../prompts/mutate.txt");
const BOOST: &str = include_str!("../../prompts/boost.txt");
const SCHEMA: &str = include_str!("../../prompts/schema.txt");

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template} has no binding for {{{{{name}}}}}")]
    MissingBinding { template: Purpose, name: String },
    #[error("template {template} has an unterminated placeholder")]
    Unterminated { template: Purpose },
}

pub fn template_source(template: Purpose) -> &'static str {
    match template {
        Purpose::Explore => EXPLORE,
        Purpose::Select => SELECT,
        Purpose::Pattern => PATTERN,
        Purpose::Merge => MERGE,
        Purpose::Mutate => MUTATE,
        Purpose::Boost => BOOST,
    }
}

/// Substitutes `{{name}}` placeholders. `{{schema}}` defaults to the rule
/// document contract when not bound explicitly.
pub fn render_prompt(template: Purpose, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let source = template_source(template);
    let mut out = String::with_capacity(source.len() + bindings.values().map(String::len).sum::<usize>());
    let mut rest = source;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or(TemplateError::Unterminated { template })?;
        let name = after[..close].trim();
        match bindings.get(name) {
            Some(value) => out.push_str(value),
            None if name == "schema" => out.push_str(SCHEMA.trim_end()),
            None => {
                return Err(TemplateError::MissingBinding {
                    template,
                    name: name.to_owned(),
                })
            }
        }
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
