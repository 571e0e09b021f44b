use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::{Captures, Regex};

use super::{GatewayError, PromptName};

pub type Bindings<'a> = BTreeMap<&'a str, String>;

/// Appended to code-producing prompts so the sandbox can parse the score.
pub const METRIC_CONVENTION: &str = "Print the final hold-out validation score on its own line, exactly in the form `Validation metric: <number>`.";

pub fn template(name: PromptName) -> &'static str {
    match name {
        PromptName::Descriptor => include_str!("../../prompts/descriptor.txt"),
        PromptName::Draft => include_str!("../../prompts/draft.txt"),
        PromptName::Debug => include_str!("../../prompts/debug.txt"),
        PromptName::Plan => include_str!("../../prompts/plan.txt"),
        PromptName::Improve => include_str!("../../prompts/improve.txt"),
        PromptName::PromoteP1 => include_str!("../../prompts/promote_p1.txt"),
        PromptName::PromoteP2 => include_str!("../../prompts/promote_p2.txt"),
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("valid regex"))
}

pub fn placeholders(name: PromptName) -> BTreeSet<&'static str> {
    placeholder_re()
        .captures_iter(template(name))
        .map(|c| c.get(1).expect("group").as_str())
        .collect()
}

/// Substitutes every `{slot}` in one pass; bound values are never re-expanded.
pub fn render_prompt(name: PromptName, bindings: &Bindings<'_>) -> Result<String, GatewayError> {
    if let Some(missing) = placeholders(name).into_iter().find(|p| !bindings.contains_key(p)) {
        return Err(GatewayError::MissingBinding(missing.to_string()));
    }
    let rendered = placeholder_re().replace_all(template(name), |c: &Captures<'_>| {
        bindings[&c[1]].clone()
    });
    Ok(rendered.into_owned())
}

pub fn with_metric_convention(mut rendered: String) -> String {
    if !rendered.ends_with('\n') {
        rendered.push('\n');
    }
    rendered.push('\n');
    rendered.push_str(METRIC_CONVENTION);
    rendered
}
