use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{extract_first_code_block, GatewayError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Direction {
    pub title: String,
    pub suggestions: Vec<String>,
}

/// Exploration directions of one phase, in the order the model gave them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResearchPlan {
    pub directions: Vec<Direction>,
}

impl ResearchPlan {
    pub fn m(&self) -> usize {
        self.directions.len()
    }

    pub fn q(&self) -> Vec<usize> {
        self.directions.iter().map(|d| d.suggestions.len()).collect()
    }

    pub fn trajectory_count(&self) -> usize {
        self.q().iter().sum()
    }

    /// `(direction, suggestion)` pairs, 1-based, in schedule order.
    pub fn slots(&self) -> Vec<(usize, usize)> {
        self.directions
            .iter()
            .enumerate()
            .flat_map(|(i, d)| (1..=d.suggestions.len()).map(move |j| (i + 1, j)))
            .collect()
    }

    pub fn suggestion(&self, direction: usize, suggestion: usize) -> Option<(&str, &str)> {
        let d = self.directions.get(direction.checked_sub(1)?)?;
        let s = d.suggestions.get(suggestion.checked_sub(1)?)?;
        Some((d.title.as_str(), s.as_str()))
    }

    /// The JSON shape requested by the plan prompt.
    pub fn to_json(&self) -> String {
        let mut root = Map::new();
        for d in &self.directions {
            let inner: Map<String, Value> = d
                .suggestions
                .iter()
                .enumerate()
                .map(|(n, s)| ((n + 1).to_string(), Value::String(s.clone())))
                .collect();
            root.insert(d.title.clone(), Value::Object(inner));
        }
        serde_json::to_string_pretty(&Value::Object(root)).expect("plain JSON")
    }
}

/// Drops commas that directly precede a closing brace or bracket.
fn strip_trailing_commas(json: &str) -> String {
    let chars: Vec<char> = json.chars().collect();
    let mut out = String::with_capacity(json.len());
    let mut in_string = false;
    let mut escaped = false;
    for (n, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            ',' => {
                let next = chars[n + 1..].iter().find(|c| !c.is_whitespace());
                if matches!(next, Some('}') | Some(']')) {
                    continue;
                }
            }
            _ => {}
        }
        out.push(c);
    }
    out
}

fn json_region(text: &str) -> &str {
    if let Some(block) = extract_first_code_block(text) {
        return block;
    }
    match (text.find('{'), text.rfind('}')) {
        (Some(a), Some(b)) if a < b => &text[a..=b],
        _ => text,
    }
}

pub fn parse_research_plan(text: &str) -> Result<ResearchPlan, GatewayError> {
    let malformed = |why: String| GatewayError::MalformedPlan(why);
    let value: Value = serde_json::from_str(&strip_trailing_commas(json_region(text)))
        .map_err(|e| malformed(e.to_string()))?;
    let Value::Object(root) = value else {
        return Err(malformed("top level is not an object".into()));
    };
    let mut directions = Vec::with_capacity(root.len());
    for (title, body) in root {
        let raw: Vec<Value> = match body {
            Value::Object(map) => map.into_iter().map(|(_, v)| v).collect(),
            Value::Array(items) => items,
            _ => return Err(malformed(format!("direction {title:?} is not an object"))),
        };
        let mut suggestions = Vec::with_capacity(raw.len());
        for v in raw {
            match v {
                Value::String(s) if !s.trim().is_empty() => suggestions.push(s),
                _ => return Err(malformed(format!("direction {title:?} has an empty or non-text suggestion"))),
            }
        }
        if title.trim().is_empty() || suggestions.is_empty() {
            return Err(malformed(format!("direction {title:?} has no suggestions")));
        }
        directions.push(Direction { title, suggestions });
    }
    if directions.len() < 3 {
        return Err(GatewayError::TooFewDirections(directions.len()));
    }
    Ok(ResearchPlan { directions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BARE: &str = r#"{"a": {"1": "x", "2": "y"}, "b": {"1": "z"}, "c": {"1": "w"}}"#;

    #[test]
    fn fenced_equals_bare() {
        let fenced = format!("Here is the plan:\n```json\n{BARE}\n```\n");
        assert_eq!(parse_research_plan(&fenced), parse_research_plan(BARE));
    }

    #[test]
    fn order_is_preserved() {
        let plan = parse_research_plan(r#"{"z": {"1": "a"}, "m": {"1": "b"}, "a": {"1": "c"}}"#).unwrap();
        let titles: Vec<_> = plan.directions.iter().map(|d| d.title.as_str()).collect();
        assert_eq!(titles, ["z", "m", "a"]);
    }

    #[test]
    fn two_directions_rejected() {
        assert_eq!(
            parse_research_plan(r#"{"a": {"1": "x"}, "b": {"1": "y"}}"#),
            Err(GatewayError::TooFewDirections(2))
        );
    }

    #[test]
    fn not_json_is_malformed() {
        assert!(matches!(parse_research_plan("try harder"), Err(GatewayError::MalformedPlan(_))));
        assert!(matches!(
            parse_research_plan(r#"{"a": "x", "b": {"1": "y"}, "c": {"1": "z"}}"#),
            Err(GatewayError::MalformedPlan(_))
        ));
    }

    #[test]
    fn commas_inside_strings_survive() {
        let plan = parse_research_plan(r#"{"a": {"1": "x, }"}, "b": {"1": "y",}, "c": {"1": "z"},}"#).unwrap();
        assert_eq!(plan.directions[0].suggestions, ["x, }"]);
    }

    fn plan_strategy() -> impl Strategy<Value = ResearchPlan> {
        prop::collection::btree_map("[a-z ]{1,12}[a-z]", prop::collection::vec("[ -~]*[a-z]", 1..4), 3..7)
            .prop_map(|m| ResearchPlan {
                directions: m
                    .into_iter()
                    .map(|(title, suggestions)| Direction { title, suggestions })
                    .collect(),
            })
            .prop_shuffle_directions()
    }

    trait ShuffleExt: Strategy<Value = ResearchPlan> + Sized {
        fn prop_shuffle_directions(self) -> BoxedStrategy<ResearchPlan>
        where
            Self: 'static,
        {
            self.prop_flat_map(|plan| {
                Just(plan.directions).prop_shuffle().prop_map(|directions| ResearchPlan { directions })
            })
            .boxed()
        }
    }
    impl<S: Strategy<Value = ResearchPlan> + Sized> ShuffleExt for S {}

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(plan in plan_strategy()) {
            prop_assert_eq!(parse_research_plan(&plan.to_json()).unwrap(), plan);
        }
    }
}
