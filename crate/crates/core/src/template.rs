//! Instruction templates: parsing, rendering and instantiation.
//!
//! A template is literal text interleaved with `{...}` placeholders. Two
//! placeholder forms are accepted: a plain field reference `{name}` and a
//! token join over a list field, `{sep_field.join(list_field)}`. Literal
//! braces are written doubled (`{{`, `}}`), as in Python format strings.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbalanced brace at byte {offset}")]
    UnbalancedBraces { offset: usize },
    #[error("invalid placeholder expression `{expr}`")]
    InvalidExpr { expr: String },
    #[error("instance has no field `{field}`")]
    MissingField { field: String },
    #[error("field `{field}` has the wrong type: expected {expected}")]
    TypeMismatch { field: String, expected: &'static str },
}

/// What a placeholder refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlaceholderKind {
    Field(String),
    Join { token_field: String, list_field: String },
}

/// The expression between a pair of braces.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlaceholderExpr {
    raw_text: String,
    kind: PlaceholderKind,
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl PlaceholderExpr {
    /// Parses the text found between braces.
    pub fn parse(raw: &str) -> Result<Self, TemplateError> {
        let invalid = || TemplateError::InvalidExpr { expr: raw.to_string() };
        if is_identifier(raw) {
            return Ok(Self {
                raw_text: raw.to_string(),
                kind: PlaceholderKind::Field(raw.to_string()),
            });
        }
        let (token, rest) = raw.split_once(".join(").ok_or_else(invalid)?;
        let list = rest.strip_suffix(')').ok_or_else(invalid)?;
        if !is_identifier(token) || !is_identifier(list) {
            return Err(invalid());
        }
        Ok(Self {
            raw_text: raw.to_string(),
            kind: PlaceholderKind::Join {
                token_field: token.to_string(),
                list_field: list.to_string(),
            },
        })
    }

    pub fn field(name: &str) -> Result<Self, TemplateError> {
        match Self::parse(name)? {
            e @ Self { kind: PlaceholderKind::Field(_), .. } => Ok(e),
            _ => Err(TemplateError::InvalidExpr { expr: name.to_string() }),
        }
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn kind(&self) -> &PlaceholderKind {
        &self.kind
    }

    /// Field names referenced by this expression.
    pub fn fields(&self) -> Vec<&str> {
        match &self.kind {
            PlaceholderKind::Field(f) => vec![f],
            PlaceholderKind::Join { token_field, list_field } => vec![token_field, list_field],
        }
    }

    /// `{raw_text}`
    pub fn braced(&self) -> String {
        format!("{{{}}}", self.raw_text)
    }
}

impl fmt::Display for PlaceholderExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.raw_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Unescaped literal text.
    Literal(String),
    Placeholder(PlaceholderExpr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Raw,
    Generated,
}

/// Provenance of a generated template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    /// Template (raw or generated) that was rewritten to produce this one.
    pub parent_template_id: String,
    /// The raw template at the start of the rewrite chain.
    pub root_template_id: String,
    pub guiding_id: String,
    pub temperature: f64,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionTemplate {
    pub template_id: String,
    pub task_id: String,
    segments: Vec<Segment>,
    pub origin: Origin,
    pub lineage: Option<Lineage>,
}

/// Splits template text into normalized segments.
pub fn parse_segments(text: &str) -> Result<Vec<Segment>, TemplateError> {
    let bytes = text.as_bytes();
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut i = 0;
    let mut run_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                literal.push_str(&text[run_start..i]);
                literal.push('{');
                i += 2;
                run_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                literal.push_str(&text[run_start..i]);
                literal.push('}');
                i += 2;
                run_start = i;
            }
            b'{' => {
                literal.push_str(&text[run_start..i]);
                let close = text[i + 1..]
                    .find(['{', '}'])
                    .map(|p| p + i + 1)
                    .filter(|&p| bytes[p] == b'}')
                    .ok_or(TemplateError::UnbalancedBraces { offset: i })?;
                let expr = PlaceholderExpr::parse(&text[i + 1..close])?;
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(expr));
                i = close + 1;
                run_start = i;
            }
            b'}' => return Err(TemplateError::UnbalancedBraces { offset: i }),
            _ => i += 1,
        }
    }
    literal.push_str(&text[run_start..]);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

/// Escapes literal text so it parses back to itself.
pub fn escape_literal(text: &str) -> String {
    text.replace('{', "{{").replace('}', "}}")
}

pub fn render_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for seg in segments {
        match seg {
            Segment::Literal(s) => out.push_str(&escape_literal(s)),
            Segment::Placeholder(p) => {
                out.push('{');
                out.push_str(p.raw_text());
                out.push('}');
            }
        }
    }
    out
}

/// Parses `text` into an anonymous raw template.
pub fn parse_template(text: &str) -> Result<InstructionTemplate, TemplateError> {
    InstructionTemplate::new("", "", text)
}

pub fn render_template(t: &InstructionTemplate) -> String {
    t.render()
}

pub fn list_placeholders(t: &InstructionTemplate) -> Vec<PlaceholderExpr> {
    t.placeholders()
}

pub fn instantiate(t: &InstructionTemplate, x: &InstanceRecord) -> Result<String, TemplateError> {
    t.instantiate(&x.fields)
}

impl InstructionTemplate {
    pub fn new(
        template_id: impl Into<String>,
        task_id: impl Into<String>,
        text: &str,
    ) -> Result<Self, TemplateError> {
        Ok(Self {
            template_id: template_id.into(),
            task_id: task_id.into(),
            segments: parse_segments(text)?,
            origin: Origin::Raw,
            lineage: None,
        })
    }

    pub fn generated(
        template_id: impl Into<String>,
        task_id: impl Into<String>,
        text: &str,
        lineage: Lineage,
    ) -> Result<Self, TemplateError> {
        let mut t = Self::new(template_id, task_id, text)?;
        t.origin = Origin::Generated;
        t.lineage = Some(lineage);
        Ok(t)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn render(&self) -> String {
        render_segments(&self.segments)
    }

    /// Unique placeholders in first-occurrence order.
    pub fn placeholders(&self) -> Vec<PlaceholderExpr> {
        let mut out: Vec<PlaceholderExpr> = Vec::new();
        for seg in &self.segments {
            if let Segment::Placeholder(p) = seg {
                if !out.contains(p) {
                    out.push(p.clone());
                }
            }
        }
        out
    }

    pub fn has_placeholders(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::Placeholder(_)))
    }

    /// Concatenation of all literal segments, unescaped.
    pub fn literal_text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(l) => Some(l.as_str()),
                Segment::Placeholder(_) => None,
            })
            .collect()
    }

    /// Fills every placeholder from `fields`.
    pub fn instantiate(&self, fields: &BTreeMap<String, FieldValue>) -> Result<String, TemplateError> {
        let lookup = |name: &str| {
            fields.get(name).ok_or_else(|| TemplateError::MissingField { field: name.to_string() })
        };
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(p) => match p.kind() {
                    PlaceholderKind::Field(name) => match lookup(name)? {
                        FieldValue::Text(v) => out.push_str(v),
                        FieldValue::List(_) => {
                            return Err(TemplateError::TypeMismatch {
                                field: name.clone(),
                                expected: "string",
                            })
                        }
                    },
                    PlaceholderKind::Join { token_field, list_field } => {
                        let token = match lookup(token_field)? {
                            FieldValue::Text(t) => t,
                            FieldValue::List(_) => {
                                return Err(TemplateError::TypeMismatch {
                                    field: token_field.clone(),
                                    expected: "string",
                                })
                            }
                        };
                        let items = match lookup(list_field)? {
                            FieldValue::List(items) => items,
                            FieldValue::Text(_) => {
                                return Err(TemplateError::TypeMismatch {
                                    field: list_field.clone(),
                                    expected: "list of strings",
                                })
                            }
                        };
                        out.push_str(&items.join(token));
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Instance field value. Numbers must be stringified upstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Text(String),
    List(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub task_id: String,
    pub fields: BTreeMap<String, FieldValue>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_ref: Option<String>,
}

impl InstanceRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.target.is_empty() {
            return Err(format!("instance `{}` has an empty target", self.instance_id));
        }
        if let Some(bad) = self.fields.keys().find(|k| !is_identifier(k)) {
            return Err(format!("instance `{}` has invalid field name `{bad}`", self.instance_id));
        }
        Ok(())
    }
}

/// Optional per-task annotations carried on template file lines.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAnnotations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_question: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_inclusive: Option<bool>,
}

/// One line of a template JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateLine {
    pub template_id: String,
    pub task_id: String,
    pub text: String,
    #[serde(default)]
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<TaskAnnotations>,
}

impl TemplateLine {
    pub fn to_template(&self) -> Result<InstructionTemplate, String> {
        let mut t = InstructionTemplate::new(&self.template_id, &self.task_id, &self.text)
            .map_err(|e| format!("template `{}`: {e}", self.template_id))?;
        t.origin = self.origin;
        t.lineage = self.lineage.clone();
        match (t.origin, &t.lineage) {
            (Origin::Raw, Some(_)) => {
                Err(format!("raw template `{}` must not carry lineage", self.template_id))
            }
            (Origin::Generated, None) => {
                Err(format!("generated template `{}` is missing lineage", self.template_id))
            }
            _ => Ok(t),
        }
    }
}

impl From<&InstructionTemplate> for TemplateLine {
    fn from(t: &InstructionTemplate) -> Self {
        Self {
            template_id: t.template_id.clone(),
            task_id: t.task_id.clone(),
            text: t.render(),
            origin: t.origin,
            lineage: t.lineage.clone(),
            attributes: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(pairs: &[(&str, FieldValue)]) -> BTreeMap<String, FieldValue> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn text(s: &str) -> FieldValue {
        FieldValue::Text(s.into())
    }

    fn list(items: &[&str]) -> FieldValue {
        FieldValue::List(items.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn parses_join_placeholder() {
        let t = parse_template("Describe the content of {region_split_token.join(region)} in the picture.")
            .unwrap();
        assert_eq!(t.segments().len(), 3);
        assert_eq!(t.segments()[0], Segment::Literal("Describe the content of ".into()));
        match &t.segments()[1] {
            Segment::Placeholder(p) => assert_eq!(
                p.kind(),
                &PlaceholderKind::Join {
                    token_field: "region_split_token".into(),
                    list_field: "region".into()
                }
            ),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.segments()[2], Segment::Literal(" in the picture.".into()));
    }

    #[test]
    fn plain_text_is_one_literal() {
        let t = parse_template("Hello world").unwrap();
        assert_eq!(t.segments(), &[Segment::Literal("Hello world".into())]);
        assert!(t.placeholders().is_empty());
    }

    #[test]
    fn doubled_braces_are_literal() {
        let t = parse_template("Use {{braces}} here").unwrap();
        assert_eq!(t.segments(), &[Segment::Literal("Use {braces} here".into())]);
        assert_eq!(t.render(), "Use {{braces}} here");
    }

    #[test]
    fn adjacent_literals_are_merged() {
        let t = parse_template("a{{b}}c {x}}}").unwrap();
        assert_eq!(t.segments().len(), 3);
        assert_eq!(t.segments()[0], Segment::Literal("a{b}c ".into()));
        assert_eq!(t.segments()[2], Segment::Literal("}".into()));
    }

    #[test]
    fn unbalanced_braces_are_rejected() {
        for bad in ["open {x", "close } here", "{a{b}", "x}y", "{"] {
            assert!(
                matches!(parse_template(bad), Err(TemplateError::UnbalancedBraces { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn bad_expressions_are_rejected() {
        for bad in ["{}", "{1abc}", "{a b}", "{a.join(b}", "{a.split(b)}", "{ a }", "{a.join()}", "{x+y}"] {
            assert!(
                matches!(parse_template(bad), Err(TemplateError::InvalidExpr { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn renders_join_back() {
        let src = "Regions: {region_split_token.join(region)}.";
        assert_eq!(parse_template(src).unwrap().render(), src);
    }

    #[test]
    fn lists_unique_placeholders_in_order() {
        let t = parse_template("Is the object {text} in {regions}? {options}").unwrap();
        let names: Vec<_> = t.placeholders().iter().map(|p| p.raw_text().to_string()).collect();
        assert_eq!(names, ["text", "regions", "options"]);

        let t = parse_template("{a} and {a} and {b}").unwrap();
        let names: Vec<_> = t.placeholders().iter().map(|p| p.raw_text().to_string()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn instantiates_join() {
        let t = parse_template("Describe the content of {region_split_token.join(region)} in the picture.")
            .unwrap();
        let f = fields(&[
            ("region_split_token", text("; ")),
            ("region", list(&["10 20 30 40", "50 60 70 80"])),
        ]);
        assert_eq!(
            t.instantiate(&f).unwrap(),
            "Describe the content of 10 20 30 40; 50 60 70 80 in the picture."
        );
    }

    #[test]
    fn join_over_empty_list_is_empty() {
        let t = parse_template("[{sep.join(items)}]").unwrap();
        let f = fields(&[("sep", text(", ")), ("items", list(&[]))]);
        assert_eq!(t.instantiate(&f).unwrap(), "[]");
    }

    #[test]
    fn literal_only_template_ignores_instance() {
        let t = parse_template("Caption {{this}} image.").unwrap();
        assert_eq!(t.instantiate(&fields(&[("x", text("y"))])).unwrap(), "Caption {this} image.");
    }

    #[test]
    fn instantiation_errors() {
        let t = parse_template("{q}").unwrap();
        assert_eq!(
            t.instantiate(&BTreeMap::new()),
            Err(TemplateError::MissingField { field: "q".into() })
        );
        assert!(matches!(
            t.instantiate(&fields(&[("q", list(&["a"]))])),
            Err(TemplateError::TypeMismatch { .. })
        ));
        let j = parse_template("{s.join(l)}").unwrap();
        assert!(matches!(
            j.instantiate(&fields(&[("s", text(" ")), ("l", text("a"))])),
            Err(TemplateError::TypeMismatch { .. })
        ));
        assert!(matches!(
            j.instantiate(&fields(&[("s", list(&[])), ("l", list(&[]))])),
            Err(TemplateError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn template_line_lineage_rules() {
        let mut line = TemplateLine {
            template_id: "t".into(),
            task_id: "k".into(),
            text: "x".into(),
            origin: Origin::Generated,
            lineage: None,
            attributes: None,
        };
        assert!(line.to_template().is_err());
        line.origin = Origin::Raw;
        assert!(line.to_template().is_ok());
    }

    #[test]
    fn field_values_deserialize_untagged() {
        let rec: InstanceRecord = serde_json::from_str(
            r#"{"instance_id":"i","task_id":"t","fields":{"a":"x","b":["y","z"]},"target":"ok"}"#,
        )
        .unwrap();
        assert_eq!(rec.fields["a"], text("x"));
        assert_eq!(rec.fields["b"], list(&["y", "z"]));
        assert!(rec.validate().is_ok());
    }
}
