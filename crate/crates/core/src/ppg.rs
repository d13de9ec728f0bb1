//! Placeholder-protected generation.
//!
//! Placeholders are swapped for short atomic masks (`{A}`, `{B}`, ...) before
//! text is handed to an LLM, and swapped back afterwards. A rewrite is then
//! accepted only if it kept the original placeholder set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{parse_segments, InstructionTemplate, PlaceholderExpr, Segment, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PpgError {
    #[error("mask alphabet exhausted")]
    MaskExhausted,
}

/// The n-th mask label in the sequence A..Z, AA..ZZ, AAA.. (bijective base 26).
fn mask_label(mut n: usize) -> String {
    let mut label = Vec::new();
    loop {
        label.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    label.reverse();
    String::from_utf8(label).expect("ascii")
}

// Far beyond any realistic placeholder count; bounds the collision scan.
const MAX_MASKS: usize = 26 + 26 * 26 + 26 * 26 * 26;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub mask: String,
    /// Placeholder expression without braces.
    pub placeholder: String,
}

/// Bijection between masks and the placeholders they protect.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMap {
    entries: Vec<MaskEntry>,
}

impl MaskMap {
    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn mask_for(&self, placeholder: &PlaceholderExpr) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.placeholder == placeholder.raw_text())
            .map(|e| e.mask.as_str())
    }
}

/// Replaces each unique placeholder (every occurrence) with a mask.
///
/// Masks that already occur in the rendered template are skipped so that
/// restoration cannot touch text that was never a placeholder.
pub fn mask_placeholders(t: &InstructionTemplate) -> Result<(String, MaskMap), PpgError> {
    let rendered = t.render();
    let mut next = 0usize;
    let mut map = MaskMap::default();
    for ph in t.placeholders() {
        let mask = loop {
            if next >= MAX_MASKS {
                return Err(PpgError::MaskExhausted);
            }
            let candidate = format!("{{{}}}", mask_label(next));
            next += 1;
            if !rendered.contains(&candidate) {
                break candidate;
            }
        };
        map.entries.push(MaskEntry { mask, placeholder: ph.raw_text().to_string() });
    }

    let mut masked = String::new();
    for seg in t.segments() {
        match seg {
            Segment::Literal(s) => masked.push_str(&crate::template::escape_literal(s)),
            Segment::Placeholder(p) => {
                masked.push_str(map.mask_for(p).expect("every placeholder was assigned a mask"))
            }
        }
    }
    Ok((masked, map))
}

/// Swaps masks in `generated` back to their placeholders.
///
/// A single left-to-right scan, trying longer masks first at each position,
/// so a restored placeholder is never rescanned and `{AB}` never matches
/// as `{A}`.
pub fn restore_placeholders(generated: &str, map: &MaskMap) -> String {
    let mut by_len: Vec<&MaskEntry> = map.entries.iter().collect();
    by_len.sort_by(|a, b| b.mask.len().cmp(&a.mask.len()).then_with(|| a.mask.cmp(&b.mask)));

    let mut out = String::with_capacity(generated.len());
    let mut rest = generated;
    while !rest.is_empty() {
        if rest.starts_with('{') {
            if let Some(entry) = by_len.iter().find(|e| rest.starts_with(e.mask.as_str())) {
                out.push('{');
                out.push_str(&entry.placeholder);
                out.push('}');
                rest = &rest[entry.mask.len()..];
                continue;
            }
        }
        let step = rest.chars().next().map_or(1, char::len_utf8);
        out.push_str(&rest[..step]);
        rest = &rest[step..];
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Unordered,
    Ordered,
}

/// Checks that `candidate_text` carries the same unique placeholders as
/// `original`. Occurrence counts are ignored; `Ordered` also requires the
/// same first-occurrence order.
pub fn check_placeholder_match(
    original: &InstructionTemplate,
    candidate_text: &str,
    mode: MatchMode,
) -> Result<bool, TemplateError> {
    let segments = parse_segments(candidate_text)?;
    let mut found: Vec<&PlaceholderExpr> = Vec::new();
    for seg in &segments {
        if let Segment::Placeholder(p) = seg {
            if !found.contains(&p) {
                found.push(p);
            }
        }
    }
    let expected = original.placeholders();
    if found.len() != expected.len() {
        return Ok(false);
    }
    Ok(match mode {
        MatchMode::Ordered => found.iter().zip(&expected).all(|(a, b)| *a == b),
        MatchMode::Unordered => expected.iter().all(|p| found.contains(&p)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::parse_template;

    #[test]
    fn mask_labels_extend_past_z() {
        assert_eq!(mask_label(0), "A");
        assert_eq!(mask_label(25), "Z");
        assert_eq!(mask_label(26), "AA");
        assert_eq!(mask_label(27), "AB");
        assert_eq!(mask_label(26 + 26 * 26), "AAA");
    }

    #[test]
    fn masks_object_region_template() {
        let t = parse_template("Is the object {text} in {regions}? {options}").unwrap();
        let (masked, map) = mask_placeholders(&t).unwrap();
        assert_eq!(masked, "Is the object {A} in {B}? {C}");
        let pairs: Vec<_> =
            map.entries().iter().map(|e| (e.mask.as_str(), e.placeholder.as_str())).collect();
        assert_eq!(pairs, [("{A}", "text"), ("{B}", "regions"), ("{C}", "options")]);
    }

    #[test]
    fn no_placeholders_gives_empty_map() {
        let t = parse_template("What is the caption of the image?").unwrap();
        let (masked, map) = mask_placeholders(&t).unwrap();
        assert_eq!(masked, "What is the caption of the image?");
        assert!(map.is_empty());
    }

    #[test]
    fn skips_masks_present_in_literal_text() {
        let t = parse_template("Literal {{A}} then {x}").unwrap();
        let (masked, map) = mask_placeholders(&t).unwrap();
        assert_eq!(map.entries()[0].mask, "{B}");
        assert_eq!(masked, "Literal {{A}} then {B}");
        assert_eq!(restore_placeholders(&masked, &map), t.render());
    }

    #[test]
    fn placeholder_named_like_a_mask() {
        let t = parse_template("{B} and {A} and {x}").unwrap();
        let (masked, map) = mask_placeholders(&t).unwrap();
        assert_eq!(masked, "{C} and {D} and {E}");
        assert_eq!(restore_placeholders(&masked, &map), t.render());
    }

    #[test]
    fn repeated_placeholders_share_a_mask() {
        let t = parse_template("{a} then {b} then {a}").unwrap();
        let (masked, map) = mask_placeholders(&t).unwrap();
        assert_eq!(masked, "{A} then {B} then {A}");
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn restores_rewritten_text() {
        let t = parse_template("Is the object {text} in {regions}? {options}").unwrap();
        let (_, map) = mask_placeholders(&t).unwrap();
        assert_eq!(
            restore_placeholders("Is the object {A} located in {B}? {C}", &map),
            "Is the object {text} located in {regions}? {options}"
        );
        assert_eq!(restore_placeholders("nothing masked here", &map), "nothing masked here");
    }

    #[test]
    fn restore_prefers_longer_masks() {
        let map = MaskMap {
            entries: vec![
                MaskEntry { mask: "{A}".into(), placeholder: "first".into() },
                MaskEntry { mask: "{AB}".into(), placeholder: "second".into() },
            ],
        };
        assert_eq!(restore_placeholders("{AB}{A}", &map), "{second}{first}");
    }

    #[test]
    fn restore_does_not_cascade() {
        let map = MaskMap {
            entries: vec![
                MaskEntry { mask: "{A}".into(), placeholder: "B".into() },
                MaskEntry { mask: "{B}".into(), placeholder: "c".into() },
            ],
        };
        assert_eq!(restore_placeholders("{A} {B}", &map), "{B} {c}");
    }

    #[test]
    fn match_modes() {
        let t = parse_template("x {a} y {b} z {c}").unwrap();
        let reordered = "y {b} x {a} z {c}";
        assert!(check_placeholder_match(&t, reordered, MatchMode::Unordered).unwrap());
        assert!(!check_placeholder_match(&t, reordered, MatchMode::Ordered).unwrap());
        for mode in [MatchMode::Unordered, MatchMode::Ordered] {
            assert!(check_placeholder_match(&t, &t.render(), mode).unwrap());
            assert!(!check_placeholder_match(&t, "x {a} y {b}", mode).unwrap());
            assert!(!check_placeholder_match(&t, "{a}{b}{c}{d}", mode).unwrap());
        }
    }

    #[test]
    fn repeats_do_not_affect_match() {
        let t = parse_template("{a} {b}").unwrap();
        assert!(check_placeholder_match(&t, "{a} {b} {a}", MatchMode::Ordered).unwrap());
    }

    #[test]
    fn invalid_candidate_is_an_error() {
        let t = parse_template("{a}").unwrap();
        assert!(check_placeholder_match(&t, "{a b}", MatchMode::Unordered).is_err());
        assert!(check_placeholder_match(&t, "{a", MatchMode::Unordered).is_err());
    }
}
