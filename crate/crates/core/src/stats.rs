//! Corpus statistics and per-task attribute analysis.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::word_count;
use crate::template::{InstanceRecord, InstructionTemplate, PlaceholderKind, TaskAnnotations};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points")]
    TooShort,
    #[error("a series has zero variance")]
    ZeroVariance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_instructions: usize,
    /// Mean whitespace-token count; 0 when `empty`.
    pub avg_word_length: f64,
    pub empty: bool,
    pub length_histogram: BTreeMap<usize, usize>,
    /// Keyed by the first two tokens joined with a space.
    pub prefix2_distribution: BTreeMap<String, usize>,
}

pub fn corpus_stats(templates: &[InstructionTemplate]) -> CorpusStats {
    let mut stats = CorpusStats { n_instructions: templates.len(), empty: templates.is_empty(), ..Default::default() };
    let mut total = 0usize;
    for t in templates {
        let text = t.render();
        let n = word_count(&text);
        total += n;
        *stats.length_histogram.entry(n).or_default() += 1;
        let prefix: Vec<&str> = text.split_whitespace().take(2).collect();
        if !prefix.is_empty() {
            *stats.prefix2_distribution.entry(prefix.join(" ")).or_default() += 1;
        }
    }
    if !templates.is_empty() {
        stats.avg_word_length = total as f64 / templates.len() as f64;
    }
    stats
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProportionSummary {
    pub mean: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Mean share of characters contributed by template literals in the
/// instantiated instruction, over a seeded sample of (template, instance)
/// pairs. Pairs that fail to instantiate or render empty are skipped.
pub fn template_text_proportion<R: Rng + ?Sized>(
    task_templates: &[InstructionTemplate],
    task_instances: &[InstanceRecord],
    sample_cap: usize,
    rng: &mut R,
) -> ProportionSummary {
    let total_pairs = task_templates.len() * task_instances.len();
    let take = sample_cap.min(total_pairs);
    if take == 0 {
        return ProportionSummary::default();
    }
    let mut picks = sample_indices(rng, total_pairs, take).into_vec();
    picks.sort_unstable();
    let mut sum = 0.0;
    let mut summary = ProportionSummary::default();
    for p in picks {
        let t = &task_templates[p / task_instances.len()];
        let inst = &task_instances[p % task_instances.len()];
        match t.instantiate(&inst.fields) {
            Ok(text) if !text.is_empty() => {
                let literal = t.literal_text().chars().count() as f64;
                sum += literal / text.chars().count() as f64;
                summary.pairs_used += 1;
            }
            _ => summary.pairs_skipped += 1,
        }
    }
    if summary.pairs_used > 0 {
        summary.mean = sum / summary.pairs_used as f64;
    }
    summary
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooShort);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAttributes {
    pub task_id: String,
    pub direct_question: bool,
    pub option_inclusive: bool,
    pub template_text_proportion: f64,
    /// True when the booleans came from the heuristic rather than annotations.
    pub heuristic: bool,
}

/// Heuristic guess at the boolean task attributes: a task asks a direct
/// question when one of its templates is a placeholder-free question; it is
/// option-inclusive when some placeholder refers to an `options`-like field.
pub fn heuristic_attributes(templates: &[InstructionTemplate]) -> (bool, bool) {
    let direct = templates.iter().any(|t| !t.has_placeholders() && t.render().contains('?'));
    let options = templates.iter().flat_map(|t| t.placeholders()).any(|p| match p.kind() {
        PlaceholderKind::Field(f) => f.to_lowercase().contains("option"),
        PlaceholderKind::Join { list_field, .. } => list_field.to_lowercase().contains("option"),
    });
    (direct, options)
}

pub fn task_attributes<R: Rng + ?Sized>(
    task_id: &str,
    templates: &[InstructionTemplate],
    instances: &[InstanceRecord],
    annotations: Option<&TaskAnnotations>,
    sample_cap: usize,
    rng: &mut R,
) -> TaskAttributes {
    let (h_direct, h_options) = heuristic_attributes(templates);
    let direct = annotations.and_then(|a| a.direct_question);
    let options = annotations.and_then(|a| a.option_inclusive);
    TaskAttributes {
        task_id: task_id.to_string(),
        direct_question: direct.unwrap_or(h_direct),
        option_inclusive: options.unwrap_or(h_options),
        template_text_proportion: template_text_proportion(templates, instances, sample_cap, rng).mean,
        heuristic: direct.is_none() || options.is_none(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::FieldValue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(text: &str) -> InstructionTemplate {
        InstructionTemplate::new("id", "k", text).unwrap()
    }

    fn inst(fields: &[(&str, &str)]) -> InstanceRecord {
        InstanceRecord {
            instance_id: "i".into(),
            task_id: "k".into(),
            fields: fields.iter().map(|(k, v)| (k.to_string(), FieldValue::Text(v.to_string()))).collect(),
            target: "y".into(),
            media_ref: None,
        }
    }

    #[test]
    fn small_corpus() {
        let s = corpus_stats(&[t("a b"), t("c d e f")]);
        assert_eq!(s.n_instructions, 2);
        assert_eq!(s.avg_word_length, 3.0);
        assert_eq!(s.length_histogram, BTreeMap::from([(2, 1), (4, 1)]));
        assert_eq!(s.prefix2_distribution, BTreeMap::from([("a b".to_string(), 1), ("c d".to_string(), 1)]));
        assert!(!s.empty);
    }

    #[test]
    fn placeholders_count_as_one_token() {
        let s = corpus_stats(&[t("Describe {region_split_token.join(region)} now")]);
        assert_eq!(s.avg_word_length, 3.0);
        assert_eq!(s.prefix2_distribution.keys().next().unwrap(), "Describe {region_split_token.join(region)}");
    }

    #[test]
    fn empty_corpus() {
        let s = corpus_stats(&[]);
        assert!(s.empty);
        assert_eq!(s.avg_word_length, 0.0);
        assert!(s.length_histogram.is_empty());
    }

    #[test]
    fn proportions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = template_text_proportion(&[t("Describe the image.")], &[inst(&[])], 10, &mut rng);
        assert_eq!(p.mean, 1.0);
        let p = template_text_proportion(&[t("Q: {text}")], &[inst(&[("text", "abc")])], 10, &mut rng);
        assert_eq!(p.mean, 0.5);
        let p = template_text_proportion(&[t("{text}")], &[inst(&[("text", "abc")])], 10, &mut rng);
        assert_eq!(p.mean, 0.0);
        let p = template_text_proportion(&[t("{missing}")], &[inst(&[])], 10, &mut rng);
        assert_eq!((p.pairs_used, p.pairs_skipped), (0, 1));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // 5.5 / sqrt(5 * 8.75)
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap();
        assert!((r - 0.831_521_840_620_299_9).abs() < 1e-12);
        assert_eq!(pearson(&[1.0], &[1.0]), Err(StatsError::TooShort));
        assert_eq!(pearson(&[1.0, 2.0], &[1.0]), Err(StatsError::LengthMismatch(2, 1)));
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ZeroVariance));
    }

    #[test]
    fn attributes_prefer_annotations() {
        let templates = [t("What is shown?"), t("Pick one: {options}")];
        assert_eq!(heuristic_attributes(&templates), (true, true));
        assert_eq!(heuristic_attributes(&[t("Describe the image."), t("Is {x} red?")]), (false, false));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ann = TaskAnnotations { direct_question: Some(false), option_inclusive: Some(false) };
        let a = task_attributes("k", &templates, &[inst(&[("options", "a b")])], Some(&ann), 10, &mut rng);
        assert!(!a.direct_question && !a.option_inclusive && !a.heuristic);
    }
}
