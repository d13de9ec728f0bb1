//! Instantiated dataset construction.
//!
//! Every selected instance appears once, paired with one template drawn from
//! its task's sampling distribution.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::JsonlError;
use crate::sampler::{EpsilonMode, SamplerError, TaskPool, TemplateSampler};
use crate::seed::stream_rng;
use crate::template::{is_identifier, InstanceRecord, InstructionTemplate};

/// Extra draws allowed after a failed instantiation.
pub const MAX_REDRAWS: usize = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no sampling pool for task `{0}`")]
    PoolMissing(String),
    #[error("pool for task `{task_id}` references unknown template `{template_id}`")]
    UnknownTemplate { task_id: String, template_id: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub per_task_cap: usize,
    pub seed: u64,
    pub epsilon_mode: EpsilonMode,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { per_task_cap: 1000, seed: 42, epsilon_mode: EpsilonMode::Default }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task_id: String,
    pub instance_id: String,
    pub template_id: String,
    pub instruction_text: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_ref: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBuildReport {
    pub instances_available: usize,
    pub instances_selected: usize,
    pub records: usize,
    pub skipped: Vec<String>,
    pub redraws: usize,
    pub template_usage: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub tasks: BTreeMap<String, TaskBuildReport>,
    pub total_records: usize,
    pub warnings: Vec<String>,
}

/// True if `text` contains something that parses as `{field}` or
/// `{sep.join(list)}`, i.e. a placeholder that was never filled.
pub fn has_residual_placeholder(text: &str) -> bool {
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        if let Some(close) = after.find(['{', '}']) {
            if after.as_bytes()[close] == b'}' {
                let inner = &after[..close];
                let valid = is_identifier(inner)
                    || inner.split_once(".join(").is_some_and(|(a, b)| {
                        is_identifier(a) && b.strip_suffix(')').is_some_and(is_identifier)
                    });
                if valid {
                    return true;
                }
            }
        }
        rest = after;
    }
    false
}

/// Samples, instantiates and emits records sorted by (task_id, instance_id).
///
/// `pools` must already carry built distributions and `templates` must hold
/// every template id those pools mention.
pub fn build_dataset(
    instances: &[InstanceRecord],
    pools: &[TaskPool],
    templates: &[InstructionTemplate],
    cfg: &BuildConfig,
) -> Result<(Vec<DatasetRecord>, BuildReport), DatasetError> {
    let by_id: HashMap<&str, &InstructionTemplate> = templates.iter().map(|t| (t.template_id.as_str(), t)).collect();
    let pools_by_task: HashMap<&str, &TaskPool> = pools.iter().map(|p| (p.task_id.as_str(), p)).collect();

    let mut per_task: BTreeMap<&str, Vec<&InstanceRecord>> = BTreeMap::new();
    for inst in instances {
        per_task.entry(inst.task_id.as_str()).or_default().push(inst);
    }

    let mut records = Vec::new();
    let mut report = BuildReport::default();
    for (task_id, mut task_instances) in per_task {
        let pool = pools_by_task.get(task_id).ok_or_else(|| DatasetError::PoolMissing(task_id.to_string()))?;
        for id in pool.template_ids() {
            if !by_id.contains_key(id) {
                return Err(DatasetError::UnknownTemplate { task_id: task_id.into(), template_id: id.into() });
            }
        }
        let sampler = TemplateSampler::new(pool)?;
        task_instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        task_instances.dedup_by(|a, b| a.instance_id == b.instance_id);

        let mut rng = stream_rng(cfg.seed, task_id);
        let mut task_report = TaskBuildReport { instances_available: task_instances.len(), ..Default::default() };
        let cap = cfg.per_task_cap.max(1);
        let selected: Vec<&InstanceRecord> = if task_instances.len() > cap {
            let mut idx = sample_indices(&mut rng, task_instances.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| task_instances[i]).collect()
        } else {
            task_instances
        };
        task_report.instances_selected = selected.len();

        for inst in selected {
            let mut emitted = false;
            for attempt in 0..=MAX_REDRAWS {
                let template_id = sampler.sample(&mut rng);
                let template = by_id[template_id];
                if attempt > 0 {
                    task_report.redraws += 1;
                }
                let filled = template.instantiate(&inst.fields).ok().filter(|t| !has_residual_placeholder(t));
                if let Some(text) = filled {
                    *task_report.template_usage.entry(template_id.to_string()).or_default() += 1;
                    records.push(DatasetRecord {
                        task_id: task_id.to_string(),
                        instance_id: inst.instance_id.clone(),
                        template_id: template_id.to_string(),
                        instruction_text: text,
                        target: inst.target.clone(),
                        media_ref: inst.media_ref.clone(),
                    });
                    emitted = true;
                    break;
                }
            }
            if !emitted {
                task_report.skipped.push(inst.instance_id.clone());
            }
        }
        task_report.records = task_report.instances_selected - task_report.skipped.len();
        if task_report.records == 0 && task_report.instances_selected > 0 {
            report.warnings.push(format!("task `{task_id}`: every instantiation failed"));
        } else if !task_report.skipped.is_empty() {
            report
                .warnings
                .push(format!("task `{task_id}`: skipped {} instance(s) after redraws", task_report.skipped.len()));
        }
        report.tasks.insert(task_id.to_string(), task_report);
    }
    records.sort_by(|a, b| (&a.task_id, &a.instance_id).cmp(&(&b.task_id, &b.instance_id)));
    report.total_records = records.len();
    Ok((records, report))
}

pub fn write_jsonl(records: &[DatasetRecord], path: &Path) -> Result<(), DatasetError> {
    Ok(crate::io::write_jsonl(path, records)?)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    Ok(crate::io::read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{build_distribution, GeneratedEntry};
    use crate::template::FieldValue;

    fn instance(id: &str, task: &str, fields: &[(&str, &str)]) -> InstanceRecord {
        InstanceRecord {
            instance_id: id.into(),
            task_id: task.into(),
            fields: fields.iter().map(|(k, v)| (k.to_string(), FieldValue::Text(v.to_string()))).collect(),
            target: format!("answer {id}"),
            media_ref: Some(format!("img/{id}.jpg")),
        }
    }

    fn single_pool(task: &str, id: &str) -> TaskPool {
        let mut p = TaskPool::new(task);
        p.originals.push(id.into());
        build_distribution(&p, 1.0, 1.0).unwrap()
    }

    #[test]
    fn single_template_pool() {
        let t = InstructionTemplate::new("t0", "k", "What is in {obj}?").unwrap();
        let insts: Vec<_> = ["c", "a", "b"].iter().map(|i| instance(i, "k", &[("obj", "the box")])).collect();
        let (records, report) = build_dataset(&insts, &[single_pool("k", "t0")], &[t], &BuildConfig::default()).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.template_id == "t0" && r.instruction_text == "What is in the box?"));
        let ids: Vec<_> = records.iter().map(|r| r.instance_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(records[0].media_ref.as_deref(), Some("img/a.jpg"));
        assert_eq!(report.total_records, 3);
    }

    #[test]
    fn cap_subsamples_deterministically() {
        let t = InstructionTemplate::new("t0", "k", "Describe.").unwrap();
        let insts: Vec<_> = (0..10).map(|i| instance(&format!("i{i}"), "k", &[])).collect();
        let cfg = BuildConfig { per_task_cap: 1, seed: 9, ..Default::default() };
        let run = || build_dataset(&insts, &[single_pool("k", "t0")], std::slice::from_ref(&t), &cfg).unwrap().0;
        let first = run();
        assert_eq!(first.len(), 1);
        assert_eq!(first, run());
    }

    #[test]
    fn failed_instantiations_redraw_then_skip() {
        let good = InstructionTemplate::new("good", "k", "Plain.").unwrap();
        let bad = InstructionTemplate::new("bad", "k", "Needs {missing}.").unwrap();
        let mut p = TaskPool::new("k");
        p.originals = vec!["bad".into()];
        p.generated = vec![GeneratedEntry { template_id: "good".into(), origin_id: "bad".into() }];
        p.scores.insert("good".into(), 0.0);
        let p = build_distribution(&p, 0.5, 1.0).unwrap();
        let insts: Vec<_> = (0..50).map(|i| instance(&format!("i{i:02}"), "k", &[])).collect();
        let (records, report) = build_dataset(&insts, &[p], &[good, bad.clone()], &BuildConfig::default()).unwrap();
        let task = &report.tasks["k"];
        assert!(task.redraws > 0);
        assert_eq!(records.len() + task.skipped.len(), 50);
        assert!(records.iter().all(|r| r.template_id == "good"));

        let only_bad = single_pool("k", "bad");
        let (records, report) = build_dataset(&insts, &[only_bad], &[bad], &BuildConfig::default()).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn missing_pool_is_an_error() {
        let insts = vec![instance("a", "nope", &[])];
        assert!(matches!(build_dataset(&insts, &[], &[], &BuildConfig::default()), Err(DatasetError::PoolMissing(_))));
    }

    #[test]
    fn placeholder_shaped_output_is_redrawn() {
        let literal = InstructionTemplate::new("lit", "k", "Reply with {{answer}}.").unwrap();
        let plain = InstructionTemplate::new("plain", "k", "Reply.").unwrap();
        let mut p = TaskPool::new("k");
        p.originals = vec!["lit".into(), "plain".into()];
        let p = build_distribution(&p, 1.0, 1.0).unwrap();
        let insts: Vec<_> = (0..20).map(|i| instance(&format!("i{i:02}"), "k", &[])).collect();
        let (records, _) = build_dataset(&insts, &[p], &[literal, plain], &BuildConfig::default()).unwrap();
        assert!(records.iter().all(|r| r.template_id == "plain"));
    }

    #[test]
    fn residual_placeholder_detection() {
        assert!(has_residual_placeholder("Is it {obj}?"));
        assert!(has_residual_placeholder("x {s.join(l)} y"));
        assert!(!has_residual_placeholder("Coordinates {10, 20}"));
        assert!(!has_residual_placeholder("no braces"));
        assert!(!has_residual_placeholder("{ spaced }"));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![DatasetRecord {
            task_id: "k".into(),
            instance_id: "i".into(),
            template_id: "t".into(),
            instruction_text: "Describe {{this}}.".into(),
            target: "ok".into(),
            media_ref: None,
        }];
        write_jsonl(&recs, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), recs);

        write_jsonl(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(read_jsonl(&path).unwrap().is_empty());

        let mut lines: Vec<String> = (0..8).map(|_| serde_json::to_string(&recs[0]).unwrap()).collect();
        lines[6] = "{not json".into();
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_jsonl(&path) {
            Err(DatasetError::Jsonl(JsonlError::Schema { line, .. })) => assert_eq!(line, 7),
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
