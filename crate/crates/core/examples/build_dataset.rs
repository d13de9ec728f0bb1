// Build an instantiated dataset from raw and generated templates.

use std::path::Path;

use instrexp::cli::read_templates;
use instrexp::sampler::{resolve_epsilon, score_pools};
use instrexp::{build_dataset, build_distribution, BuildConfig, EpsilonMode, InstanceRecord, StubEmbedder};

pub fn run_example() -> anyhow::Result<()> {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let paths = [golden.join("templates.jsonl"), golden.join("expected/valid.jsonl")];
    let (all, _) = read_templates(&paths)?;
    let (raw, generated): (Vec<_>, Vec<_>) = all.iter().cloned().partition(|t| t.lineage.is_none());
    let instances: Vec<InstanceRecord> = instrexp::io::read_jsonl(&golden.join("instances.jsonl"))?;

    let pools = score_pools(&raw, &generated, &StubEmbedder::default(), 4, 7)?
        .iter()
        .map(|p| build_distribution(p, resolve_epsilon(EpsilonMode::Default, p)?, 1.0))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = BuildConfig { per_task_cap: 3, seed: 7, ..Default::default() };
    let (records, report) = build_dataset(&instances, &pools, &all, &cfg)?;
    for r in &records {
        println!("{:<10} {:<4} {}", r.task_id, r.instance_id, r.instruction_text);
    }
    for (task, t) in &report.tasks {
        println!("{task}: {}/{} instances used, {} redraws", t.records, t.instances_available, t.redraws);
    }

    let out = std::env::temp_dir().join("instrexp-example-dataset.jsonl");
    instrexp::dataset::write_jsonl(&records, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
