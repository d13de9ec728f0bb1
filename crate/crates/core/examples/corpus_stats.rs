// Length and prefix statistics over a template corpus, plus per-task
// attributes correlated against a made-up score.

use std::collections::BTreeMap;
use std::path::Path;

use instrexp::cli::read_templates;
use instrexp::seed::stream_rng;
use instrexp::stats::task_attributes;
use instrexp::{corpus_stats, pearson, InstanceRecord, InstructionTemplate};

pub fn run_example() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let (templates, _) = read_templates(&[fixtures.join("stats/templates.jsonl")])?;
    let s = corpus_stats(&templates);
    println!("{} instructions, {:.2} words on average", s.n_instructions, s.avg_word_length);
    for (len, n) in &s.length_histogram {
        println!("{len:>3} words {}", "#".repeat(*n));
    }
    let mut prefixes: Vec<_> = s.prefix2_distribution.iter().collect();
    prefixes.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    println!("common openings: {:?}", &prefixes[..3]);

    let (golden, annotations) =
        read_templates(&[fixtures.join("golden/templates.jsonl")])?;
    let instances: Vec<InstanceRecord> = instrexp::io::read_jsonl(&fixtures.join("golden/instances.jsonl"))?;
    let mut by_task: BTreeMap<&str, Vec<InstructionTemplate>> = BTreeMap::new();
    for t in &golden {
        by_task.entry(t.task_id.as_str()).or_default().push(t.clone());
    }
    let mut proportions = Vec::new();
    for (task, ts) in &by_task {
        let insts: Vec<_> = instances.iter().filter(|i| i.task_id == *task).cloned().collect();
        let a = task_attributes(task, ts, &insts, annotations.get(*task), 100, &mut stream_rng(1, task));
        println!("{task}: direct={} options={} template share={:.2}", a.direct_question, a.option_inclusive, a.template_text_proportion);
        proportions.push(a.template_text_proportion);
    }
    let gains = [0.4, 1.9, 0.7];
    println!("pearson(template share, gain) = {:.3}", pearson(&proportions, &gains)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
