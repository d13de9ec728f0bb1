// Score generated templates, turn the scores into per-task sampling
// distributions under several epsilon settings, and draw from them.

use std::collections::BTreeMap;
use std::path::Path;

use instrexp::cli::read_templates;
use instrexp::sampler::{resolve_epsilon, score_pools};
use instrexp::seed::stream_rng;
use instrexp::{build_distribution, EpsilonMode, StubEmbedder, TemplateSampler};

pub fn run_example() -> anyhow::Result<()> {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let (raw, _) = read_templates(&[golden.join("templates.jsonl")])?;
    let (generated, _) = read_templates(&[golden.join("expected/valid.jsonl")])?;
    let pools = score_pools(&raw, &generated, &StubEmbedder::default(), 4, 7)?;

    let vqa = pools.iter().find(|p| p.task_id == "vqa").unwrap();
    let mut ranked: Vec<_> = vqa.scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(a.1));
    for (id, s) in ranked.iter().take(3) {
        println!("top score {s:+.3}  {id}");
    }

    for mode in ["default", "half", "double", "fixed:1"] {
        let mode: EpsilonMode = mode.parse().map_err(anyhow::Error::msg)?;
        let eps = resolve_epsilon(mode, vqa)?;
        let built = build_distribution(vqa, eps, 1.0)?;
        let sampler = TemplateSampler::new(&built)?;
        let mut rng = stream_rng(7, "vqa");
        let mut counts: BTreeMap<bool, usize> = BTreeMap::new();
        for _ in 0..10_000 {
            *counts.entry(sampler.sample(&mut rng).contains('|')).or_default() += 1;
        }
        println!(
            "{mode:?}: epsilon={eps:.3} raw draws={} generated draws={}",
            counts.get(&false).unwrap_or(&0),
            counts.get(&true).unwrap_or(&0)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
