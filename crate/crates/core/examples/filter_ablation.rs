// Re-filter the golden candidates under different settings and compare
// how many survive each stage.

use std::path::Path;

use instrexp::cli::read_templates;
use instrexp::filter::DedupScope;
use instrexp::{run_pipeline, FilterConfig, GenerationCandidate, MatchMode};

pub fn run_example() -> anyhow::Result<()> {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let (raw, _) = read_templates(&[golden.join("templates.jsonl")])?;
    let candidates: Vec<GenerationCandidate> = instrexp::io::read_jsonl(&golden.join("expected/candidates.jsonl"))?;

    let settings = [
        ("defaults", FilterConfig::default()),
        ("ordered placeholders", FilterConfig { match_mode: MatchMode::Ordered, ..Default::default() }),
        ("no length filter", FilterConfig { length_filter_enabled: false, ..Default::default() }),
        ("word cap 10", FilterConfig { absolute_word_cap: 10, ..Default::default() }),
        ("global dedup", FilterConfig { dedup_scope: DedupScope::Global, ..Default::default() }),
    ];
    println!("{:<22} {:>5} {:>5} {:>5} {:>5} {:>5}", "setting", "valid", "dup", "ph", "len", "parse");
    for (name, cfg) in settings {
        let mut c = candidates.clone();
        let (_, report) = run_pipeline(&mut c, &raw, &cfg);
        let t = report.total;
        println!("{name:<22} {:>5} {:>5} {:>5} {:>5} {:>5}", t.valid, t.dup, t.placeholder, t.length, t.parse);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
