// Single-pass, iterative and multi-temperature expansion against canned
// model replies.

use std::path::Path;

use instrexp::cli::read_templates;
use instrexp::llm::{read_guiding_file, FixtureEntry, FixtureMatch, RetryPolicy};
use instrexp::{Expander, ExpansionConfig, ExpansionMode, FilterConfig, Gateway, MockBackend};

pub fn run_example() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/iter");
    let (templates, _) = read_templates(&[dir.join("templates.jsonl")])?;
    let guiding = read_guiding_file(&dir.join("guiding.txt"))?;
    let gateway = Gateway::new(Box::new(MockBackend::from_jsonl(&dir.join("responses.jsonl"))?))
        .with_retry(RetryPolicy::none());
    let expander = Expander::new(&gateway, FilterConfig::default());

    let single = ExpansionConfig { mode: ExpansionMode::Single, temperature: 0.6, ..Default::default() };
    let out = expander.expand(&templates, &guiding, &single)?;
    println!("single: {} candidates", out.candidates.len());

    for rounds in 1..=3 {
        let cfg = ExpansionConfig { mode: ExpansionMode::Iter, iterations: rounds, ..single.clone() };
        let out = expander.expand(&templates, &guiding, &cfg)?;
        println!("iter({rounds}): {} candidates, {} valid", out.candidates.len(), out.valid().count());
        if rounds == 3 {
            let deepest = out.valid().max_by_key(|c| c.iteration).unwrap();
            println!("    deepest: {:?} (root {})", deepest.restored_text, deepest.root_template_id);
        }
    }
    let capped = ExpansionConfig { mode: ExpansionMode::Iter, iterations: 4, target_count: Some(5), ..single.clone() };
    println!("iter(4) stopping at 5 valid: {} valid", expander.expand(&templates, &guiding, &capped)?.valid().count());

    // every temperature gets its own pass; the catch-all reply repeats, so
    // only the first pass survives deduplication
    let any = Gateway::new(Box::new(MockBackend::new(vec![FixtureEntry {
        matcher: FixtureMatch { substring: String::new(), temperature: None },
        response: "Portray the picture.".into(),
    }])));
    let mt = ExpansionConfig { mode: ExpansionMode::Mt, ..Default::default() };
    let out = Expander::new(&any, FilterConfig::default()).expand(&templates[..1], &guiding[..1], &mt)?;
    println!("mt: {} passes, {} candidates, {} valid", out.passes, out.candidates.len(), out.valid().count());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
