// Ask the model for rewriting directives and parse its enumerated reply.
// Uses a canned backend; point `INSTREXP_LLM_URL` at a real endpoint and
// swap in `HttpBackend::from_env()` to go live.

use instrexp::llm::{bootstrap_guiding_instructions, bootstrap_prompt, FixtureEntry, FixtureMatch, PromptOptions, RetryPolicy};
use instrexp::{Gateway, MockBackend};

const REPLY: &str = "Sure! Here are some ways to rephrase short text:

1. **Use synonyms**: Replace words with their synonyms.

2. **Rearrange phrases**: Reorder the sentence
   without changing its meaning.

3) Simplify language.
4. Make it more formal.";

pub fn run_example() -> anyhow::Result<()> {
    println!("prompt: {}", bootstrap_prompt(4, PromptOptions::default()));
    let backend = MockBackend::new(vec![FixtureEntry {
        matcher: FixtureMatch { substring: "rephrase short text".into(), temperature: None },
        response: REPLY.into(),
    }]);
    let gateway = Gateway::new(Box::new(backend)).with_retry(RetryPolicy::none());
    let guiding = bootstrap_guiding_instructions(&gateway, 4, 0.6, PromptOptions { fix_typos: true })?;
    for g in &guiding {
        println!("{}  {}", g.guiding_id, g.text);
    }
    anyhow::ensure!(guiding.len() == 4);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
