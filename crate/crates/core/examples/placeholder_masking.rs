// Mask placeholders before rewriting, restore them afterwards and check
// that the rewrite kept them.

use instrexp::{check_placeholder_match, mask_placeholders, restore_placeholders, InstructionTemplate, MatchMode};

pub fn run_example() -> anyhow::Result<()> {
    let t = InstructionTemplate::new("vqa-3", "vqa", "Based on the image, answer {question} choosing from {options}.")?;
    let (masked, map) = mask_placeholders(&t)?;
    println!("masked:  {masked}");
    println!("map:     {}", serde_json::to_string(&map)?);

    let replies = [
        "Using the picture, respond to {A} by selecting from {B}.",
        "Choosing from {B}, answer {A} based on the image.",
        "Answer {A} based on the image.",
    ];
    for reply in replies {
        let restored = restore_placeholders(reply, &map);
        let unordered = check_placeholder_match(&t, &restored, MatchMode::Unordered)?;
        let ordered = check_placeholder_match(&t, &restored, MatchMode::Ordered)?;
        println!("{restored}\n    unordered={unordered} ordered={ordered}");
    }

    // masks that already occur in the text are skipped
    let tricky = InstructionTemplate::new("t", "k", "Print {{A}} next to {label}.")?;
    let (masked, map) = mask_placeholders(&tricky)?;
    println!("{masked}  ->  {}", restore_placeholders(&masked, &map));
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
