// Parse a template, list its placeholders and instantiate it.

use std::collections::BTreeMap;

use instrexp::template::FieldValue;
use instrexp::InstructionTemplate;

pub fn run_example() -> anyhow::Result<()> {
    let t = InstructionTemplate::new(
        "grd-2",
        "grounding",
        "Which region shows {object}? Candidates: {region_split_token.join(regions)} (answer as {{region}})",
    )?;
    for p in t.placeholders() {
        println!("placeholder {:<35} reads {:?}", p.braced(), p.fields());
    }

    let mut fields = BTreeMap::new();
    fields.insert("object".to_string(), FieldValue::Text("the red car".into()));
    fields.insert("region_split_token".to_string(), FieldValue::Text(" | ".into()));
    fields.insert("regions".to_string(), FieldValue::List(vec!["<r0>".into(), "<r1>".into(), "<r2>".into()]));
    println!("{}", t.instantiate(&fields)?);

    fields.remove("object");
    match t.instantiate(&fields) {
        Err(e) => println!("without `object`: {e}"),
        Ok(_) => anyhow::bail!("instantiation should fail without `object`"),
    }
    for bad in ["Broken {brace", "Call {f(x)}"] {
        println!("{bad:?}: {}", InstructionTemplate::new("x", "k", bad).unwrap_err());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
