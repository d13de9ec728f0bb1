// The whole pipeline from one config file, driven through the CLI entry
// point: expand, filter, score, build the distribution, sample the dataset.

use std::path::Path;

use instrexp::cli::pipeline_files;
use instrexp::{BuildReport, FilterReport};

pub fn run_example() -> anyhow::Result<()> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden/run.toml");
    let out = tempfile::tempdir()?;
    let code = instrexp::cli::run([
        "instrexp".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "pipeline".as_ref(),
        "--out-dir".as_ref(),
        out.path().as_os_str(),
    ]);
    anyhow::ensure!(code == 0, "pipeline exited with {code}");

    let filter: FilterReport = instrexp::io::read_json(&out.path().join(pipeline_files::FILTER_REPORT))?;
    println!("filter: {}", serde_json::to_string(&filter.total)?);
    let build: BuildReport = instrexp::io::read_json(&out.path().join(pipeline_files::BUILD_REPORT))?;
    println!("dataset: {} records", build.total_records);
    for line in std::fs::read_to_string(out.path().join(pipeline_files::DATASET))?.lines().take(3) {
        println!("  {line}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
