//! Runs the bottom-up data pipeline over rendered scenes with mock model
//! ports and prints the resulting manifest records and rejections.

use multicomp::datagen::{export_synthetic_inputs, read_manifest, run_datagen, DatagenConfig, FilterRules, PortBinding, SourceTag};
use multicomp::synthetic::{generate, SyntheticConfig};

fn main() -> multicomp::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("multicomp-datagen"));
    let scenes = generate(&SyntheticConfig {
        count: 10,
        min_extent: 0.2,
        ..Default::default()
    })?;
    let inputs = dir.join("inputs");
    export_synthetic_inputs(&scenes, &inputs)?;
    let cfg = DatagenConfig {
        source: SourceTag::Bottomup,
        input: inputs,
        manifest: dir.join("data").join("manifest.jsonl"),
        seed: 0,
        rules: FilterRules::default(),
        ports: PortBinding::Mock,
    };
    let summary = run_datagen(&cfg)?;
    for r in read_manifest(&cfg.manifest)? {
        let phrases: Vec<String> = r.caption.spans.iter().map(|s| r.caption.phrase(s)).collect();
        println!("{}  {:?}  spans {:?}  tags {:?}", r.id, r.caption.text, phrases, r.tags);
    }
    for s in &summary.skipped {
        let reasons: Vec<_> = s.audit.iter().filter_map(|a| a.reason).collect();
        println!("{} skipped: {:?}", s.id, reasons);
    }
    println!("{} records in {}", summary.records, cfg.manifest.display());
    Ok(())
}
