//! Writes a seeded synthetic bank and dataset for trying the CLI.
//!
//! Usage: `cargo run --example synth_data -- OUT_DIR [SEED] [PAIRS]`

use std::path::PathBuf;

use anyhow::Context;
use contrastive_triad::eval::write_dataset;
use contrastive_triad::synthetic::{generate, SynthSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().context("missing OUT_DIR")?);
    let mut spec = SynthSpec::default();
    if let Some(seed) = args.next() {
        spec.seed = seed.parse().context("SEED must be an integer")?;
    }
    if let Some(pairs) = args.next() {
        spec.pairs = pairs.parse().context("PAIRS must be an integer")?;
    }
    std::fs::create_dir_all(&out)?;
    let data = generate(&spec);
    data.bank
        .write(&out.join("bank.jsonl"), &out.join("bank.bin"))?;
    write_dataset(&out.join("dataset.jsonl"), &data.pairs)?;
    println!(
        "wrote {} bank entries and {} pairs to {}",
        data.bank.len(),
        data.pairs.len(),
        out.display()
    );
    Ok(())
}
