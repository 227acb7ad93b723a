//! Regenerates the bundled fixtures under `crates/core/fixtures/`.

use std::path::PathBuf;

fn main() -> cns_eval::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    cns_eval::synth::write_mini_fixture(root.join("mini"))?;
    cns_eval::synth::write_grid24_fixture(root.join("grid24"))?;
    println!("wrote {}", root.display());
    Ok(())
}
