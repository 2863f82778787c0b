//! Regenerates the bundled fixture: `cargo run --example make_fixture [DIR]`.

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    redesign::fixture::write(&dir)?;
    println!("fixture written to {}", dir.display());
    Ok(())
}
