//! Drive the full pipeline from a JSON scene file.
//!
//! ```text
//! cargo run --example scene_from_config -- [scene.json] [output dir]
//! ```
//!
//! Defaults to the two-object demo shipped under `demo/`. This is the same
//! code path as `objcomp compose`.

use std::path::PathBuf;

use objcomp::app::{run_compose, Invocation};

fn main() {
    let mut args = std::env::args().skip(1);
    let config = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../demo/two_objects/scene.json")
    });
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("objcomp-scene"));

    match run_compose(&Invocation::new(&config).with_output_dir(&out)) {
        Ok(m) => {
            println!("wrote {} ({} steps)", out.display(), m.steps.len());
            for (file, sha) in &m.outputs {
                println!("  {file}  {}", &sha[..16]);
            }
            for mask in &m.masks {
                println!("  object {} {:?}: {:?} mask, {} px", mask.object, mask.class, mask.provenance, mask.pixels);
            }
            println!("  final checksum {}", m.final_checksum.unwrap_or_default());
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
