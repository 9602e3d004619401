use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    let header = target_dir().join("include").join("critalign.h");
    cbindgen::generate(crate_dir)
        .expect("cbindgen header generation")
        .write_to_file(header);
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}

fn target_dir() -> PathBuf {
    if let Ok(target) = env::var("CARGO_TARGET_DIR") {
        PathBuf::from(target)
    } else {
        // OUT_DIR = target/<profile>/build/<pkg>/out
        PathBuf::from(env::var("OUT_DIR").unwrap()).join("../../..")
    }
}
