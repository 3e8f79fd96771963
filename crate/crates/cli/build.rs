//! Embeds a content hash of the workspace sources so every artifact records
//! the code version that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect(&path, out);
        } else if path.extension().is_some_and(|e| e == "rs" || e == "json" || e == "toml") {
            out.push(path);
        }
    }
}

fn hash(crates: &Path, krates: &[&str]) -> String {
    let mut files = Vec::new();
    for krate in krates {
        for sub in ["src", "presets"] {
            let dir = crates.join(krate).join(sub);
            println!("cargo:rerun-if-changed={}", dir.display());
            collect(&dir, &mut files);
        }
        files.push(crates.join(krate).join("Cargo.toml"));
    }
    files.sort();
    let mut hasher = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(crates).unwrap_or(f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(f).unwrap_or_default());
        hasher.update([0]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn main() {
    let manifest = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let crates = manifest.parent().unwrap();
    println!("cargo:rustc-env=GIFT_CODE_HASH={}", hash(crates, &["core", "cli"]));
    // Training depends on the core library only; cached weights key on this.
    println!("cargo:rustc-env=GIFT_CORE_HASH={}", hash(crates, &["core"]));
}
