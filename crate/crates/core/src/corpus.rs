//! Locating and loading the fixture corpus shipped in `corpus/` at the
//! repository root.

use crate::ir::{parse_program, validate, Program};
use std::path::{Path, PathBuf};

/// Directory holding the in-repo kernel fixtures. Overridable with
/// `SPLITSTORE_CORPUS` for out-of-tree runs.
pub fn default_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("SPLITSTORE_CORPUS") {
        return PathBuf::from(dir);
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

/// Parse and validate every `.ir` file in a directory, sorted by name.
pub fn load_dir(dir: &Path) -> std::io::Result<Vec<(String, Program)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ir"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for path in names {
        let text = std::fs::read_to_string(&path)?;
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let program = parse_program(&text)
            .unwrap_or_else(|d| panic!("corpus fixture {name} does not parse: {d:?}"));
        let diags = validate(&program);
        assert!(diags.is_empty(), "corpus fixture {name} is invalid: {diags:?}");
        out.push((name, program));
    }
    Ok(out)
}

/// The shipped corpus; panics when a fixture is broken since tests and
/// benchmarks cannot proceed without it.
pub fn load_default() -> Vec<(String, Program)> {
    load_dir(&default_dir()).expect("corpus directory readable")
}
