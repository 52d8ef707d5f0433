use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Written as `<output>.manifest.json` beside every output file.
#[derive(Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: Option<u64>,
    pub config: &'a C,
    pub outputs: Vec<String>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Write `body` to `out` and its manifest beside it.
pub fn write_with_manifest<C: Serialize>(
    out: &Path,
    body: &str,
    command: &str,
    seed: Option<u64>,
    config: &C,
) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    let manifest = RunManifest {
        tool: "gqsgd",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
        outputs: vec![out.display().to_string()],
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let path = manifest_path(out);
    fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Write to `out` with a manifest, or to stdout.
pub fn emit<C: Serialize>(out: Option<&Path>, body: &str, command: &str, seed: Option<u64>, config: &C) -> Result<()> {
    match out {
        Some(p) => write_with_manifest(p, body, command, seed, config),
        None => {
            std::io::stdout().write_all(body.as_bytes())?;
            Ok(())
        }
    }
}
