//! Provenance-stamped output files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config_sha256: String,
}

impl Provenance {
    /// Hashes the resolved command settings together with the bytes of
    /// every input file, so identical runs carry identical headers.
    pub fn new<S: Serialize>(command: &'static str, seed: u64, settings: &S, inputs: &[&Path]) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(settings)?);
        for p in inputs {
            h.update(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
        }
        let config_sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { tool: "rtshift", version: env!("CARGO_PKG_VERSION"), command, seed, config_sha256 })
    }

    fn comment_lines(&self) -> String {
        format!(
            "# {} {} {}\n# seed: {}\n# config_sha256: {}\n",
            self.tool, self.version, self.command, self.seed, self.config_sha256
        )
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn out_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(crate::absolute(&dir.to_path_buf()))
}

/// CSV with `#` comment lines carrying the provenance.
pub fn write_csv<F>(path: &Path, prov: &Provenance, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> rtshift::error::Result<()>,
{
    let mut w = create(path)?;
    w.write_all(prov.comment_lines().as_bytes())?;
    body(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

/// JSON object with a top-level `provenance` member.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("provenance".into(), serde_json::to_value(prov)?);
        }
        None => v = serde_json::json!({ "provenance": prov, "value": v }),
    }
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(f))
        .map_err(rtshift::error::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

/// Parses `a,b,c` into a fixed-size array.
pub fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 comma-separated numbers, got {}", v.len()))
}
