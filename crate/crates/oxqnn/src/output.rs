//! Output files: atomic writes, CSV with a provenance header, run manifests.
//!
//! Every CSV starts with `# key: value` lines naming the command, seed and
//! the config hash, followed by a normal header row. Nothing in the header
//! depends on the thread count or wall clock, so identical runs produce
//! identical bytes.
//!
//! Config hash: 64-bit FNV-1a over the canonical config text, printed as 16
//! lowercase hex digits. Canonicalising first makes the hash independent of
//! comments, ordering and number spelling in the source file.

use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use oxqnn_core::device::DeviceConfig;

use crate::devcfg;
use crate::error::{Error, Result};

/// Write `bytes` to `path` through a temporary sibling so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn config_hash(cfg: &DeviceConfig) -> String {
    format!("{:016x}", fnv1a64(devcfg::to_text(cfg).as_bytes()))
}

/// Ordered `key: value` pairs identifying how an output was produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub entries: Vec<(String, String)>,
}

impl Provenance {
    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    fn header(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
    }
}

/// CSV text with a provenance header.
pub fn csv_bytes<R, I>(prov: &Provenance, columns: &[&str], rows: R) -> Result<Vec<u8>>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    let mut out = prov.header().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let io = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        w.write_record(columns).map_err(io)?;
        for row in rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    Ok(out)
}

pub fn write_csv<R, I>(path: &Path, prov: &Provenance, columns: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    write_atomic(path, &csv_bytes(prov, columns, rows)?)
}

/// Strip `#` lines and parse the remaining CSV into header and records.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let bad = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(bad)?;
    Ok((header, rows))
}

/// `key=value` lines describing one invocation.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        // values are single-line by construction
        let v = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = v,
            None => self.entries.push((key.to_string(), v)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.txt");
        write_atomic(&path, self.to_text().as_bytes())?;
        Ok(path)
    }
}
