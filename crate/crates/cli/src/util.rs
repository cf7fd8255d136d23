//! Output staging and config-file handling for the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use mno_core::{Error, Result};

/// Output directory staged under a temporary name and renamed into place on
/// success, so failed runs never leave partial output directories behind.
pub struct StagedDir {
    tmp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl StagedDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() {
            return Err(Error::argument(format!(
                "output path '{}' already exists",
                target.display()
            )));
        }
        if let Some(parent) = target.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let file_name = target
            .file_name()
            .ok_or_else(|| Error::argument(format!("bad output path '{}'", target.display())))?;
        let tmp = target.with_file_name(format!(
            ".{}.partial-{}",
            file_name.to_string_lossy(),
            std::process::id()
        ));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(StagedDir { tmp, target: target.to_path_buf(), committed: false })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.tmp, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Key=value config file entries; later keys win. Unknown keys are kept (run
/// manifests double as config files).
pub fn load_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    mno_core::io::read_manifest(path)
}

pub fn lookup<'a>(entries: &'a [(String, String)], key: &str) -> Option<&'a str> {
    // Last occurrence wins.
    entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// Flag value, then config-file value, then default.
pub fn resolve<T: std::str::FromStr>(
    flag: Option<T>,
    entries: &[(String, String)],
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match lookup(entries, key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::argument(format!("config: cannot parse '{key}' from '{raw}'"))),
        None => Ok(default),
    }
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::argument(format!("bad list entry '{p}'")))
        })
        .collect()
}
