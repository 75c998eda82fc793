//! Filesystem helpers shared by every writer in the crate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Builds a directory tree in a sibling staging directory and renames it to
/// `out_dir` once `build` succeeds. `out_dir` must be absent or empty; on
/// failure the staging directory is removed and `out_dir` is left untouched.
pub fn publish_dir<T>(out_dir: &Path, build: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if out_dir.exists() {
        let empty = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?.next().is_none();
        if !empty {
            return Err(Error::Config(format!("output directory {} is not empty", out_dir.display())));
        }
    }
    let mut name = out_dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".partial{}", std::process::id()));
    let stage = out_dir.with_file_name(name);
    let result = create_dir_all(&stage).and_then(|_| build(&stage)).and_then(|v| {
        if out_dir.exists() {
            fs::remove_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
        }
        fs::rename(&stage, out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(v)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&stage);
    }
    result
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_to_string(path)?).map_err(|e| Error::parse(path, e))
}

pub fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::parse(path, e))?;
    write_atomic(path, text.as_bytes())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x"), b"").is_err());
    }

    #[test]
    fn publish_dir_is_all_or_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let r: Result<()> = publish_dir(&out, |s| {
            write_atomic(&s.join("a"), b"1")?;
            Err(Error::Config("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        publish_dir(&out, |s| write_atomic(&s.join("a"), b"1")).unwrap();
        assert_eq!(fs::read(out.join("a")).unwrap(), b"1");
        assert!(publish_dir(&out, |_| Ok(())).is_err());
    }
}
