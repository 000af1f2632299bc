use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Output directory of one command. Unless [`Outputs::commit`] is called,
/// dropping it removes every entry that did not exist when it was opened,
/// and the directory itself if this command created it.
pub struct Outputs {
    dir: PathBuf,
    created: bool,
    before: BTreeSet<OsString>,
    done: bool,
}

fn entries(dir: &Path) -> Result<BTreeSet<OsString>> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        out.insert(e?.file_name());
    }
    Ok(out)
}

impl Outputs {
    pub fn open(dir: &Path) -> Result<Self> {
        let created = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let before = entries(dir)?;
        Ok(Self { dir: dir.to_path_buf(), created, before, done: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn commit(mut self) {
        self.done = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        let Ok(now) = entries(&self.dir) else { return };
        for name in now.difference(&self.before) {
            let p = self.dir.join(name);
            let removed = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            if let Err(e) = removed {
                log::warn!("could not remove partial output {}: {e}", p.display());
            }
        }
        if self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let root = tempfile::tempdir().unwrap();
        let keep = root.path().join("existing");
        fs::create_dir(&keep).unwrap();
        fs::write(keep.join("old.txt"), "x").unwrap();
        {
            let o = Outputs::open(&keep).unwrap();
            fs::write(o.path("new.txt"), "y").unwrap();
        }
        assert_eq!(entries(&keep).unwrap().into_iter().collect::<Vec<_>>(), vec![OsString::from("old.txt")]);

        let fresh = root.path().join("fresh");
        {
            let o = Outputs::open(&fresh).unwrap();
            fs::write(o.path("a"), "1").unwrap();
        }
        assert!(!fresh.exists());

        let o = Outputs::open(&fresh).unwrap();
        fs::write(o.path("a"), "1").unwrap();
        o.commit();
        assert!(fresh.join("a").exists());
    }
}
