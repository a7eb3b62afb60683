use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Artifacts of one command. Each file is written to a temporary name and
/// renamed into place; everything written (and any directory created) is
/// removed again unless [`Outputs::commit`] is reached.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut d = Some(dir);
        while let Some(p) = d.filter(|p| !p.as_os_str().is_empty() && !p.exists()) {
            missing.push(p.to_path_buf());
            d = p.parent();
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        // innermost last, so cleanup removes children first
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    pub fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        if let Some(parent) = path.parent() {
            self.create_dir(parent)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        let result = fs::write(&tmp, contents).and_then(|()| fs::rename(&tmp, path));
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e).with_context(|| format!("writing {}", path.display()));
        }
        self.files.push(path.to_path_buf());
        Ok(())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// One whitespace-tokenized sentence per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_text(path)?
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

pub fn corpus_text(sentences: &[Vec<String>]) -> String {
    let mut s = String::new();
    for line in sentences {
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_bitext(src: &Path, tgt: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let (s, t) = (read_corpus(src)?, read_corpus(tgt)?);
    if s.len() != t.len() {
        bail!("{} has {} lines but {} has {}", src.display(), s.len(), tgt.display(), t.len());
    }
    Ok(s.into_iter().zip(t).collect())
}
