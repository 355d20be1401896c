use std::fs;
use std::path::{Path, PathBuf};

use sand::kv::KvMap;

use crate::error::{CliError, CliResult};

/// Creates `dir` and returns the paths of `names` inside it, refusing to
/// touch any that already exist unless `force` is set.
pub fn prepare_outputs(dir: &Path, names: &[&str], force: bool) -> CliResult<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(paths)
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_kv(path: &Path) -> CliResult<KvMap> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    KvMap::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}
