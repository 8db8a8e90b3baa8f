//! One module per subcommand, plus shared artifact helpers.

pub mod ablate;
pub mod evaluate;
pub mod gen_data;
pub mod prompt_eval;
pub mod train;
pub mod weak_label;

use std::fs;
use std::path::{Path, PathBuf};

use deeptagger::corpus::{read_jsonl, QueryExample};
use deeptagger::{Error, Result};

/// Create the run directory (parents included) and return it.
pub fn prepare_run_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create run dir {}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// Read a dataset file, with the path in any error message.
pub fn read_dataset(what: &str, path: &Path) -> Result<Vec<QueryExample>> {
    read_jsonl(path)
        .map_err(|e| Error::Data(format!("cannot read {what} set {}: {e}", path.display())))
}
