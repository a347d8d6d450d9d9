//! File formats: IDX datasets, PGM image grids, architecture text and
//! checkpoints.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

mod arch_text;
mod checkpoint;
mod idx;
mod pgm;

pub use arch_text::parse_architecture;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState,
    MAGIC, VERSION,
};
pub use idx::{
    filter_classes, parse_idx_images, parse_idx_labels, read_idx_dataset, read_idx_images,
    read_idx_labels,
};
pub use pgm::{encode_image_grid, to_byte, write_image_grid};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
