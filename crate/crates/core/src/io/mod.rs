//! Weight containers and netpbm images.

pub mod container;
pub mod netpbm;

use std::path::Path;

use crate::error::{Error, Result};

pub use container::{load_weights, save_weights};
pub use netpbm::{read_image_ppm, write_pgm};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
