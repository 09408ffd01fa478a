//! File formats, dataset assembly, profiling and the command-line driver
//! around [`tablet_core`].

pub mod archive;
pub mod blob;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod nifti_io;
pub mod plot;
pub mod profiler;

pub use tablet_core as core;

#[global_allocator]
static ALLOC: profiler::CountingAlloc = profiler::CountingAlloc;

/// Failures of the std layer.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: cache checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { path: String, stored: u32, computed: u32 },
    #[error(transparent)]
    Core(#[from] tablet_core::Error),
}

impl IoError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn format(path: &std::path::Path, msg: impl Into<String>) -> Self {
        IoError::Format { path: path.display().to_string(), msg: msg.into() }
    }
}

pub type IoResult<T> = std::result::Result<T, IoError>;

/// Writes `bytes` to `path` through a temporary file in the same directory and a rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> IoResult<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}
