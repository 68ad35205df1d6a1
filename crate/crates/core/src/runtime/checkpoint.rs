use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use memmap2::MmapMut;
use tempfile::TempDir;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const HEADER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpillPolicy {
    /// One file-backed map per checkpoint in a per-instance directory.
    MmapSpill,
    /// Plain heap tensors; for unit tests.
    InMemory,
}

enum Entry<F: Element> {
    Mapped {
        path: PathBuf,
        rows: usize,
        cols: usize,
        map: MmapMut,
    },
    Heap(Tensor<F>),
}

/// Boundary activations kept between the forward and backward sweeps.
///
/// Spilled entries are written as an 8-byte header (`u32` rows, `u32` cols)
/// followed by raw little-endian elements, and the file is removed as soon as
/// the entry is taken.
pub struct CheckpointStore<F: Element = f32> {
    policy: SpillPolicy,
    dir: Option<TempDir>,
    entries: BTreeMap<usize, Entry<F>>,
    bytes_written: u64,
}

impl<F: Element> CheckpointStore<F> {
    /// Spill into a fresh directory under `parent` (system temp dir if `None`).
    pub fn mmap_spill(parent: Option<&Path>) -> Result<Self> {
        let dir = match parent {
            Some(p) => tempfile::Builder::new().prefix("mebp-spill-").tempdir_in(p),
            None => tempfile::Builder::new().prefix("mebp-spill-").tempdir(),
        }
        .map_err(|source| Error::Spill {
            path: parent
                .map(Path::to_path_buf)
                .unwrap_or_else(std::env::temp_dir),
            source,
        })?;
        Ok(CheckpointStore {
            policy: SpillPolicy::MmapSpill,
            dir: Some(dir),
            entries: BTreeMap::new(),
            bytes_written: 0,
        })
    }

    pub fn in_memory() -> Self {
        CheckpointStore {
            policy: SpillPolicy::InMemory,
            dir: None,
            entries: BTreeMap::new(),
            bytes_written: 0,
        }
    }

    pub fn new(policy: SpillPolicy) -> Result<Self> {
        match policy {
            SpillPolicy::MmapSpill => Self::mmap_spill(None),
            SpillPolicy::InMemory => Ok(Self::in_memory()),
        }
    }

    pub fn policy(&self) -> SpillPolicy {
        self.policy
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_ref().map(TempDir::path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.entries.contains_key(&index)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Total bytes written to spill files since creation.
    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    fn spill_path(&self, index: usize) -> PathBuf {
        self.dir()
            .expect("spill policy")
            .join(format!("ckpt{index}.bin"))
    }

    pub fn put(&mut self, index: usize, t: &Tensor<F>) -> Result<()> {
        if t.shape().len() != 2 {
            return Err(Error::dim(
                "checkpoint_put",
                format!("rank-2 only, got {:?}", t.shape()),
            ));
        }
        if self.entries.contains_key(&index) {
            return Err(Error::Protocol(format!(
                "checkpoint {index} already stored"
            )));
        }
        let entry = match self.policy {
            SpillPolicy::InMemory => Entry::Heap(t.clone()),
            SpillPolicy::MmapSpill => {
                let (rows, cols) = (t.rows(), t.cols());
                let path = self.spill_path(index);
                let len = HEADER + t.len() * F::BYTES;
                let io = |source| Error::Spill {
                    path: path.clone(),
                    source,
                };
                let file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create(true)
                    .truncate(true)
                    .open(&path)
                    .map_err(io)?;
                file.set_len(len as u64).map_err(io)?;
                // SAFETY: the file was just created in a directory private to
                // this store and is only accessed through this map.
                let mut map = unsafe { MmapMut::map_mut(&file) }.map_err(io)?;
                map[..4].copy_from_slice(&(rows as u32).to_le_bytes());
                map[4..8].copy_from_slice(&(cols as u32).to_le_bytes());
                for (chunk, &v) in map[HEADER..].chunks_exact_mut(F::BYTES).zip(t.data()) {
                    v.write_le(chunk);
                }
                self.bytes_written += len as u64;
                Entry::Mapped {
                    path,
                    rows,
                    cols,
                    map,
                }
            }
        };
        self.entries.insert(index, entry);
        Ok(())
    }

    fn read(entry: &Entry<F>) -> Result<Tensor<F>> {
        match entry {
            Entry::Heap(t) => Ok(t.clone()),
            Entry::Mapped {
                rows, cols, map, ..
            } => {
                let data = map[HEADER..]
                    .chunks_exact(F::BYTES)
                    .map(F::read_le)
                    .collect();
                Tensor::from_vec(&[*rows, *cols], data)
            }
        }
    }

    /// Copy an entry onto the heap, leaving it stored.
    pub fn get(&self, index: usize) -> Result<Tensor<F>> {
        let e = self
            .entries
            .get(&index)
            .ok_or_else(|| Error::Protocol(format!("checkpoint {index} not stored")))?;
        Self::read(e)
    }

    /// Copy an entry onto the heap and evict it.
    pub fn take(&mut self, index: usize) -> Result<Tensor<F>> {
        let e = self
            .entries
            .remove(&index)
            .ok_or_else(|| Error::Protocol(format!("checkpoint {index} not stored")))?;
        let t = Self::read(&e)?;
        Self::discard(e);
        Ok(t)
    }

    fn discard(e: Entry<F>) {
        if let Entry::Mapped { path, map, .. } = e {
            drop(map);
            let _ = std::fs::remove_file(path);
        }
    }

    /// Evict everything.
    pub fn clear(&mut self) {
        for (_, e) in std::mem::take(&mut self.entries) {
            Self::discard(e);
        }
    }

    /// Files currently present in the spill directory.
    pub fn spill_files(&self) -> usize {
        self.dir()
            .and_then(|d| std::fs::read_dir(d).ok())
            .map(|r| r.count())
            .unwrap_or(0)
    }
}

impl<F: Element> Drop for CheckpointStore<F> {
    fn drop(&mut self) {
        self.clear();
    }
}

/// Read back a spill file written by [`CheckpointStore`].
pub fn read_spill_file<F: Element>(path: &Path) -> Result<Tensor<F>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            tensor: None,
            detail: "spill header".into(),
        });
    }
    let rows = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != HEADER + rows * cols * F::BYTES {
        return Err(Error::Truncated {
            tensor: None,
            detail: format!("spill body for [{rows}, {cols}]"),
        });
    }
    let data = bytes[HEADER..]
        .chunks_exact(F::BYTES)
        .map(F::read_le)
        .collect();
    Tensor::from_vec(&[rows, cols], data)
}
