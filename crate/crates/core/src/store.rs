//! Content-addressed object store.
//!
//! Objects live at `<root>/<digest32>-<name>`; registration metadata (archive
//! digest, references, deriver) lives at `<root>/.meta/<digest32>-<name>.json`
//! and is written last, so an object is visible only once it is complete.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{CorruptArchive, Tree};
use crate::derivation::{Derivation, DrvError, DrvLookup};
use crate::store_path::{sha256, StorePath, StorePathError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unknown store path {0}")]
    UnknownPath(StorePath),
    #[error("store path {0} is already registered with different contents")]
    Immutable(StorePath),
    #[error(transparent)]
    CorruptArchive(#[from] CorruptArchive),
    #[error(transparent)]
    Derivation(#[from] DrvError),
    #[error(transparent)]
    StorePath(#[from] StorePathError),
    #[error("corrupt metadata for {path}: {reason}")]
    CorruptMeta { path: StorePath, reason: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Registration record of a store object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PathInfo {
    pub path: StorePath,
    pub archive_digest: String,
    pub archive_size: u64,
    pub references: BTreeSet<StorePath>,
    pub deriver: Option<StorePath>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registration {
    New,
    Existing,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    register_lock: Mutex<()>,
    counter: AtomicU64,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        let root = root.as_ref();
        for dir in [root.to_path_buf(), root.join(".meta"), root.join(".staging")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let root = fs::canonicalize(root).map_err(io_err(root))?;
        Ok(Store {
            root,
            register_lock: Mutex::new(()),
            counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn physical_path(&self, path: &StorePath) -> PathBuf {
        self.root.join(path.base_name())
    }

    fn meta_path(&self, path: &StorePath) -> PathBuf {
        self.root.join(".meta").join(format!("{}.json", path.base_name()))
    }

    /// A fresh, unique scratch location under the store root.
    pub fn scratch_path(&self, hint: &str) -> PathBuf {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        self.root
            .join(".staging")
            .join(format!("{}-{n}-{hint}", std::process::id()))
    }

    pub fn has_path(&self, path: &StorePath) -> bool {
        self.meta_path(path).is_file()
    }

    pub fn query_info(&self, path: &StorePath) -> Result<Option<PathInfo>, StoreError> {
        let meta = self.meta_path(path);
        let bytes = match fs::read(&meta) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&meta)(e)),
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StoreError::CorruptMeta {
                path: path.clone(),
                reason: e.to_string(),
            })
    }

    fn require_info(&self, path: &StorePath) -> Result<PathInfo, StoreError> {
        self.query_info(path)?
            .ok_or_else(|| StoreError::UnknownPath(path.clone()))
    }

    /// Register `tree` at `path`. Re-registering identical contents is a
    /// no-op; different contents are rejected.
    pub fn register_tree(
        &self,
        path: &StorePath,
        tree: &Tree,
        references: BTreeSet<StorePath>,
        deriver: Option<StorePath>,
    ) -> Result<Registration, StoreError> {
        let archive = tree.encode();
        let info = PathInfo {
            path: path.clone(),
            archive_digest: hex::encode(sha256(&archive)),
            archive_size: archive.len() as u64,
            references,
            deriver,
        };
        if let Some(existing) = self.query_info(path)? {
            return check_same(&existing, &info);
        }

        let scratch = self.scratch_path(&path.base_name());
        tree.write_to(&scratch).map_err(io_err(&scratch))?;

        let _guard = self.register_lock.lock().expect("store lock poisoned");
        if let Some(existing) = self.query_info(path)? {
            remove_any(&scratch);
            return check_same(&existing, &info);
        }
        let target = self.physical_path(path);
        if fs::symlink_metadata(&target).is_ok() {
            // Leftover from an interrupted registration.
            remove_any(&target);
        }
        fs::rename(&scratch, &target).map_err(io_err(&target))?;

        let meta = self.meta_path(path);
        let meta_tmp = self.scratch_path("meta");
        let json = serde_json::to_vec(&info).expect("PathInfo serializes");
        fs::write(&meta_tmp, json).map_err(io_err(&meta_tmp))?;
        fs::rename(&meta_tmp, &meta).map_err(io_err(&meta))?;
        Ok(Registration::New)
    }

    /// Add a source tree, addressed by its name and archive.
    pub fn add_tree(&self, name: &str, tree: &Tree) -> Result<StorePath, StoreError> {
        let path = source_path(name, tree)?;
        self.register_tree(&path, tree, BTreeSet::new(), None)?;
        Ok(path)
    }

    pub fn add_path(&self, name: &str, from: &Path) -> Result<StorePath, StoreError> {
        let tree = Tree::read_from(from).map_err(io_err(from))?;
        self.add_tree(name, &tree)
    }

    pub fn get_tree(&self, path: &StorePath) -> Result<Tree, StoreError> {
        self.require_info(path)?;
        let at = self.physical_path(path);
        Tree::read_from(&at).map_err(io_err(&at))
    }

    pub fn export_archive(&self, path: &StorePath) -> Result<Vec<u8>, StoreError> {
        Ok(self.get_tree(path)?.encode())
    }

    /// Unpack an archive at `path`.
    pub fn import_archive(
        &self,
        path: &StorePath,
        archive: &[u8],
        references: BTreeSet<StorePath>,
        deriver: Option<StorePath>,
    ) -> Result<StorePath, StoreError> {
        let tree = Tree::decode(archive)?;
        self.register_tree(path, &tree, references, deriver)?;
        Ok(path.clone())
    }

    /// Transitive references of `path`, including itself.
    pub fn list_closure(&self, path: &StorePath) -> Result<BTreeSet<StorePath>, StoreError> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![path.clone()];
        while let Some(p) = stack.pop() {
            if !seen.insert(p.clone()) {
                continue;
            }
            let info = self.require_info(&p)?;
            stack.extend(info.references.into_iter().filter(|r| !seen.contains(r)));
        }
        Ok(seen)
    }

    /// Write a derivation whose outputs are computed into the store.
    pub fn write_derivation(&self, drv: &Derivation) -> Result<StorePath, StoreError> {
        drv.validate()?;
        drv.output_paths()?;
        let path = drv.drv_path()?;
        if self.has_path(&path) {
            return Ok(path);
        }
        let refs = drv.input_drvs.keys().chain(drv.input_srcs.iter()).cloned().collect();
        self.register_tree(&path, &Tree::file(drv.canonical_bytes()), refs, None)?;
        Ok(path)
    }

    pub fn read_derivation(&self, path: &StorePath) -> Result<Derivation, StoreError> {
        match self.get_tree(path)? {
            Tree::File { contents, .. } => Ok(Derivation::parse(&contents)?),
            _ => Err(StoreError::Derivation(DrvError::Malformed(format!(
                "{path} is not a regular file"
            )))),
        }
    }
}

impl DrvLookup for Store {
    fn lookup_drv(&self, path: &StorePath) -> Option<std::sync::Arc<Derivation>> {
        self.read_derivation(path).ok().map(std::sync::Arc::new)
    }
}

/// Path a source tree would get from [`Store::add_tree`].
pub fn source_path(name: &str, tree: &Tree) -> Result<StorePath, StorePathError> {
    let mut preimage = format!("source:{name}:").into_bytes();
    preimage.extend_from_slice(&tree.encode());
    StorePath::hashed(preimage, name)
}

fn check_same(existing: &PathInfo, new: &PathInfo) -> Result<Registration, StoreError> {
    if existing.archive_digest == new.archive_digest {
        Ok(Registration::Existing)
    } else {
        Err(StoreError::Immutable(new.path.clone()))
    }
}

fn remove_any(path: &Path) {
    let _ = match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(_) => Ok(()),
    };
}
