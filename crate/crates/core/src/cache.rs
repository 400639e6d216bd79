//! Binary cache: output paths mapped to zstd-compressed canonical archives.
//!
//! A cache is a directory holding `<digest32>.info` and `<digest32>.arc`
//! per entry, or an HTTP server exposing the same files. Both are opened
//! through [`Cache::open`] and behave identically for readers.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;

use crate::store::{Store, StoreError};
use crate::store_path::{sha256_hex, StorePath};

pub const COMPRESSION: &str = "zstd";
const ZSTD_LEVEL: i32 = 3;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache already holds {path} with archive digest {existing}, refusing {offered}")]
    DigestConflict {
        path: StorePath,
        existing: String,
        offered: String,
    },
    #[error("corrupt payload for {path}: {reason}")]
    CorruptPayload { path: StorePath, reason: String },
    #[error("corrupt info file for {path}: {reason}")]
    CorruptInfo { path: String, reason: String },
    #[error("{path} is not in the cache")]
    Missing { path: StorePath },
    #[error("cache at {0} is read-only")]
    ReadOnly(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("HTTP error for {url}: {reason}")]
    Http { url: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub store_path: StorePath,
    /// SHA-256 hex of the uncompressed archive.
    pub archive_digest: String,
    pub archive_size: u64,
    pub compressed_size: u64,
    pub references: BTreeSet<StorePath>,
    pub deriver: Option<StorePath>,
}

impl CacheEntry {
    /// The `.info` text: `Key: value` lines in key order.
    pub fn to_info(&self) -> String {
        let refs = self
            .references
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let deriver = self.deriver.as_ref().map(|d| d.to_string()).unwrap_or_default();
        let lines = [
            ("ArchiveDigest", self.archive_digest.clone()),
            ("ArchiveSize", self.archive_size.to_string()),
            ("CompressedSize", self.compressed_size.to_string()),
            ("Compression", COMPRESSION.to_string()),
            ("Deriver", deriver),
            ("References", refs),
            ("StorePath", self.store_path.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(k);
            out.push(':');
            if !v.is_empty() {
                out.push(' ');
                out.push_str(&v);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_info(text: &str) -> Result<CacheEntry, CacheError> {
        let bad = |reason: String| CacheError::CorruptInfo {
            path: text
                .lines()
                .find_map(|l| l.strip_prefix("StorePath: "))
                .unwrap_or("?")
                .to_string(),
            reason,
        };
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("line without `:`: {line}")))?;
            if fields.insert(k, v.trim_start_matches(' ')).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let num =
            |k: &str| -> Result<u64, CacheError> { get(k)?.parse().map_err(|_| bad(format!("{k} is not a number"))) };
        let path = |s: &str| s.parse::<StorePath>().map_err(|e| bad(e.to_string()));
        if get("Compression")? != COMPRESSION {
            return Err(bad(format!("unsupported compression {}", get("Compression")?)));
        }
        let deriver = match get("Deriver")? {
            "" => None,
            d => Some(path(d)?),
        };
        Ok(CacheEntry {
            store_path: path(get("StorePath")?)?,
            archive_digest: get("ArchiveDigest")?.to_string(),
            archive_size: num("ArchiveSize")?,
            compressed_size: num("CompressedSize")?,
            references: get("References")?
                .split_whitespace()
                .map(path)
                .collect::<Result<_, _>>()?,
            deriver,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Added,
    AlreadyPresent,
}

#[derive(Clone, PartialEq, Eq)]
pub enum Cache {
    Dir(PathBuf),
    Http(String),
}

impl fmt::Debug for Cache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.location())
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Cache {
    /// A URL (`http://...`) or a directory path.
    pub fn open(location: &str) -> Cache {
        if location.starts_with("http://") || location.starts_with("https://") {
            Cache::Http(location.trim_end_matches('/').to_string())
        } else {
            Cache::Dir(PathBuf::from(location))
        }
    }

    pub fn location(&self) -> String {
        match self {
            Cache::Dir(d) => d.display().to_string(),
            Cache::Http(u) => u.clone(),
        }
    }

    fn read_file(&self, file: &str) -> Result<Option<Vec<u8>>, CacheError> {
        match self {
            Cache::Dir(dir) => {
                let p = dir.join(file);
                match fs::read(&p) {
                    Ok(b) => Ok(Some(b)),
                    Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(io_err(&p)(e)),
                }
            }
            Cache::Http(base) => {
                let url = format!("{base}/{file}");
                match ureq::get(&url).call() {
                    Ok(resp) => {
                        let mut buf = Vec::new();
                        resp.into_reader().read_to_end(&mut buf).map_err(|e| CacheError::Http {
                            url: url.clone(),
                            reason: e.to_string(),
                        })?;
                        Ok(Some(buf))
                    }
                    Err(ureq::Error::Status(404, _)) => Ok(None),
                    Err(e) => Err(CacheError::Http {
                        url,
                        reason: e.to_string(),
                    }),
                }
            }
        }
    }

    pub fn query(&self, path: &StorePath) -> Result<Option<CacheEntry>, CacheError> {
        let Some(bytes) = self.read_file(&format!("{}.info", path.digest()))? else {
            return Ok(None);
        };
        let text = String::from_utf8(bytes).map_err(|_| CacheError::CorruptInfo {
            path: path.to_string(),
            reason: "not UTF-8".into(),
        })?;
        let entry = CacheEntry::parse_info(&text)?;
        if &entry.store_path != path {
            return Ok(None);
        }
        Ok(Some(entry))
    }

    /// The decompressed archive, verified against the entry's digest.
    pub fn fetch(&self, path: &StorePath) -> Result<(CacheEntry, Vec<u8>), CacheError> {
        let entry = self
            .query(path)?
            .ok_or_else(|| CacheError::Missing { path: path.clone() })?;
        let corrupt = |reason: String| CacheError::CorruptPayload {
            path: path.clone(),
            reason,
        };
        let compressed = self
            .read_file(&format!("{}.arc", path.digest()))?
            .ok_or_else(|| corrupt("payload file missing".into()))?;
        let archive = zstd::decode_all(compressed.as_slice()).map_err(|e| corrupt(e.to_string()))?;
        let digest = sha256_hex(&archive);
        if digest != entry.archive_digest || archive.len() as u64 != entry.archive_size {
            return Err(corrupt(format!(
                "archive digest {digest} does not match recorded {}",
                entry.archive_digest
            )));
        }
        Ok((entry, archive))
    }

    /// Store an archive. `entry.compressed_size` is filled in here.
    pub fn put(&self, entry: &CacheEntry, archive: &[u8]) -> Result<PutOutcome, CacheError> {
        let Cache::Dir(dir) = self else {
            return Err(CacheError::ReadOnly(self.location()));
        };
        let digest = sha256_hex(archive);
        if digest != entry.archive_digest || archive.len() as u64 != entry.archive_size {
            return Err(CacheError::CorruptPayload {
                path: entry.store_path.clone(),
                reason: format!("payload digest {digest} does not match entry {}", entry.archive_digest),
            });
        }
        if let Some(existing) = self.query(&entry.store_path)? {
            if existing.archive_digest == entry.archive_digest {
                return Ok(PutOutcome::AlreadyPresent);
            }
            return Err(CacheError::DigestConflict {
                path: entry.store_path.clone(),
                existing: existing.archive_digest,
                offered: entry.archive_digest.clone(),
            });
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let compressed = zstd::encode_all(archive, ZSTD_LEVEL).map_err(io_err(dir))?;
        let mut entry = entry.clone();
        entry.compressed_size = compressed.len() as u64;
        let d = entry.store_path.digest();
        // The payload goes first; the info file makes the entry visible.
        write_atomic(dir, &format!("{d}.arc"), &compressed)?;
        write_atomic(dir, &format!("{d}.info"), entry.to_info().as_bytes())?;
        Ok(PutOutcome::Added)
    }

    /// Push a registered store object.
    pub fn push(&self, store: &Store, path: &StorePath) -> Result<PutOutcome, CacheError> {
        let info = store
            .query_info(path)?
            .ok_or_else(|| StoreError::UnknownPath(path.clone()))?;
        let archive = store.export_archive(path)?;
        let entry = CacheEntry {
            store_path: path.clone(),
            archive_digest: info.archive_digest,
            archive_size: archive.len() as u64,
            compressed_size: 0,
            references: info.references,
            deriver: info.deriver,
        };
        self.put(&entry, &archive)
    }

    /// Import `path` and, first, everything it references, into `store`.
    pub fn substitute(&self, store: &Store, path: &StorePath) -> Result<(), CacheError> {
        if store.has_path(path) {
            return Ok(());
        }
        let (entry, archive) = self.fetch(path)?;
        for r in &entry.references {
            if r != path {
                self.substitute(store, r)?;
            }
        }
        store
            .import_archive(path, &archive, entry.references, entry.deriver)
            .map_err(|e| match e {
                StoreError::CorruptArchive(c) => CacheError::CorruptPayload {
                    path: path.clone(),
                    reason: c.to_string(),
                },
                other => other.into(),
            })?;
        Ok(())
    }
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CacheError> {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{name}.{}-{n}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    let dest = dir.join(name);
    fs::rename(&tmp, &dest).map_err(io_err(&dest))
}

fn is_cache_file(name: &str) -> bool {
    let Some((digest, ext)) = name.split_once('.') else {
        return false;
    };
    matches!(ext, "info" | "arc")
        && digest.len() == crate::store_path::DIGEST32_LEN
        && digest.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
}

/// A running read-only HTTP view of a cache directory.
pub struct CacheServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    thread: Option<JoinHandle<()>>,
}

impl CacheServer {
    pub fn start(dir: &Path, listen: &str) -> Result<CacheServer, CacheError> {
        let server = tiny_http::Server::http(listen).map_err(|e| CacheError::Http {
            url: listen.to_string(),
            reason: e.to_string(),
        })?;
        let addr = server.server_addr().to_ip().ok_or_else(|| CacheError::Http {
            url: listen.to_string(),
            reason: "not an IP listener".into(),
        })?;
        let server = Arc::new(server);
        let dir = dir.to_path_buf();
        let srv = server.clone();
        let thread = std::thread::spawn(move || {
            for req in srv.incoming_requests() {
                let name = req.url().trim_start_matches('/').to_string();
                let body = if *req.method() == tiny_http::Method::Get && is_cache_file(&name) {
                    fs::read(dir.join(&name)).ok()
                } else {
                    None
                };
                let _ = match body {
                    Some(b) => req.respond(tiny_http::Response::from_data(b)),
                    None => req.respond(tiny_http::Response::empty(404)),
                };
            }
        });
        Ok(CacheServer {
            server,
            addr,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for CacheServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
