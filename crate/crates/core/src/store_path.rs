//! Store paths and the hashing primitives they are built from.
//!
//! A store path renders as `/mfpm/store/<digest32>-<name>`, where `digest32`
//! is the first 20 bytes of a SHA-256 digest in lowercase RFC 4648 base32
//! without padding (exactly 32 characters). The prefix is a logical constant;
//! where the store lives on disk is a separate concern of [`crate::store`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Logical prefix of every store path, independent of the physical root.
pub const STORE_PREFIX: &str = "/mfpm/store";

/// Number of digest bytes kept in a store path.
pub const PATH_DIGEST_BYTES: usize = 20;

/// Length of the rendered digest.
pub const DIGEST32_LEN: usize = 32;

pub fn sha256(data: impl AsRef<[u8]>) -> [u8; 32] {
    Sha256::digest(data.as_ref()).into()
}

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(sha256(data))
}

/// Lowercase base32 (RFC 4648 alphabet, no padding).
pub fn base32_encode(bytes: &[u8]) -> String {
    data_encoding::BASE32_NOPAD.encode(bytes).to_ascii_lowercase()
}

pub fn base32_decode(text: &str) -> Option<Vec<u8>> {
    if text.bytes().any(|b| b.is_ascii_uppercase()) {
        return None;
    }
    data_encoding::BASE32_NOPAD
        .decode(text.to_ascii_uppercase().as_bytes())
        .ok()
}

/// Truncate a full digest to the store-path width and render it.
pub fn truncated_digest32(full: &[u8; 32]) -> String {
    base32_encode(&full[..PATH_DIGEST_BYTES])
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorePathError {
    #[error("store path `{0}` does not start with {STORE_PREFIX}/")]
    WrongPrefix(String),
    #[error("store path `{0}` has a malformed digest")]
    BadDigest(String),
    #[error("invalid store path name `{0}`")]
    BadName(String),
}

/// Characters permitted in the name part of a store path.
pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"+-._?=".contains(&b))
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StorePath {
    digest: String,
    name: String,
}

impl StorePath {
    /// Build a path from a full SHA-256 digest (truncated here) and a name.
    pub fn from_digest(full: &[u8; 32], name: &str) -> Result<Self, StorePathError> {
        if !is_valid_name(name) {
            return Err(StorePathError::BadName(name.to_string()));
        }
        Ok(StorePath {
            digest: truncated_digest32(full),
            name: name.to_string(),
        })
    }

    /// Hash `preimage` and build a path from it.
    pub fn hashed(preimage: impl AsRef<[u8]>, name: &str) -> Result<Self, StorePathError> {
        Self::from_digest(&sha256(preimage), name)
    }

    /// Parse the `<digest32>-<name>` base name (no prefix).
    pub fn from_base_name(base: &str) -> Result<Self, StorePathError> {
        let bad = || StorePathError::BadDigest(base.to_string());
        if base.len() < DIGEST32_LEN + 2 || !base.is_char_boundary(DIGEST32_LEN) {
            return Err(bad());
        }
        let (digest, rest) = base.split_at(DIGEST32_LEN);
        let name = rest.strip_prefix('-').ok_or_else(bad)?;
        match base32_decode(digest) {
            Some(bytes) if bytes.len() == PATH_DIGEST_BYTES => {}
            _ => return Err(bad()),
        }
        if !is_valid_name(name) {
            return Err(StorePathError::BadName(name.to_string()));
        }
        Ok(StorePath {
            digest: digest.to_string(),
            name: name.to_string(),
        })
    }

    /// Split an absolute logical path such as `/mfpm/store/<d>-bash/bin/sh`
    /// into the store path and the remaining sub-path (`bin/sh`).
    pub fn parse_with_subpath(text: &str) -> Result<(Self, Option<&str>), StorePathError> {
        let rest = text
            .strip_prefix(STORE_PREFIX)
            .and_then(|r| r.strip_prefix('/'))
            .ok_or_else(|| StorePathError::WrongPrefix(text.to_string()))?;
        let (base, sub) = match rest.split_once('/') {
            Some((base, sub)) => (base, Some(sub)),
            None => (rest, None),
        };
        Ok((Self::from_base_name(base)?, sub))
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `<digest32>-<name>`, the on-disk entry name.
    pub fn base_name(&self) -> String {
        format!("{}-{}", self.digest, self.name)
    }

    pub fn is_derivation(&self) -> bool {
        self.name.ends_with(".drv")
    }
}

impl fmt::Display for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{STORE_PREFIX}/{}-{}", self.digest, self.name)
    }
}

impl fmt::Debug for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StorePath({self})")
    }
}

impl FromStr for StorePath {
    type Err = StorePathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match Self::parse_with_subpath(s)? {
            (path, None) => Ok(path),
            (_, Some(_)) => Err(StorePathError::BadName(s.to_string())),
        }
    }
}

impl Serialize for StorePath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StorePath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
