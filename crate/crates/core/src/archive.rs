//! File trees and their canonical archive encoding.
//!
//! Layout (all integers are 8-byte big-endian):
//!
//! ```text
//! archive  := "MFPMAR1\n" frame
//! frame    := 'F' nameLen name ('x' | '-') size bytes
//!           | 'D' nameLen name count frame*      (children sorted by name bytes)
//!           | 'L' nameLen name targetLen target
//! ```
//!
//! The root frame has an empty name. Nothing else about the filesystem
//! (timestamps, owners, modes other than the executable flag) is encoded,
//! so the encoding is a bijection with [`Tree`].

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::Path;

use thiserror::Error;

use crate::store_path::sha256_hex;

pub const MAGIC: &[u8; 8] = b"MFPMAR1\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    File { executable: bool, contents: Vec<u8> },
    Directory(BTreeMap<String, Tree>),
    Symlink { target: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("corrupt archive at offset {offset}: {reason}")]
pub struct CorruptArchive {
    pub offset: usize,
    pub reason: String,
}

fn valid_entry_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\0'])
}

impl Tree {
    pub fn file(contents: impl Into<Vec<u8>>) -> Self {
        Tree::File {
            executable: false,
            contents: contents.into(),
        }
    }

    pub fn executable(contents: impl Into<Vec<u8>>) -> Self {
        Tree::File {
            executable: true,
            contents: contents.into(),
        }
    }

    pub fn symlink(target: impl Into<String>) -> Self {
        Tree::Symlink { target: target.into() }
    }

    pub fn dir<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Tree)>,
        S: Into<String>,
    {
        Tree::Directory(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn empty_dir() -> Self {
        Tree::Directory(BTreeMap::new())
    }

    /// Look up a `/`-separated relative path inside the tree.
    pub fn get(&self, rel: &str) -> Option<&Tree> {
        rel.split('/')
            .filter(|s| !s.is_empty())
            .try_fold(self, |node, seg| match node {
                Tree::Directory(children) => children.get(seg),
                _ => None,
            })
    }

    /// Visit every regular-file body and symlink target.
    pub fn for_each_blob(&self, f: &mut impl FnMut(&[u8])) {
        match self {
            Tree::File { contents, .. } => f(contents),
            Tree::Symlink { target } => f(target.as_bytes()),
            Tree::Directory(children) => children.values().for_each(|c| c.for_each_blob(f)),
        }
    }

    /// Apply `f` to every file body and symlink target, in place.
    pub fn map_blobs(&mut self, f: &mut impl FnMut(&[u8]) -> Vec<u8>) {
        match self {
            Tree::File { contents, .. } => *contents = f(contents),
            Tree::Symlink { target } => *target = String::from_utf8_lossy(&f(target.as_bytes())).into_owned(),
            Tree::Directory(children) => children.values_mut().for_each(|c| c.map_blobs(f)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(MAGIC);
        encode_frame(&mut out, "", self);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Tree, CorruptArchive> {
        let mut reader = Reader { bytes, pos: 0 };
        let magic = reader.take(MAGIC.len(), "missing magic")?;
        if magic != MAGIC {
            return Err(reader.err_at(0, "bad magic"));
        }
        let (name, tree) = reader.frame(0)?;
        if !name.is_empty() {
            return Err(reader.err_at(MAGIC.len(), "root frame must have an empty name"));
        }
        if reader.pos != bytes.len() {
            return Err(reader.err("trailing bytes after root frame"));
        }
        Ok(tree)
    }

    /// SHA-256 (hex) of the canonical encoding.
    pub fn archive_digest(&self) -> String {
        sha256_hex(self.encode())
    }

    /// Read a tree from the filesystem without following a top-level symlink.
    pub fn read_from(path: &Path) -> io::Result<Tree> {
        let meta = fs::symlink_metadata(path)?;
        let ft = meta.file_type();
        if ft.is_symlink() {
            let target = fs::read_link(path)?;
            let target = target
                .into_os_string()
                .into_string()
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non UTF-8 symlink target"))?;
            Ok(Tree::Symlink { target })
        } else if ft.is_dir() {
            let mut children = BTreeMap::new();
            for entry in fs::read_dir(path)? {
                let entry = entry?;
                let name = entry
                    .file_name()
                    .into_string()
                    .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non UTF-8 file name"))?;
                children.insert(name, Tree::read_from(&entry.path())?);
            }
            Ok(Tree::Directory(children))
        } else if ft.is_file() {
            Ok(Tree::File {
                executable: meta.permissions().mode() & 0o111 != 0,
                contents: fs::read(path)?,
            })
        } else {
            Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported file type at {}", path.display()),
            ))
        }
    }

    /// Materialize the tree at `path`, which must not exist yet.
    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        match self {
            Tree::File { executable, contents } => {
                fs::write(path, contents)?;
                let mode = if *executable { 0o555 } else { 0o444 };
                fs::set_permissions(path, fs::Permissions::from_mode(mode))
            }
            Tree::Symlink { target } => symlink(target, path),
            Tree::Directory(children) => {
                fs::create_dir(path)?;
                for (name, child) in children {
                    child.write_to(&path.join(name))?;
                }
                Ok(())
            }
        }
    }
}

fn put_u64(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u64).to_be_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len());
    out.extend_from_slice(bytes);
}

fn encode_frame(out: &mut Vec<u8>, name: &str, tree: &Tree) {
    match tree {
        Tree::File { executable, contents } => {
            out.push(b'F');
            put_bytes(out, name.as_bytes());
            out.push(if *executable { b'x' } else { b'-' });
            put_bytes(out, contents);
        }
        Tree::Directory(children) => {
            out.push(b'D');
            put_bytes(out, name.as_bytes());
            put_u64(out, children.len());
            for (child_name, child) in children {
                encode_frame(out, child_name, child);
            }
        }
        Tree::Symlink { target } => {
            out.push(b'L');
            put_bytes(out, name.as_bytes());
            put_bytes(out, target.as_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> CorruptArchive {
        self.err_at(self.pos, reason)
    }

    fn err_at(&self, offset: usize, reason: &str) -> CorruptArchive {
        CorruptArchive {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CorruptArchive> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(&format!("truncated: {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<usize, CorruptArchive> {
        let raw = self.take(8, "integer")?;
        let n = u64::from_be_bytes(raw.try_into().expect("8 bytes"));
        usize::try_from(n).map_err(|_| self.err("integer overflow"))
    }

    fn blob(&mut self, what: &str) -> Result<&'a [u8], CorruptArchive> {
        let len = self.u64()?;
        self.take(len, what)
    }

    fn string(&mut self, what: &str) -> Result<String, CorruptArchive> {
        let start = self.pos;
        let raw = self.blob(what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err_at(start, "name is not UTF-8"))
    }

    fn frame(&mut self, depth: usize) -> Result<(String, Tree), CorruptArchive> {
        if depth > 256 {
            return Err(self.err("nesting too deep"));
        }
        let tag = self.take(1, "frame tag")?[0];
        let name = self.string("entry name")?;
        let tree = match tag {
            b'F' => {
                let flag_at = self.pos;
                let executable = match self.take(1, "executable flag")?[0] {
                    b'x' => true,
                    b'-' => false,
                    _ => return Err(self.err_at(flag_at, "bad executable flag")),
                };
                let contents = self.blob("file contents")?.to_vec();
                Tree::File { executable, contents }
            }
            b'L' => Tree::Symlink {
                target: self.string("symlink target")?,
            },
            b'D' => {
                let count = self.u64()?;
                let mut children = BTreeMap::new();
                let mut last: Option<String> = None;
                for _ in 0..count {
                    let at = self.pos;
                    let (child_name, child) = self.frame(depth + 1)?;
                    if !valid_entry_name(&child_name) {
                        return Err(self.err_at(at, "invalid entry name"));
                    }
                    if last.as_deref().is_some_and(|prev| prev >= child_name.as_str()) {
                        return Err(self.err_at(at, "directory entries out of order"));
                    }
                    last = Some(child_name.clone());
                    children.insert(child_name, child);
                }
                Tree::Directory(children)
            }
            _ => return Err(self.err_at(self.pos - 1, "unknown frame tag")),
        };
        Ok((name, tree))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entries_encoded_in_name_order() {
        let tree = Tree::dir([("b", Tree::file("B")), ("a", Tree::file("A"))]);
        let bytes = tree.encode();
        let pos_a = bytes.iter().position(|&c| c == b'A').unwrap();
        let pos_b = bytes.iter().position(|&c| c == b'B').unwrap();
        // Name 'a' and its body come before 'b'.
        assert!(pos_a < pos_b);
        let a_name = bytes.iter().position(|&c| c == b'a').unwrap();
        let b_name = bytes.iter().position(|&c| c == b'b').unwrap();
        assert!(a_name < b_name);
    }

    #[test]
    fn empty_dir_exact_bytes() {
        let mut expected = MAGIC.to_vec();
        expected.push(b'D');
        expected.extend_from_slice(&0u64.to_be_bytes());
        expected.extend_from_slice(&0u64.to_be_bytes());
        assert_eq!(Tree::empty_dir().encode(), expected);
    }

    #[test]
    fn rejects_out_of_order_and_trailing() {
        let mut bytes = MAGIC.to_vec();
        bytes.push(b'D');
        bytes.extend_from_slice(&0u64.to_be_bytes());
        bytes.extend_from_slice(&2u64.to_be_bytes());
        for name in ["b", "a"] {
            bytes.push(b'F');
            bytes.extend_from_slice(&1u64.to_be_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(b'-');
            bytes.extend_from_slice(&0u64.to_be_bytes());
        }
        let err = Tree::decode(&bytes).unwrap_err();
        assert!(err.reason.contains("order"), "{err}");

        let mut trailing = Tree::file("x").encode();
        trailing.push(0);
        assert!(Tree::decode(&trailing).is_err());
    }

    #[test]
    fn truncated_archive_reports_offset() {
        let bytes = Tree::file("hello").encode();
        let err = Tree::decode(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.offset <= bytes.len());
        assert!(err.reason.contains("truncated"));
    }

    #[test]
    fn filesystem_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tree = Tree::dir([
            ("bin", Tree::dir([("tool", Tree::executable("#!/bin/sh\necho hi\n"))])),
            ("link", Tree::symlink("bin/tool")),
            ("readme", Tree::file("text")),
            ("empty", Tree::empty_dir()),
        ]);
        let at = dir.path().join("t");
        tree.write_to(&at).unwrap();
        assert_eq!(Tree::read_from(&at).unwrap(), tree);
    }

    pub(crate) fn arb_tree() -> impl Strategy<Value = Tree> {
        let leaf = prop_oneof![
            (any::<bool>(), proptest::collection::vec(any::<u8>(), 0..24))
                .prop_map(|(executable, contents)| Tree::File { executable, contents }),
            "[a-z/.]{1,12}".prop_map(|target| Tree::Symlink { target }),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            proptest::collection::btree_map("[a-zA-Z0-9_.-]{1,6}", inner, 0..4).prop_filter_map("no dot entries", |m| {
                if m.keys().any(|k| k == "." || k == "..") {
                    None
                } else {
                    Some(Tree::Directory(m))
                }
            })
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(tree in arb_tree()) {
            prop_assert_eq!(Tree::decode(&tree.encode()).unwrap(), tree);
        }

        #[test]
        fn distinct_trees_distinct_encodings(a in arb_tree(), b in arb_tree()) {
            prop_assert_eq!(a == b, a.encode() == b.encode());
        }
    }
}
