//! Derivations: the fully resolved build recipe, its canonical byte form,
//! and the hashes that name derivation files and build outputs.
//!
//! Output paths are computed from [`hash_modulo`], in which fixed-output
//! inputs are replaced by their declared content identity. Two derivations
//! that fetch the same bytes with different fetcher scripts therefore get
//! different `.drv` paths but identical output paths downstream.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::store_path::{sha256, StorePath, StorePathError, STORE_PREFIX};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixedOutput {
    pub hash_algo: String,
    /// Lowercase hex content digest.
    pub content_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Derivation {
    pub name: String,
    pub builder: String,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub input_drvs: BTreeMap<StorePath, BTreeSet<String>>,
    pub input_srcs: BTreeSet<StorePath>,
    /// `None` until output paths have been computed.
    pub outputs: BTreeMap<String, Option<StorePath>>,
    pub fixed_output: Option<FixedOutput>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DrvError {
    #[error("malformed derivation: {0}")]
    Malformed(String),
    #[error("dependency cycle through {0}")]
    CycleDetected(StorePath),
    #[error("input derivation {0} is not known")]
    MissingInput(StorePath),
    #[error("derivation has no output named `{0}`")]
    UnknownOutput(String),
    #[error("cannot parse derivation at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error(transparent)]
    StorePath(#[from] StorePathError),
}

pub fn is_valid_output_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

impl Derivation {
    /// A derivation with a single pending `out` output and no inputs.
    pub fn new(name: impl Into<String>, builder: impl Into<String>) -> Self {
        Derivation {
            name: name.into(),
            builder: builder.into(),
            args: Vec::new(),
            env: BTreeMap::new(),
            input_drvs: BTreeMap::new(),
            input_srcs: BTreeSet::new(),
            outputs: BTreeMap::from([("out".to_string(), None)]),
            fixed_output: None,
        }
    }

    pub fn validate(&self) -> Result<(), DrvError> {
        let bad = |m: String| Err(DrvError::Malformed(m));
        if !crate::store_path::is_valid_name(&self.name) {
            return bad(format!("invalid name `{}`", self.name));
        }
        if !self.outputs.contains_key("out") {
            return bad("outputs must contain `out`".into());
        }
        if let Some(name) = self.outputs.keys().find(|n| !is_valid_output_name(n)) {
            return bad(format!("invalid output name `{name}`"));
        }
        if let Some(fixed) = &self.fixed_output {
            if self.outputs.len() != 1 {
                return bad("fixed-output derivations have exactly one output".into());
            }
            let ok = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit());
            if !ok(&fixed.hash_algo) || !ok(&fixed.content_digest) {
                return bad("fixed output hash must be lowercase alphanumeric".into());
            }
        }
        if let Some(key) = self.env.keys().find(|k| k.is_empty() || k.contains(['=', '\0'])) {
            return bad(format!("invalid environment variable name `{key}`"));
        }
        for (drv, outs) in &self.input_drvs {
            if !drv.is_derivation() {
                return bad(format!("input {drv} is not a derivation"));
            }
            if outs.is_empty() || outs.iter().any(|o| !is_valid_output_name(o)) {
                return bad(format!("bad output list for input {drv}"));
            }
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let input_drvs = self.input_drvs.iter().map(|(path, outs)| (path.to_string(), outs));
        let outputs = self
            .outputs
            .iter()
            .map(|(name, path)| (name.as_str(), path.as_ref().map(|p| p.to_string()).unwrap_or_default()));
        serialize_parts(self, input_drvs, outputs)
    }

    /// The store path under which this derivation's file is stored.
    pub fn drv_path(&self) -> Result<StorePath, DrvError> {
        let mut preimage = format!("drvfile:{}:", self.name).into_bytes();
        preimage.extend_from_slice(&self.canonical_bytes());
        Ok(StorePath::hashed(preimage, &format!("{}.drv", self.name))?)
    }

    pub fn output_path(&self, output: &str) -> Result<&StorePath, DrvError> {
        self.outputs
            .get(output)
            .ok_or_else(|| DrvError::UnknownOutput(output.to_string()))?
            .as_ref()
            .ok_or_else(|| DrvError::Malformed(format!("output `{output}` not computed")))
    }

    /// Output name to path, for derivations whose outputs are filled in.
    pub fn output_paths(&self) -> Result<BTreeMap<String, StorePath>, DrvError> {
        self.outputs
            .keys()
            .map(|name| Ok((name.clone(), self.output_path(name)?.clone())))
            .collect()
    }

    pub fn parse(bytes: &[u8]) -> Result<Derivation, DrvError> {
        let text = std::str::from_utf8(bytes).map_err(|e| DrvError::Parse {
            offset: e.valid_up_to(),
            reason: "not UTF-8".into(),
        })?;
        let drv = Parser { text, pos: 0 }.derivation()?;
        drv.validate()?;
        Ok(drv)
    }

    /// Display-only JSON rendering (sorted keys, one-space indent).
    pub fn to_pretty_json(&self) -> String {
        let mut outputs = Map::new();
        for (name, path) in &self.outputs {
            let mut entry = Map::new();
            entry.insert(
                "path".into(),
                Json::String(path.as_ref().map(|p| p.to_string()).unwrap_or_default()),
            );
            if let Some(fixed) = &self.fixed_output {
                entry.insert("hash".into(), Json::String(fixed.content_digest.clone()));
                entry.insert("hashAlgo".into(), Json::String(fixed.hash_algo.clone()));
            }
            outputs.insert(name.clone(), Json::Object(entry));
        }
        let input_drvs: Map<String, Json> = self
            .input_drvs
            .iter()
            .map(|(p, outs)| (p.to_string(), json!(outs)))
            .collect();
        let value = json!({
            "args": self.args,
            "builder": self.builder,
            "env": self.env,
            "inputDrvs": input_drvs,
            "inputSrcs": self.input_srcs.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
            "outputs": outputs,
        });
        crate::util::to_pretty_json(&value)
    }
}

fn escape_into(out: &mut String, s: &str) {
    for c in s.chars() {
        if matches!(c, '\\' | ';' | ',' | '[' | ']' | '(' | ')') {
            out.push('\\');
        }
        out.push(c);
    }
}

fn serialize_parts<'a>(
    drv: &Derivation,
    input_drvs: impl Iterator<Item = (String, &'a BTreeSet<String>)>,
    outputs: impl Iterator<Item = (&'a str, String)>,
) -> Vec<u8> {
    let mut s = String::with_capacity(256);
    s.push_str("Drv(");
    escape_into(&mut s, &drv.name);
    s.push(';');
    escape_into(&mut s, &drv.builder);
    s.push_str(";args=[");
    for (i, arg) in drv.args.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        escape_into(&mut s, arg);
    }
    s.push_str("];env=[");
    for (i, (k, v)) in drv.env.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        escape_into(&mut s, k);
        s.push('=');
        escape_into(&mut s, v);
    }
    s.push_str("];inputDrvs=[");
    let input_drvs: BTreeMap<String, &BTreeSet<String>> = input_drvs.collect();
    for (i, (path, outs)) in input_drvs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        escape_into(&mut s, path);
        s.push_str(":(");
        for (j, out) in outs.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            escape_into(&mut s, out);
        }
        s.push(')');
    }
    s.push_str("];inputSrcs=[");
    for (i, src) in drv.input_srcs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        escape_into(&mut s, &src.to_string());
    }
    s.push_str("];outputs=[");
    for (i, (name, path)) in outputs.enumerate() {
        if i > 0 {
            s.push(',');
        }
        escape_into(&mut s, name);
        s.push(':');
        escape_into(&mut s, &path);
    }
    s.push_str("];fixed=");
    match &drv.fixed_output {
        Some(f) => {
            escape_into(&mut s, &f.hash_algo);
            s.push(':');
            escape_into(&mut s, &f.content_digest);
        }
        None => s.push_str("none"),
    }
    s.push(')');
    s.into_bytes()
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err<T>(&self, reason: impl Into<String>) -> Result<T, DrvError> {
        Err(DrvError::Parse {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn expect(&mut self, lit: &str) -> Result<(), DrvError> {
        if self.text[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.err(format!("expected `{lit}`"))
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    /// Read an escaped string up to (not including) an unescaped stop char.
    fn string(&mut self, stops: &[char]) -> Result<String, DrvError> {
        let mut out = String::new();
        let mut chars = self.text[self.pos..].char_indices();
        while let Some((i, c)) = chars.next() {
            if c == '\\' {
                match chars.next() {
                    Some((_, e)) => out.push(e),
                    None => {
                        self.pos += i;
                        return self.err("dangling escape");
                    }
                }
            } else if stops.contains(&c) {
                self.pos += i;
                return Ok(out);
            } else if matches!(c, ';' | ',' | '[' | ']' | '(' | ')') {
                self.pos += i;
                return self.err(format!("unexpected unescaped `{c}`"));
            } else {
                out.push(c);
            }
        }
        self.pos = self.text.len();
        self.err("unexpected end of input")
    }

    fn list<T>(&mut self, mut item: impl FnMut(&mut Self) -> Result<T, DrvError>) -> Result<Vec<T>, DrvError> {
        self.expect("[")?;
        let mut items = Vec::new();
        if self.peek() == Some(']') {
            self.pos += 1;
            return Ok(items);
        }
        loop {
            items.push(item(self)?);
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(']') => {
                    self.pos += 1;
                    return Ok(items);
                }
                _ => return self.err("expected `,` or `]`"),
            }
        }
    }

    fn store_path(&mut self, stops: &[char]) -> Result<StorePath, DrvError> {
        let at = self.pos;
        let text = self.string(stops)?;
        text.parse().map_err(|e: StorePathError| DrvError::Parse {
            offset: at,
            reason: e.to_string(),
        })
    }

    fn derivation(mut self) -> Result<Derivation, DrvError> {
        self.expect("Drv(")?;
        let name = self.string(&[';'])?;
        self.expect(";")?;
        let builder = self.string(&[';'])?;
        self.expect(";args=")?;
        let args = self.list(|p| p.string(&[',', ']']))?;
        self.expect(";env=")?;
        let env_items = self.list(|p| {
            let key = p.string(&['='])?;
            p.expect("=")?;
            let value = p.string(&[',', ']'])?;
            Ok((key, value))
        })?;
        self.expect(";inputDrvs=")?;
        let input_items = self.list(|p| {
            let path = p.store_path(&[':'])?;
            p.expect(":(")?;
            let mut outs = Vec::new();
            if p.peek() != Some(')') {
                loop {
                    outs.push(p.string(&[',', ')'])?);
                    if p.peek() == Some(',') {
                        p.pos += 1;
                    } else {
                        break;
                    }
                }
            }
            p.expect(")")?;
            Ok((path, outs))
        })?;
        self.expect(";inputSrcs=")?;
        let srcs = self.list(|p| p.store_path(&[',', ']']))?;
        self.expect(";outputs=")?;
        let output_items = self.list(|p| {
            let name = p.string(&[':'])?;
            p.expect(":")?;
            let at = p.pos;
            let path = p.string(&[',', ']'])?;
            let path = if path.is_empty() {
                None
            } else {
                Some(path.parse::<StorePath>().map_err(|e| DrvError::Parse {
                    offset: at,
                    reason: e.to_string(),
                })?)
            };
            Ok((name, path))
        })?;
        self.expect(";fixed=")?;
        let fixed_output = if self.text[self.pos..].starts_with("none)") {
            self.pos += 4;
            None
        } else {
            let hash_algo = self.string(&[':'])?;
            self.expect(":")?;
            let content_digest = self.string(&[')'])?;
            Some(FixedOutput {
                hash_algo,
                content_digest,
            })
        };
        self.expect(")")?;
        if self.pos != self.text.len() {
            return self.err("trailing bytes");
        }

        let drv = Derivation {
            name,
            builder,
            args,
            env: env_items.into_iter().collect(),
            input_drvs: input_items
                .into_iter()
                .map(|(p, outs)| (p, outs.into_iter().collect()))
                .collect(),
            input_srcs: srcs.into_iter().collect(),
            outputs: output_items.into_iter().collect(),
            fixed_output,
        };
        Ok(drv)
    }
}

/// Resolves derivation paths to parsed derivations.
pub trait DrvLookup {
    fn lookup_drv(&self, path: &StorePath) -> Option<Arc<Derivation>>;
}

impl DrvLookup for BTreeMap<StorePath, Arc<Derivation>> {
    fn lookup_drv(&self, path: &StorePath) -> Option<Arc<Derivation>> {
        self.get(path).cloned()
    }
}

impl DrvLookup for HashMap<StorePath, Arc<Derivation>> {
    fn lookup_drv(&self, path: &StorePath) -> Option<Arc<Derivation>> {
        self.get(path).cloned()
    }
}

/// Memo table for [`hash_modulo`], shareable between threads.
#[derive(Debug, Default)]
pub struct HashModuloCache {
    memo: Mutex<HashMap<StorePath, [u8; 32]>>,
}

impl HashModuloCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&self, path: &StorePath) -> Option<[u8; 32]> {
        self.memo.lock().expect("memo poisoned").get(path).copied()
    }

    fn put(&self, path: StorePath, digest: [u8; 32]) {
        self.memo.lock().expect("memo poisoned").insert(path, digest);
    }
}

/// Digest used in place of a derivation when computing output paths.
pub fn hash_modulo(drv: &Derivation, lookup: &dyn DrvLookup, cache: &HashModuloCache) -> Result<[u8; 32], DrvError> {
    let mut visiting = HashSet::new();
    hash_modulo_inner(drv, lookup, cache, &mut visiting)
}

fn hash_modulo_inner(
    drv: &Derivation,
    lookup: &dyn DrvLookup,
    cache: &HashModuloCache,
    visiting: &mut HashSet<StorePath>,
) -> Result<[u8; 32], DrvError> {
    if let Some(fixed) = &drv.fixed_output {
        return Ok(sha256(format!(
            "fixed:out:{}:{}:{}",
            fixed.hash_algo, fixed.content_digest, drv.name
        )));
    }
    let mut replaced = Vec::with_capacity(drv.input_drvs.len());
    for (path, outs) in &drv.input_drvs {
        let digest = match cache.get(path) {
            Some(d) => d,
            None => {
                if !visiting.insert(path.clone()) {
                    return Err(DrvError::CycleDetected(path.clone()));
                }
                let input = lookup
                    .lookup_drv(path)
                    .ok_or_else(|| DrvError::MissingInput(path.clone()))?;
                let d = hash_modulo_inner(&input, lookup, cache, visiting)?;
                visiting.remove(path);
                cache.put(path.clone(), d);
                d
            }
        };
        replaced.push((hex::encode(digest), outs));
    }
    let masked_outputs = drv.outputs.keys().map(|k| (k.as_str(), String::new()));
    Ok(sha256(serialize_parts(drv, replaced.into_iter(), masked_outputs)))
}

pub fn compute_output_path(
    drv: &Derivation,
    output: &str,
    lookup: &dyn DrvLookup,
    cache: &HashModuloCache,
) -> Result<StorePath, DrvError> {
    if !drv.outputs.contains_key(output) {
        return Err(DrvError::UnknownOutput(output.to_string()));
    }
    let modulo = hash_modulo(drv, lookup, cache)?;
    output_path_from_modulo(drv, output, &modulo)
}

fn output_path_from_modulo(drv: &Derivation, output: &str, modulo: &[u8; 32]) -> Result<StorePath, DrvError> {
    let preimage = format!("output:{output}:{}:{STORE_PREFIX}:{}", hex::encode(modulo), drv.name);
    let rendered = if output == "out" {
        drv.name.clone()
    } else {
        format!("{}-{output}", drv.name)
    };
    Ok(StorePath::hashed(preimage, &rendered)?)
}

/// Compute and fill in every output path of `drv`.
pub fn fill_outputs(drv: &mut Derivation, lookup: &dyn DrvLookup, cache: &HashModuloCache) -> Result<(), DrvError> {
    drv.validate()?;
    let modulo = hash_modulo(drv, lookup, cache)?;
    let names: Vec<String> = drv.outputs.keys().cloned().collect();
    for name in names {
        let path = output_path_from_modulo(drv, &name, &modulo)?;
        drv.outputs.insert(name, Some(path));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Derivation {
        Derivation::new("a", format!("{STORE_PREFIX}/{}-sh", "a".repeat(32)))
    }

    #[test]
    fn serialization_is_insertion_order_independent() {
        let mut a = minimal();
        a.env.insert("z".into(), "1".into());
        a.env.insert("b".into(), "2".into());
        let mut b = minimal();
        b.env.insert("b".into(), "2".into());
        b.env.insert("z".into(), "1".into());
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
    }

    #[test]
    fn escapes_special_characters_and_parses_back() {
        let mut d = minimal();
        d.args = vec!["-c".into(), "a;b,c[d]e(f)g\\h".into(), String::new()];
        d.env.insert("configureFlags".into(), "--sysconfdir=/etc".into());
        d.env.insert("empty".into(), String::new());
        let bytes = d.canonical_bytes();
        assert!(String::from_utf8_lossy(&bytes).contains("a\\;b\\,c\\[d\\]e\\(f\\)g\\\\h"));
        assert_eq!(Derivation::parse(&bytes).unwrap(), d);
    }

    #[test]
    fn fixed_output_hash_modulo_formula() {
        let mut d = Derivation::new("nano-7.2.tar.xz", "/bin/sh");
        d.fixed_output = Some(FixedOutput {
            hash_algo: "sha256".into(),
            content_digest: "ab12".into(),
        });
        let got = hash_modulo(&d, &BTreeMap::new(), &HashModuloCache::new()).unwrap();
        assert_eq!(got, sha256("fixed:out:sha256:ab12:nano-7.2.tar.xz"));
    }

    #[test]
    fn unknown_output_rejected() {
        let d = minimal();
        let err = compute_output_path(&d, "dev", &BTreeMap::new(), &HashModuloCache::new());
        assert_eq!(err, Err(DrvError::UnknownOutput("dev".into())));
    }

    #[test]
    fn validation_rules() {
        let mut d = minimal();
        d.outputs.clear();
        assert!(d.validate().is_err());

        let mut d = minimal();
        d.outputs.insert("dev".into(), None);
        d.fixed_output = Some(FixedOutput {
            hash_algo: "sha256".into(),
            content_digest: "00".into(),
        });
        assert!(d.validate().is_err());

        let mut d = minimal();
        d.env.insert("A=B".into(), "x".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(Derivation::parse(b"Drv(").is_err());
        let mut bytes = minimal().canonical_bytes();
        bytes.push(b'x');
        assert!(matches!(Derivation::parse(&bytes), Err(DrvError::Parse { .. })));
    }
}
