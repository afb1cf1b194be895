//! Content-addressed object store.
//!
//! Objects are immutable and addressed by `sha256:<hex>` of their bytes.
//! Every read re-hashes the object, so corruption behind the store surfaces
//! as [`CasError::IntegrityViolation`] instead of bad data.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::ErrorCode;

const CID_PREFIX: &str = "sha256:";

#[derive(Debug, Error)]
pub enum CasError {
    #[error("object {0} not found")]
    NotFound(Cid),
    #[error("stored bytes for {0} no longer match their address")]
    IntegrityViolation(Cid),
    #[error("store is full ({0} objects)")]
    StorageFull(usize),
    #[error("refusing to store an empty object")]
    EmptyObject,
    #[error("invalid cid `{0}`")]
    InvalidCid(String),
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

impl CasError {
    pub fn code(&self) -> ErrorCode {
        match self {
            CasError::NotFound(_) => ErrorCode::NotFound,
            CasError::IntegrityViolation(_) => ErrorCode::IntegrityViolation,
            CasError::StorageFull(_) => ErrorCode::StorageFull,
            CasError::EmptyObject => ErrorCode::EmptyObject,
            CasError::InvalidCid(_) => ErrorCode::Malformed,
            CasError::Io(_) => ErrorCode::Io,
        }
    }
}

/// Content identifier: SHA-256 of the stored bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cid([u8; 32]);

impl Cid {
    pub fn of(bytes: &[u8]) -> Cid {
        Cid(Sha256::digest(bytes).into())
    }

    pub fn from_digest(digest: [u8; 32]) -> Cid {
        Cid(digest)
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{CID_PREFIX}{}", self.hex())
    }
}

impl fmt::Debug for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cid({self})")
    }
}

impl FromStr for Cid {
    type Err = CasError;

    fn from_str(s: &str) -> Result<Cid, CasError> {
        let invalid = || CasError::InvalidCid(s.to_string());
        let hex_part = s.strip_prefix(CID_PREFIX).ok_or_else(invalid)?;
        if hex_part.len() != 64 || !hex_part.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(invalid());
        }
        let mut digest = [0u8; 32];
        hex::decode_to_slice(hex_part, &mut digest).map_err(|_| invalid())?;
        Ok(Cid(digest))
    }
}

impl Serialize for Cid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Immutable put/get keyed by content hash. No update or delete.
pub trait ObjectStore: Send + Sync {
    fn put(&self, bytes: &[u8]) -> Result<Cid, CasError>;
    fn get(&self, cid: &Cid) -> Result<Vec<u8>, CasError>;
    fn has(&self, cid: &Cid) -> bool;
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn verified(cid: &Cid, bytes: Vec<u8>) -> Result<Vec<u8>, CasError> {
    if Cid::of(&bytes) != *cid {
        return Err(CasError::IntegrityViolation(*cid));
    }
    Ok(bytes)
}

#[derive(Default)]
pub struct MemoryStore {
    objects: RwLock<HashMap<Cid, Vec<u8>>>,
    capacity: Option<usize>,
}

impl MemoryStore {
    pub fn new() -> MemoryStore {
        MemoryStore::default()
    }

    pub fn with_capacity_limit(max_objects: usize) -> MemoryStore {
        MemoryStore { objects: RwLock::default(), capacity: Some(max_objects) }
    }
}

impl ObjectStore for MemoryStore {
    fn put(&self, bytes: &[u8]) -> Result<Cid, CasError> {
        if bytes.is_empty() {
            return Err(CasError::EmptyObject);
        }
        let cid = Cid::of(bytes);
        let mut objects = self.objects.write().unwrap();
        if objects.contains_key(&cid) {
            return Ok(cid);
        }
        if let Some(cap) = self.capacity {
            if objects.len() >= cap {
                return Err(CasError::StorageFull(cap));
            }
        }
        objects.insert(cid, bytes.to_vec());
        Ok(cid)
    }

    fn get(&self, cid: &Cid) -> Result<Vec<u8>, CasError> {
        let bytes = self
            .objects
            .read()
            .unwrap()
            .get(cid)
            .cloned()
            .ok_or(CasError::NotFound(*cid))?;
        verified(cid, bytes)
    }

    fn has(&self, cid: &Cid) -> bool {
        self.objects.read().unwrap().contains_key(cid)
    }

    fn len(&self) -> usize {
        self.objects.read().unwrap().len()
    }
}

/// One file per object at `<root>/objects/<first-2-hex>/<remaining-62-hex>`.
pub struct FsStore {
    root: PathBuf,
    capacity: Option<usize>,
    write_gate: Mutex<()>,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<FsStore, CasError> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        Ok(FsStore { root, capacity: None, write_gate: Mutex::new(()) })
    }

    pub fn with_capacity_limit(mut self, max_objects: usize) -> FsStore {
        self.capacity = Some(max_objects);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, cid: &Cid) -> PathBuf {
        let hex = cid.hex();
        self.root.join("objects").join(&hex[..2]).join(&hex[2..])
    }

    /// Every CID present on disk, sorted.
    pub fn list(&self) -> Result<Vec<Cid>, CasError> {
        let mut out = Vec::new();
        for shard in fs::read_dir(self.root.join("objects"))? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            let prefix = shard.file_name().to_string_lossy().into_owned();
            for entry in fs::read_dir(shard.path())? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if let Ok(cid) = format!("{CID_PREFIX}{prefix}{name}").parse() {
                    out.push(cid);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

impl ObjectStore for FsStore {
    fn put(&self, bytes: &[u8]) -> Result<Cid, CasError> {
        if bytes.is_empty() {
            return Err(CasError::EmptyObject);
        }
        let cid = Cid::of(bytes);
        let path = self.object_path(&cid);
        let _gate = self.write_gate.lock().unwrap();
        if path.exists() {
            return Ok(cid);
        }
        if let Some(cap) = self.capacity {
            if self.len() >= cap {
                return Err(CasError::StorageFull(cap));
            }
        }
        let dir = path.parent().expect("object path has a shard directory");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{}.tmp", &cid.hex()[2..]));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(cid)
    }

    fn get(&self, cid: &Cid) -> Result<Vec<u8>, CasError> {
        match fs::read(self.object_path(cid)) {
            Ok(bytes) => verified(cid, bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(CasError::NotFound(*cid)),
            Err(e) => Err(e.into()),
        }
    }

    fn has(&self, cid: &Cid) -> bool {
        self.object_path(cid).is_file()
    }

    fn len(&self) -> usize {
        self.list().map(|l| l.len()).unwrap_or(0)
    }
}
