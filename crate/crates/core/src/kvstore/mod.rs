//! Per-chunk KV caches, their TKVC persistence, and a content-addressed
//! on-disk store.

pub mod format;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Fingerprint, LayerKv, ModelConfig, ModelWeights};
use crate::tokenizer::TokenId;

pub use format::{read_header, ContainerKind, Header, StorageDtype, FORMAT_VERSION};

/// Environment variable naming the default store root.
pub const STORE_ENV: &str = "KVRAG_STORE";

/// Content address of a chunk: SHA-256 over the model fingerprint and the
/// chunk's token ids.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId(pub [u8; 32]);

impl ChunkId {
    pub fn compute(fingerprint: &Fingerprint, tokens: &[TokenId]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"kvrag-chunk-v1");
        hasher.update(fingerprint.0);
        for t in tokens {
            hasher.update(t.to_le_bytes());
        }
        ChunkId(hasher.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChunkId({})", &self.to_hex()[..12])
    }
}

impl FromStr for ChunkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes =
            hex::decode(s).map_err(|e| Error::Domain(format!("bad chunk id {s:?}: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Domain(format!("chunk id {s:?} is not 32 bytes")))?;
        Ok(ChunkId(arr))
    }
}

impl serde::Serialize for ChunkId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

/// Unrotated per-layer K and V for one framed chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkKVCache {
    pub chunk_id: ChunkId,
    pub tokens: Vec<TokenId>,
    pub layers: Vec<LayerKv>,
    pub config: ModelConfig,
    pub fingerprint: Fingerprint,
    pub format_version: u32,
    pub dtype: StorageDtype,
}

impl ChunkKVCache {
    pub fn new(
        config: &ModelConfig,
        fingerprint: Fingerprint,
        tokens: Vec<TokenId>,
        layers: Vec<LayerKv>,
    ) -> Result<Self> {
        let cache = Self {
            chunk_id: ChunkId::compute(&fingerprint, &tokens),
            tokens,
            layers,
            config: config.clone(),
            fingerprint,
            format_version: FORMAT_VERSION,
            dtype: StorageDtype::F64,
        };
        cache.validate()?;
        Ok(cache)
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn with_dtype(mut self, dtype: StorageDtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.tokens.is_empty() {
            return Err(Error::Shape("chunk cache holds no tokens".into()));
        }
        if self.layers.len() != self.config.layer_num {
            return Err(Error::Shape(format!(
                "{} cached layers for a {}-layer model",
                self.layers.len(),
                self.config.layer_num
            )));
        }
        let want = (self.tokens.len(), self.config.kv_dim());
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.k.shape() != want || layer.v.shape() != want {
                return Err(Error::Shape(format!(
                    "layer {l} kv shapes {:?}/{:?}, expected {want:?}",
                    layer.k.shape(),
                    layer.v.shape()
                )));
            }
        }
        if self.chunk_id != ChunkId::compute(&self.fingerprint, &self.tokens) {
            return Err(Error::Format("chunk id does not match its content".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut sections = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            sections.push((format!("L{l}.k"), layer.k.clone()));
            sections.push((format!("L{l}.v"), layer.v.clone()));
        }
        format::encode(&format::Container {
            kind: ContainerKind::ChunkCache,
            dtype: self.dtype,
            config: self.config.clone(),
            fingerprint: self.fingerprint,
            chunk_id: self.chunk_id.0,
            tokens: self.tokens.clone(),
            sections,
        })
    }

    /// Decode and fully validate. A fingerprint other than `expected` is a
    /// [`Error::StaleCache`].
    pub fn from_bytes(bytes: &[u8], expected: &Fingerprint) -> Result<Self> {
        let c = format::decode(bytes)?;
        if c.kind != ContainerKind::ChunkCache {
            return Err(Error::Format(
                "container does not hold a chunk cache".into(),
            ));
        }
        let chunk_id = ChunkId(c.chunk_id);
        if c.fingerprint != *expected {
            return Err(Error::StaleCache {
                chunk: chunk_id.to_hex(),
                expected: expected.to_hex(),
                found: c.fingerprint.to_hex(),
            });
        }
        if c.sections.len() != 2 * c.config.layer_num {
            return Err(Error::Format(format!(
                "{} sections for {} layers",
                c.sections.len(),
                c.config.layer_num
            )));
        }
        let mut layers = Vec::with_capacity(c.config.layer_num);
        let mut it = c.sections.into_iter();
        for l in 0..c.config.layer_num {
            let (kt, k) = it.next().unwrap();
            let (vt, v) = it.next().unwrap();
            if kt != format!("L{l}.k") || vt != format!("L{l}.v") {
                return Err(Error::Format(format!("unexpected sections {kt}/{vt}")));
            }
            layers.push(LayerKv { k, v });
        }
        let cache = Self {
            chunk_id,
            tokens: c.tokens,
            layers,
            config: c.config,
            fingerprint: c.fingerprint,
            format_version: FORMAT_VERSION,
            dtype: c.dtype,
        };
        cache
            .validate()
            .map_err(|e| Error::Format(format!("inconsistent cache: {e}")))?;
        Ok(cache)
    }
}

/// Result of [`CacheStore::put`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stored {
    pub id: ChunkId,
    /// Zero when the chunk was already present.
    pub bytes_written: u64,
}

/// Content-addressed directory of `.tkvc` files under `<root>/chunks/`.
#[derive(Debug)]
pub struct CacheStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let chunks = root.join("chunks");
        fs::create_dir_all(&chunks).map_err(|e| Error::io(&chunks, e))?;
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
        })
    }

    /// Open the store named by `KVRAG_STORE`.
    pub fn from_env() -> Result<Self> {
        let root = std::env::var_os(STORE_ENV)
            .ok_or_else(|| Error::Config(format!("{STORE_ENV} is not set")))?;
        Self::open(PathBuf::from(root))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, id: &ChunkId) -> PathBuf {
        self.root
            .join("chunks")
            .join(format!("{}.tkvc", id.to_hex()))
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.path_for(id).is_file()
    }

    pub fn store(&self, cache: &ChunkKVCache) -> Result<ChunkId> {
        self.put(cache).map(|s| s.id)
    }

    /// Persist `cache` unless a record with its id already exists. Writes go
    /// to a temporary file that is renamed into place.
    pub fn put(&self, cache: &ChunkKVCache) -> Result<Stored> {
        let bytes = cache.to_bytes()?;
        let id = cache.chunk_id;
        let path = self.path_for(&id);
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        if path.is_file() {
            return Ok(Stored {
                id,
                bytes_written: 0,
            });
        }
        let tmp = self.root.join("chunks").join(format!(
            ".{}.{}.{}.tmp",
            id.to_hex(),
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&path, e));
        }
        Ok(Stored {
            id,
            bytes_written: bytes.len() as u64,
        })
    }

    pub fn load(&self, id: &ChunkId, expected: &Fingerprint) -> Result<ChunkKVCache> {
        let path = self.path_for(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(id.to_hex()))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let cache = ChunkKVCache::from_bytes(&bytes, expected)?;
        if cache.chunk_id != *id {
            return Err(Error::Format(format!(
                "file for {id} holds chunk {}",
                cache.chunk_id
            )));
        }
        Ok(cache)
    }

    /// All stored ids in ascending order.
    pub fn ids(&self) -> Result<Vec<ChunkId>> {
        let dir = self.root.join("chunks");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".tkvc")) else {
                continue;
            };
            if let Ok(id) = stem.parse() {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn len(&self) -> Result<usize> {
        self.ids().map(|ids| ids.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        self.len().map(|n| n == 0)
    }
}

/// Write model weights as a TKVC weights container (always f64).
pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let bytes = format::encode(&format::Container {
        kind: ContainerKind::Weights,
        dtype: StorageDtype::F64,
        config: weights.config.clone(),
        fingerprint: weights.fingerprint(),
        chunk_id: [0; 32],
        tokens: Vec::new(),
        sections: weights.sections(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = format::decode(&bytes)?;
    if c.kind != ContainerKind::Weights {
        return Err(Error::Format(
            "container does not hold model weights".into(),
        ));
    }
    let weights = ModelWeights::from_sections(&c.config, c.sections)?;
    if weights.fingerprint() != c.fingerprint {
        return Err(Error::Format(
            "weights do not match their recorded fingerprint".into(),
        ));
    }
    Ok(weights)
}
