use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{Provider, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::matrixio::DenseMatrix;

/// Memoizes `embed` by `(provider id, SHA-256 of text)`, in memory and
/// optionally in a cache directory. Rows are stored as raw little-endian
/// `f64` so cached and fresh activations are bit-identical.
pub struct CachedProvider<P> {
    inner: P,
    id: String,
    p: usize,
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Vec<f64>>>,
    write_lock: Mutex<()>,
    computed: AtomicUsize,
}

impl<P: Provider> CachedProvider<P> {
    pub fn new(inner: P, dir: Option<&Path>) -> Result<Self> {
        let id = inner.id();
        let p = inner.describe()?.p;
        let dir = match dir {
            Some(d) => {
                let d = d.join(&id);
                fs::create_dir_all(&d)?;
                Some(d)
            }
            None => None,
        };
        Ok(CachedProvider {
            inner,
            id,
            p,
            dir,
            memory: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
            computed: AtomicUsize::new(0),
        })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    /// Number of texts that had to be embedded by the wrapped provider.
    pub fn computed_texts(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }

    fn key(text: &str) -> String {
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.f64")))
    }

    fn lookup(&self, key: &str) -> Result<Option<Vec<f64>>> {
        if let Some(row) = self.memory.read().expect("cache lock poisoned").get(key) {
            return Ok(Some(row.clone()));
        }
        let Some(path) = self.path_for(key) else { return Ok(None) };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if bytes.len() != self.p * 8 {
            log::warn!("ignoring corrupt cache entry {}", path.display());
            return Ok(None);
        }
        let row: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        self.memory.write().expect("cache lock poisoned").insert(key.to_string(), row.clone());
        Ok(Some(row))
    }

    fn store(&self, key: &str, row: &[f64]) -> Result<()> {
        self.memory.write().expect("cache lock poisoned").insert(key.to_string(), row.to_vec());
        if let Some(path) = self.path_for(key) {
            let _guard = self.write_lock.lock().expect("cache lock poisoned");
            let parent = path.parent().expect("cache path has parent");
            fs::create_dir_all(parent)?;
            let tmp = parent.join(format!("{key}.tmp"));
            let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(())
    }
}

impl<P: Provider> Provider for CachedProvider<P> {
    fn describe(&self) -> Result<ProviderDescriptor> {
        self.inner.describe()
    }

    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed(&self, texts: &[String]) -> Result<DenseMatrix> {
        let keys: Vec<String> = texts.iter().map(|t| Self::key(t)).collect();
        let mut rows: Vec<Option<Vec<f64>>> = Vec::with_capacity(texts.len());
        for key in &keys {
            rows.push(self.lookup(key)?);
        }

        let mut missing: Vec<usize> = Vec::new();
        let mut first_of_key: HashMap<&str, usize> = HashMap::new();
        for (i, row) in rows.iter().enumerate() {
            if row.is_none() && !first_of_key.contains_key(keys[i].as_str()) {
                first_of_key.insert(keys[i].as_str(), missing.len());
                missing.push(i);
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed(&batch)?;
            if fresh.shape() != (batch.len(), self.p) {
                return Err(Error::dims(format!("{}x{}", batch.len(), self.p), format!("{:?}", fresh.shape())));
            }
            self.computed.fetch_add(batch.len(), Ordering::SeqCst);
            for (j, &i) in missing.iter().enumerate() {
                self.store(&keys[i], fresh.row(j).as_slice().expect("standard layout"))?;
            }
            for (i, row) in rows.iter_mut().enumerate() {
                if row.is_none() {
                    let j = first_of_key[keys[i].as_str()];
                    *row = Some(fresh.row(j).to_vec());
                }
            }
        }

        let mut out = Array2::zeros((texts.len(), self.p));
        for (i, row) in rows.into_iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&row.expect("filled")[..]));
        }
        DenseMatrix::from_array(out)
    }

    fn classify(&self, activations: &DenseMatrix) -> Result<DenseMatrix> {
        self.inner.classify(activations)
    }
}
