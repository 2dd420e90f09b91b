use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qrw_tensor::{ParamStore, Tensor};

use super::{AdapterSet, BaseWeights, ModelConfig, ModelError, Result};

const MAGIC: &str = "qrw-checkpoint 1";

/// Hex SHA-256 over parameter names, shapes and value bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(pub String);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn fingerprint_store(store: &ParamStore) -> Fingerprint {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    Fingerprint(hex::encode(h.finalize()))
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// Writes a checkpoint: text header fields, tensor index, then raw
/// little-endian values.
pub fn write_params(path: &Path, header: Vec<(String, String)>, store: &ParamStore) -> Result<()> {
    let mut text = format!("{MAGIC}\n");
    for (k, v) in header {
        text.push_str(&format!("{k} {v}\n"));
    }
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        text.push_str(&format!("tensor {name} {}\n", dims.join("x")));
    }
    text.push_str("data\n");
    let mut bytes = text.into_bytes();
    for t in store.tensors() {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Header fields and tensors of a checkpoint file.
pub struct Parsed {
    pub fields: Vec<(String, String)>,
    pub store: ParamStore,
}

impl Parsed {
    pub fn field(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing header field '{key}'")))
    }

    fn config(&self) -> Result<ModelConfig> {
        serde_json::from_str(self.field("config")?).map_err(|e| bad(format!("config: {e}")))
    }
}

pub fn read_params(path: &Path) -> Result<Parsed> {
    let bytes = std::fs::read(path)?;
    let split = bytes
        .windows(6)
        .position(|w| w == b"\ndata\n")
        .ok_or_else(|| bad("missing data marker"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("unrecognized format version"));
    }
    let mut fields = Vec::new();
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line '{line}'")))?;
        if key == "tensor" {
            let (name, dims) = rest.rsplit_once(' ').ok_or_else(|| bad(format!("malformed tensor '{rest}'")))?;
            let shape = dims
                .split('x')
                .filter(|d| !d.is_empty())
                .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in '{rest}'"))))
                .collect::<Result<Vec<usize>>>()?;
            tensors.push((name.to_owned(), shape));
        } else {
            fields.push((key.to_owned(), rest.to_owned()));
        }
    }
    let mut data = bytes[split + 6..].chunks_exact(8);
    let mut store = ParamStore::new();
    for (name, shape) in tensors {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = data
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if vals.len() != n {
            return Err(bad(format!("truncated data for tensor {name}")));
        }
        store.push(name, Tensor::new(&shape, vals)?.with_requires_grad(true));
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Parsed { fields, store })
}

fn config_json(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

pub fn save_base(path: &Path, base: &BaseWeights) -> Result<()> {
    let header = vec![
        ("kind".into(), "base".into()),
        ("config".into(), config_json(base.config())),
        ("fingerprint".into(), base.fingerprint().0),
    ];
    write_params(path, header, base.store())
}

/// Loads a base checkpoint, verifying its recorded fingerprint.
pub fn load_base(path: &Path) -> Result<BaseWeights> {
    let p = read_params(path)?;
    if p.field("kind")? != "base" {
        return Err(bad("not a base checkpoint"));
    }
    let base = BaseWeights::from_store(&p.config()?, p.store.clone())?;
    let found = base.fingerprint();
    let expected = p.field("fingerprint")?;
    if found.0 != expected {
        return Err(ModelError::FingerprintMismatch {
            expected: expected.into(),
            found: found.0,
        });
    }
    Ok(base)
}

pub fn save_adapters(path: &Path, cfg: &ModelConfig, set: &AdapterSet) -> Result<()> {
    let base_fp = set.base_fingerprint.as_ref().map_or("none".to_owned(), |f| f.0.clone());
    let header = vec![
        ("kind".into(), "adapters".into()),
        ("config".into(), config_json(cfg)),
        ("label".into(), set.label.clone()),
        ("base-fingerprint".into(), base_fp),
        ("fingerprint".into(), set.fingerprint().0),
    ];
    write_params(path, header, set.store())
}

/// Loads an adapter checkpoint; with `base`, also checks that it was
/// trained against that exact base.
pub fn load_adapters(path: &Path, base: Option<&BaseWeights>) -> Result<AdapterSet> {
    let p = read_params(path)?;
    if p.field("kind")? != "adapters" {
        return Err(bad("not an adapter checkpoint"));
    }
    let cfg = p.config()?;
    let mut set = AdapterSet::from_store(&cfg, p.field("label")?, p.store.clone())?;
    let expected = p.field("fingerprint")?;
    if set.fingerprint().0 != expected {
        return Err(ModelError::FingerprintMismatch {
            expected: expected.into(),
            found: set.fingerprint().0,
        });
    }
    let base_fp = p.field("base-fingerprint")?;
    if base_fp != "none" {
        set.base_fingerprint = Some(Fingerprint(base_fp.to_owned()));
    }
    if let Some(b) = base {
        let actual = b.fingerprint();
        if base_fp != actual.0 {
            return Err(ModelError::FingerprintMismatch {
                expected: base_fp.into(),
                found: actual.0,
            });
        }
        if b.config() != &cfg {
            return Err(bad("adapter checkpoint config differs from the base config"));
        }
    }
    Ok(set)
}
