//! On-disk formats: the `TPSM` model file and extracted-dataset directories.
//!
//! Model file layout, all integers little-endian:
//!
//! ```text
//! "TPSM" | u32 version | u32 header_len | header (JSON layer table)
//! | u32 param_count | per param: u32 name_len, name, u32 ndim, u32 dims…, f32 values…
//! | sha256 of everything before it (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::metrics::ExtractedDataset;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPSM";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    layers: Vec<Layer>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Parameter(format!("{v} does not fit the model file's u32 fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a model (in its current orientation) to bytes.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        layers: model.layers().to_vec(),
    })
    .map_err(|e| Error::Parameter(format!("cannot encode layer table: {e}")))?;
    let store = model.params();
    let mut out = Vec::with_capacity(64 + header.len() + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, store.len())?;
    for (_, name, t) in store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = Sha256::digest(&out);
    out.extend_from_slice(&hash);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "{what} at byte {} needs {n} bytes, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses and verifies a model file. Nothing is returned unless the whole
/// file checks out.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 + HASH_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Corruption("missing TPSM magic".into()));
    }
    let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != hash {
        return Err(Error::Corruption("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!("file version {version}, this build reads {FORMAT_VERSION}")));
    }
    let header_len = r.u32("header length")?;
    let header_bytes = r.take(header_len, "layer table")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| {
        if e.to_string().contains("unknown variant") {
            Error::Version(format!("layer table: {e}"))
        } else {
            Error::Corruption(format!("layer table: {e}"))
        }
    })?;
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Corruption(format!("parameter name before byte {} is not UTF-8", r.pos)))?
            .to_string();
        let ndim = r.u32("rank")?;
        let shape = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Corruption("parameter size overflows".into()))?, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Corruption(format!("{} trailing bytes after parameters", body.len() - r.pos)));
    }
    Model::from_parts(header.layers, store)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

const IMAGES_FILE: &str = "images.f32";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ExtractedManifest {
    shape: Vec<usize>,
    classes: Vec<usize>,
    indices: Vec<usize>,
    images_file: String,
    images_sha256: String,
    source_hash: String,
}

/// Writes `images.f32` (little-endian, back to back) and `manifest.json`.
pub fn save_extracted(ds: &ExtractedDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = ds.images.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = ExtractedManifest {
        shape: ds.shape.clone(),
        classes: ds.classes.clone(),
        indices: ds.indices.clone(),
        images_file: IMAGES_FILE.into(),
        images_sha256: sha256_hex(&bytes),
        source_hash: ds.source_hash.clone(),
    };
    let path = dir.join(IMAGES_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_extracted(dir: impl AsRef<Path>) -> Result<ExtractedDataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ExtractedManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let path = dir.join(&m.images_file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != m.images_sha256 {
        return Err(Error::Integrity(format!("{} does not match its manifest hash", path.display())));
    }
    let per: usize = m.shape.iter().product();
    if bytes.len() != 4 * per * m.classes.len() || m.indices.len() != m.classes.len() {
        return Err(Error::Data(format!(
            "{} holds {} bytes, expected {} images of {per} floats",
            path.display(),
            bytes.len(),
            m.classes.len()
        )));
    }
    Ok(ExtractedDataset {
        shape: m.shape,
        classes: m.classes,
        indices: m.indices,
        images: bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        source_hash: m.source_hash,
    })
}
