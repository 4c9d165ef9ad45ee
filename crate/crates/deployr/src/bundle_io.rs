//! Model bundle file: a JSON envelope holding a format tag, the FNV-1a
//! checksum of the embedded bundle text, and the bundle itself.

use std::path::Path;

use deployr_core::fingerprint::fnv1a;
use deployr_core::model::ModelBundle;
use deployr_core::Fingerprint;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};

pub const BUNDLE_FORMAT: &str = "deployr.bundle/1";

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    format: &'a str,
    checksum: Fingerprint,
    bundle: &'a RawValue,
}

#[derive(Deserialize)]
struct EnvelopeIn<'a> {
    format: String,
    checksum: Fingerprint,
    #[serde(borrow)]
    bundle: &'a RawValue,
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let body = serde_json::to_string(bundle).map_err(|e| Error::Integrity(e.to_string()))?;
    let raw = RawValue::from_string(body).map_err(|e| Error::Integrity(e.to_string()))?;
    let env = EnvelopeOut { format: BUNDLE_FORMAT, checksum: fnv1a(raw.get().as_bytes()), bundle: &raw };
    let mut out = serde_json::to_vec(&env).map_err(|e| Error::Integrity(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let env: EnvelopeIn = serde_json::from_slice(bytes).map_err(|e| Error::Integrity(format!("envelope is not valid JSON: {e}")))?;
    if env.format != BUNDLE_FORMAT {
        return Err(Error::Integrity(format!("unsupported bundle format `{}`", env.format)));
    }
    let actual = fnv1a(env.bundle.get().as_bytes());
    if actual != env.checksum {
        return Err(Error::Integrity(format!("checksum mismatch: header {} but contents hash to {actual}", env.checksum)));
    }
    let bundle: ModelBundle =
        serde_json::from_str(env.bundle.get()).map_err(|e| Error::Integrity(format!("bundle body: {e}")))?;
    bundle.validate().map_err(|e| Error::Integrity(format!("bundle contents: {e}")))?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(bundle)?).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}
