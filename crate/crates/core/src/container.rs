//! Versioned binary container shared by checkpoints and trajectory dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NSL1" | u32 metadata length | metadata (UTF-8 JSON) | u64 count | count x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NSL1";

pub fn encode<M: Serialize>(meta: &M, payload: &[f64]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| Error::Format("metadata block exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(16 + meta.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<f64>)> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(|_| Error::Format("truncated header".into()))?;
    let meta_len = u32::from_le_bytes(len4) as usize;
    if r.len() < meta_len {
        return Err(Error::Format("truncated metadata".into()));
    }
    let (meta_bytes, mut r) = r.split_at(meta_len);
    let meta = serde_json::from_slice(meta_bytes)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8).map_err(|_| Error::Format("missing payload length".into()))?;
    let count = u64::from_le_bytes(len8) as usize;
    if r.len() != count.checked_mul(8).ok_or_else(|| Error::Format("payload length overflow".into()))? {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header promises {count} floats",
            r.len()
        )));
    }
    let payload = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((meta, payload))
}

pub fn write_file<M: Serialize>(path: &Path, meta: &M, payload: &[f64]) -> Result<()> {
    let bytes = encode(meta, payload)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<f64>)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::{json, Value};

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&json!({"k": 1}), &[1.0, 2.0]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<Value>(&bad).is_err());
        assert!(decode::<Value>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<Value>(&bytes[..6]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(payload in prop::collection::vec(any::<f64>(), 0..64), step in any::<u32>()) {
            let meta = json!({"step": step, "kind": "test"});
            let bytes = encode(&meta, &payload).unwrap();
            let (m, p): (Value, Vec<f64>) = decode(&bytes).unwrap();
            prop_assert_eq!(&m, &meta);
            prop_assert_eq!(p.len(), payload.len());
            for (a, b) in p.iter().zip(&payload) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(encode(&m, &p).unwrap(), bytes);
        }
    }
}
