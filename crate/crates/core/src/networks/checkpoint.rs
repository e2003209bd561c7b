//! `SWCK` checkpoint container.
//!
//! Layout (little-endian): magic `SWCK`, u32 version, u32 spec length, spec
//! as JSON, u64 parameter count, parameters as f32.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SWCK";

pub fn write_checkpoint<S: Serialize>(w: &mut impl Write, spec: &S, params: &[f32]) -> Result<()> {
    let json = serde_json::to_vec(spec)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(json.len()).map_err(|_| Error::Checkpoint("spec too large".into()))?.to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint(format!("file ends inside the {what}")))?;
    Ok(buf)
}

pub fn read_checkpoint<S: DeserializeOwned>(r: &mut impl Read) -> Result<(S, Vec<f32>)> {
    if read_exact(r, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(r, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(read_exact(r, 4, "spec length")?.try_into().expect("4 bytes")) as usize;
    let spec = serde_json::from_slice(&read_exact(r, len, "spec")?)
        .map_err(|e| Error::Checkpoint(format!("spec: {e}")))?;
    let count = u64::from_le_bytes(read_exact(r, 8, "parameter count")?.try_into().expect("8 bytes")) as usize;
    let bytes = read_exact(r, count.checked_mul(4).ok_or_else(|| Error::Checkpoint("parameter count overflows".into()))?, "parameters")?;
    let params = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &vec![1u32, 2], &[1.0, -0.5]).unwrap();
        assert_eq!(&buf[..4], b"SWCK");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[5, 0, 0, 0]);
        assert_eq!(&buf[12..17], b"[1,2]");
        assert_eq!(&buf[17..25], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&buf[25..29], &1.0f32.to_le_bytes());
        let (spec, params): (Vec<u32>, Vec<f32>) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(spec, vec![1, 2]);
        assert_eq!(params, vec![1.0, -0.5]);
    }

    #[test]
    fn truncation_and_bad_magic_are_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &0u8, &[1.0; 8]).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_checkpoint::<u8>(&mut buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("parameters"), "{err}");
        buf[0] = b'X';
        assert!(read_checkpoint::<u8>(&mut buf.as_slice()).is_err());
    }
}
