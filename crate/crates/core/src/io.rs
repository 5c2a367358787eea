//! Binary state files.
//!
//! Layout (all little-endian): magic `XCST`, u32 version (=1), u32 V, u32 H,
//! u32 W, i64 model hour, then V*H*W f32 values in v-major, i, j order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, StateField};

pub const STATE_MAGIC: [u8; 4] = *b"XCST";
pub const STATE_VERSION: u32 = 1;
pub const STATE_HEADER_LEN: usize = 4 + 4 * 4 + 8;

pub fn encode_state(state: &StateField) -> Vec<u8> {
    let spec = state.spec();
    let mut out = Vec::with_capacity(STATE_HEADER_LEN + 4 * spec.len());
    out.extend_from_slice(&STATE_MAGIC);
    for x in [STATE_VERSION, spec.levels as u32, spec.rows as u32, spec.cols as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&state.time.to_le_bytes());
    for &x in state.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_state(bytes: &[u8]) -> Result<StateField> {
    if bytes.len() < STATE_HEADER_LEN {
        return Err(Error::ShapeMismatch(format!("state file too short: {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != STATE_MAGIC {
        return Err(Error::BadMagic { expected: STATE_MAGIC, found: magic });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != STATE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let spec = GridSpec::new(u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize)?;
    let time = i64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let payload = &bytes[STATE_HEADER_LEN..];
    if payload.len() != 4 * spec.len() {
        return Err(Error::ShapeMismatch(format!("payload holds {} bytes, header implies {}", payload.len(), 4 * spec.len())));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    StateField::from_vec(spec, time, data)
}

pub fn write_state(path: impl AsRef<Path>, state: &StateField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_state(state))?;
    w.flush()?;
    Ok(())
}

pub fn read_state(path: impl AsRef<Path>) -> Result<StateField> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_state(&bytes)
}

/// Rounds every value through f32, i.e. what a write/read cycle yields.
pub fn quantize(state: &StateField) -> StateField {
    let data = state.data().iter().map(|&x| x as f32 as f64).collect();
    StateField::from_vec(*state.spec(), state.time, data).expect("finite input stays finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_roundtrips() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let f = StateField::zeros(g, 36);
        assert_eq!(decode_state(&encode_state(&f)).unwrap(), f);
    }

    #[test]
    fn value_lands_at_layout_offset() {
        let g = GridSpec::new(2, 4, 8).unwrap();
        let mut f = StateField::zeros(g, 0);
        f.set(1, 2, 3, 1.5);
        let bytes = encode_state(&f);
        let off = STATE_HEADER_LEN + 4 * (4 * 8 + 2 * 8 + 3);
        assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), STATE_HEADER_LEN + 4 * 64);
    }

    #[test]
    fn rejects_bad_magic_and_shape() {
        let g = GridSpec::new(1, 2, 4).unwrap();
        let mut bytes = encode_state(&StateField::zeros(g, 0));
        bytes.pop();
        assert!(matches!(decode_state(&bytes), Err(Error::ShapeMismatch(_))));
        bytes[0] = b'Y';
        assert!(matches!(decode_state(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let g = GridSpec::new(1, 2, 4).unwrap();
        let mut bytes = encode_state(&StateField::zeros(g, 0));
        let off = STATE_HEADER_LEN + 4 * 5;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_state(&bytes), Err(Error::NonFiniteValue(5))));
    }
}
