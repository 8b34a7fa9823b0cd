//! Binary share file format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "VOID"
//!      4     1  version (1)
//!      5     1  role (0 = AS, 1 = PS, 2 = sub-grid)
//!      6    16  subject id
//!     22     1  patch index (0xFF for AS)
//!     23     1  sub-grid index
//!     24     1  sub-grid total (1 when not expanded)
//!     25     2  width  (LE)
//!     27     2  height (LE)
//!     29     1  channels
//!     30     n  payload, width * height * channels bytes
//!   30+n     4  CRC-32 (IEEE) of every preceding byte (LE)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::vss::{GridShape, ShareGrid, ShareRole, SubjectId, VssError};

pub const MAGIC: &[u8; 4] = b"VOID";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;
pub const TRAILER_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("truncated share file ({0} bytes)")]
    Truncated(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown role code {0}")]
    BadRole(u8),
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("payload length {got} does not match header ({expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] VssError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serializes a grid into the share file layout.
pub fn encode(grid: &ShareGrid) -> Vec<u8> {
    let shape = grid.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + shape.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(grid.role().code());
    out.extend_from_slice(grid.subject_id().as_bytes());
    out.push(grid.patch_index());
    out.push(grid.subgrid_index());
    out.push(grid.subgrid_total());
    out.extend_from_slice(&shape.width().to_le_bytes());
    out.extend_from_slice(&shape.height().to_le_bytes());
    out.push(shape.channels());
    out.extend_from_slice(grid.bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses and validates a share file image.
pub fn decode(data: &[u8]) -> Result<ShareGrid, FormatError> {
    if data.len() < HEADER_LEN + TRAILER_LEN {
        return Err(FormatError::Truncated(data.len()));
    }
    let magic: [u8; 4] = data[0..4].try_into().expect("slice of 4");
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if data[4] != VERSION {
        return Err(FormatError::BadVersion(data[4]));
    }
    let body_len = data.len() - TRAILER_LEN;
    let stored = u32::from_le_bytes(data[body_len..].try_into().expect("slice of 4"));
    let computed = crc32fast::hash(&data[..body_len]);
    if stored != computed {
        return Err(FormatError::BadCrc { stored, computed });
    }
    let role = ShareRole::from_code(data[5]).ok_or(FormatError::BadRole(data[5]))?;
    let subject = SubjectId::from_bytes(data[6..22].try_into().expect("slice of 16"));
    let width = u16::from_le_bytes([data[25], data[26]]);
    let height = u16::from_le_bytes([data[27], data[28]]);
    let shape = GridShape::new(width, height, data[29])?;
    let payload = &data[HEADER_LEN..body_len];
    if payload.len() != shape.len() {
        return Err(FormatError::LengthMismatch {
            expected: shape.len(),
            got: payload.len(),
        });
    }
    Ok(ShareGrid::from_parts(
        role,
        subject,
        data[22],
        data[23],
        data[24],
        shape,
        payload.to_vec(),
    )?)
}

pub fn write_file(path: &Path, grid: &ShareGrid) -> Result<(), FormatError> {
    fs::write(path, encode(grid))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<ShareGrid, FormatError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Golden file computed independently with Python's zlib.crc32:
    // 2x1x1 authentication share, subject bytes 00..0f, payload a5 3c.
    const GOLDEN_HEX: &str =
        "564f49440100000102030405060708090a0b0c0d0e0fff00010200010001a53cf9efe170";

    fn golden_grid() -> ShareGrid {
        let subject = SubjectId::from_bytes(core::array::from_fn(|i| i as u8));
        ShareGrid::from_parts(
            ShareRole::Authentication,
            subject,
            0xFF,
            0,
            1,
            GridShape::new(2, 1, 1).unwrap(),
            vec![0xA5, 0x3C],
        )
        .unwrap()
    }

    #[test]
    fn golden_encoding() {
        assert_eq!(hex::encode(encode(&golden_grid())), GOLDEN_HEX);
        let parsed = decode(&hex::decode(GOLDEN_HEX).unwrap()).unwrap();
        assert_eq!(parsed, golden_grid());
    }

    #[test]
    fn rejects_corruption() {
        let good = hex::decode(GOLDEN_HEX).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(FormatError::BadVersion(2))));

        let mut bad = good.clone();
        bad[30] ^= 1;
        assert!(matches!(decode(&bad), Err(FormatError::BadCrc { .. })));

        assert!(matches!(
            decode(&good[..10]),
            Err(FormatError::Truncated(10))
        ));
    }

    #[test]
    fn header_payload_length_mismatch_rejected() {
        // Claim 3x1 but carry 2 bytes; recompute the CRC so only the length is wrong.
        let mut data = hex::decode(GOLDEN_HEX).unwrap();
        data.truncate(data.len() - 4);
        data[25] = 3;
        let crc = crc32fast::hash(&data);
        data.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode(&data),
            Err(FormatError::LengthMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            w in 1u16..12, h in 1u16..12, rgb in any::<bool>(),
            role in 0u8..3, patch in 0u8..6, subject in any::<u128>(), seed in any::<u64>(),
        ) {
            let c = if rgb { 3 } else { 1 };
            let shape = GridShape::new(w, h, c).unwrap();
            let mut bytes = vec![0u8; shape.len()];
            use rand::RngCore;
            crate::rng::seeded(seed).fill_bytes(&mut bytes);
            let (pi, si, st) = match role {
                0 => (0xFF, 0, 1),
                1 => (patch, 0, 1),
                _ => (patch, 1, 3),
            };
            let grid = ShareGrid::from_parts(
                ShareRole::from_code(role).unwrap(),
                SubjectId::from_u128(subject), pi, si, st, shape, bytes,
            ).unwrap();
            let enc = encode(&grid);
            prop_assert_eq!(enc.len(), HEADER_LEN + shape.len() + TRAILER_LEN);
            prop_assert_eq!(decode(&enc).unwrap(), grid);
        }
    }
}
