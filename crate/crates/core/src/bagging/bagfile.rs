//! `TRNB1` bag files.
//!
//! ```text
//! "TRNB1"                       5 bytes
//! k, d, G, label                u32 little-endian each
//! instances                     k·d f32 LE, row-major, sorted-cluster order
//! gene target                   G f32 LE
//! trailer                       UTF-8 JSON {"slide_id": .., "case_id": ..}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bag::Bag;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const BAG_MAGIC: &[u8; 5] = b"TRNB1";
pub const HEADER_LEN: usize = 5 + 4 * 4;

#[derive(Serialize, Deserialize)]
struct Trailer {
    slide_id: String,
    case_id: String,
}

pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    let (k, d) = bag.instances.dims2()?;
    let g = bag.gene_target.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (k * d + g) + 64);
    out.extend_from_slice(BAG_MAGIC);
    for v in [k, d, g] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&bag.label.to_le_bytes());
    for v in bag.instances.data().iter().chain(&bag.gene_target) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    serde_json::to_writer(
        &mut out,
        &Trailer {
            slide_id: bag.slide_id.clone(),
            case_id: bag.case_id.clone(),
        },
    )?;
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

pub fn decode_bag(bytes: &[u8]) -> Result<Bag> {
    if bytes.len() < BAG_MAGIC.len() || &bytes[..5] != BAG_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic, expected {:?}", std::str::from_utf8(BAG_MAGIC).unwrap()),
        ));
    }
    let k = read_u32(bytes, 5)? as usize;
    let d = read_u32(bytes, 9)? as usize;
    let g = read_u32(bytes, 13)? as usize;
    let label = read_u32(bytes, 17)?;
    if k == 0 || d == 0 {
        return Err(Error::format(5, format!("degenerate shape k={k} d={d}")));
    }
    let floats = k
        .checked_mul(d)
        .and_then(|n| n.checked_add(g))
        .ok_or_else(|| Error::format(5, "shape overflows"))?;
    let payload_end = HEADER_LEN + 4 * floats;
    if bytes.len() < payload_end {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: k={k} d={d} G={g} needs {payload_end} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let trailer: Trailer = serde_json::from_slice(&bytes[payload_end..])
        .map_err(|e| Error::format(payload_end as u64, format!("bad trailer: {e}")))?;
    let (inst, genes) = values.split_at(k * d);
    Ok(Bag {
        instances: Tensor::matrix(k, d, inst.to_vec())?,
        slide_id: trailer.slide_id,
        case_id: trailer.case_id,
        label,
        gene_target: genes.to_vec(),
    })
}

pub fn write_bag(path: &Path, bag: &Bag) -> Result<()> {
    fs::write(path, encode_bag(bag)?).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    decode_bag(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bag(k: usize, d: usize, g: usize) -> Bag {
        Bag {
            instances: Tensor::from_fn(&[k, d], |i| (i as f32).sin()),
            slide_id: "TCGA-XX-0001-01Z".into(),
            case_id: "TCGA-XX-0001".into(),
            label: 2,
            gene_target: (0..g).map(|i| i as f32 * 0.5).collect(),
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.trnb");
        let b = bag(49, 16, 5);
        write_bag(&p, &b).unwrap();
        assert_eq!(read_bag(&p).unwrap(), b);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_bag(&bag(2, 2, 0)).unwrap();
        bytes[0] = b'X';
        let err = decode_bag(&bytes).unwrap_err();
        assert!(err.to_string().contains("TRNB1"), "{err}");
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn truncated_payload() {
        let full = encode_bag(&bag(49, 1024, 0)).unwrap();
        assert_eq!(HEADER_LEN, 21);
        let short = &full[..HEADER_LEN + 49 * 1024 * 4 - 1];
        match decode_bag(short) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, short.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless(
            k in 1usize..6, d in 1usize..6, g in 0usize..5,
            label in 0u32..5,
            values in prop::collection::vec(-1e3f32..1e3, 30),
            slide in "[a-zA-Z0-9_-]{1,12}",
        ) {
            let b = Bag {
                instances: Tensor::matrix(k, d, values[..k * d].to_vec()).unwrap(),
                slide_id: slide.clone(),
                case_id: format!("case-{slide}"),
                label,
                gene_target: values[25..25 + g].to_vec(),
            };
            let bytes = encode_bag(&b).unwrap();
            prop_assert_eq!(decode_bag(&bytes).unwrap(), b);
        }
    }
}
