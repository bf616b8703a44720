//! `HMB1` bag feature files: magic, `u32` rows, `u32` cols, then
//! `rows * cols` little-endian `f32` values in row-major order.

use std::path::Path;

use crate::error::{HmilError, Result};
use crate::tensor::Matrix;

pub const BAG_MAGIC: &[u8; 4] = b"HMB1";
const HEADER_LEN: usize = 12;

pub fn encode_bag(features: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(features.rows())
        .map_err(|_| HmilError::format(4, format!("{} rows do not fit in u32", features.rows())))?;
    let cols = u32::try_from(features.cols())
        .map_err(|_| HmilError::format(8, format!("{} columns do not fit in u32", features.cols())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + features.len() * 4);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bag(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 {
        return Err(HmilError::format(bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != BAG_MAGIC {
        return Err(HmilError::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(HmilError::format(bytes.len() as u64, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| HmilError::format(4, format!("dimensions {rows} x {cols} overflow")))?;
    let needed = HEADER_LEN + count * 4;
    if bytes.len() < needed {
        return Err(HmilError::format(
            bytes.len() as u64,
            format!("truncated data: header declares {rows} x {cols} ({needed} bytes), file has {}", bytes.len()),
        ));
    }
    if bytes.len() > needed {
        return Err(HmilError::format(needed as u64, "trailing bytes after data"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_bag_file(path: &Path, features: &Matrix) -> Result<()> {
    let bytes = encode_bag(features)?;
    std::fs::write(path, bytes).map_err(|e| HmilError::io(path, e))
}

pub fn read_bag_file(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| HmilError::io(path, e))?;
    decode_bag(&bytes).map_err(|e| match e {
        HmilError::Format { offset, detail } => HmilError::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// Reads one bag from CSV: a header of column names, then one row per instance.
pub fn read_csv_bag(path: &Path) -> Result<Matrix> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HmilError::Data(format!("{}: {e}", path.display())))?;
    let width = reader
        .headers()
        .map_err(|e| HmilError::Data(format!("{}: {e}", path.display())))?
        .len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| HmilError::Data(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    HmilError::Data(format!("{}: row {}: `{field}` is not a number", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != width {
            return Err(HmilError::Data(format!(
                "{}: row {} has {} values, header has {width}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(HmilError::Data(format!("{}: no instances", path.display())));
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_f32_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-3.0f32..3.0) as f64).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bag.hmb");
        let m = random_f32_matrix(7, 16, 1);
        write_bag_file(&path, &m).unwrap();
        let back = read_bag_file(&path).unwrap();
        assert_eq!(back.shape(), (7, 16));
        assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_bag(&Matrix::zeros(1, 2)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_bag(&bytes), Err(HmilError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_data() {
        let bytes = encode_bag(&Matrix::zeros(3, 4)).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match decode_bag(cut) {
            Err(HmilError::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_bag(&bytes[..7]), Err(HmilError::Format { .. })));
    }

    #[test]
    fn dimension_overflow() {
        let mut bytes = BAG_MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_bag(&bytes).unwrap_err();
        assert!(matches!(err, HmilError::Format { .. }), "{err}");
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bag.csv");
        std::fs::write(&path, "f0,f1,f2\n1,2,3\n-0.5,0.25,1e-3\n").unwrap();
        let m = read_csv_bag(&path).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.row(1), &[-0.5, 0.25, 1e-3]);

        std::fs::write(&path, "f0,f1\n1,x\n").unwrap();
        assert!(read_csv_bag(&path).is_err());
    }
}
