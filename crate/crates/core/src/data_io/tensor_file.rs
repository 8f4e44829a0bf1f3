use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

/// Reads a `rows x cols` tensor, checking the byte length first.
pub fn read_tensor(path: &Path, rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (rows * cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::ByteLength {
            path: path.to_path_buf(),
            rows,
            cols,
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_two_by_two_layout() {
        let t = Tensor::from_vec(2, 2, vec![1.0f32, -2.0, 0.5, 3.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 16);
        assert_eq!(
            bytes,
            [
                0x00, 0x00, 0x80, 0x3f, // 1.0
                0x00, 0x00, 0x00, 0xc0, // -2.0
                0x00, 0x00, 0x00, 0x3f, // 0.5
                0x00, 0x00, 0x40, 0x40, // 3.0
            ]
        );
    }

    #[test]
    fn truncated_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::from_vec(2, 3, vec![1.0f32; 6]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path, 2, 3).unwrap(), t);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read_tensor(&path, 2, 3) {
            Err(Error::ByteLength { path: p, found: 20, expected: 24, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
    }
}
