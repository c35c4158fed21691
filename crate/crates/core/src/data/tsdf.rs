//! Binary split format.
//!
//! Layout: magic `TSDF\0`, version u16 LE, u32 B, u32 N, u32 L,
//! u8 has_labels, float32 LE payload `[B*N*L]` row-major, then int32 LE
//! labels `[B]` when has_labels is set. Header counts are sanity-bounded
//! and checked against the file size before any allocation.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{io_err, DataError, SplitData};

const MAGIC: &[u8; 5] = b"TSDF\0";
const VERSION: u16 = 1;
const MAX_DIM: u64 = 16_000_000;
const MAX_ELEMS: u64 = 1 << 31;

pub fn write_tsdf(path: &Path, split: &SplitData) -> Result<(), DataError> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let b = split.samples() as u32;
    let mut head = Vec::with_capacity(20);
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&b.to_le_bytes());
    head.extend_from_slice(&(split.channels as u32).to_le_bytes());
    head.extend_from_slice(&(split.seq_len as u32).to_le_bytes());
    head.push(u8::from(split.labels.is_some()));
    file.write_all(&head).map_err(|e| io_err(path, e))?;

    let mut payload = Vec::with_capacity(split.values.len() * 4);
    for v in &split.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &split.labels {
        for &l in labels {
            payload.extend_from_slice(&(l as i32).to_le_bytes());
        }
    }
    file.write_all(&payload).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_tsdf(path: &Path) -> Result<SplitData, DataError> {
    let display = path.display().to_string();
    let file_len = fs::metadata(path).map_err(|e| io_err(path, e))?.len();
    let raw = fs::read(path).map_err(|e| io_err(path, e))?;
    if raw.len() < 20 || &raw[..5] != MAGIC {
        return Err(DataError::BadMagic(display));
    }
    let version = u16::from_le_bytes([raw[5], raw[6]]);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let b = u32::from_le_bytes([raw[7], raw[8], raw[9], raw[10]]) as u64;
    let n = u32::from_le_bytes([raw[11], raw[12], raw[13], raw[14]]) as u64;
    let l = u32::from_le_bytes([raw[15], raw[16], raw[17], raw[18]]) as u64;
    let has_labels = raw[19] != 0;

    if n == 0 || l == 0 || n > MAX_DIM || l > MAX_DIM || b > MAX_DIM {
        return Err(DataError::HeaderBounds {
            path: display,
            detail: format!("B={b} N={n} L={l}"),
        });
    }
    let elems = b
        .checked_mul(n)
        .and_then(|x| x.checked_mul(l))
        .filter(|&x| x <= MAX_ELEMS)
        .ok_or_else(|| DataError::HeaderBounds {
            path: display.clone(),
            detail: format!("element count overflows bounds: B={b} N={n} L={l}"),
        })?;
    let expected = elems * 4 + if has_labels { b * 4 } else { 0 };
    let actual = file_len - 20;
    if actual != expected {
        return Err(DataError::Truncated {
            path: display,
            expected,
            actual,
        });
    }

    let mut at = 20usize;
    let mut values = Vec::with_capacity(elems as usize);
    for _ in 0..elems {
        values.push(f32::from_le_bytes([raw[at], raw[at + 1], raw[at + 2], raw[at + 3]]));
        at += 4;
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(b as usize);
        for _ in 0..b {
            labels.push(i32::from_le_bytes([raw[at], raw[at + 1], raw[at + 2], raw[at + 3]]) as i64);
            at += 4;
        }
        Some(labels)
    } else {
        None
    };
    Ok(SplitData::new(n as usize, l as usize, values, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_is_detected_before_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsdf");
        let split = SplitData::new(2, 4, vec![1.0; 16], Some(vec![0, 1]));
        write_tsdf(&path, &split).unwrap();
        let raw = fs::read(&path).unwrap();
        fs::write(&path, &raw[..raw.len() - 4]).unwrap();
        match read_tsdf(&path) {
            Err(DataError::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn absurd_header_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.tsdf");
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&u32::MAX.to_le_bytes());
        head.extend_from_slice(&u32::MAX.to_le_bytes());
        head.extend_from_slice(&u32::MAX.to_le_bytes());
        head.push(0);
        fs::write(&path, head).unwrap();
        match read_tsdf(&path) {
            Err(DataError::HeaderBounds { .. }) => {}
            other => panic!("expected HeaderBounds, got {other:?}"),
        }
    }
}
