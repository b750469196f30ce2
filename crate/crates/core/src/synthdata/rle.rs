//! Run-length codec for binary masks over row-major order. Runs alternate
//! starting with a zero-run (which may be empty), lengths as u32.

use crate::error::{Error, Result};

pub fn rle_encode(data: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current: u8 = 0;
    let mut len: u32 = 0;
    for &v in data {
        let bit = (v != 0) as u8;
        if bit == current {
            len += 1;
        } else {
            runs.push(len);
            current = bit;
            len = 1;
        }
    }
    runs.push(len);
    if data.is_empty() {
        runs.clear();
    }
    runs
}

/// Inverse of [`rle_encode`]; `expected_len` is the pixel count the runs
/// must cover exactly.
pub fn rle_decode(runs: &[u32], expected_len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(expected_len);
    let mut bit: u8 = 0;
    for &run in runs {
        let run = run as usize;
        if out.len() + run > expected_len {
            return Err(Error::invalid(format!(
                "RLE overrun: runs cover more than {expected_len} pixels"
            )));
        }
        out.extend(std::iter::repeat(bit).take(run));
        bit ^= 1;
    }
    if out.len() != expected_len {
        return Err(Error::invalid(format!(
            "RLE underrun: runs cover {} of {expected_len} pixels",
            out.len()
        )));
    }
    Ok(out)
}
