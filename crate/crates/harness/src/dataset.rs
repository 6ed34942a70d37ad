//! Dataset export.
//!
//! One file per split: magic `C2FD`, version `u32`, family `u8`, count `u32`,
//! then the image shape as three `u32` (channels, height, width). Each sample
//! follows as its row-major `f64` image and then its target: 4 values
//! (cx, cy, w, h) for boxes, 1 value for a class index, `height * width`
//! values for a mask. Everything is little-endian.

use std::path::Path;

use c2f_core::tasks::{Dataset, SampleTarget};

use crate::checkpoint::write_atomic;
use crate::error::HarnessError;

pub const MAGIC: &[u8; 4] = b"C2FD";
pub const VERSION: u32 = 1;

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let c = &data.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(c.family.code());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for d in [c.channels, c.height, c.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for s in &data.samples {
        s.image.data().iter().for_each(|&v| put(v));
        match &s.target {
            SampleTarget::Box(b) => b.to_array().into_iter().for_each(&mut put),
            SampleTarget::Class(k) => put(*k as f64),
            SampleTarget::Mask(m) => m.data().iter().for_each(|&v| put(v)),
        }
    }
    out
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<(), HarnessError> {
    write_atomic(path, &encode_dataset(data)).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use c2f_core::tasks::{Split, TaskConfig, TaskFamily};

    #[test]
    fn layout() {
        let cfg = TaskConfig {
            n_train: 3,
            n_test: 1,
            height: 16,
            width: 16,
            ..TaskConfig::new(TaskFamily::Localization)
        };
        let d = Dataset::generate(&cfg, 0, Split::Train).unwrap();
        let bytes = encode_dataset(&d);
        assert_eq!(&bytes[..4], b"C2FD");
        assert_eq!(bytes[8], 0);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 25 + 3 * (256 + 4) * 8);
        let first = f64::from_le_bytes(bytes[25..33].try_into().unwrap());
        assert_eq!(first, d.samples[0].image.data()[0]);
    }
}
