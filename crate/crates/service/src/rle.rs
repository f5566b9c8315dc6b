//! Boolean masks on the wire: row-major run lengths, base64-wrapped.
//!
//! Runs alternate starting with `false`; each run is a little-endian `u32`.
//! A mask that starts with `true` begins with a zero-length run.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub h: usize,
    pub w: usize,
    pub rle: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RleError(pub String);

impl std::fmt::Display for RleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for RleError {}

impl RleMask {
    pub fn encode(mask: &[bool], h: usize, w: usize) -> Self {
        assert_eq!(mask.len(), h * w, "mask length does not match {h}x{w}");
        let mut runs: Vec<u32> = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &v in mask {
            if v != current {
                runs.push(len);
                current = v;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        let bytes: Vec<u8> = runs.iter().flat_map(|r| r.to_le_bytes()).collect();
        Self {
            h,
            w,
            rle: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<bool>, RleError> {
        let bytes = STANDARD
            .decode(&self.rle)
            .map_err(|e| RleError(format!("rle is not base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(RleError(format!("rle payload of {} bytes is not a u32 sequence", bytes.len())));
        }
        let n = self
            .h
            .checked_mul(self.w)
            .ok_or_else(|| RleError("mask size overflows".into()))?;
        let mut out = Vec::with_capacity(n);
        let mut value = false;
        for chunk in bytes.chunks_exact(4) {
            let run = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as usize;
            if out.len() + run > n {
                return Err(RleError(format!("runs exceed {}x{} = {n} pixels", self.h, self.w)));
            }
            out.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        if out.len() != n {
            return Err(RleError(format!("runs cover {} of {n} pixels", out.len())));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(h in 1usize..20, w in 1usize..20, seed in proptest::collection::vec(any::<bool>(), 400)) {
            let mask: Vec<bool> = seed[..h * w].to_vec();
            let enc = RleMask::encode(&mask, h, w);
            prop_assert_eq!(enc.decode().unwrap(), mask);
        }
    }

    #[test]
    fn leading_true_gets_empty_run() {
        let enc = RleMask::encode(&[true, true, false], 1, 3);
        let bytes = STANDARD.decode(&enc.rle).unwrap();
        assert_eq!(bytes, [0, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let bad = |rle: &str, h, w| RleMask { h, w, rle: rle.into() }.decode().is_err();
        assert!(bad("%%%", 1, 1));
        assert!(bad(&STANDARD.encode([1u8, 2, 3]), 1, 1));
        assert!(bad(&STANDARD.encode(5u32.to_le_bytes()), 2, 2));
        assert!(bad(&STANDARD.encode(3u32.to_le_bytes()), 2, 2));
        assert!(!bad(&STANDARD.encode(4u32.to_le_bytes()), 2, 2));
    }
}
