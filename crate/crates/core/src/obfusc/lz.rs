//! Small LZ77-family byte compressor used by the packer emulation.
//!
//! Stream: groups of up to eight tokens, each group led by a flag byte
//! (bit i set = token i is a match). A literal is one raw byte. A match is
//! `offset u16 LE` (1..=65535 back) and a length byte `L`: length `L + 4`
//! for `L < 255`, otherwise a following `u16 LE` extension gives `ext + 259`.

use crate::error::{Error, Result};

const MIN_MATCH: usize = 4;
const MAX_OFFSET: usize = u16::MAX as usize;
const MAX_MATCH: usize = 259 + u16::MAX as usize;
const HASH_BITS: u32 = 15;
const CHAIN_LIMIT: usize = 48;

fn hash4(b: &[u8]) -> usize {
    let v = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    (v.wrapping_mul(0x9E37_79B1) >> (32 - HASH_BITS)) as usize
}

pub fn compress(input: &[u8]) -> Vec<u8> {
    let n = input.len();
    let mut out = Vec::with_capacity(n / 2 + 16);
    let mut head = vec![usize::MAX; 1 << HASH_BITS];
    let mut prev = vec![usize::MAX; n];

    let mut flag_pos = 0;
    let mut token = 8;
    let mut i = 0;

    let insert = |pos: usize, head: &mut Vec<usize>, prev: &mut Vec<usize>| {
        if pos + MIN_MATCH <= n {
            let h = hash4(&input[pos..]);
            prev[pos] = head[h];
            head[h] = pos;
        }
    };

    while i < n {
        if token == 8 {
            flag_pos = out.len();
            out.push(0);
            token = 0;
        }
        let mut best_len = 0;
        let mut best_off = 0;
        if i + MIN_MATCH <= n {
            let mut cand = head[hash4(&input[i..])];
            let mut steps = 0;
            let limit = (n - i).min(MAX_MATCH);
            while cand != usize::MAX && steps < CHAIN_LIMIT && i - cand <= MAX_OFFSET {
                let mut l = 0;
                while l < limit && input[cand + l] == input[i + l] {
                    l += 1;
                }
                if l > best_len {
                    best_len = l;
                    best_off = i - cand;
                    if l == limit {
                        break;
                    }
                }
                cand = prev[cand];
                steps += 1;
            }
        }
        if best_len >= MIN_MATCH {
            out[flag_pos] |= 1 << token;
            out.extend_from_slice(&(best_off as u16).to_le_bytes());
            let l = best_len - MIN_MATCH;
            if l < 255 {
                out.push(l as u8);
            } else {
                out.push(255);
                out.extend_from_slice(&((best_len - 259) as u16).to_le_bytes());
            }
            // index only a bounded prefix of long runs to keep this linear-ish
            let end = i + best_len;
            for p in i..end.min(i + 64) {
                insert(p, &mut head, &mut prev);
            }
            for p in end.saturating_sub(64).max(i + 64)..end {
                insert(p, &mut head, &mut prev);
            }
            i = end;
        } else {
            out.push(input[i]);
            insert(i, &mut head, &mut prev);
            i += 1;
        }
        token += 1;
    }
    out
}

pub fn decompress(stream: &[u8], expected_len: usize) -> Result<Vec<u8>> {
    let corrupt = |m: &str| Error::TruncatedInput(format!("packed stream: {m}"));
    let mut out = Vec::with_capacity(expected_len);
    let mut i = 0;
    while i < stream.len() {
        let flags = stream[i];
        i += 1;
        for bit in 0..8 {
            if i >= stream.len() {
                break;
            }
            if flags & (1 << bit) == 0 {
                out.push(stream[i]);
                i += 1;
                continue;
            }
            let hdr = stream.get(i..i + 3).ok_or_else(|| corrupt("short match"))?;
            let off = u16::from_le_bytes([hdr[0], hdr[1]]) as usize;
            let l = hdr[2];
            i += 3;
            let len = if l < 255 {
                l as usize + MIN_MATCH
            } else {
                let ext = stream.get(i..i + 2).ok_or_else(|| corrupt("short length"))?;
                i += 2;
                u16::from_le_bytes([ext[0], ext[1]]) as usize + 259
            };
            if off == 0 || off > out.len() {
                return Err(corrupt("offset out of range"));
            }
            let start = out.len() - off;
            for k in 0..len {
                let b = out[start + k];
                out.push(b);
            }
        }
        if out.len() > expected_len {
            return Err(corrupt("output longer than declared"));
        }
    }
    if out.len() != expected_len {
        return Err(corrupt("length mismatch"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_block_compresses_below_one_percent() {
        let z = vec![0u8; 64 * 1024];
        let c = compress(&z);
        assert!(c.len() * 100 < z.len(), "{} bytes", c.len());
        assert_eq!(decompress(&c, z.len()).unwrap(), z);
    }

    #[test]
    fn long_run_uses_extended_length() {
        let mut v = b"abcdefgh".to_vec();
        v.extend(std::iter::repeat_n(b'x', 300));
        let c = compress(&v);
        assert_eq!(decompress(&c, v.len()).unwrap(), v);
    }

    #[test]
    fn empty_and_tiny() {
        assert!(compress(&[]).is_empty());
        assert_eq!(decompress(&compress(b"ab"), 2).unwrap(), b"ab");
    }

    #[test]
    fn corrupt_stream_is_rejected() {
        // match token pointing before the start
        assert!(decompress(&[0x01, 0x05, 0x00, 0x00], 4).is_err());
        assert!(decompress(&compress(b"hello hello hello"), 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(v in proptest::collection::vec(0u8..4, 0..4000)) {
            let c = compress(&v);
            prop_assert_eq!(decompress(&c, v.len()).unwrap(), v);
        }

        #[test]
        fn round_trip_random(v in proptest::collection::vec(any::<u8>(), 0..2000)) {
            let c = compress(&v);
            prop_assert_eq!(decompress(&c, v.len()).unwrap(), v);
        }
    }
}
