//! Bit packing of code sequences.
//!
//! Level `m` occupies bits `[(m-1)*log2 K, m*log2 K)` of an MSB-first
//! bitstream. The last byte is zero-padded in its low bits.

use crate::error::{domain, Result};
use crate::quant::CodeSequence;

pub(crate) fn bits_for(k: usize) -> Result<u32> {
    if k < 2 || !k.is_power_of_two() {
        return domain(format!("K={k} is not a power of two >= 2"));
    }
    let bits = k.trailing_zeros();
    if bits > 32 {
        return domain(format!("K={k} needs more than 32 bits per level"));
    }
    Ok(bits)
}

/// Bytes occupied by an `levels`-level code over a `k`-word codebook.
pub fn packed_len(levels: usize, k: usize) -> Result<usize> {
    Ok((levels * bits_for(k)? as usize).div_ceil(8))
}

pub fn pack_codes(codes: &CodeSequence, k: usize) -> Result<Vec<u8>> {
    let bits = bits_for(k)?;
    let mut out = Vec::with_capacity(packed_len(codes.levels(), k)?);
    pack_into(codes.indices(), k, bits, &mut out)?;
    Ok(out)
}

/// Appends the packed form of `indices` to `out`.
pub(crate) fn pack_into(indices: &[u32], k: usize, bits: u32, out: &mut Vec<u8>) -> Result<()> {
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for &b in indices {
        if b as usize >= k {
            return domain(format!("code index {b} out of range for K={k}"));
        }
        acc = (acc << bits) | u64::from(b);
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(())
}

pub fn unpack_codes(bytes: &[u8], k: usize, levels: usize) -> Result<CodeSequence> {
    let bits = bits_for(k)?;
    let expected = packed_len(levels, k)?;
    if bytes.len() != expected {
        return domain(format!(
            "packed code has {} bytes, expected {expected}",
            bytes.len()
        ));
    }
    let mut out = Vec::with_capacity(levels);
    let mut acc: u64 = 0;
    let mut avail: u32 = 0;
    let mut it = bytes.iter();
    let mask = (1u64 << bits) - 1;
    for _ in 0..levels {
        while avail < bits {
            // length was checked above
            acc = (acc << 8) | u64::from(*it.next().unwrap());
            avail += 8;
        }
        avail -= bits;
        out.push(((acc >> avail) & mask) as u32);
        acc &= (1u64 << avail) - 1;
    }
    Ok(CodeSequence::new(out))
}
