//! Storage dtypes and bit-level conversion to/from f64 working precision.
//!
//! Promotion (f16/bf16/f32 → f64) is exact. Demotion rounds to nearest,
//! ties to even, implemented on integer bit patterns so results do not
//! depend on hardware half-precision support or libm.

use serde::{Deserialize, Serialize};

/// Storage element type of a checkpoint tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Container dtype tag ("F64", "F32", "F16", "BF16").
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn from_tag(tag: &str) -> Option<DType> {
        match tag {
            "F64" => Some(DType::F64),
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }

    /// Decode one little-endian element at `idx` from `raw`.
    pub fn decode_at(self, raw: &[u8], idx: usize) -> f64 {
        let w = self.byte_width();
        let b = &raw[idx * w..(idx + 1) * w];
        match self {
            DType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            DType::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            DType::F16 => f16_bits_to_f64(u16::from_le_bytes(b.try_into().unwrap())),
            DType::BF16 => bf16_bits_to_f64(u16::from_le_bytes(b.try_into().unwrap())),
        }
    }

    /// Decode a whole little-endian buffer.
    pub fn decode(self, raw: &[u8]) -> Vec<f64> {
        let n = raw.len() / self.byte_width();
        (0..n).map(|i| self.decode_at(raw, i)).collect()
    }

    /// Encode one value into `out` (round-to-nearest-even when narrowing).
    pub fn encode_into(self, x: f64, out: &mut Vec<u8>) {
        match self {
            DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
            DType::F32 => out.extend_from_slice(&f64_to_f32_bits(x).to_le_bytes()),
            DType::F16 => out.extend_from_slice(&f64_to_f16_bits(x).to_le_bytes()),
            DType::BF16 => out.extend_from_slice(&f64_to_bf16_bits(x).to_le_bytes()),
        }
    }

    pub fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.byte_width());
        for &x in values {
            self.encode_into(x, &mut out);
        }
        out
    }

    /// True when `x` survives encode → decode with identical f64 bits.
    pub fn represents_exactly(self, x: f64) -> bool {
        let mut buf = Vec::with_capacity(8);
        self.encode_into(x, &mut buf);
        self.decode_at(&buf, 0).to_bits() == x.to_bits()
    }
}

// ── generic binary16/binary-bf16 machinery ─────────────────────────────────
//
// A narrow float is described by (EXP_BITS, MANT_BITS); f16 = (5, 10),
// bf16 = (8, 7), f32 = (8, 23). All three share the promote/demote paths
// below; the f32 path doubles as a cross-check because it must agree with
// the hardware `as` cast on every input.

fn promote(bits: u64, exp_bits: u32, mant_bits: u32) -> f64 {
    let exp_mask = (1u64 << exp_bits) - 1;
    let mant_mask = (1u64 << mant_bits) - 1;
    let bias = (1i64 << (exp_bits - 1)) - 1;

    let sign = (bits >> (exp_bits + mant_bits)) & 1;
    let exp = (bits >> mant_bits) & exp_mask;
    let mant = bits & mant_mask;

    let out = if exp == exp_mask {
        // inf / NaN: shift the payload into the top of the f64 mantissa
        0x7FFu64 << 52 | mant << (52 - mant_bits)
    } else if exp == 0 {
        if mant == 0 {
            0
        } else {
            // subnormal: normalize. msb < mant_bits by construction.
            let msb = 63 - mant.leading_zeros() as i64;
            let e64 = (1 - bias - mant_bits as i64) + msb + 1023;
            let m64 = (mant << (52 - msb as u32)) & ((1u64 << 52) - 1);
            (e64 as u64) << 52 | m64
        }
    } else {
        let e64 = exp as i64 - bias + 1023;
        (e64 as u64) << 52 | mant << (52 - mant_bits)
    };
    f64::from_bits(sign << 63 | out)
}

fn demote(x: f64, exp_bits: u32, mant_bits: u32) -> u64 {
    let bits = x.to_bits();
    let sign = (bits >> 63) << (exp_bits + mant_bits);
    let abs = bits & ((1u64 << 63) - 1);
    let exp_mask = (1u64 << exp_bits) - 1;
    let mant_mask = (1u64 << mant_bits) - 1;
    let bias = (1i64 << (exp_bits - 1)) - 1;

    if abs > 0x7FF0_0000_0000_0000 {
        // NaN: keep the top payload bits, force a quiet bit if they vanish
        let payload = (abs >> (52 - mant_bits)) & mant_mask;
        let payload = if payload == 0 {
            1 << (mant_bits - 1)
        } else {
            payload
        };
        return sign | exp_mask << mant_bits | payload;
    }
    if abs == 0x7FF0_0000_0000_0000 {
        return sign | exp_mask << mant_bits;
    }
    if abs < 1u64 << 52 {
        // zero or f64 subnormal; all f64 subnormals underflow every target
        return sign;
    }

    let e = (abs >> 52) as i64 - 1023;
    let m = (abs & ((1u64 << 52) - 1)) | 1u64 << 52; // 53-bit significand

    if e >= 1 - bias {
        // normal target range (rounding may still carry into the exponent
        // or overflow to infinity)
        let shift = 52 - mant_bits;
        let half = 1u64 << (shift - 1);
        let rem = m & ((1u64 << shift) - 1);
        let mut keep = m >> shift;
        if rem > half || (rem == half && keep & 1 == 1) {
            keep += 1;
        }
        let mut et = e + bias;
        if keep == 1u64 << (mant_bits + 1) {
            keep >>= 1;
            et += 1;
        }
        if et >= exp_mask as i64 {
            return sign | exp_mask << mant_bits;
        }
        sign | (et as u64) << mant_bits | (keep & mant_mask)
    } else {
        // subnormal target: round m * 2^(e-52) to a multiple of the
        // smallest subnormal 2^(1 - bias - mant_bits)
        let s = 53 - mant_bits as i64 - bias - e;
        if s >= 64 {
            return sign;
        }
        let s = s as u32;
        let half = 1u64 << (s - 1);
        let rem = m & ((1u64 << s) - 1);
        let mut keep = m >> s;
        if rem > half || (rem == half && keep & 1 == 1) {
            keep += 1;
        }
        // keep == 2^mant_bits packs as the smallest normal automatically
        sign | keep
    }
}

pub fn f16_bits_to_f64(bits: u16) -> f64 {
    promote(bits as u64, 5, 10)
}

pub fn bf16_bits_to_f64(bits: u16) -> f64 {
    promote(bits as u64, 8, 7)
}

pub fn f64_to_f16_bits(x: f64) -> u16 {
    demote(x, 5, 10) as u16
}

pub fn f64_to_bf16_bits(x: f64) -> u16 {
    demote(x, 8, 7) as u16
}

pub fn f64_to_f32_bits(x: f64) -> u32 {
    demote(x, 8, 23) as u32
}
