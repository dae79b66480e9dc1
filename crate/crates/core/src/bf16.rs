//! FP32 -> BF16 conversion (round to nearest, ties to even).

/// Round `x` to the nearest BF16 value, ties to even. NaN stays NaN
/// (quieted), infinities pass through, and the sign of zero is kept.
pub fn bf16_round(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    (rounded >> 16) as u16
}

pub fn bf16_to_f32(b: u16) -> f32 {
    f32::from_bits((b as u32) << 16)
}

pub fn round_slice(values: &[f32]) -> Vec<u16> {
    values.iter().map(|&x| bf16_round(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest BF16 by explicit distance comparison between the two
    /// truncation neighbours, ties broken toward the even mantissa.
    fn nearest_oracle(x: f32) -> u16 {
        let hi = (x.to_bits() >> 16) as u16;
        let down = hi;
        let up = hi.wrapping_add(1);
        let xd = x as f64;
        let dd = (xd - bf16_to_f32(down) as f64).abs();
        let du = (bf16_to_f32(up) as f64 - xd).abs();
        if dd < du {
            down
        } else if du < dd {
            up
        } else if down & 1 == 0 {
            down
        } else {
            up
        }
    }

    #[test]
    fn exact_values() {
        assert_eq!(bf16_round(1.0), 0x3F80);
        assert_eq!(bf16_to_f32(bf16_round(1.0)), 1.0);
        assert_eq!(bf16_round(-0.0), 0x8000);
        assert!(bf16_to_f32(bf16_round(-0.0)).is_sign_negative());
    }

    #[test]
    fn rounds_down_just_above_one() {
        let x = f32::from_bits(0x3F80_4000);
        assert_eq!(x, 1.001953125);
        assert_eq!(bf16_round(x), 0x3F80);
    }

    #[test]
    fn exhaustive_neighbourhood_sweep() {
        for high in [0x3F80u32, 0x3F81, 0xBF80, 0x4120, 0x0001] {
            for low in 0..=0xFFFFu32 {
                let x = f32::from_bits((high << 16) | low);
                assert_eq!(bf16_round(x), nearest_oracle(x), "bits {:#010x}", x.to_bits());
            }
        }
    }

    #[test]
    fn specials() {
        assert_eq!(bf16_round(f32::INFINITY), 0x7F80);
        assert_eq!(bf16_round(f32::NEG_INFINITY), 0xFF80);
        assert!(bf16_to_f32(bf16_round(f32::NAN)).is_nan());
        // Largest finite f32 rounds up to infinity.
        assert_eq!(bf16_round(f32::MAX), 0x7F80);
    }
}
