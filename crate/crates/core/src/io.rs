//! Binary PGM output.

use crate::grid::Grid2D;
use crate::scalar::Scalar;

/// 8-bit level of a value in `[0, 1]` (clamped), rounding halves up.
pub fn to_byte<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64();
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes a grid as a binary (P5) PGM with maxval 255.
pub fn encode_pgm<T: Scalar>(img: &Grid2D<T>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.values().iter().map(|&v| to_byte(v)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_levels() {
        let g = Grid2D::new(3, 1, vec![0.0, 0.5, 1.2]).unwrap();
        let bytes = encode_pgm(&g);
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
    }

    #[test]
    fn rounds_half_up() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(0.25), 64);
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(f64::NAN), 0);
    }
}
