//! GF(2^8) with the AES reduction polynomial `x^8 + x^4 + x^3 + x + 1`.

const POLY: u16 = 0x11B;

const fn build_tables() -> ([u8; 256], [u8; 512]) {
    // 0x03 generates the multiplicative group under 0x11B.
    let mut log = [0u8; 256];
    let mut exp = [0u8; 512];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        exp[i + 255] = x as u8;
        log[x as usize] = i as u8;
        // x *= 3, i.e. x ^ (x << 1)
        let mut y = x << 1;
        if y & 0x100 != 0 {
            y ^= POLY;
        }
        x ^= y;
        i += 1;
    }
    (log, exp)
}

const TABLES: ([u8; 256], [u8; 512]) = build_tables();
const LOG: [u8; 256] = TABLES.0;
const EXP: [u8; 512] = TABLES.1;

#[inline]
pub fn add(a: u8, b: u8) -> u8 {
    a ^ b
}

#[inline]
pub fn mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        return 0;
    }
    EXP[LOG[a as usize] as usize + LOG[b as usize] as usize]
}

/// Multiplicative inverse; `inv(0)` is undefined and returns 0.
#[inline]
pub fn inv(a: u8) -> u8 {
    if a == 0 {
        return 0;
    }
    EXP[255 - LOG[a as usize] as usize]
}

#[inline]
pub fn div(a: u8, b: u8) -> u8 {
    debug_assert!(b != 0, "division by zero in GF(2^8)");
    mul(a, inv(b))
}

/// Horner evaluation; `coeffs[0]` is the constant term.
pub fn eval_poly(coeffs: &[u8], x: u8) -> u8 {
    coeffs.iter().rev().fold(0, |acc, &c| add(mul(acc, x), c))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Carry-less shift-and-add multiply, independent of the tables.
    fn slow_mul(mut a: u8, mut b: u8) -> u8 {
        let mut p = 0u8;
        while b != 0 {
            if b & 1 != 0 {
                p ^= a;
            }
            let hi = a & 0x80;
            a <<= 1;
            if hi != 0 {
                a ^= 0x1B;
            }
            b >>= 1;
        }
        p
    }

    #[test]
    fn table_mul_matches_slow_mul_exhaustively() {
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(mul(a, b), slow_mul(a, b), "{a} * {b}");
            }
        }
    }

    #[test]
    fn inverses() {
        for a in 1..=255u8 {
            assert_eq!(mul(a, inv(a)), 1);
            assert_eq!(div(a, a), 1);
        }
        // FIPS-197 worked example: {53} * {CA} = {01}.
        assert_eq!(mul(0x53, 0xCA), 0x01);
        assert_eq!(mul(0x57, 0x83), 0xC1);
    }

    #[test]
    fn horner() {
        // 5 + 3x + x^2 at x = 2: 5 ^ 6 ^ 4
        assert_eq!(eval_poly(&[5, 3, 1], 2), 5 ^ 6 ^ 4);
        assert_eq!(eval_poly(&[0x2A], 200), 0x2A);
        assert_eq!(eval_poly(&[], 9), 0);
    }
}
