//! Signed feature hashing of whitespace tokens.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased whitespace tokens hashed into `dim` buckets: bucket
/// `h mod dim`, sign −1 when bit 63 of `h` is set. The result is scaled to
/// unit L2 norm unless it is zero.
pub fn hash_featurize(text: &str, dim: usize) -> Result<Vec<f64>, String> {
    if dim == 0 {
        return Err("feature dimension must be at least 1".into());
    }
    let mut out = vec![0.0; dim];
    for token in text.split_whitespace() {
        let h = fnv1a64(token.to_lowercase().as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        out[(h % dim as u64) as usize] += sign;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn single_token_bucket_and_sign() {
        let v = hash_featurize("a", 16).unwrap();
        // 0xaf63dc4c8601ec8c mod 16 = 12, top bit set.
        let mut expected = vec![0.0; 16];
        expected[12] = -1.0;
        assert_eq!(v, expected);
    }

    #[test]
    fn empty_and_deterministic() {
        assert_eq!(hash_featurize("", 8).unwrap(), vec![0.0; 8]);
        assert_eq!(hash_featurize("  \t ", 8).unwrap(), vec![0.0; 8]);
        assert_eq!(
            hash_featurize("Cheap Flights to Paris", 32).unwrap(),
            hash_featurize("cheap flights   to paris", 32).unwrap()
        );
        assert!(hash_featurize("x", 0).is_err());
    }

    proptest! {
        #[test]
        fn norm_is_zero_or_one(text in "[a-zA-Z ]{0,40}", dim in 1usize..64) {
            let v = hash_featurize(&text, dim).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }
}
