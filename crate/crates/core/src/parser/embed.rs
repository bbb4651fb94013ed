use crate::error::{Error, Result};

/// Width of every text embedding.
pub const D_TXT: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic bag of character 3-grams hashed into [`D_TXT`] signed
/// buckets and L2-normalized. Each token is padded with `^` and `$` so
/// one- and two-letter words still produce grams.
pub fn embed_text(s: &str) -> Result<Vec<f64>> {
    let tokens = tokenize(s);
    if tokens.is_empty() {
        return Err(Error::Domain(format!("cannot embed text without words: {s:?}")));
    }
    let mut v = vec![0.0f64; D_TXT];
    for tok in &tokens {
        let padded: Vec<char> = std::iter::once('^')
            .chain(tok.chars())
            .chain(std::iter::once('$'))
            .collect();
        for gram in padded.windows(3) {
            let text: String = gram.iter().collect();
            let h = fnv1a64(text.as_bytes());
            let bucket = (h % D_TXT as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every gram cancelled; fall back to a single deterministic bucket.
        let h = fnv1a64(tokens.join(" ").as_bytes());
        v[(h % D_TXT as u64) as usize] = 1.0;
        return Ok(v);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn case_and_whitespace_insensitive() {
        assert_eq!(embed_text("left").unwrap(), embed_text("LEFT").unwrap());
        assert_eq!(embed_text("red  bowl ").unwrap(), embed_text(" Red bowl").unwrap());
    }

    #[test]
    fn unit_norm() {
        let v = embed_text("silver spoon").unwrap();
        assert_eq!(v.len(), D_TXT);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shared_words_are_closer() {
        let bowl = embed_text("red bowl").unwrap();
        let near = cosine(&bowl, &embed_text("red box").unwrap());
        let far = cosine(&bowl, &embed_text("green ring").unwrap());
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(embed_text("").is_err());
        assert!(embed_text("   ").is_err());
        assert!(embed_text("?!").is_err());
    }
}
