//! Deterministic derivation of independent RNG seeds from a root seed and a
//! path of labels.

/// FNV-1a over the labels, mixed with the root seed through SplitMix64.
pub fn derive_seed(root: u64, labels: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for label in labels {
        for &b in label.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        // separator so ["ab","c"] != ["a","bc"]
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

pub fn derive_seed_n(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut s = derive_seed(root, &[label]);
    for &i in indices {
        s = splitmix(s ^ splitmix(i.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_paths_distinct_seeds() {
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
        assert_ne!(derive_seed(1, &["x"]), derive_seed(2, &["x"]));
        assert_eq!(derive_seed(7, &["x", "y"]), derive_seed(7, &["x", "y"]));
        assert_ne!(derive_seed_n(3, "e", &[0, 1]), derive_seed_n(3, "e", &[1, 0]));
    }
}
