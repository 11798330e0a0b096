use sha2::{Digest, Sha256};

/// First eight bytes of the SHA-256 digest, read little-endian.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest_prefix() {
        // sha256("") = e3b0c442 98fc1c14 ...
        assert_eq!(checksum64(b"").to_le_bytes(), [0xe3, 0xb0, 0xc4, 0x42, 0x98, 0xfc, 0x1c, 0x14]);
    }
}
