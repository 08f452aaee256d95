//! Password-derived pseudorandomness: the balanced split mask and the
//! secret map.
//!
//! PBKDF2-HMAC-SHA256 turns the password into a 32-byte master key, which
//! keys a ChaCha20 keystream (zero nonce, counter 0). The mask consumes the
//! stream first, the secret map immediately after.

use std::fmt;

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;

pub const DEFAULT_SALT: [u8; 16] = *b"FlowCryptSalt-01";
pub const DEFAULT_ITERATIONS: u32 = 100_000;

/// PBKDF2-HMAC-SHA256 with a 32-byte output.
pub fn derive_master(password: &[u8], salt: &[u8; 16], iterations: u32) -> Result<[u8; 32]> {
    if password.is_empty() {
        return invalid("password must not be empty");
    }
    if iterations == 0 {
        return invalid("iteration count must be at least 1");
    }
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(password, salt, iterations, &mut out);
    Ok(out)
}

/// Anything that can hand out keystream bytes in order.
pub trait ByteSource {
    fn fill(&mut self, buf: &mut [u8]);
}

/// Master key plus a cursor into its expanded keystream.
pub struct KeyMaterial {
    salt: [u8; 16],
    iterations: u32,
    master: [u8; 32],
    stream: ChaCha20,
    position: u64,
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("iterations", &self.iterations)
            .field("position", &self.position)
            .finish_non_exhaustive()
    }
}

impl KeyMaterial {
    pub fn derive(password: &[u8]) -> Result<Self> {
        Self::derive_with(password, &DEFAULT_SALT, DEFAULT_ITERATIONS)
    }

    pub fn derive_with(password: &[u8], salt: &[u8; 16], iterations: u32) -> Result<Self> {
        let master = derive_master(password, salt, iterations)?;
        let mut m = Self::from_master(master);
        m.salt = *salt;
        m.iterations = iterations;
        Ok(m)
    }

    /// Keystream keyed directly by `master`, bypassing the KDF.
    pub fn from_master(master: [u8; 32]) -> Self {
        KeyMaterial {
            salt: DEFAULT_SALT,
            iterations: DEFAULT_ITERATIONS,
            master,
            stream: ChaCha20::new(&master.into(), &[0u8; 12].into()),
            position: 0,
        }
    }

    pub fn master(&self) -> &[u8; 32] {
        &self.master
    }

    pub fn salt(&self) -> &[u8; 16] {
        &self.salt
    }

    pub fn iterations(&self) -> u32 {
        self.iterations
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Restarts the keystream at byte 0.
    pub fn rewind(&mut self) {
        self.stream = ChaCha20::new(&self.master.into(), &[0u8; 12].into());
        self.position = 0;
    }

    /// The next `n` keystream bytes.
    pub fn keystream(&mut self, n: usize) -> Vec<u8> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf);
        buf
    }
}

impl ByteSource for KeyMaterial {
    fn fill(&mut self, buf: &mut [u8]) {
        buf.fill(0);
        self.stream.apply_keystream(buf);
        self.position += buf.len() as u64;
    }
}

/// Uniform integer in `[0, n)` from little-endian `u32` draws, rejecting the
/// biased tail.
pub fn uniform_below(src: &mut impl ByteSource, n: u32) -> u32 {
    assert!(n > 0);
    let limit = (1u64 << 32) / u64::from(n) * u64::from(n);
    let mut word = [0u8; 4];
    loop {
        src.fill(&mut word);
        let x = u32::from_le_bytes(word);
        if u64::from(x) < limit {
            return x % n;
        }
    }
}

/// Binary `height x width` mask with exactly half its entries set, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalancedMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BalancedMask {
    /// Wraps explicit bits after checking the balance invariant.
    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        if bits.len() != width * height {
            return invalid(format!("mask needs {} bits, got {}", width * height, bits.len()));
        }
        let ones = bits.iter().filter(|&&b| b).count();
        if 2 * ones != bits.len() {
            return invalid(format!("mask is unbalanced: {ones} ones of {}", bits.len()));
        }
        Ok(BalancedMask { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn hamming(&self, other: &BalancedMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }

    /// SHA-256 over the mask as one byte (0 or 1) per position, row-major.
    pub fn digest(&self) -> [u8; 32] {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| u8::from(b)).collect();
        Sha256::digest(&bytes).into()
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return invalid("image dimensions must be positive");
    }
    if width % 2 != 0 {
        return invalid(format!("image width must be even, got {width}"));
    }
    if width * height > u32::MAX as usize {
        return invalid("image too large");
    }
    Ok(())
}

/// Half ones then half zeros, Fisher-Yates shuffled with keystream indices.
pub fn balanced_mask(src: &mut impl ByteSource, width: usize, height: usize) -> Result<BalancedMask> {
    check_dims(width, height)?;
    let n = width * height;
    let mut bits: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    for i in (1..n).rev() {
        let j = uniform_below(src, (i + 1) as u32) as usize;
        bits.swap(i, j);
    }
    Ok(BalancedMask { width, height, bits })
}

/// Key-derived conditioning channel, `1 x height x width/2` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SecretMap(pub Tensor<f32>);

impl SecretMap {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.sum_f64() / self.0.len() as f64
    }
}

pub fn secret_map(src: &mut impl ByteSource, width: usize, height: usize) -> Result<SecretMap> {
    check_dims(width, height)?;
    let half = width / 2;
    let mut bytes = vec![0u8; height * half];
    src.fill(&mut bytes);
    let t = Tensor::new(
        vec![1, height, half],
        bytes.into_iter().map(|b| f32::from(b) / 255.0).collect(),
    )?;
    Ok(SecretMap(t))
}

/// Everything a password determines for one image size, drawn in stream order.
#[derive(Clone, Debug)]
pub struct KeySchedule {
    pub mask: BalancedMask,
    pub secret: SecretMap,
}

impl KeySchedule {
    pub fn derive(password: &[u8], width: usize, height: usize) -> Result<Self> {
        Self::derive_with(password, width, height, DEFAULT_ITERATIONS)
    }

    pub fn derive_with(password: &[u8], width: usize, height: usize, iterations: u32) -> Result<Self> {
        check_dims(width, height)?;
        let mut material = KeyMaterial::derive_with(password, &DEFAULT_SALT, iterations)?;
        Self::from_material(&mut material, width, height)
    }

    pub fn from_material(material: &mut KeyMaterial, width: usize, height: usize) -> Result<Self> {
        material.rewind();
        let mask = balanced_mask(material, width, height)?;
        let secret = secret_map(material, width, height)?;
        Ok(KeySchedule { mask, secret })
    }
}

/// `password` with bit `bit_index` flipped (bit 0 is the LSB of byte 0).
pub fn perturb_key(password: &[u8], bit_index: usize) -> Result<Vec<u8>> {
    if bit_index >= 8 * password.len() {
        return invalid(format!(
            "bit index {bit_index} out of range for a {}-byte password",
            password.len()
        ));
    }
    let mut out = password.to_vec();
    out[bit_index / 8] ^= 1 << (bit_index % 8);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zeros;

    impl ByteSource for Zeros {
        fn fill(&mut self, buf: &mut [u8]) {
            buf.fill(0);
        }
    }

    fn fast(password: &[u8]) -> KeyMaterial {
        KeyMaterial::derive_with(password, &DEFAULT_SALT, 2).unwrap()
    }

    #[test]
    fn rejects_empty_password() {
        assert!(derive_master(b"", &DEFAULT_SALT, 10).is_err());
    }

    #[test]
    fn master_is_deterministic() {
        let a = derive_master(b"hunter2", &DEFAULT_SALT, 1000).unwrap();
        let b = derive_master(b"hunter2", &DEFAULT_SALT, 1000).unwrap();
        assert_eq!(a, b);
    }

    // Frozen from Python's hashlib.pbkdf2_hmac("sha256", ...).
    #[test]
    fn master_matches_hashlib() {
        let got = derive_master(b"password", b"saltsaltsaltsalt", 1000).unwrap();
        assert_eq!(
            hex(&got),
            "f275fb870144cc807c68f6a325360af3078741ce4d833d2915500abd2bb88d00"
        );
    }

    #[test]
    fn master_avalanche() {
        let mut total = 0u32;
        for trial in 0..100u32 {
            let pw = format!("pass-{trial:03}").into_bytes();
            let flipped = perturb_key(&pw, (trial as usize * 7) % (8 * pw.len())).unwrap();
            let a = derive_master(&pw, &DEFAULT_SALT, 50).unwrap();
            let b = derive_master(&flipped, &DEFAULT_SALT, 50).unwrap();
            let d: u32 = a.iter().zip(&b).map(|(x, y)| (x ^ y).count_ones()).sum();
            assert!((96..=160).contains(&d), "trial {trial}: distance {d}");
            total += d;
        }
        let mean = f64::from(total) / 100.0;
        assert!((120.0..=136.0).contains(&mean), "mean distance {mean}");
    }

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect()
    }

    // RFC 7539 appendix A.1, test vector #1: zero key, zero nonce, counter 0.
    #[test]
    fn keystream_matches_rfc_vector() {
        let mut m = KeyMaterial::from_master([0u8; 32]);
        assert_eq!(
            hex(&m.keystream(64)),
            "76b8e0ada0f13d90405d6ae55386bd28bdd219b8a08ded1aa836efcc8b770dc7\
             da41597c5157488d7724e03fb8d84a376a43b8f41518a11cc387b669b2ee6586"
        );
    }

    #[test]
    fn keystream_is_concatenation_consistent() {
        let mut a = fast(b"k");
        let mut b = fast(b"k");
        assert!(a.keystream(0).is_empty());
        let whole = a.keystream(64);
        let mut parts = b.keystream(32);
        parts.extend(b.keystream(32));
        assert_eq!(whole, parts);
        assert_eq!(a.position(), 64);
        let mut odd = fast(b"k");
        let mut pieces = odd.keystream(7);
        pieces.extend(odd.keystream(57));
        assert_eq!(whole, pieces);
    }

    #[test]
    fn mask_hand_traced_on_zero_stream() {
        // [1,1,0,0]: i=3 swaps with 0 -> [0,1,0,1]; i=2 swaps with 0 -> same;
        // i=1 swaps with 0 -> [1,0,0,1].
        let m = balanced_mask(&mut Zeros, 2, 2).unwrap();
        assert_eq!(m.bits(), &[true, false, false, true]);
    }

    #[test]
    fn mask_rejects_odd_width() {
        assert!(balanced_mask(&mut Zeros, 3, 4).is_err());
    }

    #[test]
    fn mask_is_balanced_and_deterministic() {
        let a = KeySchedule::derive_with(b"pw", 8, 6, 2).unwrap();
        let b = KeySchedule::derive_with(b"pw", 8, 6, 2).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.mask.popcount(), 24);
        assert_eq!(a.secret, b.secret);
    }

    #[test]
    fn schedule_consumes_mask_then_map() {
        let mut m = fast(b"order");
        let sched = KeySchedule::from_material(&mut m, 4, 4).unwrap();
        let mut replay = fast(b"order");
        let mask = balanced_mask(&mut replay, 4, 4).unwrap();
        let map = secret_map(&mut replay, 4, 4).unwrap();
        assert_eq!(sched.mask, mask);
        assert_eq!(sched.secret, map);
        assert_eq!(m.position(), replay.position());
    }

    #[test]
    fn fisher_yates_is_unbiased_on_2x2() {
        let mut m = fast(b"bias");
        let mut counts = std::collections::HashMap::new();
        let trials = 10_000;
        for _ in 0..trials {
            let mask = balanced_mask(&mut m, 2, 2).unwrap();
            *counts.entry(mask.bits().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (pattern, c) in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 1.0 / 6.0).abs() <= 0.03, "{pattern:?}: {f}");
        }
    }

    #[test]
    fn secret_map_endpoints_and_shape() {
        struct Fixed(Vec<u8>);
        impl ByteSource for Fixed {
            fn fill(&mut self, buf: &mut [u8]) {
                let n = buf.len();
                buf.copy_from_slice(&self.0[..n]);
                self.0.drain(..n);
            }
        }
        let m = secret_map(&mut Fixed(vec![0, 255, 51, 102]), 4, 2).unwrap();
        assert_eq!(m.tensor().shape(), &[1, 2, 2]);
        assert_eq!(m.tensor().data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn secret_map_is_roughly_uniform() {
        let s = KeySchedule::derive_with(b"uniform", 64, 32, 2).unwrap();
        let mean = s.secret.mean();
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn secret_map_key_sensitivity() {
        let a = KeySchedule::derive_with(b"sensitive", 64, 64, 2).unwrap();
        let b = KeySchedule::derive_with(&perturb_key(b"sensitive", 3).unwrap(), 64, 64, 2).unwrap();
        let mad = a.secret.tensor().max_abs_diff(b.secret.tensor());
        assert!(mad > 0.5);
        let mean_abs: f64 = a
            .secret
            .tensor()
            .data()
            .iter()
            .zip(b.secret.tensor().data())
            .map(|(x, y)| f64::from((x - y).abs()))
            .sum::<f64>()
            / a.secret.tensor().len() as f64;
        assert!((0.28..=0.38).contains(&mean_abs), "{mean_abs}");
    }

    #[test]
    fn perturb_key_flips_one_bit() {
        assert_eq!(perturb_key(b"A", 0).unwrap(), b"@");
        let pw = b"correct horse".to_vec();
        for i in [0, 9, 8 * pw.len() - 1] {
            let p = perturb_key(&pw, i).unwrap();
            let d: u32 = p.iter().zip(&pw).map(|(a, b)| (a ^ b).count_ones()).sum();
            assert_eq!(d, 1);
            assert_eq!(perturb_key(&p, i).unwrap(), pw);
        }
        assert!(perturb_key(b"A", 8).is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mask_balance_holds_for_any_even_width(half_w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let mut m = KeyMaterial::from_master(Sha256::digest(seed.to_le_bytes()).into());
            let mask = balanced_mask(&mut m, 2 * half_w, h).unwrap();
            prop_assert_eq!(mask.popcount(), half_w * h);
        }
    }
}
