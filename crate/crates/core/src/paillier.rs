//! Paillier cryptosystem with `g = n + 1`, CRT decryption, fixed-point encoding of
//! signed reals, and slot packing of many reals into one plaintext.

use std::sync::Arc;

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub const DEFAULT_FRACTION_BITS: u32 = 40;
pub const DEFAULT_MAX_PARTIES: u32 = 64;
pub const DEFAULT_SLOT_BITS: u32 = 80;
pub const MIN_KEY_BITS: usize = 512;
const PRIME_ATTEMPTS: usize = 100_000;
const MILLER_RABIN_ROUNDS: usize = 40;
/// Exponent width of the fixed-base randomizer `h^a`.
const SHORT_EXPONENT_BITS: usize = 128;
const WINDOW_BITS: usize = 8;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("plaintext must be below the modulus")]
    PlaintextRange,
    #[error("ciphertext is not below n^2")]
    CiphertextRange,
    #[error("key mismatch: ciphertext is under key {found:016x}, expected {expected:016x}")]
    KeyMismatch { expected: u64, found: u64 },
    #[error("no ciphertexts to add")]
    Empty,
    #[error("prime generation failed after {0} attempts")]
    PrimeGeneration(usize),
    #[error("key size {0} bits is below the minimum of 512")]
    KeySize(usize),
    #[error("fixed-point overflow: |{value}| exceeds the budget {budget}")]
    Overflow { value: f64, budget: f64 },
    #[error("malformed encoding: {0}")]
    Malformed(String),
}

type CResult<T> = std::result::Result<T, CryptoError>;

const SMALL_PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Miller-Rabin with random bases.
pub fn is_probable_prime(n: &BigUint, rounds: usize, rng: &mut impl Rng) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for p in SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and the top two bits set.
fn random_prime(bits: usize, rng: &mut impl Rng) -> CResult<BigUint> {
    for _ in 0..PRIME_ATTEMPTS {
        let mut c = rng.gen_biguint(bits as u64);
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(bits as u64 - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, MILLER_RABIN_ROUNDS, rng) {
            return Ok(c);
        }
    }
    Err(CryptoError::PrimeGeneration(PRIME_ATTEMPTS))
}

fn fingerprint(n: &BigUint) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in n.to_bytes_be() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from(a.clone());
    let m = BigInt::from(m.clone());
    let e = a.extended_gcd(&m);
    if !e.gcd.is_one() {
        return None;
    }
    e.x.mod_floor(&m).to_biguint()
}

/// Writes `u32` big-endian length followed by the big-endian magnitude.
pub fn write_biguint(out: &mut Vec<u8>, v: &BigUint) {
    let bytes = v.to_bytes_be();
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&bytes);
}

/// Reads one length-prefixed integer, returning it and the remaining bytes.
pub fn read_biguint(input: &[u8]) -> CResult<(BigUint, &[u8])> {
    if input.len() < 4 {
        return Err(CryptoError::Malformed("missing length prefix".into()));
    }
    let len = u32::from_be_bytes([input[0], input[1], input[2], input[3]]) as usize;
    let rest = &input[4..];
    if rest.len() < len {
        return Err(CryptoError::Malformed(format!(
            "need {len} bytes, have {}",
            rest.len()
        )));
    }
    Ok((BigUint::from_bytes_be(&rest[..len]), &rest[len..]))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    fingerprint: u64,
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Self {
        Self {
            n_squared: &n * &n,
            fingerprint: fingerprint(&n),
            n,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_biguint(&mut out, &self.n);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CResult<Self> {
        let (n, rest) = read_biguint(bytes)?;
        if !rest.is_empty() {
            return Err(CryptoError::Malformed(
                "trailing bytes after public key".into(),
            ));
        }
        Ok(Self::from_modulus(n))
    }

    /// `c = g^pt * r^n mod n^2` with `r` uniform in `(0, n)` and coprime to `n`.
    pub fn encrypt(&self, pt: &BigUint, rng: &mut impl Rng) -> CResult<Ciphertext> {
        let one = BigUint::one();
        let r = loop {
            let r = rng.gen_biguint_range(&one, &self.n);
            if r.gcd(&self.n).is_one() {
                break r;
            }
        };
        self.encrypt_with_randomizer(pt, &r.modpow(&self.n, &self.n_squared))
    }

    /// Encrypts with a precomputed `r^n mod n^2`.
    pub fn encrypt_with_randomizer(&self, pt: &BigUint, rn: &BigUint) -> CResult<Ciphertext> {
        if *pt >= self.n {
            return Err(CryptoError::PlaintextRange);
        }
        // g^pt = (1 + n)^pt = 1 + pt*n (mod n^2).
        let gm = (pt * &self.n + 1u32) % &self.n_squared;
        Ok(Ciphertext {
            value: (gm * rn) % &self.n_squared,
            key: self.fingerprint,
        })
    }

    /// Homomorphic sum: the modular product of the ciphertexts.
    pub fn add_ciphertexts<'a>(
        &self,
        cts: impl IntoIterator<Item = &'a Ciphertext>,
    ) -> CResult<Ciphertext> {
        let mut acc: Option<BigUint> = None;
        for ct in cts {
            self.check(ct)?;
            acc = Some(match acc {
                None => ct.value.clone(),
                Some(a) => (a * &ct.value) % &self.n_squared,
            });
        }
        acc.map(|value| Ciphertext {
            value,
            key: self.fingerprint,
        })
        .ok_or(CryptoError::Empty)
    }

    fn check(&self, ct: &Ciphertext) -> CResult<()> {
        if ct.key != self.fingerprint {
            return Err(CryptoError::KeyMismatch {
                expected: self.fingerprint,
                found: ct.key,
            });
        }
        if ct.value >= self.n_squared {
            return Err(CryptoError::CiphertextRange);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct SecretKey {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
    lambda: BigUint,
    mu: BigUint,
}

/// Paillier key pair; the modulus `n = pq` plays the role of the protocol's large
/// modulus parameter.
#[derive(Clone, Debug)]
pub struct PaillierKeypair {
    public: Arc<PublicKey>,
    secret: SecretKey,
}

fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

/// Deterministic key generation from `seed`; `bits` is the modulus size.
pub fn keygen(bits: usize, seed: u64) -> CResult<PaillierKeypair> {
    keygen_with_rng(bits, &mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn keygen_with_rng(bits: usize, rng: &mut impl Rng) -> CResult<PaillierKeypair> {
    if bits < MIN_KEY_BITS || !bits.is_multiple_of(2) {
        return Err(CryptoError::KeySize(bits));
    }
    for _ in 0..PRIME_ATTEMPTS {
        let p = random_prime(bits / 2, rng)?;
        let q = random_prime(bits / 2, rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        return Ok(PaillierKeypair::from_primes(p, q));
    }
    Err(CryptoError::PrimeGeneration(PRIME_ATTEMPTS))
}

impl PaillierKeypair {
    fn from_primes(p: BigUint, q: BigUint) -> Self {
        let n = &p * &q;
        let public = PublicKey::from_modulus(n.clone());
        let g = &n + 1u32;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let pm1 = &p - 1u32;
        let qm1 = &q - 1u32;
        let hp = mod_inverse(&l_function(&g.modpow(&pm1, &p_squared), &p), &p).expect("g is valid");
        let hq = mod_inverse(&l_function(&g.modpow(&qm1, &q_squared), &q), &q).expect("g is valid");
        let p_inv_q = mod_inverse(&p, &q).expect("distinct primes");
        let lambda = pm1.lcm(&qm1);
        let mu = mod_inverse(&l_function(&g.modpow(&lambda, public.n_squared()), &n), &n)
            .expect("g is valid");
        Self {
            public: Arc::new(public),
            secret: SecretKey {
                p,
                q,
                p_squared,
                q_squared,
                hp,
                hq,
                p_inv_q,
                lambda,
                mu,
            },
        }
    }

    pub fn public(&self) -> &Arc<PublicKey> {
        &self.public
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.secret.p, &self.secret.q)
    }

    /// CRT decryption.
    pub fn decrypt(&self, ct: &Ciphertext) -> CResult<BigUint> {
        self.public.check(ct)?;
        let s = &self.secret;
        let mp = (l_function(&ct.value.modpow(&(&s.p - 1u32), &s.p_squared), &s.p) * &s.hp) % &s.p;
        let mq = (l_function(&ct.value.modpow(&(&s.q - 1u32), &s.q_squared), &s.q) * &s.hq) % &s.q;
        // m = mp + p * ((mq - mp) * p^{-1} mod q)
        let diff = (&mq + &s.q - (&mp % &s.q)) % &s.q;
        Ok(&mp + &s.p * ((diff * &s.p_inv_q) % &s.q))
    }

    /// `L(c^lambda mod n^2) * mu mod n`, without the CRT speedup.
    pub fn decrypt_textbook(&self, ct: &Ciphertext) -> CResult<BigUint> {
        self.public.check(ct)?;
        let n = self.public.n();
        let u = ct
            .value
            .modpow(&self.secret.lambda, self.public.n_squared());
        Ok((l_function(&u, n) * &self.secret.mu) % n)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key: u64,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_fingerprint(&self) -> u64 {
        self.key
    }

    /// Key fingerprint (8 bytes) followed by the length-prefixed value.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.key.to_be_bytes().to_vec();
        write_biguint(&mut out, &self.value);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CResult<Self> {
        if bytes.len() < 8 {
            return Err(CryptoError::Malformed("missing key fingerprint".into()));
        }
        let key = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
        let (value, rest) = read_biguint(&bytes[8..])?;
        if !rest.is_empty() {
            return Err(CryptoError::Malformed(
                "trailing bytes after ciphertext".into(),
            ));
        }
        Ok(Self { value, key })
    }

    pub fn serialized_len(&self) -> usize {
        8 + 4 + self.value.to_bytes_be().len()
    }
}

/// Encryptor with a fixed-base table for randomizers `h^a`, where `h = r0^n` for one
/// uniform `r0` and `a` is a fresh 128-bit exponent per ciphertext.
pub struct FastEncryptor {
    public: Arc<PublicKey>,
    table: Vec<Vec<BigUint>>,
}

impl FastEncryptor {
    pub fn new(public: Arc<PublicKey>, rng: &mut impl Rng) -> Self {
        let n2 = public.n_squared().clone();
        let r0 = loop {
            let r = rng.gen_biguint_range(&BigUint::one(), public.n());
            if r.gcd(public.n()).is_one() {
                break r;
            }
        };
        let mut base = r0.modpow(public.n(), &n2);
        let windows = SHORT_EXPONENT_BITS / WINDOW_BITS;
        let mut table = Vec::with_capacity(windows);
        for _ in 0..windows {
            let mut row = Vec::with_capacity(1 << WINDOW_BITS);
            row.push(BigUint::one());
            for j in 1..(1 << WINDOW_BITS) {
                let next = (&row[j - 1] * &base) % &n2;
                row.push(next);
            }
            base = (&row[(1 << WINDOW_BITS) - 1] * &base) % &n2;
            table.push(row);
        }
        Self { public, table }
    }

    pub fn public(&self) -> &Arc<PublicKey> {
        &self.public
    }

    pub fn randomizer(&self, rng: &mut impl RngCore) -> BigUint {
        let mut exponent = [0u8; SHORT_EXPONENT_BITS / 8];
        rng.fill_bytes(&mut exponent);
        let n2 = self.public.n_squared();
        let mut acc = BigUint::one();
        for (w, &b) in exponent.iter().enumerate() {
            if b != 0 {
                acc = (acc * &self.table[w][b as usize]) % n2;
            }
        }
        acc
    }

    pub fn encrypt(&self, pt: &BigUint, rng: &mut impl RngCore) -> CResult<Ciphertext> {
        let rn = self.randomizer(rng);
        self.public.encrypt_with_randomizer(pt, &rn)
    }
}

/// Signed fixed-point encoding into `Z_n`: negatives wrap to `n - |v|`.
#[derive(Clone, Debug)]
pub struct FixedPointCodec {
    fraction_bits: u32,
    max_parties: u32,
    n: BigUint,
    half_n: BigUint,
    budget: f64,
}

impl FixedPointCodec {
    pub fn new(n: &BigUint) -> Self {
        Self::with_params(n, DEFAULT_FRACTION_BITS, DEFAULT_MAX_PARTIES)
    }

    pub fn with_params(n: &BigUint, fraction_bits: u32, max_parties: u32) -> Self {
        let half_n = n >> 1u32;
        // |x| < n / (2 * 2^f * M_max)
        let budget = half_n.to_f64().unwrap_or(f64::MAX)
            / 2f64.powi(fraction_bits as i32)
            / f64::from(max_parties);
        Self {
            fraction_bits,
            max_parties,
            n: n.clone(),
            half_n,
            budget,
        }
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.fraction_bits as i32)
    }

    pub fn max_parties(&self) -> u32 {
        self.max_parties
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn encode_real(&self, x: f64) -> CResult<BigUint> {
        if !x.is_finite() || x.abs() >= self.budget {
            return Err(CryptoError::Overflow {
                value: x,
                budget: self.budget,
            });
        }
        let v = BigInt::from_signed_f64((x * self.scale()).round());
        Ok(v.mod_floor(&BigInt::from(self.n.clone()))
            .to_biguint()
            .expect("nonnegative"))
    }

    /// Maps `[0, n)` back to a signed value; anything above `n/2` is negative.
    pub fn to_signed(&self, v: &BigUint) -> BigInt {
        if *v > self.half_n {
            -BigInt::from(&self.n - v)
        } else {
            BigInt::from(v.clone())
        }
    }

    pub fn decode_real(&self, v: &BigUint) -> f64 {
        self.to_signed(v).to_f64().unwrap_or(f64::NAN) / self.scale()
    }
}

trait FromSignedF64 {
    fn from_signed_f64(x: f64) -> Self;
}

impl FromSignedF64 for BigInt {
    fn from_signed_f64(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite value")
    }
}

/// Packs several fixed-point reals into balanced `slot_bits`-wide digits of one
/// plaintext. Homomorphic addition adds slot-wise as long as every slot sum stays
/// below `2^(slot_bits - 1)` in magnitude.
#[derive(Clone, Debug)]
pub struct SlotCodec {
    codec: FixedPointCodec,
    slot_bits: u32,
    slots: usize,
    budget: f64,
}

impl SlotCodec {
    pub fn new(n: &BigUint) -> Self {
        Self::with_params(
            n,
            DEFAULT_FRACTION_BITS,
            DEFAULT_MAX_PARTIES,
            DEFAULT_SLOT_BITS,
        )
    }

    pub fn with_params(n: &BigUint, fraction_bits: u32, max_parties: u32, slot_bits: u32) -> Self {
        let codec = FixedPointCodec::with_params(n, fraction_bits, max_parties);
        // Total packed magnitude must stay below n/2.
        let slots = ((n.bits() - 2) / u64::from(slot_bits)).max(1) as usize;
        let budget = 2f64.powi(slot_bits as i32 - 1)
            / 2f64.powi(fraction_bits as i32)
            / f64::from(max_parties);
        Self {
            codec,
            slot_bits,
            slots,
            budget,
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Largest magnitude a single packed value may have.
    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    pub fn plaintexts_for(&self, len: usize) -> usize {
        len.div_ceil(self.slots)
    }

    /// Packs `values` into `ceil(len / slots)` plaintexts.
    pub fn pack(&self, values: &[f64]) -> CResult<Vec<BigUint>> {
        let n = BigInt::from(self.codec.n.clone());
        let scale = self.codec.scale();
        values
            .chunks(self.slots)
            .map(|chunk| {
                let mut acc = BigInt::zero();
                for &x in chunk.iter().rev() {
                    if !x.is_finite() || x.abs() >= self.budget {
                        return Err(CryptoError::Overflow {
                            value: x,
                            budget: self.budget,
                        });
                    }
                    acc <<= self.slot_bits;
                    acc += BigInt::from_signed_f64((x * scale).round());
                }
                Ok(acc.mod_floor(&n).to_biguint().expect("nonnegative"))
            })
            .collect()
    }

    /// Inverse of [`SlotCodec::pack`] for `len` values.
    pub fn unpack(&self, plaintexts: &[BigUint], len: usize) -> Vec<f64> {
        let modulus = BigInt::one() << self.slot_bits;
        let half = BigInt::one() << (self.slot_bits - 1);
        let scale = self.codec.scale();
        let mut out = Vec::with_capacity(len);
        for pt in plaintexts {
            let mut v = self.codec.to_signed(pt);
            for _ in 0..self.slots {
                if out.len() == len {
                    break;
                }
                let mut digit = v.mod_floor(&modulus);
                if digit >= half {
                    digit -= &modulus;
                }
                v = (v - &digit) >> self.slot_bits;
                out.push(digit.to_f64().expect("slot fits in f64") / scale);
            }
        }
        out
    }
}

/// `(a - b) mod n`.
pub fn sub_mod(a: &BigUint, b: &BigUint, n: &BigUint) -> BigUint {
    ((a % n) + n - (b % n)) % n
}

pub fn add_mod(a: &BigUint, b: &BigUint, n: &BigUint) -> BigUint {
    (a + b) % n
}

/// Uniform element of `Z_n`.
pub fn uniform_mod(n: &BigUint, rng: &mut impl Rng) -> BigUint {
    rng.gen_biguint_below(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::sync::OnceLock;

    fn key() -> &'static PaillierKeypair {
        static KEY: OnceLock<PaillierKeypair> = OnceLock::new();
        KEY.get_or_init(|| keygen(512, 42).unwrap())
    }

    #[test]
    fn keygen_is_deterministic_and_well_formed() {
        let a = keygen(512, 7).unwrap();
        let b = keygen(512, 7).unwrap();
        assert_eq!(a.public(), b.public());
        let (p, q) = a.primes();
        assert_ne!(p, q);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(is_probable_prime(p, 40, &mut rng));
        assert!(is_probable_prime(q, 40, &mut rng));
        assert!(!is_probable_prime(a.public().n(), 40, &mut rng));
        assert_eq!(&(p * q), a.public().n());
        assert_eq!(a.public().bits(), 512);
        assert!(keygen(256, 1).is_err());
    }

    #[test]
    fn miller_rabin_on_known_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for p in [2u64, 3, 97, 7919, 2_147_483_647, 1_000_000_007] {
            assert!(is_probable_prime(&BigUint::from(p), 20, &mut rng), "{p}");
        }
        for c in [1u64, 4, 561, 1105, 2_147_483_649, 1_000_000_007 * 3] {
            assert!(!is_probable_prime(&BigUint::from(c), 20, &mut rng), "{c}");
        }
    }

    #[test]
    fn encrypt_one_decrypts_to_one() {
        let k = key();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ct = k.public().encrypt(&BigUint::one(), &mut rng).unwrap();
        assert_eq!(k.decrypt(&ct).unwrap(), BigUint::one());
        assert_eq!(k.decrypt_textbook(&ct).unwrap(), BigUint::one());
    }

    #[test]
    fn boundary_plaintexts() {
        let k = key();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = k.public().n();
        for pt in [BigUint::zero(), n - 1u32] {
            let ct = k.public().encrypt(&pt, &mut rng).unwrap();
            assert_eq!(k.decrypt(&ct).unwrap(), pt);
        }
        assert!(matches!(
            k.public().encrypt(n, &mut rng),
            Err(CryptoError::PlaintextRange)
        ));
    }

    #[test]
    fn fresh_encryptions_differ() {
        let k = key();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let five = BigUint::from(5u32);
        let a = k.public().encrypt(&five, &mut rng).unwrap();
        let b = k.public().encrypt(&five, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(k.decrypt(&a).unwrap(), k.decrypt(&b).unwrap());
    }

    #[test]
    fn zero_plus_zero() {
        let k = key();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let z = k.public().encrypt(&BigUint::zero(), &mut rng).unwrap();
        let z2 = k.public().encrypt(&BigUint::zero(), &mut rng).unwrap();
        let s = k.public().add_ciphertexts([&z, &z2]).unwrap();
        assert!(k.decrypt(&s).unwrap().is_zero());
    }

    #[test]
    fn add_ciphertexts_cases() {
        let k = key();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let cts: Vec<Ciphertext> = [2u32, 3, 5]
            .iter()
            .map(|v| k.public().encrypt(&BigUint::from(*v), &mut rng).unwrap())
            .collect();
        assert_eq!(
            k.decrypt(&k.public().add_ciphertexts(&cts).unwrap())
                .unwrap(),
            BigUint::from(10u32)
        );
        assert_eq!(k.public().add_ciphertexts([&cts[0]]).unwrap(), cts[0]);
        assert!(matches!(
            k.public().add_ciphertexts([]),
            Err(CryptoError::Empty)
        ));
        let n = k.public().n();
        let big = k.public().encrypt(&(n - 1u32), &mut rng).unwrap();
        let wrap = k.public().add_ciphertexts([&big, &cts[1]]).unwrap();
        assert_eq!(k.decrypt(&wrap).unwrap(), BigUint::from(2u32));
    }

    #[test]
    fn key_mismatch_detected() {
        let k = key();
        let other = keygen(512, 43).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ct = other.public().encrypt(&BigUint::one(), &mut rng).unwrap();
        assert!(matches!(
            k.decrypt(&ct),
            Err(CryptoError::KeyMismatch { .. })
        ));
        let mine = k.public().encrypt(&BigUint::one(), &mut rng).unwrap();
        assert!(k.public().add_ciphertexts([&mine, &ct]).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let k = key();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let ct = k.public().encrypt(&BigUint::from(99u32), &mut rng).unwrap();
        let bytes = ct.to_bytes();
        assert_eq!(bytes.len(), ct.serialized_len());
        assert_eq!(Ciphertext::from_bytes(&bytes).unwrap(), ct);
        let pk = PublicKey::from_bytes(&k.public().to_bytes()).unwrap();
        assert_eq!(&pk, k.public().as_ref());
        assert!(Ciphertext::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn fast_encryptor_round_trips() {
        let k = key();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let enc = FastEncryptor::new(k.public().clone(), &mut rng);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let pt = rng.gen_biguint_below(k.public().n());
            let ct = enc.encrypt(&pt, &mut rng).unwrap();
            assert!(seen.insert(ct.value().clone()));
            assert_eq!(k.decrypt(&ct).unwrap(), pt);
        }
    }

    #[test]
    fn codec_examples() {
        let k = key();
        let n = k.public().n();
        let c = FixedPointCodec::new(n);
        assert!(c.encode_real(0.0).unwrap().is_zero());
        assert_eq!(c.decode_real(&BigUint::zero()), 0.0);
        let enc = c.encode_real(-1.5).unwrap();
        assert_eq!(enc, n - BigUint::from(3u64 << 39));
        assert_eq!(c.decode_real(&enc), -1.5);
        assert!(matches!(
            c.encode_real(c.budget() * 1.01),
            Err(CryptoError::Overflow { .. })
        ));
        assert!(c.encode_real(f64::NAN).is_err());
    }

    #[test]
    fn homomorphic_sum_of_nine_reals() {
        let k = key();
        let c = FixedPointCodec::new(k.public().n());
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let xs: Vec<f64> = (0..9).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let cts: Vec<Ciphertext> = xs
            .iter()
            .map(|x| {
                k.public()
                    .encrypt(&c.encode_real(*x).unwrap(), &mut rng)
                    .unwrap()
            })
            .collect();
        let total = c.decode_real(
            &k.decrypt(&k.public().add_ciphertexts(&cts).unwrap())
                .unwrap(),
        );
        let direct: f64 = xs.iter().sum();
        assert!((total - direct).abs() <= 9.0 * 2f64.powi(-40) + 1e-12);
    }

    #[test]
    fn slot_codec_packs_and_adds() {
        let k = key();
        let s = SlotCodec::new(k.public().n());
        assert_eq!(s.slots(), 6);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..14).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let b: Vec<f64> = (0..14).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let pa = s.pack(&a).unwrap();
        let pb = s.pack(&b).unwrap();
        assert_eq!(pa.len(), 3);
        let n = k.public().n();
        let summed: Vec<BigUint> = pa.iter().zip(&pb).map(|(x, y)| add_mod(x, y, n)).collect();
        let got = s.unpack(&summed, 14);
        for i in 0..14 {
            assert!((got[i] - (a[i] + b[i])).abs() <= 2.0 * 2f64.powi(-40));
        }
        assert!(s.pack(&[s.budget() * 2.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn homomorphism_within_quantization(xs in proptest::collection::vec(-1e6f64..1e6, 1..12), seed in 0u64..1000) {
            let k = key();
            let c = FixedPointCodec::new(k.public().n());
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let cts: Vec<Ciphertext> = xs.iter().map(|x| k.public().encrypt(&c.encode_real(*x).unwrap(), &mut rng).unwrap()).collect();
            let total = c.decode_real(&k.decrypt(&k.public().add_ciphertexts(&cts).unwrap()).unwrap());
            let direct: f64 = xs.iter().sum();
            // The f64 oracle sum carries its own rounding error of order k * eps * sum |x|.
            let oracle_err = 4.0 * xs.len() as f64 * f64::EPSILON * xs.iter().map(|x| x.abs()).sum::<f64>();
            prop_assert!((total - direct).abs() <= xs.len() as f64 * 2f64.powi(-40) + oracle_err);
        }

        #[test]
        fn masked_slots_unmask_exactly(xs in proptest::collection::vec(-1e4f64..1e4, 1..20), seed in 0u64..1000) {
            let k = key();
            let s = SlotCodec::new(k.public().n());
            let n = k.public().n();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let packed = s.pack(&xs).unwrap();
            let masks: Vec<BigUint> = packed.iter().map(|_| uniform_mod(n, &mut rng)).collect();
            let masked: Vec<BigUint> = packed.iter().zip(&masks).map(|(p, r)| add_mod(p, r, n)).collect();
            let unmasked: Vec<BigUint> = masked.iter().zip(&masks).map(|(m, r)| sub_mod(m, r, n)).collect();
            prop_assert_eq!(unmasked, packed.clone());
            let back = s.unpack(&packed, xs.len());
            for (a, b) in back.iter().zip(&xs) {
                prop_assert!((a - b).abs() <= 2f64.powi(-41));
            }
        }
    }
}
