//! Pairwise key agreement.
//!
//! Any two participants derive the same shared secret from their own private
//! value and the counterpart's public value. The exchange is x25519; the
//! protocol only relies on the agreement being deterministic and commutative.

use crate::{Error, Result};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

/// Length of serialized public values on the wire.
pub const PUBLIC_LEN: usize = 32;

/// A participant's key agreement pair. The private value never leaves the
/// owning participant; only `public_bytes` is announced.
#[derive(Clone)]
pub struct KeyPair {
    private: StaticSecret,
    public: PublicKey,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public.as_bytes()).finish()
    }
}

/// A 32-byte shared secret, equal on both ends of a pair.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SharedKey(pub [u8; 32]);

impl std::fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Secrets stay out of logs.
        write!(f, "SharedKey(..)")
    }
}

/// Generates a fresh keypair from the supplied randomness source.
pub fn gen_keypair(rng: &mut (impl RngCore + CryptoRng)) -> KeyPair {
    let private = StaticSecret::random_from_rng(rng);
    let public = PublicKey::from(&private);
    KeyPair { private, public }
}

impl KeyPair {
    pub fn public_bytes(&self) -> [u8; 32] {
        *self.public.as_bytes()
    }
}

/// Derives the shared secret for a pair; both directions produce identical
/// bytes. The raw agreement output is hashed so downstream stream keys never
/// touch group-element structure.
pub fn derive_shared_secret(my: &KeyPair, their_public: &[u8]) -> Result<SharedKey> {
    let bytes: [u8; PUBLIC_LEN] =
        their_public.try_into().map_err(|_| Error::MalformedPublic)?;
    let their = PublicKey::from(bytes);
    let raw = my.private.diffie_hellman(&their);
    let mut h = Sha256::new();
    h.update(b"vfedsec-shared-v1");
    h.update(raw.as_bytes());
    Ok(SharedKey(h.finalize().into()))
}
