//! Sealed point-to-point messages.
//!
//! Payloads are encrypted with a keystream derived from the pair's shared
//! secret and a message counter, then authenticated with a 16-byte keyed tag.
//! This simulates the byte cost and tamper-evidence of an encrypted channel;
//! it is not a hardened transport.

use super::keys::SharedKey;
use crate::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Tag length appended to every sealed message.
pub const AUTH_TAG_LEN: usize = 16;
/// Fixed framing added by sealing: 8-byte counter plus the tag.
pub const SEAL_OVERHEAD: usize = 8 + AUTH_TAG_LEN;

fn keystream_xor(key: &SharedKey, counter: u64, buf: &mut [u8]) {
    let mut h = Sha256::new();
    h.update(b"vfedsec-seal-enc");
    h.update(key.0);
    h.update(counter.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(seed);
    let mut pad = vec![0u8; buf.len()];
    rng.fill_bytes(&mut pad);
    for (b, p) in buf.iter_mut().zip(pad) {
        *b ^= p;
    }
}

fn auth_tag(key: &SharedKey, counter: u64, ciphertext: &[u8]) -> [u8; AUTH_TAG_LEN] {
    let mut h = Sha256::new();
    h.update(b"vfedsec-seal-mac");
    h.update(key.0);
    h.update(counter.to_le_bytes());
    h.update((ciphertext.len() as u64).to_le_bytes());
    h.update(ciphertext);
    let full: [u8; 32] = h.finalize().into();
    full[..AUTH_TAG_LEN].try_into().unwrap()
}

/// Seals an arbitrary payload under the shared key and message counter.
pub fn seal_bytes(key: &SharedKey, counter: u64, payload: &[u8]) -> Vec<u8> {
    let mut body = payload.to_vec();
    keystream_xor(key, counter, &mut body);
    let tag = auth_tag(key, counter, &body);
    let mut out = Vec::with_capacity(SEAL_OVERHEAD + body.len());
    out.extend_from_slice(&counter.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&tag);
    out
}

/// Opens a sealed payload, failing on any tampering or key mismatch.
pub fn open_bytes(key: &SharedKey, sealed: &[u8]) -> Result<Vec<u8>> {
    if sealed.len() < SEAL_OVERHEAD {
        return Err(Error::AuthFailure);
    }
    let counter = u64::from_le_bytes(sealed[..8].try_into().unwrap());
    let body_end = sealed.len() - AUTH_TAG_LEN;
    let body = &sealed[8..body_end];
    let tag: [u8; AUTH_TAG_LEN] = sealed[body_end..].try_into().unwrap();
    if auth_tag(key, counter, body) != tag {
        return Err(Error::AuthFailure);
    }
    let mut plain = body.to_vec();
    keystream_xor(key, counter, &mut plain);
    Ok(plain)
}

/// Encodes a (sample id, batch row) assignment list.
pub fn encode_ids(ids: &[(u64, u32)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + ids.len() * 12);
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for (id, row) in ids {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&row.to_le_bytes());
    }
    out
}

pub fn decode_ids(bytes: &[u8]) -> Result<Vec<(u64, u32)>> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("assignment header truncated".into()));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + n * 12 {
        return Err(Error::Protocol("assignment body truncated".into()));
    }
    let mut out = Vec::with_capacity(n);
    for chunk in bytes[4..4 + n * 12].chunks_exact(12) {
        let id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
        let row = u32::from_le_bytes(chunk[8..].try_into().unwrap());
        out.push((id, row));
    }
    Ok(out)
}

/// Seals a sample-id assignment for one recipient.
pub fn seal_ids(key: &SharedKey, counter: u64, ids: &[(u64, u32)]) -> Vec<u8> {
    seal_bytes(key, counter, &encode_ids(ids))
}

/// Opens a sealed assignment, verifying authenticity first.
pub fn open_ids(key: &SharedKey, sealed: &[u8]) -> Result<Vec<(u64, u32)>> {
    decode_ids(&open_bytes(key, sealed)?)
}
