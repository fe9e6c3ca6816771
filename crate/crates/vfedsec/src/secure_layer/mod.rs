//! The secure layer: per-group pairwise shared secrets, antisymmetric noise
//! streams over the 32-bit ring, tensor masking, and sealed id channels.
//!
//! Every unordered pair in a pool expands a keyed stream to the tensor shape;
//! the higher id adds the stream and the lower id subtracts it, so summing
//! one masked tensor per pool member cancels every mask and leaves exactly
//! the modular sum of the plaintext residues.

pub mod channel;
pub mod keys;

pub use channel::{open_bytes, open_ids, seal_bytes, seal_ids, SEAL_OVERHEAD};
pub use keys::{derive_shared_secret, gen_keypair, KeyPair, SharedKey};

use crate::qcode::QMatrix;
use crate::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Logical participant identity. Id 0 is reserved for the active party.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParticipantId(pub u32);

/// The active party's well-known id.
pub const ACTIVE_ID: ParticipantId = ParticipantId(0);

impl std::fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Which per-round tensor a noise stream masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ForwardEmbedding,
    BackwardUpdate,
}

impl Phase {
    fn byte(self) -> u8 {
        match self {
            Phase::ForwardEmbedding => 0,
            Phase::BackwardUpdate => 1,
        }
    }
}

/// Disambiguates noise streams: identical tags on both ends of a pair yield
/// identical streams, and any field change separates streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseTag {
    pub epoch: u64,
    pub round: u64,
    pub phase: Phase,
    pub rows: usize,
    pub cols: usize,
}

impl NoiseTag {
    pub fn new(epoch: u64, round: u64, phase: Phase, rows: usize, cols: usize) -> Self {
        NoiseTag { epoch, round, phase, rows, cols }
    }
}

/// Per-group pool of pairwise shared secrets among the active party and the
/// group's clients, rotated wholesale every key epoch.
#[derive(Debug, Clone)]
pub struct PairPool {
    pub group_id: u32,
    members: Vec<ParticipantId>,
    secrets: BTreeMap<(ParticipantId, ParticipantId), SharedKey>,
    pub epoch: u64,
}

impl PairPool {
    /// Builds a pool from every member's keypair, deriving one secret per
    /// unordered pair. Membership must include the active party and at
    /// least one group client.
    pub fn from_keypairs(
        group_id: u32,
        keypairs: &BTreeMap<ParticipantId, KeyPair>,
        epoch: u64,
    ) -> Result<Self> {
        let members: Vec<ParticipantId> = keypairs.keys().copied().collect();
        if !members.contains(&ACTIVE_ID) || members.len() < 2 {
            return Err(Error::Protocol(format!(
                "pool for group {} needs the active party and at least one client",
                group_id
            )));
        }
        let mut secrets = BTreeMap::new();
        for (i, &u) in members.iter().enumerate() {
            for &v in &members[i + 1..] {
                let s = derive_shared_secret(&keypairs[&u], &keypairs[&v].public_bytes())?;
                debug_assert_eq!(
                    s,
                    derive_shared_secret(&keypairs[&v], &keypairs[&u].public_bytes())?,
                    "key agreement must be commutative"
                );
                secrets.insert((u, v), s);
            }
        }
        Ok(PairPool { group_id, members, secrets, epoch })
    }

    pub fn members(&self) -> &[ParticipantId] {
        &self.members
    }

    pub fn contains(&self, p: ParticipantId) -> bool {
        self.members.contains(&p)
    }

    /// Shared secret of an unordered pair.
    pub fn secret(&self, a: ParticipantId, b: ParticipantId) -> Result<SharedKey> {
        let key = if a < b { (a, b) } else { (b, a) };
        self.secrets
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("no shared secret for {} and {}", a, b)))
    }

    /// Rebuilds the pool at a strictly later epoch with fresh keypairs.
    pub fn rotate_epoch(
        &self,
        new_epoch: u64,
        mut keygen: impl FnMut(ParticipantId) -> KeyPair,
    ) -> Result<PairPool> {
        if new_epoch <= self.epoch {
            return Err(Error::Protocol(format!(
                "epoch must increase (current {}, requested {})",
                self.epoch, new_epoch
            )));
        }
        let keypairs: BTreeMap<ParticipantId, KeyPair> =
            self.members.iter().map(|&p| (p, keygen(p))).collect();
        PairPool::from_keypairs(self.group_id, &keypairs, new_epoch)
    }
}

/// Expands the pair's keyed stream to the tag's shape. Both pair ends
/// regenerate the identical stream without communicating.
fn pair_stream(secret: &SharedKey, tag: &NoiseTag) -> QMatrix {
    let mut h = Sha256::new();
    h.update(b"vfedsec-pair-noise");
    h.update(secret.0);
    h.update(tag.epoch.to_le_bytes());
    h.update(tag.round.to_le_bytes());
    h.update([tag.phase.byte()]);
    h.update((tag.rows as u64).to_le_bytes());
    h.update((tag.cols as u64).to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(seed);
    let mut buf = vec![0u8; tag.rows * tag.cols * 4];
    rng.fill_bytes(&mut buf);
    let data = buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    QMatrix { rows: tag.rows, cols: tag.cols, data }
}

/// Antisymmetric pair noise: the stream itself for the higher id, its
/// modular negation for the lower, so the two directions sum to zero.
pub fn pair_noise(
    u: ParticipantId,
    v: ParticipantId,
    secret: &SharedKey,
    tag: &NoiseTag,
) -> Result<QMatrix> {
    if u == v {
        return Err(Error::Protocol("pair noise needs two distinct participants".into()));
    }
    let p = pair_stream(secret, tag);
    Ok(if u > v { p } else { p.wrapping_neg() })
}

/// A member's combined mask: the modular sum of its pair noise against every
/// other participant in `among`. Summing this over all of `among` cancels.
pub fn self_noise_among(
    u: ParticipantId,
    among: &[ParticipantId],
    pool: &PairPool,
    tag: &NoiseTag,
) -> Result<QMatrix> {
    if !among.contains(&u) {
        return Err(Error::Protocol(format!("{} is not in the cancellation set", u)));
    }
    let mut acc = QMatrix::zeros(tag.rows, tag.cols);
    for &v in among {
        if v == u {
            continue;
        }
        let n = pair_noise(u, v, &pool.secret(u, v)?, tag)?;
        acc = acc.wrapping_add(&n)?;
    }
    Ok(acc)
}

/// [`self_noise_among`] over the whole pool membership.
pub fn self_noise(u: ParticipantId, pool: &PairPool, tag: &NoiseTag) -> Result<QMatrix> {
    if !pool.contains(u) {
        return Err(Error::Protocol(format!("{} is not a member of the pool", u)));
    }
    self_noise_among(u, pool.members(), pool, tag)
}

/// Adds a noise mask onto a quantized tensor in the ring.
pub fn mask_tensor(q: &QMatrix, noise: &QMatrix) -> Result<QMatrix> {
    q.wrapping_add(noise)
}

/// Sums one masked tensor per participating pool member. The caller asserts
/// pool completeness; with it, the masks cancel and the result is exactly
/// the modular sum of the unmasked quantized tensors.
pub fn unmask_aggregate(msgs: &[QMatrix], pool_complete: bool) -> Result<QMatrix> {
    if !pool_complete {
        return Err(Error::IncompletePool);
    }
    let first = msgs.first().ok_or(Error::IncompletePool)?;
    let mut acc = QMatrix::zeros(first.rows, first.cols);
    for m in msgs {
        acc = acc.wrapping_add(m)?;
    }
    Ok(acc)
}

/// Deterministic seed for one participant's keypair in one epoch.
pub fn keypair_rng(master_seed: u64, participant: ParticipantId, epoch: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"vfedsec-keypair");
    h.update(master_seed.to_le_bytes());
    h.update(participant.0.to_le_bytes());
    h.update(epoch.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag(round: u64, rows: usize, cols: usize) -> NoiseTag {
        NoiseTag::new(0, round, Phase::ForwardEmbedding, rows, cols)
    }

    fn pool_of(n: u32, epoch: u64) -> PairPool {
        let keypairs: BTreeMap<ParticipantId, KeyPair> = (0..n)
            .map(|i| {
                let p = ParticipantId(i);
                (p, gen_keypair(&mut keypair_rng(99, p, epoch)))
            })
            .collect();
        PairPool::from_keypairs(7, &keypairs, epoch).unwrap()
    }

    #[test]
    fn pool_requires_active_party() {
        let keypairs: BTreeMap<ParticipantId, KeyPair> = (1..3)
            .map(|i| {
                let p = ParticipantId(i);
                (p, gen_keypair(&mut keypair_rng(1, p, 0)))
            })
            .collect();
        assert!(PairPool::from_keypairs(0, &keypairs, 0).is_err());
    }

    #[test]
    fn pair_noise_is_antisymmetric_and_higher_id_gets_stream() {
        let pool = pool_of(3, 0);
        let u = ParticipantId(2);
        let v = ParticipantId(1);
        let s = pool.secret(u, v).unwrap();
        let t = tag(4, 2, 3);
        let n_uv = pair_noise(u, v, &s, &t).unwrap();
        let n_vu = pair_noise(v, u, &s, &t).unwrap();
        assert_eq!(n_uv, pair_stream(&s, &t));
        let sum = n_uv.wrapping_add(&n_vu).unwrap();
        assert!(sum.data.iter().all(|&w| w == 0));
    }

    #[test]
    fn pair_noise_rejects_self_pairing() {
        let pool = pool_of(2, 0);
        let s = pool.secret(ParticipantId(0), ParticipantId(1)).unwrap();
        assert!(pair_noise(ParticipantId(1), ParticipantId(1), &s, &tag(0, 1, 1)).is_err());
    }

    #[test]
    fn identical_tag_reproduces_identical_noise() {
        let pool = pool_of(2, 0);
        let s = pool.secret(ParticipantId(0), ParticipantId(1)).unwrap();
        let a = pair_noise(ParticipantId(1), ParticipantId(0), &s, &tag(9, 4, 4)).unwrap();
        let b = pair_noise(ParticipantId(1), ParticipantId(0), &s, &tag(9, 4, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_change_separates_streams() {
        let pool = pool_of(2, 0);
        let s = pool.secret(ParticipantId(0), ParticipantId(1)).unwrap();
        let a = pair_noise(ParticipantId(1), ParticipantId(0), &s, &tag(1, 4, 4)).unwrap();
        let b = pair_noise(ParticipantId(1), ParticipantId(0), &s, &tag(2, 4, 4)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn epoch_change_alone_separates_streams() {
        let pool = pool_of(2, 0);
        let s = pool.secret(ParticipantId(0), ParticipantId(1)).unwrap();
        let a = NoiseTag::new(0, 3, Phase::ForwardEmbedding, 4, 4);
        let b = NoiseTag::new(1, 3, Phase::ForwardEmbedding, 4, 4);
        assert_ne!(
            pair_noise(ParticipantId(1), ParticipantId(0), &s, &a).unwrap(),
            pair_noise(ParticipantId(1), ParticipantId(0), &s, &b).unwrap()
        );
    }

    #[test]
    fn phase_change_separates_streams() {
        let pool = pool_of(2, 0);
        let s = pool.secret(ParticipantId(0), ParticipantId(1)).unwrap();
        let fwd = NoiseTag::new(0, 3, Phase::ForwardEmbedding, 4, 4);
        let bwd = NoiseTag::new(0, 3, Phase::BackwardUpdate, 4, 4);
        assert_ne!(
            pair_noise(ParticipantId(1), ParticipantId(0), &s, &fwd).unwrap(),
            pair_noise(ParticipantId(1), ParticipantId(0), &s, &bwd).unwrap()
        );
    }

    #[test]
    fn two_member_self_noise_is_the_single_pair() {
        let pool = pool_of(2, 0);
        let t = tag(5, 3, 2);
        let u = ParticipantId(1);
        let v = ParticipantId(0);
        let solo = self_noise(u, &pool, &t).unwrap();
        let pair = pair_noise(u, v, &pool.secret(u, v).unwrap(), &t).unwrap();
        assert_eq!(solo, pair);
    }

    #[test]
    fn pool_noise_cancels_over_all_members() {
        let pool = pool_of(4, 0);
        let t = tag(11, 3, 2);
        let mut acc = QMatrix::zeros(3, 2);
        for &m in pool.members() {
            acc = acc.wrapping_add(&self_noise(m, &pool, &t).unwrap()).unwrap();
        }
        assert!(acc.data.iter().all(|&w| w == 0), "pool noises must cancel: {:?}", acc.data);
    }

    #[test]
    fn four_member_cancellation_matches_pairwise_enumeration() {
        let pool = pool_of(4, 0);
        let t = tag(12, 3, 2);
        for &u in pool.members() {
            // Direct enumeration over every counterparty.
            let mut direct = QMatrix::zeros(3, 2);
            for &v in pool.members() {
                if v == u {
                    continue;
                }
                let n = pair_noise(u, v, &pool.secret(u, v).unwrap(), &t).unwrap();
                direct = direct.wrapping_add(&n).unwrap();
            }
            assert_eq!(direct, self_noise(u, &pool, &t).unwrap());
        }
    }

    #[test]
    fn self_noise_rejects_non_members() {
        let pool = pool_of(3, 0);
        assert!(self_noise(ParticipantId(9), &pool, &tag(0, 1, 1)).is_err());
    }

    #[test]
    fn masking_with_zero_noise_is_identity() {
        let q = QMatrix::from_vec(1, 3, vec![5, 6, 7]);
        let masked = mask_tensor(&q, &QMatrix::zeros(1, 3)).unwrap();
        assert_eq!(masked, q);
    }

    #[test]
    fn masking_wraps_around() {
        let q = QMatrix::from_vec(1, 1, vec![u32::MAX]);
        let n = QMatrix::from_vec(1, 1, vec![1]);
        assert_eq!(mask_tensor(&q, &n).unwrap().data[0], 0);
    }

    #[test]
    fn mask_then_counterpart_noise_recovers_original() {
        let pool = pool_of(2, 0);
        let t = tag(3, 2, 2);
        let u = ParticipantId(1);
        let v = ParticipantId(0);
        let q = QMatrix::from_vec(2, 2, vec![10, 20, 30, 40]);
        let s = pool.secret(u, v).unwrap();
        let masked = mask_tensor(&q, &pair_noise(u, v, &s, &t).unwrap()).unwrap();
        let recovered = masked.wrapping_add(&pair_noise(v, u, &s, &t).unwrap()).unwrap();
        assert_eq!(recovered, q);
    }

    #[test]
    fn unmask_requires_complete_pool() {
        assert!(matches!(
            unmask_aggregate(&[QMatrix::zeros(1, 1)], false),
            Err(Error::IncompletePool)
        ));
        assert!(unmask_aggregate(&[], true).is_err());
    }

    #[test]
    fn unmask_recovers_modular_sum_of_plaintexts() {
        let pool = pool_of(2, 0);
        let t = tag(6, 2, 2);
        let plain: Vec<QMatrix> = vec![
            QMatrix::from_vec(2, 2, vec![1, 2, 3, 4]),
            QMatrix::from_vec(2, 2, vec![100, 200, 300, u32::MAX]),
        ];
        let msgs: Vec<QMatrix> = pool
            .members()
            .iter()
            .zip(&plain)
            .map(|(&m, q)| mask_tensor(q, &self_noise(m, &pool, &t).unwrap()).unwrap())
            .collect();
        let got = unmask_aggregate(&msgs, true).unwrap();
        let want = plain[0].wrapping_add(&plain[1]).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn rotation_requires_increasing_epoch() {
        let pool = pool_of(3, 1);
        let res = pool.rotate_epoch(1, |p| gen_keypair(&mut keypair_rng(5, p, 2)));
        assert!(res.is_err());
    }

    #[test]
    fn rotation_changes_streams_and_preserves_cancellation() {
        let pool = pool_of(3, 0);
        let rotated = pool
            .rotate_epoch(1, |p| gen_keypair(&mut keypair_rng(99, p, 1)))
            .unwrap();
        let u = ParticipantId(1);
        let before = self_noise(u, &pool, &tag(0, 2, 2)).unwrap();
        let after_tag = NoiseTag::new(1, 0, Phase::ForwardEmbedding, 2, 2);
        let after = self_noise(u, &rotated, &after_tag).unwrap();
        assert_ne!(before, after);

        let mut acc = QMatrix::zeros(2, 2);
        for &m in rotated.members() {
            acc = acc.wrapping_add(&self_noise(m, &rotated, &after_tag).unwrap()).unwrap();
        }
        assert!(acc.data.iter().all(|&w| w == 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn masked_sums_equal_plain_sums(
            n_members in 2u32..6,
            rows in 1usize..6,
            cols in 1usize..5,
            round in 0u64..1000,
            seed in 0u64..u64::MAX,
        ) {
            use rand::Rng;
            let pool = pool_of(n_members, 0);
            let t = tag(round, rows, cols);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let plain: Vec<QMatrix> = (0..n_members)
                .map(|_| QMatrix {
                    rows,
                    cols,
                    data: (0..rows * cols).map(|_| rng.gen()).collect(),
                })
                .collect();
            let msgs: Vec<QMatrix> = pool
                .members()
                .iter()
                .zip(&plain)
                .map(|(&m, q)| {
                    mask_tensor(q, &self_noise(m, &pool, &t).unwrap()).unwrap()
                })
                .collect();
            let got = unmask_aggregate(&msgs, true).unwrap();
            let mut want = QMatrix::zeros(rows, cols);
            for q in &plain {
                want = want.wrapping_add(q).unwrap();
            }
            prop_assert_eq!(got, want);
        }
    }
}
