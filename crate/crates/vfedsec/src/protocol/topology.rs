//! Deployment topology: group membership, feature columns, embedding
//! segment widths, and per-client sample shards, with the ring-headroom
//! validation that keeps aggregated sums decodable.

use crate::datahub::Partitioned;
use crate::qcode::QConfig;
use crate::secure_layer::ParticipantId;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// The server's distinguished non-participant id, used only for transport
/// key agreement; it never joins a noise pool.
pub const SERVER_ID: ParticipantId = ParticipantId(u32::MAX);

/// One feature group: its clients, its expanded feature columns, its
/// embedding segment width, and the owner of every sample row.
#[derive(Debug, Clone)]
pub struct GroupTopo {
    pub clients: Vec<ParticipantId>,
    pub cols: Vec<usize>,
    pub width: usize,
    /// Owning client (index into `clients`) per table row.
    pub row_owner: Vec<u32>,
}

impl GroupTopo {
    pub fn k(&self) -> u32 {
        self.clients.len() as u32
    }
}

/// The full deployment: active party feature columns plus the groups.
#[derive(Debug, Clone)]
pub struct Topology {
    pub active_cols: Vec<usize>,
    pub groups: Vec<GroupTopo>,
    pub n_rows: usize,
}

impl Topology {
    /// Builds participant ids (active is 0, clients numbered from 1 in
    /// group order) and validates shard coverage plus ring headroom.
    pub fn build(
        parted: &Partitioned,
        seg_widths: &[usize],
        n_rows: usize,
        q_embed: &QConfig,
        q_update: &QConfig,
    ) -> Result<Topology> {
        if parted.groups.len() != seg_widths.len() {
            return Err(Error::config("model", "one segment width per group is required"));
        }
        let mut groups = Vec::with_capacity(parted.groups.len());
        let mut next_id = 1u32;
        for (g, pg) in parted.groups.iter().enumerate() {
            let k = pg.shards.len();
            let clients: Vec<ParticipantId> =
                (0..k).map(|_| { let id = ParticipantId(next_id); next_id += 1; id }).collect();

            let mut row_owner = vec![u32::MAX; n_rows];
            for (c, shard) in pg.shards.iter().enumerate() {
                for &r in shard {
                    if r >= n_rows {
                        return Err(Error::Data(format!("shard row {} out of range", r)));
                    }
                    if row_owner[r] != u32::MAX {
                        return Err(Error::Data(format!(
                            "row {} owned by two clients in group {}",
                            r,
                            g + 1
                        )));
                    }
                    row_owner[r] = c as u32;
                }
            }
            if row_owner.iter().any(|&o| o == u32::MAX) {
                return Err(Error::Data(format!("group {} shards do not cover all rows", g + 1)));
            }
            groups.push(GroupTopo { clients, cols: pg.cols.clone(), width: seg_widths[g], row_owner });
        }

        let topo = Topology { active_cols: parted.active_cols.clone(), groups, n_rows };
        // Forward sums take one tensor per group client plus the active
        // party's segment; backward sums take one per group client.
        q_embed.validate_summands(topo.max_forward_summands())?;
        q_update.validate_summands(topo.max_backward_summands().max(1))?;
        Ok(topo)
    }

    pub fn h_total(&self) -> usize {
        self.groups.iter().map(|g| g.width).sum()
    }

    pub fn seg_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.groups.len());
        let mut acc = 0;
        for g in &self.groups {
            offs.push(acc);
            acc += g.width;
        }
        offs
    }

    pub fn max_forward_summands(&self) -> u32 {
        self.groups.iter().map(|g| g.k() + 1).max().unwrap_or(1)
    }

    pub fn max_backward_summands(&self) -> u32 {
        self.groups.iter().map(|g| g.k()).max().unwrap_or(1)
    }

    pub fn passive_clients(&self) -> Vec<ParticipantId> {
        self.groups.iter().flat_map(|g| g.clients.iter().copied()).collect()
    }

    /// Group index of each passive client.
    pub fn client_groups(&self) -> BTreeMap<ParticipantId, usize> {
        let mut map = BTreeMap::new();
        for (g, grp) in self.groups.iter().enumerate() {
            for &c in &grp.clients {
                map.insert(c, g);
            }
        }
        map
    }

    /// Groups that lose at least one member to the dropped set.
    pub fn dropped_groups(
        &self,
        dropped: &std::collections::BTreeSet<ParticipantId>,
    ) -> Vec<bool> {
        self.groups
            .iter()
            .map(|g| g.clients.iter().any(|c| dropped.contains(c)))
            .collect()
    }
}

/// One training round's mini-batch: the selected table rows in batch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub round: u64,
    /// Table row index per batch position.
    pub rows: Vec<usize>,
    /// Provenance sample id per batch position.
    pub ids: Vec<u64>,
}

impl BatchPlan {
    /// The (sample id, batch row) pairs a given client owns.
    pub fn assignment_for(&self, group: &GroupTopo, client_idx: usize) -> Vec<(u64, u32)> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| group.row_owner[r] == client_idx as u32)
            .map(|(b, _)| (self.ids[b], b as u32))
            .collect()
    }
}

/// Draws `b` distinct rows uniformly without replacement from `candidates`.
pub fn select_batch(
    round: u64,
    candidates: &[usize],
    sample_ids: &[u64],
    b: usize,
    rng: &mut impl rand::Rng,
) -> Result<BatchPlan> {
    if b > candidates.len() {
        return Err(Error::Protocol(format!(
            "batch size {} exceeds the {} available samples",
            b,
            candidates.len()
        )));
    }
    let picked = rand::seq::index::sample(rng, candidates.len(), b);
    let rows: Vec<usize> = picked.iter().map(|i| candidates[i]).collect();
    let ids = rows.iter().map(|&r| sample_ids[r]).collect();
    Ok(BatchPlan { round, rows, ids })
}
