//! The round state machine: batch selection over sealed id channels, masked
//! client/active forward passes, server aggregation with dropout-aware
//! segment discard, top-model training, gradient fan-out, masked update
//! aggregation, and bottom-parameter redistribution.
//!
//! Every participant is a logical actor; interaction happens exclusively
//! through the message bus in a deterministic order (round, phase,
//! participant id), so a fixed master seed reproduces a run bit for bit.

use super::messages::{
    decode_labels, decode_params, decode_real, encode_ids_padded, encode_labels, encode_params,
    encode_pubkey, encode_real, Bus, MsgKind,
};
use super::topology::{select_batch, BatchPlan, Topology, SERVER_ID};
use crate::datahub::{Partitioned, Table};
use crate::neuralnet::{loss_and_grad, metric_accuracy, metric_auc, ModelDims, SplitModel, Task};
use crate::qcode::{dequantize_sum, quantize_matrix, QConfig, QMatrix, RealMatrix};
use crate::secure_layer::{
    self, channel, gen_keypair, keypair_rng, mask_tensor, self_noise_among,
    unmask_aggregate, KeyPair, NoiseTag, PairPool, ParticipantId, Phase, SharedKey, ACTIVE_ID,
};
use crate::simharness::ledger::{OverheadLedger, OverheadTag, Party, RunPhase};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

/// Engine knobs; everything downstream of these is deterministic.
#[derive(Debug, Clone)]
pub struct EngineParams {
    pub batch: usize,
    pub lr: f64,
    /// Key rotation interval in training rounds.
    pub rotate_every: u64,
    pub q_embed: QConfig,
    pub q_update: QConfig,
    /// With the secure layer off, real-valued payloads of the same tensor
    /// shapes travel in the clear and no keys exist.
    pub secure: bool,
    pub master_seed: u64,
    pub task: Task,
    /// Capture the server-side embedding each round (test instrumentation).
    pub trace_embeddings: bool,
}

/// Per-round observable output.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub round: u64,
    pub loss: f64,
    pub dropped_groups: Vec<usize>,
    pub presence: Vec<bool>,
    pub embedding: Option<RealMatrix>,
}

struct ClientCtx {
    /// Owned (batch position, table row) pairs in batch order.
    owned: Vec<(usize, usize)>,
    cache: crate::neuralnet::MlpCache,
}

pub struct Engine {
    pub params: EngineParams,
    topo: Topology,
    table: Table,
    model: SplitModel,
    pools: Vec<PairPool>,
    transport: BTreeMap<ParticipantId, SharedKey>,
    epoch: u64,
    /// Monotone stream counter; each masked exchange takes a fresh value.
    seq: u64,
    seal_counters: BTreeMap<(ParticipantId, ParticipantId), u64>,
    client_groups: BTreeMap<ParticipantId, usize>,
    id_to_row: BTreeMap<u64, usize>,
    pub bus: Bus,
}

fn party_of(p: ParticipantId) -> Party {
    if p == SERVER_ID {
        Party::Server
    } else if p == ACTIVE_ID {
        Party::Active
    } else {
        Party::Client(p.0)
    }
}

fn gather(m: &RealMatrix, rows: &[usize], cols: &[usize]) -> RealMatrix {
    RealMatrix::from_fn(rows.len(), cols.len(), |i, j| m.get(rows[i], cols[j]))
}

fn stream_rng(master: u64, label: &[u8], a: u64, b: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"vfedsec-stream");
    h.update(master.to_le_bytes());
    h.update(label);
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(seed)
}

impl Engine {
    pub fn new(
        table: Table,
        parted: &Partitioned,
        dims: &ModelDims,
        params: EngineParams,
    ) -> Result<Engine> {
        if params.batch == 0 {
            return Err(Error::config("train.batch", "batch size must be positive"));
        }
        if params.rotate_every == 0 {
            return Err(Error::config("train.rotate_every", "rotation interval must be positive"));
        }
        let topo = Topology::build(
            parted,
            &dims.seg_widths,
            table.n_rows(),
            &params.q_embed,
            &params.q_update,
        )?;
        if dims.active_in != topo.active_cols.len() {
            return Err(Error::config(
                "model.active_in",
                format!("expected {} input columns", topo.active_cols.len()),
            ));
        }
        for (g, grp) in topo.groups.iter().enumerate() {
            if dims.group_ins[g] != grp.cols.len() {
                return Err(Error::config(
                    format!("model.group{}.in", g + 1),
                    format!("expected {} input columns", grp.cols.len()),
                ));
            }
        }
        let out_ok = match params.task {
            Task::Binary => dims.out_dim == 1,
            Task::Multiclass(n) => dims.out_dim == n,
        };
        if !out_ok {
            return Err(Error::config("model.out", "output width must match the task"));
        }
        let mut init_rng = stream_rng(params.master_seed, b"init", 0, 0);
        let model = SplitModel::new_seeded(dims, &mut init_rng)?;
        let client_groups = topo.client_groups();
        let id_to_row = table.sample_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(Engine {
            params,
            topo,
            table,
            model,
            pools: Vec::new(),
            transport: BTreeMap::new(),
            epoch: 0,
            seq: 0,
            seal_counters: BTreeMap::new(),
            client_groups,
            id_to_row,
            bus: Bus::default(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    pub fn model(&self) -> &SplitModel {
        &self.model
    }

    pub fn pools(&self) -> &[PairPool] {
        &self.pools
    }

    pub fn current_epoch(&self) -> u64 {
        self.epoch
    }

    /// Serialized model state, bitwise comparable across rounds.
    pub fn checkpoint(&self) -> Vec<u8> {
        self.model.encode()
    }

    /// Restores model parameters from a checkpoint of the same shape.
    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let model = SplitModel::decode(bytes)?;
        if model.seg_widths != self.model.seg_widths {
            return Err(Error::Protocol("checkpoint widths do not match the topology".into()));
        }
        let shape = |m: &SplitModel| -> Vec<(usize, usize, bool)> {
            std::iter::once(&m.bottom_active)
                .chain(&m.bottoms)
                .chain(std::iter::once(&m.top.stack))
                .flat_map(|mlp| {
                    mlp.layers.iter().map(|l| (l.in_dim(), l.out_dim(), l.bias.is_some()))
                })
                .collect()
        };
        if shape(&model) != shape(&self.model) {
            return Err(Error::Protocol("checkpoint layer shapes do not match the model".into()));
        }
        self.model = model;
        Ok(())
    }

    /// Epoch-0 key setup; a no-op without the secure layer.
    pub fn setup(&mut self, ledger: &mut OverheadLedger) -> Result<()> {
        if self.params.secure {
            self.build_epoch(0, ledger, RunPhase::Train)?;
        }
        Ok(())
    }

    /// The mini-batch the active party selects for a round, derived from a
    /// dedicated per-round stream so every run mode sees the same batches.
    pub fn select_plan(&self, round: u64) -> Result<BatchPlan> {
        let mut rng = stream_rng(self.params.master_seed, b"batch", round, 0);
        select_batch(
            round,
            &self.table.train_rows,
            &self.table.sample_ids,
            self.params.batch,
            &mut rng,
        )
    }

    fn rounding_rng(&self, p: ParticipantId, seq: u64, phase: Phase) -> ChaCha20Rng {
        let pb = match phase {
            Phase::ForwardEmbedding => 0u64,
            Phase::BackwardUpdate => 1,
        };
        stream_rng(self.params.master_seed, b"srand", (p.0 as u64) << 2 | pb, seq)
    }

    fn all_participants(&self) -> Vec<ParticipantId> {
        let mut v = vec![ACTIVE_ID];
        v.extend(self.topo.passive_clients());
        v
    }

    /// Regenerates every keypair, re-announces public values, and rebuilds
    /// the per-group pools and server transport secrets.
    fn build_epoch(
        &mut self,
        epoch: u64,
        ledger: &mut OverheadLedger,
        phase: RunPhase,
    ) -> Result<()> {
        let master = self.params.master_seed;
        let participants = self.all_participants();

        let mut keypairs: BTreeMap<ParticipantId, KeyPair> = BTreeMap::new();
        for &p in participants.iter().chain(std::iter::once(&SERVER_ID)) {
            let kp = ledger.time(party_of(p), phase, OverheadTag::Keygen, || {
                gen_keypair(&mut keypair_rng(master, p, epoch))
            });
            keypairs.insert(p, kp);
        }

        // Announcements travel through the server: one up per participant,
        // then the server forwards each member the keys its pools need plus
        // the server's own transport key.
        for &p in &participants {
            let payload = encode_pubkey(p.0, epoch, &keypairs[&p].public_bytes());
            self.bus.send(
                ledger,
                phase,
                MsgKind::PublicKeyAnnouncement,
                party_of(p),
                Party::Server,
                payload.clone(),
                OverheadTag::PubkeyExchange,
                (payload.len() + super::messages::FRAME_OVERHEAD) as u64,
            );
        }
        for &p in &participants {
            let mut needed: Vec<ParticipantId> = if p == ACTIVE_ID {
                self.topo.passive_clients()
            } else {
                let g = self.client_groups[&p];
                let mut m = vec![ACTIVE_ID];
                m.extend(self.topo.groups[g].clients.iter().copied().filter(|&c| c != p));
                m
            };
            needed.push(SERVER_ID);
            for n in needed {
                let payload = encode_pubkey(n.0, epoch, &keypairs[&n].public_bytes());
                self.bus.send(
                    ledger,
                    phase,
                    MsgKind::PublicKeyAnnouncement,
                    Party::Server,
                    party_of(p),
                    payload.clone(),
                    OverheadTag::PubkeyExchange,
                    (payload.len() + super::messages::FRAME_OVERHEAD) as u64,
                );
            }
        }

        // Each participant derives its own pairwise secrets; the timed work
        // below is what a real member would perform locally.
        for &p in &participants {
            let peers: Vec<ParticipantId> = if p == ACTIVE_ID {
                let mut v = self.topo.passive_clients();
                v.push(SERVER_ID);
                v
            } else {
                let g = self.client_groups[&p];
                let mut v = vec![ACTIVE_ID];
                v.extend(self.topo.groups[g].clients.iter().copied().filter(|&c| c != p));
                v.push(SERVER_ID);
                v
            };
            ledger.time(party_of(p), phase, OverheadTag::Keygen, || {
                for peer in peers {
                    let _ = secure_layer::derive_shared_secret(
                        &keypairs[&p],
                        &keypairs[&peer].public_bytes(),
                    );
                }
            });
        }

        let mut pools = Vec::with_capacity(self.topo.groups.len());
        for (g, grp) in self.topo.groups.iter().enumerate() {
            let mut members: BTreeMap<ParticipantId, KeyPair> = BTreeMap::new();
            members.insert(ACTIVE_ID, keypairs[&ACTIVE_ID].clone());
            for &c in &grp.clients {
                members.insert(c, keypairs[&c].clone());
            }
            pools.push(PairPool::from_keypairs(g as u32, &members, epoch)?);
        }
        let mut transport = BTreeMap::new();
        for &p in &participants {
            let key = ledger.time(Party::Server, phase, OverheadTag::Keygen, || {
                secure_layer::derive_shared_secret(&keypairs[&SERVER_ID], &keypairs[&p].public_bytes())
            })?;
            transport.insert(p, key);
        }

        self.pools = pools;
        self.transport = transport;
        self.epoch = epoch;
        Ok(())
    }

    fn rotate_if_due(&mut self, round: u64, ledger: &mut OverheadLedger) -> Result<()> {
        if !self.params.secure {
            return Ok(());
        }
        let target = round / self.params.rotate_every;
        if self.pools.is_empty() || target > self.epoch {
            self.build_epoch(target, ledger, RunPhase::Train)?;
        }
        Ok(())
    }

    /// Channel key between two endpoints: server links use the transport
    /// secret, active-to-client links use the client's group pool secret.
    fn channel_key(&self, a: ParticipantId, b: ParticipantId) -> Result<SharedKey> {
        if a == SERVER_ID || b == SERVER_ID {
            let other = if a == SERVER_ID { b } else { a };
            return self
                .transport
                .get(&other)
                .copied()
                .ok_or_else(|| Error::Protocol(format!("no transport key for {}", other)));
        }
        let (c0, client) = if a == ACTIVE_ID { (a, b) } else { (b, a) };
        if c0 != ACTIVE_ID {
            return Err(Error::Protocol("pair channels exist only between the active party and clients".into()));
        }
        let g = *self
            .client_groups
            .get(&client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {}", client)))?;
        self.pools[g].secret(ACTIVE_ID, client)
    }

    fn next_counter(&mut self, from: ParticipantId, to: ParticipantId) -> u64 {
        let c = self.seal_counters.entry((from, to)).or_insert(0);
        let v = *c;
        *c += 1;
        v
    }

    /// Sends a payload, sealing it on the point-to-point channel when the
    /// secure layer is on. Returns the bytes the receiver decodes.
    #[allow(clippy::too_many_arguments)]
    fn send_channel(
        &mut self,
        ledger: &mut OverheadLedger,
        phase: RunPhase,
        kind: MsgKind,
        from: ParticipantId,
        to: ParticipantId,
        payload: Vec<u8>,
    ) -> Result<Vec<u8>> {
        if !self.params.secure {
            return Ok(self.bus.send(
                ledger,
                phase,
                kind,
                party_of(from),
                party_of(to),
                payload,
                OverheadTag::BaselinePayload,
                0,
            ));
        }
        let key = self.channel_key(from, to)?;
        let ctr = self.next_counter(from, to);
        let sealed = ledger.time(party_of(from), phase, OverheadTag::SealIds, || {
            channel::seal_bytes(&key, ctr, &payload)
        });
        let delivered = self.bus.send(
            ledger,
            phase,
            kind,
            party_of(from),
            party_of(to),
            sealed,
            OverheadTag::SealIds,
            channel::SEAL_OVERHEAD as u64,
        );
        ledger.time(party_of(to), phase, OverheadTag::SealIds, || {
            channel::open_bytes(&key, &delivered)
        })
    }

    /// Distributes the batch plan: the active party seals one fixed-length
    /// assignment per passive client, ships the bundle to the server, and
    /// the server forwards each ciphertext to its (online) owner. Returns
    /// each online client's opened (batch position, table row) list.
    fn distribute_assignments(
        &mut self,
        plan: &BatchPlan,
        online: &BTreeSet<ParticipantId>,
        phase: RunPhase,
        ledger: &mut OverheadLedger,
    ) -> Result<BTreeMap<ParticipantId, Vec<(usize, usize)>>> {
        let b = plan.rows.len();
        let groups_clients: Vec<(usize, Vec<ParticipantId>)> = self
            .topo
            .groups
            .iter()
            .enumerate()
            .map(|(g, grp)| (g, grp.clients.clone()))
            .collect();

        // Per-client sealed (or plain) assignment bodies, padded to B rows.
        let mut blobs: Vec<(ParticipantId, Vec<u8>)> = Vec::new();
        for (g, clients) in &groups_clients {
            for (ci, &c) in clients.iter().enumerate() {
                let ids = plan.assignment_for(&self.topo.groups[*g], ci);
                let body = encode_ids_padded(&ids, b);
                let blob = if self.params.secure {
                    let key = self.channel_key(ACTIVE_ID, c)?;
                    let ctr = self.next_counter(ACTIVE_ID, c);
                    ledger.time(Party::Active, phase, OverheadTag::SealIds, || {
                        channel::seal_bytes(&key, ctr, &body)
                    })
                } else {
                    body
                };
                blobs.push((c, blob));
            }
        }

        // Bundle up to the server.
        let mut bundle = Vec::new();
        bundle.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (c, blob) in &blobs {
            bundle.extend_from_slice(&c.0.to_le_bytes());
            bundle.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            bundle.extend_from_slice(blob);
        }
        let seal_overhead = if self.params.secure {
            (blobs.len() * channel::SEAL_OVERHEAD) as u64
        } else {
            0
        };
        self.bus.send(
            ledger,
            phase,
            MsgKind::BatchAssignment,
            Party::Active,
            Party::Server,
            bundle,
            OverheadTag::SealIds,
            seal_overhead,
        );

        // Server fans each ciphertext out to its owner.
        let mut opened = BTreeMap::new();
        for (c, blob) in blobs {
            if !online.contains(&c) {
                continue;
            }
            let per_msg_overhead =
                if self.params.secure { channel::SEAL_OVERHEAD as u64 } else { 0 };
            let delivered = self.bus.send(
                ledger,
                phase,
                MsgKind::BatchAssignment,
                Party::Server,
                party_of(c),
                blob,
                OverheadTag::SealIds,
                per_msg_overhead,
            );
            let body = if self.params.secure {
                let key = self.channel_key(ACTIVE_ID, c)?;
                ledger.time(party_of(c), phase, OverheadTag::SealIds, || {
                    channel::open_bytes(&key, &delivered)
                })?
            } else {
                delivered
            };
            let ids = channel::decode_ids(&body)?;
            let mut pairs = Vec::with_capacity(ids.len());
            for (sample_id, batch_row) in ids {
                if batch_row as usize >= b {
                    return Err(Error::Protocol(format!(
                        "batch row {} out of range for batch size {}",
                        batch_row, b
                    )));
                }
                let row = *self.id_to_row.get(&sample_id).ok_or_else(|| {
                    Error::Protocol(format!("unknown sample id {}", sample_id))
                })?;
                pairs.push((batch_row as usize, row));
            }
            opened.insert(c, pairs);
        }
        Ok(opened)
    }

    /// One complete forward pass over the given rows, returning the
    /// server-side padded embedding plus the caches needed for backward.
    #[allow(clippy::type_complexity, clippy::too_many_arguments)]
    fn forward_pass(
        &mut self,
        rows: &[usize],
        tag_seq: u64,
        dropped_flags: &[bool],
        online: &BTreeSet<ParticipantId>,
        training: bool,
        phase: RunPhase,
        ledger: &mut OverheadLedger,
    ) -> Result<(
        RealMatrix,
        Vec<bool>,
        crate::neuralnet::MlpCache,
        BTreeMap<ParticipantId, ClientCtx>,
    )> {
        let b = rows.len();
        let h_total = self.topo.h_total();
        let offs = self.topo.seg_offsets();
        let plan = BatchPlan {
            round: tag_seq,
            rows: rows.to_vec(),
            ids: rows.iter().map(|&r| self.table.sample_ids[r]).collect(),
        };
        let assignments = self.distribute_assignments(&plan, online, phase, ledger)?;

        // Active party: full-width bottom output, one masked segment per
        // group pool.
        let x0 = gather(&self.table.features, rows, &self.topo.active_cols);
        let (h0, cache0) = ledger.time(Party::Active, phase, OverheadTag::BaselinePayload, || {
            self.model.bottom_active.forward_cached(&x0)
        });

        let active_payload = if self.params.secure {
            let mut rng = self.rounding_rng(ACTIVE_ID, tag_seq, Phase::ForwardEmbedding);
            let q0 = ledger.time(Party::Active, phase, OverheadTag::Quantize, || {
                quantize_matrix(&h0, &self.params.q_embed, &mut rng)
            })?;
            let mut masked = QMatrix::zeros(b, h_total);
            for (g, grp) in self.topo.groups.iter().enumerate() {
                let tag = NoiseTag::new(self.epoch, tag_seq, Phase::ForwardEmbedding, b, grp.width);
                let noise = ledger.time(Party::Active, phase, OverheadTag::MaskCompute, || {
                    secure_layer::self_noise(ACTIVE_ID, &self.pools[g], &tag)
                })?;
                for i in 0..b {
                    for j in 0..grp.width {
                        let q = q0.data[i * h_total + offs[g] + j];
                        let n = noise.data[i * grp.width + j];
                        masked.data[i * h_total + offs[g] + j] = q.wrapping_add(n);
                    }
                }
            }
            masked.encode()
        } else {
            encode_real(&h0)
        };
        let delivered = self.bus.send(
            ledger,
            phase,
            MsgKind::MaskedEmbedding,
            Party::Active,
            Party::Server,
            active_payload,
            OverheadTag::BaselinePayload,
            0,
        );
        let active_q = if self.params.secure { Some(QMatrix::decode(&delivered)?) } else { None };
        let active_real = if self.params.secure { None } else { Some(decode_real(&delivered)?) };

        // Group clients: compute on owned rows, expand with zeros, quantize
        // every row, mask with the pool noise, send.
        let mut client_ctx: BTreeMap<ParticipantId, ClientCtx> = BTreeMap::new();
        let mut group_msgs: Vec<Vec<QMatrix>> = vec![Vec::new(); self.topo.groups.len()];
        let mut group_real: Vec<Vec<RealMatrix>> = vec![Vec::new(); self.topo.groups.len()];
        for (g, grp) in self.topo.groups.iter().enumerate() {
            if dropped_flags[g] {
                continue;
            }
            let width = grp.width;
            for &c in &grp.clients {
                let owned = assignments.get(&c).cloned().unwrap_or_default();
                let table_rows: Vec<usize> = owned.iter().map(|&(_, r)| r).collect();
                let x_own = gather(&self.table.features, &table_rows, &grp.cols);
                let (h_own, cache) = ledger
                    .time(party_of(c), phase, OverheadTag::BaselinePayload, || {
                        self.model.bottoms[g].forward_cached(&x_own)
                    });

                let mut expanded = RealMatrix::zeros(b, width);
                for (k, &(bpos, _)) in owned.iter().enumerate() {
                    for j in 0..width {
                        expanded.set(bpos, j, h_own.get(k, j));
                    }
                }

                let payload = if self.params.secure {
                    let mut rng = self.rounding_rng(c, tag_seq, Phase::ForwardEmbedding);
                    let q = ledger.time(party_of(c), phase, OverheadTag::Quantize, || {
                        quantize_matrix(&expanded, &self.params.q_embed, &mut rng)
                    })?;
                    let tag = NoiseTag::new(self.epoch, tag_seq, Phase::ForwardEmbedding, b, width);
                    let noise = ledger.time(party_of(c), phase, OverheadTag::MaskCompute, || {
                        secure_layer::self_noise(c, &self.pools[g], &tag)
                    })?;
                    mask_tensor(&q, &noise)?.encode()
                } else {
                    encode_real(&expanded)
                };
                let delivered = self.bus.send(
                    ledger,
                    phase,
                    MsgKind::MaskedEmbedding,
                    party_of(c),
                    Party::Server,
                    payload,
                    OverheadTag::BaselinePayload,
                    0,
                );
                if self.params.secure {
                    group_msgs[g].push(QMatrix::decode(&delivered)?);
                } else {
                    group_real[g].push(decode_real(&delivered)?);
                }
                client_ctx.insert(c, ClientCtx { owned, cache });
            }
        }

        // Server: per surviving group, cancel the masks by summation and
        // decode the (clients + active segment) sum.
        let mut h_full = RealMatrix::zeros(b, h_total);
        for (g, grp) in self.topo.groups.iter().enumerate() {
            if dropped_flags[g] {
                continue;
            }
            let width = grp.width;
            let seg = if self.params.secure {
                let aq = active_q.as_ref().expect("secure mode has a quantized active message");
                let mut active_seg = QMatrix::zeros(b, width);
                for i in 0..b {
                    for j in 0..width {
                        active_seg.data[i * width + j] = aq.data[i * h_total + offs[g] + j];
                    }
                }
                if group_msgs[g].len() != grp.clients.len() {
                    return Err(Error::Protocol(format!(
                        "group {} forward set incomplete: {} of {} messages",
                        g + 1,
                        group_msgs[g].len(),
                        grp.clients.len()
                    )));
                }
                let mut msgs = vec![active_seg];
                msgs.extend(group_msgs[g].iter().cloned());
                let summed = ledger.time(Party::Server, phase, OverheadTag::Unmask, || {
                    unmask_aggregate(&msgs, true)
                })?;
                ledger.time(Party::Server, phase, OverheadTag::Quantize, || {
                    dequantize_sum(&summed, grp.k() + 1, &self.params.q_embed)
                })?
            } else {
                let ar = active_real.as_ref().expect("plain mode has a real active message");
                let mut seg = ar.slice_cols(offs[g], width);
                for m in &group_real[g] {
                    seg = seg.add(m);
                }
                seg
            };
            h_full.paste_cols(offs[g], &seg);
        }

        let presence: Vec<bool> = self
            .topo
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, grp)| std::iter::repeat(!dropped_flags[g]).take(grp.width))
            .collect();
        let _ = training;
        Ok((h_full, presence, cache0, client_ctx))
    }

    /// One training round under the pad policy: dropped clients mark their
    /// whole group absent for the round; surviving segments train normally.
    pub fn train_round(
        &mut self,
        round: u64,
        dropped: &BTreeSet<ParticipantId>,
        ledger: &mut OverheadLedger,
    ) -> Result<RoundTrace> {
        self.rotate_if_due(round, ledger)?;
        let phase = RunPhase::Train;
        let dropped_flags = self.topo.dropped_groups(dropped);
        if dropped_flags.iter().all(|&d| d) {
            return Err(Error::NoSurvivingSegments);
        }
        let plan = self.select_plan(round)?;
        let tag_seq = self.seq;
        self.seq += 1;

        let online: BTreeSet<ParticipantId> = self
            .topo
            .passive_clients()
            .into_iter()
            .filter(|c| !dropped.contains(c))
            .collect();

        // Labels for the selected rows go to the server for the loss.
        let labels_payload =
            encode_labels(&plan.rows.iter().map(|&r| self.table.labels[r]).collect::<Vec<_>>());
        let delivered = self.send_channel(
            ledger,
            phase,
            MsgKind::LabelVector,
            ACTIVE_ID,
            SERVER_ID,
            labels_payload,
        )?;
        let labels = decode_labels(&delivered)?;

        let (h_full, presence, cache0, client_ctx) = self.forward_pass(
            &plan.rows,
            tag_seq,
            &dropped_flags,
            &online,
            true,
            phase,
            ledger,
        )?;

        // Top model: batch normalization with absent columns zeroed, then
        // the dense head.
        let model = &mut self.model;
        let task = self.params.task;
        let (bn_cache, stack_cache, loss, d_logits) =
            ledger.time(Party::Server, phase, OverheadTag::BaselinePayload, || {
                let (bn_out, bn_cache) = model.top.bn.forward(&h_full, &presence, true)?;
                let (logits, stack_cache) = model.top.stack.forward_cached(&bn_out);
                let (loss, d_logits) = loss_and_grad(&logits, &labels, task)?;
                Ok::<_, Error>((bn_cache, stack_cache, loss, d_logits))
            })?;

        // Server backward: update the head, fan the embedding gradient out.
        let lr = self.params.lr;
        let model = &mut self.model;
        let d_h = ledger.time(Party::Server, phase, OverheadTag::BaselinePayload, || {
            let (d_bn_out, stack_grads) = model.top.stack.backward(&stack_cache, &d_logits);
            let (d_h, d_gamma, d_beta) = model.top.bn.backward(&bn_cache, &d_bn_out);
            model.top.stack.apply_sgd(&stack_grads, lr);
            model.top.bn.apply_sgd(&d_gamma, &d_beta, lr);
            d_h
        });

        let offs = self.topo.seg_offsets();

        // Active party gets the full-width gradient (zeros on dropped
        // segments) and updates its bottom locally.
        let delivered = self.send_channel(
            ledger,
            phase,
            MsgKind::GradientSegment,
            SERVER_ID,
            ACTIVE_ID,
            encode_real(&d_h),
        )?;
        let d_h_active = decode_real(&delivered)?;
        let model = &mut self.model;
        ledger.time(Party::Active, phase, OverheadTag::BaselinePayload, || {
            let (_, grads0) = model.bottom_active.backward(&cache0, &d_h_active);
            model.bottom_active.apply_sgd(&grads0, lr);
        });

        // Surviving groups: gradient segments to every member, then local
        // application (singleton) or masked update aggregation.
        for g in 0..self.topo.groups.len() {
            if dropped_flags[g] {
                continue;
            }
            let grp = self.topo.groups[g].clone();
            let d_seg = d_h.slice_cols(offs[g], grp.width);
            let mut member_grads: Vec<(ParticipantId, Vec<f64>)> = Vec::new();
            for &c in &grp.clients {
                let delivered = self.send_channel(
                    ledger,
                    phase,
                    MsgKind::GradientSegment,
                    SERVER_ID,
                    c,
                    encode_real(&d_seg),
                )?;
                let d_seg_c = decode_real(&delivered)?;
                let ctx = client_ctx
                    .get(&c)
                    .ok_or_else(|| Error::Protocol(format!("missing forward cache for {}", c)))?;
                // Rows this client did not produce carry zero padding, not
                // data; their gradient is discarded client-side.
                let d_own = RealMatrix::from_fn(ctx.owned.len(), grp.width, |k, j| {
                    d_seg_c.get(ctx.owned[k].0, j)
                });
                let bottom = &self.model.bottoms[g];
                let flat = ledger.time(party_of(c), phase, OverheadTag::BaselinePayload, || {
                    let (_, grads) = bottom.backward(&ctx.cache, &d_own);
                    bottom.flatten_grads(&grads)
                });
                member_grads.push((c, flat));
            }

            if grp.clients.len() == 1 {
                // Singleton group: the lone client applies its step locally
                // and no update message exists.
                let (c, flat) = &member_grads[0];
                let delta: Vec<f64> = flat.iter().map(|gv| -self.params.lr * gv).collect();
                let model = &mut self.model;
                ledger.time(party_of(*c), phase, OverheadTag::BaselinePayload, || {
                    model.bottoms[g].add_params(&delta);
                });
                continue;
            }

            let p_len = self.model.bottoms[g].param_count();
            let mut update_msgs: Vec<QMatrix> = Vec::new();
            let mut plain_sum = vec![0.0; p_len];
            for (c, flat) in &member_grads {
                let delta: Vec<f64> = flat.iter().map(|gv| -self.params.lr * gv).collect();
                let payload = if self.params.secure {
                    let dm = RealMatrix::from_vec(1, p_len, delta);
                    let mut rng = self.rounding_rng(*c, tag_seq, Phase::BackwardUpdate);
                    let q = ledger.time(party_of(*c), phase, OverheadTag::Quantize, || {
                        quantize_matrix(&dm, &self.params.q_update, &mut rng)
                    })?;
                    // Update pools cancel among the group's clients only;
                    // the active party sends no update for this bottom.
                    let tag = NoiseTag::new(self.epoch, tag_seq, Phase::BackwardUpdate, 1, p_len);
                    let noise = ledger.time(party_of(*c), phase, OverheadTag::MaskCompute, || {
                        self_noise_among(*c, &grp.clients, &self.pools[g], &tag)
                    })?;
                    mask_tensor(&q, &noise)?.encode()
                } else {
                    encode_params(&delta)
                };
                let delivered = self.bus.send(
                    ledger,
                    phase,
                    MsgKind::MaskedUpdate,
                    party_of(*c),
                    Party::Server,
                    payload,
                    OverheadTag::BaselinePayload,
                    0,
                );
                if self.params.secure {
                    update_msgs.push(QMatrix::decode(&delivered)?);
                } else {
                    for (acc, v) in plain_sum.iter_mut().zip(decode_params(&delivered)?) {
                        *acc += v;
                    }
                }
            }

            let delta_total: Vec<f64> = if self.params.secure {
                if update_msgs.len() != grp.clients.len() {
                    return Err(Error::Protocol(format!(
                        "group {} update set incomplete",
                        g + 1
                    )));
                }
                let summed = ledger.time(Party::Server, phase, OverheadTag::Unmask, || {
                    unmask_aggregate(&update_msgs, true)
                })?;
                ledger
                    .time(Party::Server, phase, OverheadTag::Quantize, || {
                        dequantize_sum(&summed, grp.k(), &self.params.q_update)
                    })?
                    .data
            } else {
                plain_sum
            };
            let model = &mut self.model;
            ledger.time(Party::Server, phase, OverheadTag::BaselinePayload, || {
                model.bottoms[g].add_params(&delta_total);
            });

            // Redistribute the updated bottom so every member stays in sync.
            let params_payload = encode_params(&self.model.bottoms[g].param_vec());
            for &c in &grp.clients {
                let delivered = self.send_channel(
                    ledger,
                    phase,
                    MsgKind::BottomParams,
                    SERVER_ID,
                    c,
                    params_payload.clone(),
                )?;
                let received = decode_params(&delivered)?;
                // The client replaces its copy; in the simulator all copies
                // alias the group bottom, so receipt must match it exactly.
                debug_assert_eq!(received, self.model.bottoms[g].param_vec());
            }
        }

        let dropped_groups: Vec<usize> = dropped_flags
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(g, _)| g)
            .collect();
        Ok(RoundTrace {
            round,
            loss,
            dropped_groups,
            presence: presence.clone(),
            embedding: self.params.trace_embeddings.then_some(h_full),
        })
    }

    /// Forward-only evaluation over the test split: masking stays on, batch
    /// normalization runs on its running statistics, and nothing is updated.
    /// Binary tasks report AUC, multiclass tasks report accuracy.
    pub fn evaluate(&mut self, ledger: &mut OverheadLedger) -> Result<f64> {
        if self.table.test_rows.is_empty() {
            return Err(Error::Protocol("empty test set".into()));
        }
        if self.params.secure && self.pools.is_empty() {
            self.build_epoch(0, ledger, RunPhase::Test)?;
        }
        let phase = RunPhase::Test;
        let online: BTreeSet<ParticipantId> = self.topo.passive_clients().into_iter().collect();
        let no_drop = vec![false; self.topo.groups.len()];
        let test_rows = self.table.test_rows.clone();

        let mut scores = Vec::with_capacity(test_rows.len());
        let mut preds = Vec::with_capacity(test_rows.len());
        let mut labels = Vec::with_capacity(test_rows.len());
        for chunk in test_rows.chunks(self.params.batch) {
            let tag_seq = self.seq;
            self.seq += 1;
            let (h_full, presence, _, _) =
                self.forward_pass(chunk, tag_seq, &no_drop, &online, false, phase, ledger)?;
            let model = &mut self.model;
            let logits = ledger.time(Party::Server, phase, OverheadTag::BaselinePayload, || {
                let (bn_out, _) = model.top.bn.forward(&h_full, &presence, false)?;
                Ok::<_, Error>(model.top.stack.forward(&bn_out))
            })?;
            for (i, &r) in chunk.iter().enumerate() {
                labels.push(self.table.labels[r]);
                match self.params.task {
                    Task::Binary => scores.push(logits.get(i, 0)),
                    Task::Multiclass(n) => {
                        let mut best = 0usize;
                        for j in 1..n {
                            if logits.get(i, j) > logits.get(i, best) {
                                best = j;
                            }
                        }
                        preds.push(best as u32);
                    }
                }
            }
        }
        match self.params.task {
            Task::Binary => metric_auc(&scores, &labels),
            Task::Multiclass(_) => Ok(metric_accuracy(&preds, &labels)),
        }
    }
}
