//! The split model: one bottom stack per group plus the active party's
//! full-width bottom, and the server-side top (batch normalization followed
//! by a dense stack). Includes the flat binary checkpoint format.

use super::batchnorm::BatchNormLayer;
use super::{DenseLayer, Mlp};
use crate::qcode::RealMatrix;
use crate::{Error, Result};
use rand::Rng;

/// Server-side head: batch normalization at the embedding boundary, then a
/// dense stack down to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TopModel {
    pub bn: BatchNormLayer,
    pub stack: Mlp,
}

/// Width configuration for a whole deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    /// Active party's raw feature width.
    pub active_in: usize,
    /// Hidden widths of the active bottom (may be empty).
    pub active_hidden: Vec<usize>,
    /// Raw feature width per group.
    pub group_ins: Vec<usize>,
    /// Hidden widths shared by every group bottom.
    pub group_hidden: Vec<usize>,
    /// Embedding segment width per group; their sum is the top input width.
    pub seg_widths: Vec<usize>,
    /// Hidden widths of the top stack.
    pub top_hidden: Vec<usize>,
    /// Logit count: 1 for binary, class count otherwise.
    pub out_dim: usize,
}

impl ModelDims {
    pub fn total_width(&self) -> usize {
        self.seg_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_ins.len() != self.seg_widths.len() {
            return Err(Error::config(
                "model",
                "one segment width is required per group",
            ));
        }
        if self.seg_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("model", "segment widths must be positive"));
        }
        if self.out_dim == 0 {
            return Err(Error::config("model", "output width must be positive"));
        }
        Ok(())
    }
}

/// The complete split model with plain-real parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    /// Active party's bottom, biased, mapping its features to the full width.
    pub bottom_active: Mlp,
    /// One unbiased bottom per group; every client in a group holds a copy.
    pub bottoms: Vec<Mlp>,
    pub top: TopModel,
    pub seg_widths: Vec<usize>,
}

impl SplitModel {
    pub fn new_seeded(dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let h = dims.total_width();
        let mut active_dims = vec![dims.active_in];
        active_dims.extend_from_slice(&dims.active_hidden);
        active_dims.push(h);
        let bottom_active = Mlp::new_seeded(&active_dims, true, rng);

        let mut bottoms = Vec::with_capacity(dims.group_ins.len());
        for (&f_in, &width) in dims.group_ins.iter().zip(&dims.seg_widths) {
            let mut d = vec![f_in];
            d.extend_from_slice(&dims.group_hidden);
            d.push(width);
            bottoms.push(Mlp::new_seeded(&d, false, rng));
        }

        let mut top_dims = vec![h];
        top_dims.extend_from_slice(&dims.top_hidden);
        top_dims.push(dims.out_dim);
        let top = TopModel { bn: BatchNormLayer::new(h), stack: Mlp::new_seeded(&top_dims, true, rng) };

        Ok(SplitModel { bottom_active, bottoms, top, seg_widths: dims.seg_widths.clone() })
    }

    pub fn total_width(&self) -> usize {
        self.seg_widths.iter().sum()
    }

    /// Column offset of each group's segment in the full embedding.
    pub fn seg_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.seg_widths.len());
        let mut acc = 0;
        for &w in &self.seg_widths {
            offs.push(acc);
            acc += w;
        }
        offs
    }

    /// Column presence vector given the set of surviving groups.
    pub fn presence_for(&self, dropped_groups: &[bool]) -> Vec<bool> {
        let mut present = Vec::with_capacity(self.total_width());
        for (g, &w) in self.seg_widths.iter().enumerate() {
            present.extend(std::iter::repeat(!dropped_groups[g]).take(w));
        }
        present
    }

    /// Serializes the whole model; see the format notes on [`encode_mlp`].
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"VFS1");
        out.extend_from_slice(&(self.bottoms.len() as u32).to_le_bytes());
        for &w in &self.seg_widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        encode_mlp(&self.bottom_active, &mut out);
        for b in &self.bottoms {
            encode_mlp(b, &mut out);
        }
        encode_bn(&self.top.bn, &mut out);
        encode_mlp(&self.top.stack, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<SplitModel> {
        let mut cur = Cursor { bytes, off: 0 };
        if cur.take(4)? != b"VFS1" {
            return Err(Error::Protocol("bad checkpoint magic".into()));
        }
        let m = cur.u32()? as usize;
        let mut seg_widths = Vec::with_capacity(m);
        for _ in 0..m {
            seg_widths.push(cur.u32()? as usize);
        }
        let bottom_active = decode_mlp(&mut cur)?;
        let mut bottoms = Vec::with_capacity(m);
        for _ in 0..m {
            bottoms.push(decode_mlp(&mut cur)?);
        }
        let bn = decode_bn(&mut cur)?;
        let stack = decode_mlp(&mut cur)?;
        if cur.off != bytes.len() {
            return Err(Error::Protocol("trailing checkpoint bytes".into()));
        }
        Ok(SplitModel { bottom_active, bottoms, top: TopModel { bn, stack }, seg_widths })
    }
}

/// Layer stack layout: layer count, then per layer the dimensions, a bias
/// flag, and the parameters as little-endian 64-bit floats (weights
/// row-major, then bias).
fn encode_mlp(mlp: &Mlp, out: &mut Vec<u8>) {
    out.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
    for l in &mlp.layers {
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.push(l.bias.is_some() as u8);
        for w in &l.weights.data {
            out.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(b) = &l.bias {
            for w in b {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
}

fn encode_bn(bn: &BatchNormLayer, out: &mut Vec<u8>) {
    out.extend_from_slice(&(bn.width() as u32).to_le_bytes());
    out.extend_from_slice(&bn.momentum.to_le_bytes());
    out.extend_from_slice(&bn.eps.to_le_bytes());
    for field in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
        for w in field {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Protocol("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_mlp(cur: &mut Cursor) -> Result<Mlp> {
    let n = cur.u32()? as usize;
    if n == 0 {
        return Err(Error::Protocol("empty layer stack in checkpoint".into()));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = cur.u32()? as usize;
        let out_dim = cur.u32()? as usize;
        let has_bias = cur.u8()? != 0;
        let weights = RealMatrix::from_vec(in_dim, out_dim, cur.f64s(in_dim * out_dim)?);
        let bias = if has_bias { Some(cur.f64s(out_dim)?) } else { None };
        layers.push(DenseLayer { weights, bias });
    }
    Ok(Mlp { layers })
}

fn decode_bn(cur: &mut Cursor) -> Result<BatchNormLayer> {
    let width = cur.u32()? as usize;
    let momentum = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let eps = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let gamma = cur.f64s(width)?;
    let beta = cur.f64s(width)?;
    let running_mean = cur.f64s(width)?;
    let running_var = cur.f64s(width)?;
    Ok(BatchNormLayer { gamma, beta, running_mean, running_var, momentum, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn dims() -> ModelDims {
        ModelDims {
            active_in: 3,
            active_hidden: vec![],
            group_ins: vec![2, 2],
            group_hidden: vec![],
            seg_widths: vec![2, 3],
            top_hidden: vec![],
            out_dim: 1,
        }
    }

    #[test]
    fn checkpoint_roundtrips_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let model = SplitModel::new_seeded(&dims(), &mut rng).unwrap();
        let bytes = model.encode();
        let back = SplitModel::decode(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.encode(), bytes);
        assert!(SplitModel::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    /// Snaps a value onto a dyadic grid so sums and products stay exact.
    fn dyadic(rng: &mut impl Rng) -> f64 {
        rng.gen_range(-64i32..=64) as f64 / 64.0
    }

    #[test]
    fn concatenated_split_forward_equals_monolithic_forward() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let d = dims();
        let mut model = SplitModel::new_seeded(&d, &mut rng).unwrap();
        let h = d.total_width();

        // Dyadic parameters and inputs make both evaluation orders exact.
        for l in &mut model.bottom_active.layers {
            l.weights = RealMatrix::from_fn(l.weights.rows, l.weights.cols, |_, _| dyadic(&mut rng));
            if let Some(b) = &mut l.bias {
                for w in b.iter_mut() {
                    *w = dyadic(&mut rng);
                }
            }
        }
        for bottom in &mut model.bottoms {
            for l in &mut bottom.layers {
                l.weights =
                    RealMatrix::from_fn(l.weights.rows, l.weights.cols, |_, _| dyadic(&mut rng));
            }
        }

        let b = 4;
        let x_active = RealMatrix::from_fn(b, d.active_in, |_, _| dyadic(&mut rng));
        let x_groups: Vec<RealMatrix> = d
            .group_ins
            .iter()
            .map(|&f| RealMatrix::from_fn(b, f, |_, _| dyadic(&mut rng)))
            .collect();

        // Split route: active full-width output plus per-segment group outputs.
        let mut split = model.bottom_active.forward(&x_active);
        let offs = model.seg_offsets();
        for (g, xg) in x_groups.iter().enumerate() {
            let seg = model.bottoms[g].forward(xg);
            for i in 0..b {
                for j in 0..seg.cols {
                    let v = split.get(i, offs[g] + j) + seg.get(i, j);
                    split.set(i, offs[g] + j, v);
                }
            }
        }

        // Monolithic route: one affine layer over the concatenated features,
        // group blocks placed on their segment columns.
        let f_total = d.active_in + d.group_ins.iter().sum::<usize>();
        let mut big = RealMatrix::zeros(f_total, h);
        let aw = &model.bottom_active.layers[0].weights;
        for i in 0..d.active_in {
            for j in 0..h {
                big.set(i, j, aw.get(i, j));
            }
        }
        let mut row_off = d.active_in;
        for (g, bottom) in model.bottoms.iter().enumerate() {
            let w = &bottom.layers[0].weights;
            for i in 0..w.rows {
                for j in 0..w.cols {
                    big.set(row_off + i, offs[g] + j, w.get(i, j));
                }
            }
            row_off += w.rows;
        }
        let mono_layer = DenseLayer { weights: big, bias: model.bottom_active.layers[0].bias.clone() };
        let mut x_concat = RealMatrix::zeros(b, f_total);
        x_concat.paste_cols(0, &x_active);
        let mut col = d.active_in;
        for xg in &x_groups {
            x_concat.paste_cols(col, xg);
            col += xg.cols;
        }
        let mono = mono_layer.forward(&x_concat);

        assert_eq!(split, mono, "split and monolithic embeddings must agree exactly");
    }

    #[test]
    fn per_shard_gradients_sum_to_full_batch_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let bottom = Mlp::new_seeded(&[3, 4, 2], false, &mut rng);
        let b = 6;
        let x = RealMatrix::from_fn(b, 3, |_, _| rng.gen_range(-1.0..1.0));
        let d_seg = RealMatrix::from_fn(b, 2, |_, _| rng.gen_range(-1.0..1.0));

        let (_, full_cache) = bottom.forward_cached(&x);
        let (_, full_grads) = bottom.backward(&full_cache, &d_seg);
        let full = bottom.flatten_grads(&full_grads);

        // Two clients with disjoint row shards; each runs only its own rows.
        let shards: [&[usize]; 2] = [&[0, 2, 4], &[1, 3, 5]];
        let mut summed = vec![0.0; full.len()];
        for shard in shards {
            let xs = RealMatrix::from_fn(shard.len(), 3, |i, j| x.get(shard[i], j));
            let ds = RealMatrix::from_fn(shard.len(), 2, |i, j| d_seg.get(shard[i], j));
            let (_, cache) = bottom.forward_cached(&xs);
            let (_, grads) = bottom.backward(&cache, &ds);
            for (acc, g) in summed.iter_mut().zip(bottom.flatten_grads(&grads)) {
                *acc += g;
            }
        }
        for (a, b) in full.iter().zip(&summed) {
            assert!((a - b).abs() < 1e-6, "shard additivity violated: {} vs {}", a, b);
        }
    }
}
