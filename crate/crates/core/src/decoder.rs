//! Semantic decoder: latent extraction from the received image and
//! SNR-conditioned fusion while up-sampling the received semantic features.
//!
//! Latent extraction runs an RRDB over the decoded image to get `u_0` and
//! then `L` down-samplers for `u_1..u_L`. Reconstruction starts from
//! `v_0 = s_hat`; block `l` fuses `v_{l-1}` with `u_{L+1-l}` through its own
//! PAGNet, then applies a stride-2 transpose convolution, GDN and PReLU
//! (sigmoid in the last block).

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::nn::{Conv2d, ConvTranspose2d, Gdn, Linear, Prelu, Result, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const SNR_TABLE_ROWS: usize = 21;
const RRDB_RESIDUAL_SCALE: f64 = 0.2;

/// Integer-dB row of the SNR embedding table, clamped to `0..=20`.
pub fn snr_index(snr_db: f64) -> usize {
    if snr_db.is_nan() {
        return 0;
    }
    snr_db.round().clamp(0.0, (SNR_TABLE_ROWS - 1) as f64) as usize
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(store: &mut ParamStore, name: &str, features: usize, growth: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let out = if i + 1 == layers { features } else { growth };
                Conv2d::new(store, &format!("{name}.conv{i}"), features + i * growth, out, 3, 1, rng)
            })
            .collect();
        Self { convs }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        let mut out = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let input = if feats.len() == 1 { x } else { g.concat(&feats, 1)? };
            out = conv.forward(g, input)?;
            if i + 1 < self.convs.len() {
                out = g.leaky_relu(out, LEAKY_SLOPE);
                feats.push(out);
            }
        }
        let scaled = g.mul_scalar(out, RRDB_RESIDUAL_SCALE);
        g.add(x, scaled)
    }

    fn params(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(Conv2d::params).collect()
    }
}

/// Residual-in-residual dense block preceded by a feature-lifting conv.
#[derive(Debug, Clone)]
pub struct Rrdb {
    pub head: Conv2d,
    pub blocks: Vec<DenseBlock>,
}

impl Rrdb {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        features: usize,
        growth: usize,
        blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            head: Conv2d::new(store, &format!("{name}.head"), c_in, features, 3, 1, rng),
            blocks: (0..blocks)
                .map(|b| DenseBlock::new(store, &format!("{name}.dense{b}"), features, growth, 3, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = self.head.forward(g, x)?;
        let mut h = f;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let scaled = g.mul_scalar(h, RRDB_RESIDUAL_SCALE);
        g.add(f, scaled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.head.params();
        p.extend(self.blocks.iter().flat_map(DenseBlock::params));
        p
    }
}

/// Two (conv, GDN, LeakyReLU) stages; the first conv has stride 2.
#[derive(Debug, Clone)]
pub struct DownBlock {
    pub conv1: Conv2d,
    pub gdn1: Gdn,
    pub conv2: Conv2d,
    pub gdn2: Gdn,
}

impl DownBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 2, rng),
            gdn1: Gdn::new(store, &format!("{name}.gdn1"), c_out, false),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng),
            gdn2: Gdn::new(store, &format!("{name}.gdn2"), c_out, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.gdn1.forward(g, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, h)?;
        let h = self.gdn2.forward(g, h)?;
        Ok(g.leaky_relu(h, LEAKY_SLOPE))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.conv1.params(), self.gdn1.params(), self.conv2.params(), self.gdn2.params()].concat()
    }
}

/// Parallel aggregation: per-pixel softmax weights over the two streams.
#[derive(Debug, Clone)]
pub struct Pagnet {
    pub conv_v: Conv2d,
    pub conv_u: Conv2d,
    /// `[21, embed_dim]` learned SNR embeddings, one row per integer dB.
    pub snr_table: ParamId,
    pub snr_proj: Linear,
    /// 1x1 conv producing one logit per pixel, shared by both streams.
    pub fc: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct PagnetOutput {
    pub out: Var,
    /// `[B, 1, H, W]` weight of the semantic (up-sampled) stream.
    pub w_v: Var,
    /// `[B, 1, H, W]` weight of the image stream latents.
    pub w_u: Var,
}

impl Pagnet {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (SNR_TABLE_ROWS + embed_dim) as f64).sqrt();
        let table = Tensor::from_fn(&[SNR_TABLE_ROWS, embed_dim], |_| rng.random_range(-a..a));
        Self {
            conv_v: Conv2d::new(store, &format!("{name}.conv_v"), channels, channels, 3, 1, rng),
            conv_u: Conv2d::new(store, &format!("{name}.conv_u"), channels, channels, 3, 1, rng),
            snr_table: store.add(format!("{name}.snr_table"), table),
            snr_proj: Linear::new(store, &format!("{name}.snr_proj"), embed_dim, channels, rng),
            fc: Conv2d::new(store, &format!("{name}.fc"), channels, 1, 1, 1, rng),
        }
    }

    /// Channel-wise SNR vector `[C]` after the table lookup and projection.
    pub fn snr_vector(&self, g: &mut Graph, snr_db: f64) -> Result<Var> {
        let table = g.param(self.snr_table);
        let dim = g.shape(table)[1];
        let row = snr_index(snr_db);
        let idx: Vec<usize> = (row * dim..(row + 1) * dim).collect();
        let e = g.take(table, &idx)?;
        let e = g.reshape(e, &[1, dim])?;
        let p = self.snr_proj.forward(g, e)?;
        let c = g.shape(p)[1];
        g.reshape(p, &[c])
    }

    /// Raw per-pixel logits for both streams, `[B, 2, H, W]`.
    pub fn logits(&self, g: &mut Graph, v: Var, u: Var, snr_db: f64) -> Result<Var> {
        if g.shape(v) != g.shape(u) {
            return Err(AutodiffError::Shape {
                op: "pagnet",
                detail: format!("streams differ: {:?} vs {:?}", g.shape(v), g.shape(u)),
            });
        }
        let e = self.snr_vector(g, snr_db)?;
        let fv = self.conv_v.forward(g, v)?;
        let fv = g.mul_channel(fv, e)?;
        let lv = self.fc.forward(g, fv)?;
        let fu = self.conv_u.forward(g, u)?;
        let fu = g.mul_channel(fu, e)?;
        let lu = self.fc.forward(g, fu)?;
        g.concat(&[lv, lu], 1)
    }

    /// Blends two streams with softmax weights computed from `logits`.
    pub fn blend(g: &mut Graph, v: Var, u: Var, logits: Var) -> Result<PagnetOutput> {
        let w = g.softmax_axis1(logits)?;
        let w_v = g.narrow(w, 1, 0, 1)?;
        let w_u = g.narrow(w, 1, 1, 1)?;
        let a = g.mul_pixel(v, w_v)?;
        let b = g.mul_pixel(u, w_u)?;
        let out = g.add(a, b)?;
        Ok(PagnetOutput { out, w_v, w_u })
    }

    pub fn forward(&self, g: &mut Graph, v: Var, u: Var, snr_db: f64) -> Result<PagnetOutput> {
        let logits = self.logits(g, v, u, snr_db)?;
        Self::blend(g, v, u, logits)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = [self.conv_v.params(), self.conv_u.params(), self.snr_proj.params(), self.fc.params()].concat();
        p.push(self.snr_table);
        p
    }
}

#[derive(Debug, Clone)]
pub enum Activation {
    Prelu(Prelu),
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    pub pagnet: Pagnet,
    pub up: ConvTranspose2d,
    pub gdn: Gdn,
    pub act: Activation,
}

impl UpBlock {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = [self.pagnet.params(), self.up.params(), self.gdn.params()].concat();
        if let Activation::Prelu(a) = &self.act {
            p.extend(a.params());
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub rrdb: Rrdb,
    pub downs: Vec<DownBlock>,
    pub ups: Vec<UpBlock>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub x_hat: Var,
    pub latents: Vec<Var>,
    /// PAGNet outputs in up-sampling order (`l = 1..L`).
    pub fusion: Vec<PagnetOutput>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderDims<'a> {
    pub image_channels: usize,
    /// Channel count of `u_1..u_L`; the last equals the semantic channel count.
    pub widths: &'a [usize],
    pub rrdb_features: usize,
    pub rrdb_growth: usize,
    pub rrdb_blocks: usize,
    pub embed_dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, d: DecoderDims, rng: &mut impl Rng) -> Self {
        let rrdb = Rrdb::new(
            store,
            &format!("{name}.rrdb"),
            d.image_channels,
            d.rrdb_features,
            d.rrdb_growth,
            d.rrdb_blocks,
            rng,
        );
        let mut c_in = d.rrdb_features;
        let downs = d
            .widths
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let b = DownBlock::new(store, &format!("{name}.down{l}"), c_in, c, rng);
                c_in = c;
                b
            })
            .collect();
        let levels = d.widths.len();
        let ups = (1..=levels)
            .map(|l| {
                let c = d.widths[levels - l];
                let c_out = if l == levels { d.image_channels } else { d.widths[levels - l - 1] };
                let pre = format!("{name}.up{l}");
                UpBlock {
                    pagnet: Pagnet::new(store, &format!("{pre}.pagnet"), c, d.embed_dim, rng),
                    up: ConvTranspose2d::new(store, &format!("{pre}.tconv"), c, c_out, 3, 2, rng),
                    gdn: Gdn::new(store, &format!("{pre}.gdn"), c_out, false),
                    act: if l == levels {
                        Activation::Sigmoid
                    } else {
                        Activation::Prelu(Prelu::new(store, &format!("{pre}.prelu"), c_out))
                    },
                }
            })
            .collect();
        Self { rrdb, downs, ups }
    }

    /// `u_0..u_L` from the received image `[B, C, H, W]`.
    pub fn extract_latents(&self, g: &mut Graph, x_c: Var) -> Result<Vec<Var>> {
        let mut u = vec![self.rrdb.forward(g, x_c)?];
        for d in &self.downs {
            let next = d.forward(g, *u.last().expect("u_0 present"))?;
            u.push(next);
        }
        Ok(u)
    }

    pub fn forward(&self, g: &mut Graph, x_c: Var, s_hat: Var, snr_db: f64) -> Result<DecoderOutput> {
        let latents = self.extract_latents(g, x_c)?;
        let levels = self.ups.len();
        if g.shape(s_hat) != g.shape(latents[levels]) {
            return Err(AutodiffError::Shape {
                op: "decode",
                detail: format!(
                    "semantic features {:?} do not match deepest latent {:?}",
                    g.shape(s_hat),
                    g.shape(latents[levels])
                ),
            });
        }
        let mut v = s_hat;
        let mut fusion = Vec::with_capacity(levels);
        for (i, block) in self.ups.iter().enumerate() {
            let f = block.pagnet.forward(g, v, latents[levels - i], snr_db)?;
            fusion.push(f);
            let h = block.up.forward(g, f.out)?;
            let h = block.gdn.forward(g, h)?;
            v = match &block.act {
                Activation::Prelu(p) => p.forward(g, h)?,
                Activation::Sigmoid => g.sigmoid(h),
            };
        }
        Ok(DecoderOutput {
            x_hat: v,
            latents,
            fusion,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.rrdb.params();
        p.extend(self.downs.iter().flat_map(DownBlock::params));
        p.extend(self.ups.iter().flat_map(UpBlock::params));
        p
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::check_params;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn small(store: &mut ParamStore, rng: &mut ChaCha8Rng, widths: &[usize]) -> Decoder {
        Decoder::new(
            store,
            "dec",
            DecoderDims {
                image_channels: 3,
                widths,
                rrdb_features: 4,
                rrdb_growth: 4,
                rrdb_blocks: 3,
                embed_dim: 32,
            },
            rng,
        )
    }

    #[test]
    fn snr_index_rounds_and_clamps() {
        assert_eq!(snr_index(-3.0), 0);
        assert_eq!(snr_index(2.4), 2);
        assert_eq!(snr_index(2.5), 3);
        assert_eq!(snr_index(35.0), 20);
        assert_eq!(snr_index(f64::INFINITY), 20);
    }

    #[test]
    fn latent_and_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let dec = small(&mut store, &mut rng, &[4, 6, 8, 5]);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rand_t(&mut rng, &[1, 3, 32, 32]).map(|v| v.abs()));
        let u = dec.extract_latents(&mut g, x).unwrap();
        assert_eq!(u.len(), 5);
        assert_eq!(g.shape(u[0]), &[1, 4, 32, 32]);
        assert_eq!(g.shape(u[4]), &[1, 5, 2, 2]);
        let s = g.constant(rand_t(&mut rng, &[1, 5, 2, 2]));
        let o = dec.forward(&mut g, x, s, 7.0).unwrap();
        assert_eq!(g.shape(o.x_hat), &[1, 3, 32, 32]);
        assert!(g.value(o.x_hat).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bad = g.constant(Tensor::zeros(&[1, 5, 4, 4]));
        assert!(dec.forward(&mut g, x, bad, 7.0).is_err());
    }

    #[test]
    fn zero_image_latent_comes_from_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let dec = small(&mut store, &mut rng, &[4]);
        let bias = store.value(dec.rrdb.head.bias).len();
        *store.value_mut(dec.rrdb.head.bias) = Tensor::full(&[bias], 0.3);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let u = dec.extract_latents(&mut g, x).unwrap();
        // ten stacked 3x3 convs see 10 pixels; row 16, cols 11..=20 never reach padding
        let row = &g.value(u[0]).data()[16 * 32..17 * 32];
        assert!(row[11..=20].iter().all(|&v| (v - row[11]).abs() < 1e-12));
        assert!(row[11].is_finite());
    }

    #[test]
    fn pagnet_weights_sum_to_one_and_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = Pagnet::new(&mut store, "p", 4, 32, &mut rng);
        for snr in 0..=20 {
            let mut g = Graph::with_params(&store);
            let v = g.constant(rand_t(&mut rng, &[2, 4, 3, 3]));
            let u = g.constant(rand_t(&mut rng, &[2, 4, 3, 3]));
            let o = p.forward(&mut g, v, u, snr as f64).unwrap();
            for (a, b) in g.value(o.w_v).data().iter().zip(g.value(o.w_u).data()) {
                assert!((a + b - 1.0).abs() < 1e-9);
            }
        }
        let mut g = Graph::new();
        let v = g.constant(rand_t(&mut rng, &[1, 2, 2, 2]));
        let u = g.constant(rand_t(&mut rng, &[1, 2, 2, 2]));
        let eq = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let o = Pagnet::blend(&mut g, v, u, eq).unwrap();
        for ((o, a), b) in g.value(o.out).data().iter().zip(g.value(v).data()).zip(g.value(u).data()) {
            assert!((o - (a + b) / 2.0).abs() < 1e-15);
        }
        let mut logits = Tensor::zeros(&[1, 2, 2, 2]);
        logits.data_mut()[4..].iter_mut().for_each(|l| *l = -1e4);
        let lg = g.constant(logits);
        let o = Pagnet::blend(&mut g, v, u, lg).unwrap();
        assert_eq!(g.value(o.out), g.value(v));
    }

    #[test]
    fn pagnet_instances_share_no_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let dec = small(&mut store, &mut rng, &[4, 6, 8, 5]);
        let mut seen = HashSet::new();
        for b in &dec.ups {
            for id in b.pagnet.params() {
                assert!(seen.insert(id), "parameter {} reused", store.name(id));
            }
        }
        assert_eq!(dec.ups.len(), 4);
    }

    #[test]
    fn snr_changes_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = Pagnet::new(&mut store, "p", 3, 32, &mut rng);
        let v = rand_t(&mut rng, &[1, 3, 4, 4]);
        let u = rand_t(&mut rng, &[1, 3, 4, 4]);
        let weights = |snr: f64| {
            let mut g = Graph::with_params(&store);
            let (a, b) = (g.constant(v.clone()), g.constant(u.clone()));
            let o = p.forward(&mut g, a, b, snr).unwrap();
            g.value(o.w_v).clone()
        };
        assert_ne!(weights(2.0), weights(12.0));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let dec = Decoder::new(
            &mut store,
            "dec",
            DecoderDims {
                image_channels: 2,
                widths: &[3, 2],
                rrdb_features: 2,
                rrdb_growth: 2,
                rrdb_blocks: 1,
                embed_dim: 4,
            },
            &mut rng,
        );
        let x = rand_t(&mut rng, &[1, 2, 4, 4]).map(|v| v.abs());
        let s = rand_t(&mut rng, &[1, 2, 1, 1]);
        let target = rand_t(&mut rng, &[1, 2, 4, 4]).map(|v| v.abs());
        let ids = dec.params();
        let r = check_params(&store, &ids, 1e-5, 8, |g| {
            let xv = g.constant(x.clone());
            let sv = g.constant(s.clone());
            let tv = g.constant(target.clone());
            let o = dec.forward(g, xv, sv, 6.0)?;
            let d = g.sub(o.x_hat, tv)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
