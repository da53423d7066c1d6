//! Residual-enhanced semantic encoder.
//!
//! A stack of residual-enhanced modules (REMs) walks two paths in lockstep:
//! the image path `y` and the compression-residual path `r`. In every module
//! both paths are down-sampled by two, the residual path produces a sigmoid
//! attention map that enhances the image features, and the enhanced image
//! features are mixed back into the residual path by a 1x1 convolution
//! (skipped in the last module).

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::nn::{Conv2d, Result, LEAKY_SLOPE};

/// Stride-2 then stride-1 3x3 convolutions, each followed by LeakyReLU.
#[derive(Debug, Clone)]
pub struct Down {
    pub reduce: Conv2d,
    pub refine: Conv2d,
}

impl Down {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), c_in, c_out, 3, 2, rng),
            refine: Conv2d::new(store, &format!("{name}.refine"), c_out, c_out, 3, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.refine.forward(g, h)?;
        Ok(g.leaky_relu(h, LEAKY_SLOPE))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.reduce.params(), self.refine.params()].concat()
    }
}

#[derive(Debug, Clone)]
pub struct Rem {
    pub down_y: Down,
    pub down_r: Down,
    pub attention: Conv2d,
    pub mix: Option<Conv2d>,
}

/// Intermediate values of one module, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct RemOutput {
    pub y_down: Var,
    pub r_down: Var,
    pub attention: Var,
    pub y: Var,
    pub r: Var,
}

impl Rem {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, last: bool, rng: &mut impl Rng) -> Self {
        Self {
            down_y: Down::new(store, &format!("{name}.down_y"), c_in, c_out, rng),
            down_r: Down::new(store, &format!("{name}.down_r"), c_in, c_out, rng),
            attention: Conv2d::new(store, &format!("{name}.attention"), c_out, c_out, 3, 1, rng),
            mix: (!last).then(|| Conv2d::new(store, &format!("{name}.mix"), 2 * c_out, c_out, 1, 1, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, y: Var, r: Var) -> Result<RemOutput> {
        if g.shape(y)[2..] != g.shape(r)[2..] {
            return Err(crate::autodiff::AutodiffError::Shape {
                op: "rem",
                detail: format!("axes 2/3: image path {:?} vs residual path {:?}", g.shape(y), g.shape(r)),
            });
        }
        let y_down = self.down_y.forward(g, y)?;
        let r_down = self.down_r.forward(g, r)?;
        let logits = self.attention.forward(g, r_down)?;
        let attention = g.sigmoid(logits);
        let enhanced = g.mul(y_down, attention)?;
        let y_next = g.add(y_down, enhanced)?;
        let r_next = match &self.mix {
            Some(mix) => {
                let cat = g.concat(&[r_down, y_next], 1)?;
                mix.forward(g, cat)?
            }
            None => r_down,
        };
        Ok(RemOutput {
            y_down,
            r_down,
            attention,
            y: y_next,
            r: r_next,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = [self.down_y.params(), self.down_r.params(), self.attention.params()].concat();
        if let Some(m) = &self.mix {
            p.extend(m.params());
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub rems: Vec<Rem>,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Semantic features `[B, C_s, H / 2^N, W / 2^N]`.
    pub s: Var,
    /// Residual hyperprior features, same shape as `s`.
    pub r: Var,
}

impl Encoder {
    /// `widths[j]` is the channel count after module `j`; the last entry is `C_s`.
    pub fn new(store: &mut ParamStore, name: &str, image_channels: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut c_in = image_channels;
        let rems = widths
            .iter()
            .enumerate()
            .map(|(j, &c_out)| {
                let rem = Rem::new(store, &format!("{name}.rem{j}"), c_in, c_out, j + 1 == widths.len(), rng);
                c_in = c_out;
                rem
            })
            .collect();
        Self { rems }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, x_r: Var) -> Result<EncoderOutput> {
        if g.shape(x) != g.shape(x_r) {
            return Err(crate::autodiff::AutodiffError::Shape {
                op: "encode",
                detail: format!("image {:?} and residual {:?} differ", g.shape(x), g.shape(x_r)),
            });
        }
        let (mut y, mut r) = (x, x_r);
        for rem in &self.rems {
            let o = rem.forward(g, y, r)?;
            y = o.y;
            r = o.r;
        }
        Ok(EncoderOutput { s: y, r })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.rems.iter().flat_map(Rem::params).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::check_params;
    use crate::tensor::Tensor;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_residual_with_neutral_attention_scales_by_one_and_a_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let rem = Rem::new(&mut store, "rem", 3, 4, false, &mut rng);
        let mut g = Graph::with_params(&store);
        let y = g.constant(rand_t(&mut rng, &[1, 3, 8, 8]));
        let r = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let o = rem.forward(&mut g, y, r).unwrap();
        assert!(g.value(o.attention).data().iter().all(|&a| a == 0.5));
        for (a, b) in g.value(o.y).data().iter().zip(g.value(o.y_down).data()) {
            assert!((a - 1.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_attention_passes_image_features_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let rem = Rem::new(&mut store, "rem", 3, 4, true, &mut rng);
        *store.value_mut(rem.attention.weight) = Tensor::zeros(&[4, 4, 3, 3]);
        *store.value_mut(rem.attention.bias) = Tensor::full(&[4], -1e3);
        let mut g = Graph::with_params(&store);
        let y = g.constant(rand_t(&mut rng, &[1, 3, 32, 32]));
        let r = g.constant(rand_t(&mut rng, &[1, 3, 32, 32]));
        let o = rem.forward(&mut g, y, r).unwrap();
        assert_eq!(g.value(o.y), g.value(o.y_down));
        assert_eq!(g.shape(o.y), &[1, 4, 16, 16]);
        assert_eq!(o.r, o.r_down);
    }

    #[test]
    fn encoder_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 3, &[16, 32, 64, 32], &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rand_t(&mut rng, &[1, 3, 32, 32]));
        let xr = g.constant(rand_t(&mut rng, &[1, 3, 32, 32]));
        let o = enc.forward(&mut g, x, xr).unwrap();
        assert_eq!(g.shape(o.s), &[1, 32, 2, 2]);
        assert_eq!(g.shape(o.r), &[1, 32, 2, 2]);
        assert!(enc.rems[3].mix.is_none() && enc.rems[0].mix.is_some());
    }

    #[test]
    fn mismatched_paths_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 3, &[4], &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let xr = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(enc.forward(&mut g, x, xr).is_err());
    }

    #[test]
    fn rem_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 2, &[3, 4], &mut rng);
        let x = rand_t(&mut rng, &[1, 2, 8, 8]);
        let xr = rand_t(&mut rng, &[1, 2, 8, 8]);
        let ids = enc.params();
        let r = check_params(&store, &ids, 1e-5, 12, |g| {
            let xv = g.constant(x.clone());
            let rv = g.constant(xr.clone());
            let o = enc.forward(g, xv, rv)?;
            let cat = g.concat(&[o.s, o.r], 1)?;
            let sq = g.square(cat);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn attention_is_local_to_the_residual_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let rem = Rem::new(&mut store, "rem", 1, 2, true, &mut rng);
        let att = store.value(rem.attention.weight).map(f64::abs);
        *store.value_mut(rem.attention.weight) = att;
        let mut xr = Tensor::zeros(&[1, 1, 32, 32]);
        for yy in 0..4 {
            for xx in 0..4 {
                xr.data_mut()[yy * 32 + xx] = 1.0;
            }
        }
        let x = rand_t(&mut rng, &[1, 1, 32, 32]);
        let run = |res: &Tensor| {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(x.clone());
            let rv = g.constant(res.clone());
            let o = rem.forward(&mut g, xv, rv).unwrap();
            g.value(o.y).clone()
        };
        let base = run(&Tensor::zeros(&[1, 1, 32, 32]));
        let with = run(&xr);
        // residual support rows/cols 0..4 reach at most output index 4
        // through two 3x3 convs (stride 2, then 1) and the 3x3 attention conv
        for c in 0..2 {
            for yy in 0..16 {
                for xx in 0..16 {
                    let i = (c * 16 + yy) * 16 + xx;
                    if yy > 4 || xx > 4 {
                        assert_eq!(base.data()[i], with.data()[i], "({c},{yy},{xx})");
                    }
                }
            }
        }
        assert_ne!(base, with);
    }
}
