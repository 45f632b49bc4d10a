use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_steps, expect_shape, step_plane, ConvLayer, ModelConfig, ModelError, ParamSet, LEAKY_SLOPE};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

// keeps the discriminator stream independent of the generator's
const DISC_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Patch classifier over `(candidate x_{t-k}, x_t, t / T)`.
///
/// Four 3x3 stride-2 blocks with leaky rectifiers, then a 3x3 convolution
/// to a single logit channel. Each block maps a side `s` to `ceil(s / 2)`,
/// so a side divisible by 16 yields a `side / 16` logit map.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet<F: Scalar> {
    cfg: ModelConfig,
    params: ParamSet<F>,
    blocks: [ConvLayer; 4],
    head: ConvLayer,
}

pub fn build_discriminator<F: Scalar>(cfg: &ModelConfig) -> Result<DiscriminatorNet<F>, ModelError> {
    DiscriminatorNet::new(cfg)
}

impl<F: Scalar> DiscriminatorNet<F> {
    pub const DIVISOR: usize = 16;

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        if cfg.image_side == 0 || !cfg.image_side.is_multiple_of(Self::DIVISOR) {
            return Err(ModelError::IndivisibleSide {
                side: cfg.image_side,
                divisor: Self::DIVISOR,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DISC_SEED_SALT);
        let std = cfg.init_std;
        let [w1, w2, w3, w4] = cfg.disc_widths;
        let mut p = ParamSet::new();
        let r = &mut rng;
        let blocks = [
            ConvLayer::declare(&mut p, "block1", 3, w1, 3, 2, 1, std, r),
            ConvLayer::declare(&mut p, "block2", w1, w2, 3, 2, 1, std, r),
            ConvLayer::declare(&mut p, "block3", w2, w3, 3, 2, 1, std, r),
            ConvLayer::declare(&mut p, "block4", w3, w4, 3, 2, 1, std, r),
        ];
        let head = ConvLayer::declare(&mut p, "logits", w4, 1, 3, 1, 1, std, r);
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> DiscriminatorNet<G> {
        DiscriminatorNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            blocks: self.blocks,
            head: self.head,
        }
    }

    /// Sets the logit layer to zero so every patch scores exactly 0.
    pub fn zero_logit_layer(&mut self) {
        for idx in [Some(self.head.weight), self.head.bias].into_iter().flatten() {
            self.params.tensors_mut()[idx].data_mut().fill(F::zero());
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, track: bool) -> Result<Vec<Var>, TensorError> {
        self.params.bind(g, track)
    }

    /// Records the logit map `[n, 1, ceil(h/16), ceil(w/16)]` on `g`.
    pub fn forward(&self, g: &mut Graph<F>, p: &[Var], candidate: Var, x_t: Var, t: usize) -> Result<Var, ModelError> {
        let n = g.shape(candidate)?.first().copied().unwrap_or(0);
        self.forward_steps(g, p, candidate, x_t, &vec![t; n])
    }

    /// Like [`DiscriminatorNet::forward`] with one step index per sample.
    pub fn forward_steps(&self, g: &mut Graph<F>, p: &[Var], candidate: Var, x_t: Var, ts: &[usize]) -> Result<Var, ModelError> {
        let cs = g.shape(candidate)?.to_vec();
        expect_shape("conditioning image", g.shape(x_t)?, &cs)?;
        if cs.len() != 4 || cs[1] != 1 {
            return Err(ModelError::Shape {
                what: "candidate",
                expected: vec![cs.first().copied().unwrap_or(0), 1, 0, 0],
                got: cs,
            });
        }
        check_steps(ts, cs[0])?;
        let slope = F::from_f64_lossy(LEAKY_SLOPE);
        let plane = step_plane(g, ts, cs[2], cs[3], self.cfg.total_steps)?;
        let mut h = g.concat(&[candidate, x_t, plane])?;
        for block in &self.blocks {
            h = block.apply(g, p, h)?;
            h = g.leaky_relu(h, slope)?;
        }
        Ok(self.head.apply(g, p, h)?)
    }

    /// Logit map without gradient tracking.
    pub fn score(&self, candidate: &Tensor<F>, x_t: &Tensor<F>, t: usize) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let c = g.constant(candidate.shape(), candidate.data().to_vec())?;
        let x = g.constant(x_t.shape(), x_t.data().to_vec())?;
        let out = self.forward(&mut g, &p, c, x, t)?;
        Ok(g.to_tensor(out)?)
    }
}

/// Logit map of `disc` for a candidate/conditioning pair.
pub fn discriminator_score<F: Scalar>(disc: &DiscriminatorNet<F>, candidate: &Tensor<F>, x_t: &Tensor<F>, t: usize) -> Result<Tensor<F>, ModelError> {
    disc.score(candidate, x_t, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(side: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[2, 1, side, side], 1.0, &mut rng),
            Tensor::randn(&[2, 1, side, side], 1.0, &mut rng),
        )
    }

    #[test]
    fn logit_map_is_a_sixteenth() {
        let d = build_discriminator::<f32>(&ModelConfig::default()).unwrap();
        let (a, b) = pair(64, 1);
        let s = discriminator_score(&d, &a, &b, 250).unwrap();
        assert_eq!(s.shape(), &[2, 1, 4, 4]);
        assert!(s.is_finite());
    }

    #[test]
    fn zero_logit_layer_scores_zero() {
        let mut d = build_discriminator::<f32>(&ModelConfig::default()).unwrap();
        d.zero_logit_layer();
        let (a, b) = pair(64, 2);
        let s = d.score(&a, &b, 500).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argument_order_matters() {
        let d = build_discriminator::<f32>(&ModelConfig::default()).unwrap();
        let (a, b) = pair(32, 3);
        let mean = |t: Tensor<f32>| t.data().iter().sum::<f32>() / t.numel() as f32;
        assert_ne!(mean(d.score(&a, &b, 250).unwrap()), mean(d.score(&b, &a, 250).unwrap()));
    }

    #[test]
    fn rejects_bad_sizes() {
        let err = build_discriminator::<f32>(&ModelConfig {
            image_side: 40,
            ..ModelConfig::default()
        })
        .unwrap_err();
        assert_eq!(err, ModelError::IndivisibleSide { side: 40, divisor: 16 });
        let d = build_discriminator::<f32>(&ModelConfig::default()).unwrap();
        let (a, _) = pair(32, 4);
        let (_, b) = pair(16, 4);
        assert!(d.score(&a, &b, 250).is_err());
    }
}
