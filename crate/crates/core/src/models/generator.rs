use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_steps, expect_shape, step_plane, ConvLayer, ModelConfig, ModelError, ParamSet, LEAKY_SLOPE};
use crate::diffusion::Denoiser;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
struct GenLayers {
    down: [ConvLayer; 3],
    bottleneck: ConvLayer,
    up: [ConvLayer; 3],
    out: ConvLayer,
}

/// Encoder-decoder with skip connections that estimates the clean image.
///
/// Input channels are the noisy image, the guide, and a constant `t / T`
/// plane. Three stride-2 stages shrink the input by 8; the latent vector is
/// broadcast over the bottleneck; three upsampling stages concatenate the
/// matching encoder activations (the last one the raw input) and a final
/// convolution with `tanh` emits one channel.
#[derive(Debug)]
pub struct GeneratorNet<F: Scalar> {
    cfg: ModelConfig,
    params: ParamSet<F>,
    layers: GenLayers,
    evaluations: AtomicUsize,
}

impl<F: Scalar> Clone for GeneratorNet<F> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            layers: self.layers.clone(),
            evaluations: AtomicUsize::new(self.evaluations()),
        }
    }
}

pub fn build_generator<F: Scalar>(cfg: &ModelConfig) -> Result<GeneratorNet<F>, ModelError> {
    GeneratorNet::new(cfg)
}

impl<F: Scalar> GeneratorNet<F> {
    pub const DIVISOR: usize = 8;

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        if cfg.image_side == 0 || !cfg.image_side.is_multiple_of(Self::DIVISOR) {
            return Err(ModelError::IndivisibleSide {
                side: cfg.image_side,
                divisor: Self::DIVISOR,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = cfg.init_std;
        let [w1, w2, w3] = cfg.gen_widths;
        let cin = 2 + cfg.guide_mode.channels();
        let head = (w1 / 2).max(1);
        let mut p = ParamSet::new();
        let r = &mut rng;
        let down = [
            ConvLayer::declare(&mut p, "down1", cin, w1, 4, 2, 1, std, r),
            ConvLayer::declare_unbiased(&mut p, "down2", w1, w2, 4, 2, 1, std, r),
            ConvLayer::declare(&mut p, "down3", w2, w3, 4, 2, 1, std, r),
        ];
        let bottleneck = ConvLayer::declare(&mut p, "bottleneck", w3 + cfg.latent_dim, w3, 3, 1, 1, std, r);
        let up = [
            ConvLayer::declare_unbiased(&mut p, "up1", w3 + w2, w2, 3, 1, 1, std, r),
            ConvLayer::declare_unbiased(&mut p, "up2", w2 + w1, w1, 3, 1, 1, std, r),
            ConvLayer::declare(&mut p, "up3", w1 + cin, head, 3, 1, 1, std, r),
        ];
        let out = ConvLayer::declare(&mut p, "out", head, 1, 3, 1, 1, std, r);
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            layers: GenLayers { down, bottleneck, up, out },
            evaluations: AtomicUsize::new(0),
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

    /// Number of completed [`GeneratorNet::predict`] calls.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Scalar>(&self) -> GeneratorNet<G> {
        GeneratorNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            evaluations: AtomicUsize::new(0),
        }
    }

    fn check_inputs(&self, x_t: &[usize], guide: &[usize], z: &[usize]) -> Result<(), ModelError> {
        let side = self.cfg.image_side;
        let n = x_t.first().copied().unwrap_or(0);
        expect_shape("noisy image", x_t, &[n, 1, side, side])?;
        expect_shape("guide", guide, &[n, self.cfg.guide_mode.channels(), side, side])?;
        expect_shape("latent", z, &[n, self.cfg.latent_dim])
    }

    /// Records the forward pass on `g` using bound parameters `p`.
    pub fn forward(&self, g: &mut Graph<F>, p: &[Var], x_t: Var, guide: Var, t: usize, z: Var) -> Result<Var, ModelError> {
        let n = g.shape(x_t)?.first().copied().unwrap_or(0);
        self.forward_steps(g, p, x_t, guide, &vec![t; n], z)
    }

    /// Like [`GeneratorNet::forward`] with one step index per sample.
    pub fn forward_steps(&self, g: &mut Graph<F>, p: &[Var], x_t: Var, guide: Var, ts: &[usize], z: Var) -> Result<Var, ModelError> {
        self.check_inputs(g.shape(x_t)?, g.shape(guide)?, g.shape(z)?)?;
        let [n, _, h, w] = <[usize; 4]>::try_from(g.shape(x_t)?).expect("checked rank");
        check_steps(ts, n)?;
        let slope = F::from_f64_lossy(LEAKY_SLOPE);
        let l = &self.layers;

        let plane = step_plane(g, ts, h, w, self.cfg.total_steps)?;
        let input = g.concat(&[x_t, guide, plane])?;

        let d1 = l.down[0].apply(g, p, input)?;
        let d1 = g.leaky_relu(d1, slope)?;
        let d2 = l.down[1].apply(g, p, d1)?;
        let d2 = g.instance_norm(d2)?;
        let d2 = g.leaky_relu(d2, slope)?;
        let d3 = l.down[2].apply(g, p, d2)?;
        let d3 = g.leaky_relu(d3, slope)?;

        let zb = g.broadcast_spatial(z, h / 8, w / 8)?;
        let b = g.concat(&[d3, zb])?;
        let b = l.bottleneck.apply(g, p, b)?;
        let b = g.leaky_relu(b, slope)?;

        let u1 = g.upsample2x(b)?;
        let u1 = g.concat(&[u1, d2])?;
        let u1 = l.up[0].apply(g, p, u1)?;
        let u1 = g.instance_norm(u1)?;
        let u1 = g.leaky_relu(u1, slope)?;

        let u2 = g.upsample2x(u1)?;
        let u2 = g.concat(&[u2, d1])?;
        let u2 = l.up[1].apply(g, p, u2)?;
        let u2 = g.instance_norm(u2)?;
        let u2 = g.leaky_relu(u2, slope)?;

        let u3 = g.upsample2x(u2)?;
        let u3 = g.concat(&[u3, input])?;
        let u3 = l.up[2].apply(g, p, u3)?;
        let u3 = g.leaky_relu(u3, slope)?;

        let out = l.out.apply(g, p, u3)?;
        Ok(g.tanh(out)?)
    }

    /// Estimates `x0` without recording gradients.
    pub fn predict(&self, x_t: &Tensor<F>, guide: &Tensor<F>, t: usize, z: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        self.check_inputs(x_t.shape(), guide.shape(), z.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let xv = g.constant(x_t.shape(), x_t.data().to_vec())?;
        let gv = g.constant(guide.shape(), guide.data().to_vec())?;
        let zv = g.constant(z.shape(), z.data().to_vec())?;
        let out = self.forward(&mut g, &p, xv, gv, t, zv)?;
        let result = g.to_tensor(out).map_err(ModelError::from);
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        result
    }

    pub fn bind(&self, g: &mut Graph<F>, track: bool) -> Result<Vec<Var>, TensorError> {
        self.params.bind(g, track)
    }
}

/// Functional alias of [`GeneratorNet::predict`].
pub fn generator_predict<F: Scalar>(gen: &GeneratorNet<F>, x_t: &Tensor<F>, guide: &Tensor<F>, t: usize, z: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
    gen.predict(x_t, guide, t, z)
}

impl<F: Scalar> Denoiser<F> for GeneratorNet<F> {
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn predict_x0(&self, x_t: &Tensor<F>, guide: &Tensor<F>, t: usize, z: &Tensor<F>) -> Result<Tensor<F>, String> {
        self.predict(x_t, guide, t, z).map_err(|e| e.to_string())
    }
}
