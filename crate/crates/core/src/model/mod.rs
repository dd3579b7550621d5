//! Generator and discriminator networks, losses, training, checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::{stack_images, unstack_images, Image};
use crate::error::{FdnnError, Result};
use crate::layers::{BatchNorm2d, Conv2d, Deconv2d, Layer, LayerStack, Linear, Mode, LEAKY_SLOPE};
use crate::tensor::{ConvGeometry, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{discriminator_loss, generator_adv_loss, pixel_loss, AdvSign, LOG_EPS};
pub use train::{train, train_step, EpochStats, StepMetrics, TrainConfig, TrainReport, Trainer};

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_BASE_CHANNELS: usize = 32;

/// Conv+BN+leaky blocks before the bottleneck.
const ENCODER_LAYERS: usize = 9;

fn down() -> ConvGeometry {
    ConvGeometry::square(4, 2, 1)
}

fn check_size(image_size: usize, base_channels: usize) -> Result<()> {
    if image_size == 0 || !image_size.is_multiple_of(8) {
        return Err(FdnnError::config(format!(
            "image size must be a positive multiple of 8, got {image_size}"
        )));
    }
    if base_channels == 0 {
        return Err(FdnnError::config("base channel count must be positive"));
    }
    Ok(())
}

/// Input-to-output destylization, implemented by the generator and by test oracles.
pub trait Destylize {
    fn destylize(&self, image: &Image) -> Result<Image>;
}

/// Encoder / fully-connected bottleneck / decoder mapping N×3×S×S to N×3×S×S.
#[derive(Clone, Debug)]
pub struct Generator {
    pub stack: LayerStack,
    image_size: usize,
    base_channels: usize,
}

impl Generator {
    pub fn new(image_size: usize, base_channels: usize, seed: u64) -> Result<Self> {
        check_size(image_size, base_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = base_channels;
        let side = image_size / 8;
        let bottleneck = 4 * c * side * side;
        let mut layers = Vec::new();
        for (ci, co) in [(3, c), (c, 2 * c), (2 * c, 4 * c)] {
            layers.push(Layer::Conv2d(Conv2d::init(ci, co, down(), &mut rng).without_bias()));
            layers.push(Layer::BatchNorm2d(BatchNorm2d::init(co, &mut rng)));
            layers.push(Layer::leaky_relu(LEAKY_SLOPE));
        }
        layers.push(Layer::flatten());
        layers.push(Layer::Linear(Linear::init(bottleneck, bottleneck, &mut rng)));
        layers.push(Layer::leaky_relu(LEAKY_SLOPE));
        layers.push(Layer::reshape(vec![4 * c, side, side]));
        for (ci, co) in [(4 * c, 2 * c), (2 * c, c)] {
            layers.push(Layer::Deconv2d(Deconv2d::init(ci, co, down(), &mut rng).without_bias()));
            layers.push(Layer::BatchNorm2d(BatchNorm2d::init(co, &mut rng)));
            layers.push(Layer::leaky_relu(LEAKY_SLOPE));
        }
        layers.push(Layer::Deconv2d(Deconv2d::init(c, 3, down(), &mut rng)));
        layers.push(Layer::sigmoid());
        Ok(Generator {
            stack: LayerStack::new(layers),
            image_size,
            base_channels,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    /// Length of a bottleneck embedding, 4c·(S/8)².
    pub fn embedding_dim(&self) -> usize {
        let side = self.image_size / 8;
        4 * self.base_channels * side * side
    }

    pub fn mode(&self) -> Mode {
        self.stack.mode()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.stack.set_mode(mode);
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let s = self.image_size;
        match x.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(FdnnError::shape(format!(
                "generator built for 3×{s}×{s} images, got {other:?}"
            ))),
        }
    }

    /// Train-mode forward with caching (or eval semantics if in eval mode).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        self.stack.forward(x)
    }

    /// Eval-semantics forward that leaves the generator untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        self.stack.infer(x)
    }

    /// Encoder output flattened to N×4c(S/8)².
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let h = self.stack.infer_prefix(x, ENCODER_LAYERS)?;
        let n = h.shape()[0];
        let dim = self.embedding_dim();
        h.reshape(&[n, dim])
    }

    pub fn destylize_batch(&self, images: &[Image]) -> Result<Vec<Image>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for img in images {
            self.check_image(img)?;
        }
        unstack_images(&self.infer(&stack_images(images)?)?)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.image_size;
        if image.height() != s || image.width() != s {
            return Err(FdnnError::shape(format!(
                "image is {}x{} but the generator was built for {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

impl Destylize for Generator {
    /// Uses running batch-norm statistics regardless of the current mode.
    fn destylize(&self, image: &Image) -> Result<Image> {
        self.check_image(image)?;
        let batch = image
            .tensor()
            .clone()
            .reshape(&[1, 3, self.image_size, self.image_size])?;
        let out = self.infer(&batch)?;
        Image::new(out.reshape(&[3, self.image_size, self.image_size])?)
    }
}

/// Convolutional classifier emitting one probability per sample.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub stack: LayerStack,
    image_size: usize,
    base_channels: usize,
}

impl Discriminator {
    pub fn new(image_size: usize, base_channels: usize, seed: u64) -> Result<Self> {
        check_size(image_size, base_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = base_channels;
        let side = image_size / 8;
        let layers = vec![
            Layer::Conv2d(Conv2d::init(3, c, down(), &mut rng)),
            Layer::leaky_relu(LEAKY_SLOPE),
            Layer::Conv2d(Conv2d::init(c, 2 * c, down(), &mut rng).without_bias()),
            Layer::BatchNorm2d(BatchNorm2d::init(2 * c, &mut rng)),
            Layer::leaky_relu(LEAKY_SLOPE),
            Layer::Conv2d(Conv2d::init(2 * c, 4 * c, down(), &mut rng).without_bias()),
            Layer::BatchNorm2d(BatchNorm2d::init(4 * c, &mut rng)),
            Layer::leaky_relu(LEAKY_SLOPE),
            Layer::flatten(),
            Layer::Linear(Linear::init(4 * c * side * side, 1, &mut rng)),
            Layer::sigmoid(),
        ];
        Ok(Discriminator {
            stack: LayerStack::new(layers),
            image_size,
            base_channels,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.stack.set_mode(mode);
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let s = self.image_size;
        match x.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(FdnnError::shape(format!(
                "discriminator built for 3×{s}×{s} images, got {other:?}"
            ))),
        }
    }

    /// N×3×S×S → N×1 probabilities.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        self.stack.forward(x)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        self.stack.infer(x)
    }
}

/// Generator with parameters from init stream `seed`.
pub fn build_generator(image_size: usize, base_channels: usize, seed: u64) -> Result<Generator> {
    Generator::new(image_size, base_channels, seed)
}

pub fn build_discriminator(image_size: usize, base_channels: usize, seed: u64) -> Result<Discriminator> {
    Discriminator::new(image_size, base_channels, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::grad_check_sampled;
    use rand::Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn generator_shapes() {
        let mut g = build_generator(32, 8, 1).unwrap();
        let y = g.forward(&random_batch(&[2, 3, 32, 32], 0)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(
            g.forward(&random_batch(&[1, 3, 16, 16], 0)),
            Err(FdnnError::Shape(_))
        ));
    }

    #[test]
    fn encoder_shape_default_width() {
        let g = build_generator(32, 32, 1).unwrap();
        let h = g
            .stack
            .infer_prefix(&random_batch(&[1, 3, 32, 32], 0), ENCODER_LAYERS)
            .unwrap();
        assert_eq!(h.shape(), &[1, 128, 4, 4]);
        assert_eq!(g.encode(&random_batch(&[2, 3, 32, 32], 0)).unwrap().shape(), &[2, 2048]);
        assert_eq!(g.embedding_dim(), 2048);
    }

    #[test]
    fn last_layers_have_no_batch_norm() {
        let g = build_generator(16, 4, 0).unwrap();
        let kinds: Vec<&str> = g.stack.layers().iter().map(Layer::kind).collect();
        assert_eq!(&kinds[kinds.len() - 2..], &["Deconv2d", "Sigmoid"]);
        let d = build_discriminator(16, 4, 0).unwrap();
        let kinds: Vec<&str> = d.stack.layers().iter().map(Layer::kind).collect();
        assert_eq!(&kinds[..2], &["Conv2d", "LeakyReLU"]);
        assert_eq!(&kinds[kinds.len() - 2..], &["Linear", "Sigmoid"]);
    }

    #[test]
    fn rejects_bad_sizes() {
        for s in [0, 12, 30] {
            assert!(matches!(build_generator(s, 4, 0), Err(FdnnError::Config(_))));
            assert!(matches!(build_discriminator(s, 4, 0), Err(FdnnError::Config(_))));
        }
    }

    // closed form written out independently of the layer registry
    fn generator_params_closed_form(s: usize, c: usize) -> usize {
        // convolutions feeding a batch norm carry no bias
        let conv = |ci: usize, co: usize| co * ci * 16;
        let bn = |ch: usize| 2 * ch;
        let f = 4 * c * (s / 8) * (s / 8);
        conv(3, c)
            + bn(c)
            + conv(c, 2 * c)
            + bn(2 * c)
            + conv(2 * c, 4 * c)
            + bn(4 * c)
            + f * f
            + f
            + conv(4 * c, 2 * c)
            + bn(2 * c)
            + conv(2 * c, c)
            + bn(c)
            + conv(c, 3)
            + 3
    }

    #[test]
    fn parameter_counts() {
        for (s, c) in [(8, 4), (16, 8), (32, 32)] {
            let g = build_generator(s, c, 0).unwrap();
            assert_eq!(g.stack.param_count(), generator_params_closed_form(s, c));
            let d = build_discriminator(s, c, 0).unwrap();
            let f = 4 * c * (s / 8) * (s / 8);
            let expected = (c * 3 * 16 + c) + 2 * c * c * 16 + 4 * c + 4 * c * 2 * c * 16 + 8 * c + f + 1;
            assert_eq!(d.stack.param_count(), expected);
        }
    }

    #[test]
    fn discriminator_outputs() {
        let mut d = build_discriminator(32, 8, 3).unwrap();
        let y = d.forward(&random_batch(&[4, 3, 32, 32], 1)).unwrap();
        assert_eq!(y.shape(), &[4, 1]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        d.set_mode(Mode::Eval);
        let x = random_batch(&[4, 3, 32, 32], 2);
        let a = d.forward(&x).unwrap();
        let b = d.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn untrained_discriminator_is_undecided() {
        let mut means = 0.0;
        for seed in 0..100 {
            let mut d = build_discriminator(16, 4, seed).unwrap();
            let y = d.forward(&random_batch(&[4, 3, 16, 16], 1000 + seed)).unwrap();
            let m = y.reduce_mean().unwrap();
            assert!((m - 0.5).abs() < 0.3, "seed {seed}: {m}");
            means += m / 100.0;
        }
        assert!((means - 0.5).abs() < 0.05);
    }

    #[test]
    fn destylize_contract() {
        let mut g = build_generator(16, 4, 5).unwrap();
        g.set_mode(Mode::Eval);
        let img = Image::from_fn(16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        let a = g.destylize(&img).unwrap();
        let b = g.destylize(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (16, 16));
        assert!(a.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let err = g.destylize(&Image::filled(32, 32, [0.5; 3])).unwrap_err().to_string();
        assert!(err.contains("32x32") && err.contains("16x16"), "{err}");
        let batch = g.destylize_batch(&[img.clone(), img]).unwrap();
        assert_eq!(batch[0], a);
    }

    #[test]
    fn whole_generator_gradient_check() {
        for seed in 0..3 {
            let mut g = build_generator(8, 4, seed).unwrap();
            let x = random_batch(&[2, 3, 8, 8], 100 + seed);
            let r = grad_check_sampled(&mut g.stack, &x, 1e-6, 40).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn whole_discriminator_gradient_check() {
        for seed in 0..3 {
            let mut d = build_discriminator(8, 4, seed).unwrap();
            let x = random_batch(&[3, 3, 8, 8], 200 + seed);
            let r = grad_check_sampled(&mut d.stack, &x, 1e-6, 40).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        }
    }
}
