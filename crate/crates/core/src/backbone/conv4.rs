use rand::Rng;

use crate::autodiff::{Checkpoint, Mode, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

pub const FILTERS: usize = 64;
pub const BLOCKS: usize = 4;
pub const MIN_INPUT_SIZE: usize = 16;

const META_GEOMETRY: &str = "meta.geometry";

/// One conv 3x3 -> batchnorm -> relu -> maxpool 2x2 stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

/// The Conv-4 embedding function: four [`ConvBlock`]s of 64 filters each,
/// flattened at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork {
    in_channels: usize,
    input_size: usize,
    blocks: Vec<ConvBlock>,
}

/// Output of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub embedding: Var,
    /// Tape handles of the trainable parameters in [`EmbeddingNetwork::params`]
    /// order; empty when parameters were recorded as constants.
    pub params: Vec<Var>,
}

fn spatial_after_blocks(size: usize) -> usize {
    (0..BLOCKS).fold(size, |s, _| s / 2)
}

impl EmbeddingNetwork {
    /// Kaiming-uniform kernels (bound `sqrt(6 / fan_in)`), biases uniform in
    /// `±1/sqrt(fan_in)`, gamma 1, beta 0. Deterministic in `seed`.
    pub fn init_conv4(in_channels: usize, input_size: usize, seed: u64) -> Result<Self> {
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::Geometry(format!(
                "input channels must be 1 or 3, got {in_channels}"
            )));
        }
        if input_size < MIN_INPUT_SIZE {
            return Err(Error::Geometry(format!(
                "input size {input_size} is below the minimum of {MIN_INPUT_SIZE}"
            )));
        }
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut ch = in_channels;
        for b in 0..BLOCKS {
            let mut rng = rng::stream(seed, &[purpose::INIT, b as u64]);
            let fan_in = (ch * 9) as f32;
            let kb = (6.0 / fan_in).sqrt();
            let bb = 1.0 / fan_in.sqrt();
            let kernel = (0..FILTERS * ch * 9)
                .map(|_| rng.random_range(-kb..kb))
                .collect();
            let bias = (0..FILTERS).map(|_| rng.random_range(-bb..bb)).collect();
            blocks.push(ConvBlock {
                kernel: Tensor::new(vec![FILTERS, ch, 3, 3], kernel)?,
                bias: Tensor::new(vec![FILTERS], bias)?,
                gamma: Tensor::full(&[FILTERS], 1.0),
                beta: Tensor::zeros(&[FILTERS]),
                stats: RunningStats::new(FILTERS),
            });
            ch = FILTERS;
        }
        Ok(EmbeddingNetwork {
            in_channels,
            input_size,
            blocks,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ConvBlock] {
        &mut self.blocks
    }

    pub fn embedding_dim(&self) -> usize {
        let s = spatial_after_blocks(self.input_size);
        FILTERS * s * s
    }

    /// Trainable parameters, per block: kernel, bias, gamma, beta.
    pub fn params(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.kernel, &b.bias, &b.gamma, &b.beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.kernel, &mut b.bias, &mut b.gamma, &mut b.beta])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| {
                ["conv.weight", "conv.bias", "bn.weight", "bn.bias"]
                    .map(|p| format!("block{i}.{p}"))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::shape(
                "embed",
                "rank",
                format!("expected [B, C, H, W], got {shape:?}"),
            ));
        }
        if shape[1] != self.in_channels {
            return Err(Error::shape(
                "embed",
                "channel (1)",
                format!("network expects {} channels, got {}", self.in_channels, shape[1]),
            ));
        }
        for (axis, name) in [(2, "height (2)"), (3, "width (3)")] {
            if shape[axis] != self.input_size {
                return Err(Error::shape(
                    "embed",
                    name,
                    format!("network expects {}, got {}", self.input_size, shape[axis]),
                ));
            }
        }
        Ok(())
    }

    /// Record the embedding of `images` on `tape`.
    ///
    /// Train mode normalizes with batch statistics and updates the running
    /// statistics. With `track_params` the parameters become trainable
    /// leaves whose handles are returned in [`Forward::params`].
    pub fn forward(&mut self, tape: &mut Tape, images: Var, mode: Mode, track_params: bool) -> Result<Forward> {
        self.check_input(tape.value(images).shape())?;
        let mut params = Vec::new();
        let mut x = images;
        for block in &mut self.blocks {
            let mut leaf = |t: &Tensor| {
                if track_params {
                    let v = tape.param(t);
                    params.push(v);
                    v
                } else {
                    tape.constant(t.clone())
                }
            };
            let (k, b, g, bt) = (
                leaf(&block.kernel),
                leaf(&block.bias),
                leaf(&block.gamma),
                leaf(&block.beta),
            );
            let y = tape.conv2d(x, k, b)?;
            let y = tape.batchnorm2d(y, g, bt, &mut block.stats, mode)?;
            let y = tape.relu(y);
            x = tape.maxpool2x2(y)?;
        }
        let embedding = tape.flatten(x)?;
        Ok(Forward { embedding, params })
    }

    /// Eval-mode embedding `[B, D]` using running statistics; leaves the
    /// network untouched.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = scratch.forward(&mut tape, x, Mode::Eval, false)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Embedding `[B, D]` in the requested batchnorm mode. Train mode
    /// updates the running statistics.
    pub fn embed_with_mode(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, mode, false)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Copy gradients computed on `tape` into the parameters' grad slots.
    pub fn collect_grads(&mut self, tape: &Tape, forward: &Forward) -> Result<()> {
        let params = self.params_mut();
        if forward.params.len() != params.len() {
            return Err(Error::contract(
                "collect_grads",
                "forward pass did not track parameters",
            ));
        }
        for (p, &v) in params.into_iter().zip(&forward.params) {
            let g = tape
                .grad(v)
                .ok_or_else(|| Error::contract("collect_grads", "backward has not run"))?;
            p.set_grad(g.to_vec())?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert(
            META_GEOMETRY,
            Tensor::new(vec![2], vec![self.in_channels as f32, self.input_size as f32])
                .expect("two values"),
        );
        for (name, p) in self.param_names().into_iter().zip(self.params()) {
            let mut p = p.clone();
            p.clear_grad();
            ck.insert(name, p);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            ck.insert(
                format!("block{i}.bn.running_mean"),
                Tensor::new(vec![FILTERS], b.stats.mean.clone()).expect("64 values"),
            );
            ck.insert(
                format!("block{i}.bn.running_var"),
                Tensor::new(vec![FILTERS], b.stats.var.clone()).expect("64 values"),
            );
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let geom = ck.require(META_GEOMETRY)?.data();
        if geom.len() != 2 {
            return Err(Error::Checkpoint("malformed meta.geometry".into()));
        }
        let mut net = Self::init_conv4(geom[0] as usize, geom[1] as usize, 0)?;
        let names = net.param_names();
        for (name, p) in names.iter().zip(net.params_mut()) {
            let t = ck.require(name)?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.clone();
        }
        for (i, b) in net.blocks.iter_mut().enumerate() {
            for (suffix, dst) in [("running_mean", &mut b.stats.mean), ("running_var", &mut b.stats.var)] {
                let t = ck.require(&format!("block{i}.bn.{suffix}"))?;
                if t.len() != FILTERS {
                    return Err(Error::Checkpoint(format!("block{i}.bn.{suffix} has wrong length")));
                }
                *dst = t.data().to_vec();
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, c: usize, s: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[99]);
        Tensor::new(vec![b, c, s, s], (0..b * c * s * s).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn embedding_dims_for_presets() {
        assert_eq!(EmbeddingNetwork::init_conv4(1, 28, 0).unwrap().embedding_dim(), 64);
        assert_eq!(EmbeddingNetwork::init_conv4(3, 84, 0).unwrap().embedding_dim(), 1600);
        assert_eq!(EmbeddingNetwork::init_conv4(1, 16, 0).unwrap().embedding_dim(), 64);
    }

    #[test]
    fn forward_shape_matches_embedding_dim() {
        let net = EmbeddingNetwork::init_conv4(1, 28, 3).unwrap();
        let e = net.embed(&images(3, 1, 28, 1)).unwrap();
        assert_eq!(e.shape(), &[3, 64]);
    }

    #[test]
    fn param_count_depends_only_on_channels() {
        let a = EmbeddingNetwork::init_conv4(1, 28, 0).unwrap();
        let b = EmbeddingNetwork::init_conv4(1, 84, 5).unwrap();
        assert_eq!(a.param_count(), 111_936);
        assert_eq!(b.param_count(), 111_936);
        assert_eq!(EmbeddingNetwork::init_conv4(3, 28, 0).unwrap().param_count(), 113_088);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = EmbeddingNetwork::init_conv4(3, 84, 11).unwrap();
        let b = EmbeddingNetwork::init_conv4(3, 84, 11).unwrap();
        let c = EmbeddingNetwork::init_conv4(3, 84, 12).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_small_or_odd_geometry() {
        assert!(matches!(EmbeddingNetwork::init_conv4(1, 15, 0), Err(Error::Geometry(_))));
        assert!(matches!(EmbeddingNetwork::init_conv4(2, 28, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn geometry_mismatch_is_a_shape_error() {
        let net = EmbeddingNetwork::init_conv4(1, 28, 0).unwrap();
        assert!(matches!(net.embed(&images(2, 1, 84, 0)), Err(Error::Shape { .. })));
        assert!(matches!(net.embed(&images(2, 3, 28, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_image_train_mode_normalizes_before_pooling() {
        // The last block normalizes its 3x3 pre-pool map, so B=1 is still
        // well defined at 28x28; a 1x1 map would be degenerate.
        let mut net = EmbeddingNetwork::init_conv4(1, 28, 0).unwrap();
        let e = net.embed_with_mode(&images(1, 1, 28, 0), Mode::Train).unwrap();
        assert_eq!(e.shape(), &[1, 64]);
        assert!(e.is_finite());
    }

    #[test]
    fn identical_images_identical_rows() {
        let net = EmbeddingNetwork::init_conv4(1, 28, 0).unwrap();
        let one = images(1, 1, 28, 4);
        let two = Tensor::stack(&[&one.clone().reshape(vec![1, 28, 28]).unwrap(); 2]).unwrap();
        let e = net.embed(&two).unwrap();
        assert_eq!(e.data()[..64], e.data()[64..]);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_embeddings() {
        let mut net = EmbeddingNetwork::init_conv4(1, 28, 9).unwrap();
        net.embed_with_mode(&images(4, 1, 28, 2), Mode::Train).unwrap();
        let bytes = net.to_checkpoint().to_bytes();
        let back = EmbeddingNetwork::from_checkpoint(&Checkpoint::read_from(&bytes[..]).unwrap()).unwrap();
        assert_eq!(back, net);
        let x = images(3, 1, 28, 5);
        let a = net.embed(&x).unwrap();
        let b = back.embed(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
