//! Spectral-mask U-Net.
//!
//! Encoder stage `i`: 5x5 stride-2 convolution, batch norm, leaky ReLU (0.2).
//! Decoder stage `j`: 5x5 stride-2 transposed convolution, batch norm, ReLU,
//! with dropout on the first `dropout_stages` stages. Decoder stage `j > 0`
//! reads the channel concatenation of the previous decoder output and the
//! mirrored encoder output. A 1x1 convolution and a sigmoid turn the last
//! decoder output into a mask with the input's spatial shape.
//!
//! Convolutions feeding batch norm carry no bias: the normalization removes
//! any per-channel offset, so such a bias would never receive gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{
    activate, activate_backward, batchnorm2d, batchnorm2d_backward, concat_channels, conv2d,
    conv2d_backward, conv_transpose2d, conv_transpose2d_backward, dropout, dropout_backward,
    split_channels, Activation, BatchNormCache, BatchNormState, Checkpoint, CheckpointError,
    ConvGeometry, DropoutMask, Real, Tensor, TensorError,
};

#[derive(Debug, thiserror::Error)]
pub enum UNetError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Architecture descriptor; stored in checkpoints and validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetArch {
    /// Output channels of each encoder stage; its length is the depth.
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub dropout_stages: usize,
    pub dropout_p: f64,
    pub patch_bins: usize,
    pub patch_frames: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64, 128, 256, 512],
            kernel: 5,
            dropout_stages: 3,
            dropout_p: 0.5,
            patch_bins: 512,
            patch_frames: 128,
        }
    }
}

impl UNetArch {
    /// Depth-4, 256x64 variant for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64],
            patch_bins: 256,
            patch_frames: 64,
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        let d = self.depth();
        if d == 0 {
            return Err(UNetError::Arch("at least one encoder stage is required".into()));
        }
        if self.encoder_channels.contains(&0) {
            return Err(UNetError::Arch("channel counts must be positive".into()));
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return Err(UNetError::Arch(format!("kernel {} must be odd and >= 3", self.kernel)));
        }
        let unit = 1usize << d;
        for (name, v) in [("patch_bins", self.patch_bins), ("patch_frames", self.patch_frames)] {
            if v == 0 || v % unit != 0 {
                return Err(UNetError::Arch(format!(
                    "{name} = {v} is not divisible by 2^{d} = {unit}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(UNetError::Arch(format!("dropout {} not in [0, 1)", self.dropout_p)));
        }
        if self.dropout_stages > d {
            return Err(UNetError::Arch(format!(
                "{} dropout stages for {d} decoder stages",
                self.dropout_stages
            )));
        }
        Ok(())
    }

    /// Input and output channels of decoder stage `j`.
    pub fn decoder_channels(&self, j: usize) -> (usize, usize) {
        let d = self.depth();
        let enc = &self.encoder_channels;
        let input = if j == 0 {
            enc[d - 1]
        } else {
            self.decoder_channels(j - 1).1 + enc[d - 1 - j]
        };
        let output = if j + 2 <= d { enc[d - 2 - j] } else { enc[0] };
        (input, output)
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::halving(self.kernel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One convolution + batch-norm block.
#[derive(Debug, Clone)]
pub struct Stage<T: Real> {
    pub kernel: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub norm: BatchNormState<T>,
}

impl<T: Real> Stage<T> {
    fn new(kernel_shape: [usize; 4], fan_in: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            kernel: Tensor::uniform(&kernel_shape, -bound, bound, rng).requiring_grad(),
            gamma: Tensor::full(&[channels], T::one()).requiring_grad(),
            beta: Tensor::zeros(&[channels]).requiring_grad(),
            norm: BatchNormState::new(channels),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet<T: Real = f32> {
    arch: UNetArch,
    pub encoders: Vec<Stage<T>>,
    pub decoders: Vec<Stage<T>>,
    pub head_kernel: Tensor<T>,
    pub head_bias: Tensor<T>,
}

struct StageCache<T: Real> {
    input: Tensor<T>,
    norm: BatchNormCache<T>,
    pre_activation: Tensor<T>,
    dropout: DropoutMask<T>,
}

/// Intermediate values of a training-mode forward pass.
pub struct ForwardCache<T: Real> {
    encoders: Vec<StageCache<T>>,
    decoders: Vec<StageCache<T>>,
    head_input: Tensor<T>,
    mask: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }
}

fn stage_name(decoder: bool, i: usize) -> String {
    format!("{}{i}", if decoder { "dec" } else { "enc" })
}

impl<T: Real> UNet<T> {
    /// Fan-in-scaled uniform initialization, deterministic in `seed`.
    pub fn new(arch: UNetArch, seed: u64) -> Result<Self, UNetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel;
        let mut encoders = Vec::with_capacity(arch.depth());
        let mut in_ch = 1;
        for &out in &arch.encoder_channels {
            encoders.push(Stage::new([out, in_ch, k, k], in_ch * k * k, out, &mut rng));
            in_ch = out;
        }
        let decoders = (0..arch.depth())
            .map(|j| {
                let (i, o) = arch.decoder_channels(j);
                Stage::new([i, o, k, k], i * k * k, o, &mut rng)
            })
            .collect();
        let c0 = arch.encoder_channels[0];
        let bound = 1.0 / (c0 as f64).sqrt();
        Ok(Self {
            head_kernel: Tensor::uniform(&[1, c0, 1, 1], -bound, bound, &mut rng).requiring_grad(),
            head_bias: Tensor::zeros(&[1]).requiring_grad(),
            arch,
            encoders,
            decoders,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    /// Learnable tensors in a fixed order, with stable names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (dec, stages) in [(false, &self.encoders), (true, &self.decoders)] {
            for (i, s) in stages.iter().enumerate() {
                let n = stage_name(dec, i);
                out.push((format!("{n}.kernel"), &s.kernel));
                out.push((format!("{n}.gamma"), &s.gamma));
                out.push((format!("{n}.beta"), &s.beta));
            }
        }
        out.push(("head.kernel".into(), &self.head_kernel));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Same order as [`named_parameters`](Self::named_parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for s in self.encoders.iter_mut().chain(self.decoders.iter_mut()) {
            out.push(&mut s.kernel);
            out.push(&mut s.gamma);
            out.push(&mut s.beta);
        }
        out.push(&mut self.head_kernel);
        out.push(&mut self.head_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), UNetError> {
        let [_, c, h, w] = x.dims4()?;
        if c != 1 || h % (1 << self.arch.depth()) != 0 || w % (1 << self.arch.depth()) != 0 {
            return Err(UNetError::Tensor(TensorError::Shape(format!(
                "input {:?} incompatible with depth {}",
                x.shape(),
                self.arch.depth()
            ))));
        }
        Ok(())
    }

    /// Training-mode forward pass; updates batch-norm running statistics.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        rng: &mut impl Rng,
    ) -> Result<ForwardCache<T>, UNetError> {
        self.check_input(x)?;
        self.run(x, Mode::Train, rng)
    }

    /// Eval-mode forward pass (running statistics, no dropout); read-only.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, UNetError> {
        self.check_input(x)?;
        let mut scratch = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(scratch.run(x, Mode::Eval, &mut rng)?.mask)
    }

    fn run(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut impl Rng) -> Result<ForwardCache<T>, UNetError> {
        let train = mode == Mode::Train;
        let geom = self.arch.geometry();
        let depth = self.arch.depth();
        let mut enc_caches = Vec::with_capacity(depth);
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (i, s) in self.encoders.iter_mut().enumerate() {
            let conv = conv2d(&h, &s.kernel, None, geom)?;
            let (pre, norm) = batchnorm2d(&conv, &s.gamma, &s.beta, &mut s.norm, train)?;
            let out = activate(&pre, Activation::LeakyRelu);
            out.ensure_finite(&stage_name(false, i))?;
            enc_caches.push(StageCache {
                input: h,
                norm,
                pre_activation: pre,
                dropout: DropoutMask::identity(),
            });
            skips.push(out.clone());
            h = out;
        }
        let mut dec_caches = Vec::with_capacity(depth);
        for j in 0..depth {
            let input = if j == 0 {
                h
            } else {
                concat_channels(&h, &skips[depth - 1 - j])?
            };
            let s = &mut self.decoders[j];
            let up = conv_transpose2d(&input, &s.kernel, None, geom)?;
            let (pre, norm) = batchnorm2d(&up, &s.gamma, &s.beta, &mut s.norm, train)?;
            let act = activate(&pre, Activation::Relu);
            let p = if j < self.arch.dropout_stages { self.arch.dropout_p } else { 0.0 };
            let (out, mask) = dropout(&act, p, train, rng)?;
            out.ensure_finite(&stage_name(true, j))?;
            dec_caches.push(StageCache {
                input,
                norm,
                pre_activation: pre,
                dropout: mask,
            });
            h = out;
        }
        let logits = conv2d(&h, &self.head_kernel, Some(&self.head_bias), ConvGeometry::new(1, 0))?;
        let mask = activate(&logits, Activation::Sigmoid);
        mask.ensure_finite("head")?;
        Ok(ForwardCache {
            encoders: enc_caches,
            decoders: dec_caches,
            head_input: h,
            mask,
        })
    }

    /// Accumulates parameter gradients for `d loss / d mask`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_mask: &Tensor<T>) -> Result<(), UNetError> {
        let geom = self.arch.geometry();
        let depth = self.arch.depth();
        let grad_logits = activate_backward(Activation::Sigmoid, &cache.mask, &cache.mask, grad_mask)?;
        let head = conv2d_backward(&cache.head_input, &self.head_kernel, ConvGeometry::new(1, 0), &grad_logits)?;
        self.head_kernel.accumulate_grad(head.kernel.data())?;
        self.head_bias.accumulate_grad(head.bias.data())?;

        let mut enc_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        let add = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<(), TensorError> {
            *slot = Some(match slot.take() {
                None => g,
                Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
            });
            Ok(())
        };

        let mut g = head.input;
        for j in (0..depth).rev() {
            let c = &cache.decoders[j];
            let s = &mut self.decoders[j];
            g = dropout_backward(&c.dropout, &g)?;
            g = activate_backward(Activation::Relu, &c.pre_activation, &c.pre_activation, &g)?;
            let bn = batchnorm2d_backward(&c.norm, &s.gamma, &g)?;
            s.gamma.accumulate_grad(bn.gamma.data())?;
            s.beta.accumulate_grad(bn.beta.data())?;
            let conv = conv_transpose2d_backward(&c.input, &s.kernel, geom, &bn.input)?;
            s.kernel.accumulate_grad(conv.kernel.data())?;
            if j == 0 {
                add(&mut enc_grads[depth - 1], conv.input)?;
                break;
            }
            let prev = self.arch.decoder_channels(j - 1).1;
            let (g_prev, g_skip) = split_channels(&conv.input, prev)?;
            add(&mut enc_grads[depth - 1 - j], g_skip)?;
            g = g_prev;
        }

        for i in (0..depth).rev() {
            let Some(g) = enc_grads[i].take() else { continue };
            let c = &cache.encoders[i];
            let s = &mut self.encoders[i];
            let g = activate_backward(Activation::LeakyRelu, &c.pre_activation, &c.pre_activation, &g)?;
            let bn = batchnorm2d_backward(&c.norm, &s.gamma, &g)?;
            s.gamma.accumulate_grad(bn.gamma.data())?;
            s.beta.accumulate_grad(bn.beta.data())?;
            let conv = conv2d_backward(&c.input, &s.kernel, geom, &bn.input)?;
            s.kernel.accumulate_grad(conv.kernel.data())?;
            if i > 0 {
                add(&mut enc_grads[i - 1], conv.input)?;
            }
        }
        Ok(())
    }

    /// Parameters plus batch-norm running statistics, tagged with the architecture.
    pub fn to_checkpoint(&self, extra_meta: serde_json::Value) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "unet",
            "arch": self.arch,
            "extra": extra_meta,
        }));
        for (name, t) in self.named_parameters() {
            ck.push(name, t);
        }
        for (dec, stages) in [(false, &self.encoders), (true, &self.decoders)] {
            for (i, s) in stages.iter().enumerate() {
                let n = stage_name(dec, i);
                let c = s.norm.running_mean.len();
                ck.push(format!("{n}.running_mean"), &Tensor::new(&[c], s.norm.running_mean.clone()).expect("channels"));
                ck.push(format!("{n}.running_var"), &Tensor::new(&[c], s.norm.running_var.clone()).expect("channels"));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>, expected: Option<&UNetArch>) -> Result<Self, UNetError> {
        let arch: UNetArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| UNetError::Arch(format!("checkpoint carries no usable arch: {e}")))?;
        if let Some(want) = expected {
            if want != &arch {
                return Err(UNetError::Arch(format!(
                    "checkpoint architecture {arch:?} does not match expected {want:?}"
                )));
            }
        }
        let mut net = Self::new(arch, 0)?;
        let names: Vec<String> = net.named_parameters().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(net.parameters_mut()) {
            let stored = ck.get(name)?;
            if stored.shape() != p.shape() {
                return Err(UNetError::Arch(format!(
                    "{name}: stored {:?}, expected {:?}",
                    stored.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(stored.data());
        }
        for (dec, stages) in [(false, &mut net.encoders), (true, &mut net.decoders)] {
            for (i, s) in stages.iter_mut().enumerate() {
                let n = stage_name(dec, i);
                let mean = ck.get(&format!("{n}.running_mean"))?;
                let var = ck.get(&format!("{n}.running_var"))?;
                if mean.len() != s.norm.running_mean.len() || var.len() != s.norm.running_var.len() {
                    return Err(UNetError::Arch(format!("{n}: running statistics size")));
                }
                s.norm.running_mean.copy_from_slice(mean.data());
                s.norm.running_var.copy_from_slice(var.data());
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetArch {
        UNetArch {
            encoder_channels: vec![2, 4],
            patch_bins: 8,
            patch_frames: 4,
            dropout_stages: 1,
            ..UNetArch::default()
        }
    }

    #[test]
    fn validation_rejects_bad_arches() {
        let mut a = UNetArch::default();
        a.patch_frames = 100;
        assert!(a.validate().is_err());
        let mut a = tiny();
        a.kernel = 4;
        assert!(a.validate().is_err());
        let mut a = tiny();
        a.dropout_stages = 3;
        assert!(a.validate().is_err());
        assert!(UNetArch::default().validate().is_ok());
        assert!(UNetArch::desk().validate().is_ok());
    }

    #[test]
    fn decoder_channel_schedule() {
        let a = UNetArch::default();
        let sched: Vec<_> = (0..6).map(|j| a.decoder_channels(j)).collect();
        assert_eq!(
            sched,
            vec![(512, 256), (512, 128), (256, 64), (128, 32), (64, 16), (32, 16)]
        );
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::<f32>::new(tiny(), 9).unwrap();
        let b = UNet::<f32>::new(tiny(), 9).unwrap();
        let c = UNet::<f32>::new(tiny(), 10).unwrap();
        let flat = |n: &UNet<f32>| -> Vec<f32> {
            n.named_parameters().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        let diff = flat(&a)
            .iter()
            .zip(flat(&c))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn zero_head_gives_half_mask() {
        let mut net = UNet::<f64>::new(tiny(), 1).unwrap();
        net.head_kernel.data_mut().fill(0.0);
        net.head_bias.data_mut().fill(0.0);
        let x = Tensor::from_fn(&[2, 1, 8, 4], |i| (i % 7) as f64 * 0.1);
        let m = net.predict(&x).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let mut net = UNet::<f32>::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::uniform(&[2, 1, 8, 4], 0.0, 1.0, &mut rng);
        net.forward_train(&x, &mut rng).unwrap();
        let ck = net.to_checkpoint(serde_json::Value::Null);
        let back = UNet::from_checkpoint(&ck, Some(&tiny())).unwrap();
        assert_eq!(net.predict(&x).unwrap(), back.predict(&x).unwrap());
        let mut other = tiny();
        other.encoder_channels = vec![2, 8];
        assert!(UNet::<f32>::from_checkpoint(&ck, Some(&other)).is_err());
    }

    #[test]
    fn rejects_mismatched_input() {
        let net = UNet::<f32>::new(tiny(), 0).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 1, 6, 4])).is_err());
        assert!(net.predict(&Tensor::zeros(&[1, 2, 8, 4])).is_err());
    }
}
