//! Encoder-decoder segmentation backbone. Three stride-2 encoder stages
//! (widths 16/32/64) feed three decoder blocks D1/D2/D3; D1 and D2 receive
//! skip connections from the matching-resolution encoder stages by channel
//! concatenation. D2's output `p` (32 channels) and D3's output `q`
//! (one channel per class) share the half-input resolution: D3 upsamples by
//! a factor of one.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, bilinear_interpolate, conv2d, BatchNormParams, Conv2dParams, Mode,
};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

pub const ENC_WIDTHS: [usize; 3] = [16, 32, 64];
pub const D1_WIDTH: usize = 32;
/// Channel count of the D2 stack `p`.
pub const P_CHANNELS: usize = 32;

/// conv3×3 – batchnorm – ReLU.
pub struct ConvBnRelu<S: Scalar> {
    pub conv: Conv2dParams<S>,
    pub bn: BatchNormParams<S>,
}

impl<S: Scalar> ConvBnRelu<S> {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, stride: usize) -> Self {
        ConvBnRelu {
            conv: Conv2dParams::init(rng, c_out, c_in, 3, stride, 1),
            bn: BatchNormParams::identity(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let y = conv2d(x, &self.conv)?;
        let y = batchnorm(&y, &self.bn, mode)?;
        ops::relu(&y)
    }
}

/// The decoder activations consumed downstream: D1 at quarter resolution,
/// D2 (`p`) and D3 (`q`) at half resolution.
pub struct BlockOutputs<S: Scalar> {
    pub d1: Tensor<S>,
    pub d2: Tensor<S>,
    pub d3: Tensor<S>,
}

pub struct SegBackbone<S: Scalar> {
    pub enc1: ConvBnRelu<S>,
    pub enc2: ConvBnRelu<S>,
    pub enc3: ConvBnRelu<S>,
    pub dec1: ConvBnRelu<S>,
    pub dec2: ConvBnRelu<S>,
    pub dec3: ConvBnRelu<S>,
    pub num_classes: usize,
}

impl<S: Scalar> SegBackbone<S> {
    pub fn init(rng: &mut ChaCha8Rng, num_classes: usize) -> Self {
        let [w1, w2, w3] = ENC_WIDTHS;
        SegBackbone {
            enc1: ConvBnRelu::init(rng, 1, w1, 2),
            enc2: ConvBnRelu::init(rng, w1, w2, 2),
            enc3: ConvBnRelu::init(rng, w2, w3, 2),
            dec1: ConvBnRelu::init(rng, w3 + w2, D1_WIDTH, 1),
            dec2: ConvBnRelu::init(rng, D1_WIDTH + w1, P_CHANNELS, 1),
            dec3: ConvBnRelu::init(rng, P_CHANNELS, num_classes, 1),
            num_classes,
        }
    }

    /// Runs the full encoder-decoder and exposes every decoder block output.
    pub fn forward_blocks(&self, image: &Tensor<S>, mode: Mode) -> Result<BlockOutputs<S>> {
        check_input(image)?;
        let e1 = self.enc1.forward(image, mode)?;
        let e2 = self.enc2.forward(&e1, mode)?;
        let e3 = self.enc3.forward(&e2, mode)?;

        // D1: 2× upsample + skip from the matching-resolution stage.
        let u1 = bilinear_interpolate(&e3, e2.dim(2), e2.dim(3))?;
        let d1 = self.dec1.forward(&ops::concat_channels(&[&u1, &e2])?, mode)?;

        // D2: 2× upsample + skip; output is the feature stack p.
        let u2 = bilinear_interpolate(&d1, e1.dim(2), e1.dim(3))?;
        let d2 = self.dec2.forward(&ops::concat_channels(&[&u2, &e1])?, mode)?;

        // D3: upsample factor 1; output q is a class-score stack.
        let d3 = self.dec3.forward(&d2, mode)?;
        Ok(BlockOutputs { d1, d2, d3 })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for (name, block) in self.blocks_mut() {
            f(format!("{name}.conv.weight"), &mut block.conv.weight);
            f(format!("{name}.conv.bias"), &mut block.conv.bias);
            f(format!("{name}.bn.gamma"), &mut block.bn.gamma);
            f(format!("{name}.bn.beta"), &mut block.bn.beta);
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &RefCell<Vec<S>>)) {
        for (name, block) in self.blocks() {
            f(format!("{name}.bn.running_mean"), &block.bn.running_mean);
            f(format!("{name}.bn.running_var"), &block.bn.running_var);
        }
    }

    fn blocks(&self) -> [(&'static str, &ConvBnRelu<S>); 6] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("enc3", &self.enc3),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
            ("dec3", &self.dec3),
        ]
    }

    fn blocks_mut(&mut self) -> [(&'static str, &mut ConvBnRelu<S>); 6] {
        let SegBackbone {
            enc1,
            enc2,
            enc3,
            dec1,
            dec2,
            dec3,
            ..
        } = self;
        [
            ("enc1", enc1),
            ("enc2", enc2),
            ("enc3", enc3),
            ("dec1", dec1),
            ("dec2", dec2),
            ("dec3", dec3),
        ]
    }
}

fn check_input<S: Scalar>(image: &Tensor<S>) -> Result<()> {
    if image.rank() != 4 || image.dim(1) != 1 {
        return Err(Error::invalid(
            "backbone_forward",
            format!("input must be B×1×H×W, got {:?}", image.shape()),
        ));
    }
    let (h, w) = (image.dim(2), image.dim(3));
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(
            "backbone_forward",
            format!("input size {h}×{w} must be divisible by 8"),
        ));
    }
    Ok(())
}

/// The spec'd surface: the two feature stacks the alignment and distillation
/// modules consume, (p, q) at half input resolution.
pub fn backbone_forward<S: Scalar>(
    image: &Tensor<S>,
    model: &SegBackbone<S>,
    mode: Mode,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let outs = model.forward_blocks(image, mode)?;
    Ok((outs.d2, outs.d3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::seeded_rng;

    #[test]
    fn output_shapes_at_64() {
        let mut rng = seeded_rng(1, 0);
        let bb = SegBackbone::<f32>::init(&mut rng, 2);
        let x = Tensor::zeros(vec![1, 1, 64, 64]);
        let (p, q) = backbone_forward(&x, &bb, Mode::Eval).unwrap();
        assert_eq!(p.shape(), &[1, 32, 32, 32]);
        assert_eq!(q.shape(), &[1, 2, 32, 32]);
    }

    #[test]
    fn indivisible_input_is_rejected_with_requirement() {
        let mut rng = seeded_rng(1, 0);
        let bb = SegBackbone::<f32>::init(&mut rng, 2);
        let x = Tensor::zeros(vec![1, 1, 60, 64]);
        let err = backbone_forward(&x, &bb, Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("divisible by 8"), "{err}");
    }

    #[test]
    fn eval_forward_is_deterministic_per_sample() {
        let mut rng = seeded_rng(2, 0);
        let bb = SegBackbone::<f32>::init(&mut rng, 2);
        let mut img = vec![0.0f32; 64 * 64];
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 37) % 251) as f32 / 251.0;
        }
        let mut two = img.clone();
        two.extend_from_slice(&img);
        let batch = Tensor::from_vec(vec![2, 1, 64, 64], two).unwrap();
        let (p, q) = backbone_forward(&batch, &bb, Mode::Eval).unwrap();
        let half_p = p.numel() / 2;
        assert_eq!(&p.data()[..half_p], &p.data()[half_p..]);
        let half_q = q.numel() / 2;
        assert_eq!(&q.data()[..half_q], &q.data()[half_q..]);
    }

    #[test]
    fn teacher_and_student_share_shapes_not_parameters() {
        let mut rng_t = seeded_rng(10, 0);
        let mut rng_s = seeded_rng(11, 0);
        let teacher = SegBackbone::<f32>::init(&mut rng_t, 2);
        let student = SegBackbone::<f32>::init(&mut rng_s, 2);
        assert_eq!(
            teacher.enc1.conv.weight.shape(),
            student.enc1.conv.weight.shape()
        );
        assert_ne!(
            teacher.enc1.conv.weight.data(),
            student.enc1.conv.weight.data()
        );
    }
}
