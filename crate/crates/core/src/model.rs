//! A complete segmentation model: the backbone plus an optional chain of
//! alignment modules fusing decoder blocks into the predicted map. The
//! standard configuration aggregates D2 and D3; dropping the alignment chain
//! (aggregate = [D3]) leaves the plain backbone whose map is the
//! interpolated D3 stack.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{BlockOutputs, SegBackbone, D1_WIDTH, P_CHANNELS};
use crate::error::{Error, Result};
use crate::hfam::HfamParams;
use crate::layers::{bilinear_interpolate, conv2d, Conv2dParams, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One decoder block of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    D1,
    D2,
    D3,
}

impl Block {
    pub fn code(self) -> u8 {
        match self {
            Block::D1 => 1,
            Block::D2 => 2,
            Block::D3 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Block::D1),
            2 => Some(Block::D2),
            3 => Some(Block::D3),
            _ => None,
        }
    }

    fn channels(self, num_classes: usize) -> usize {
        match self {
            Block::D1 => D1_WIDTH,
            Block::D2 => P_CHANNELS,
            Block::D3 => num_classes,
        }
    }
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Block::D1 => "d1",
            Block::D2 => "d2",
            Block::D3 => "d3",
        })
    }
}

/// Architecture description: class count and which decoder blocks the
/// prediction head aggregates (in order, fused pairwise left to right).
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub aggregate: Vec<Block>,
}

impl ModelConfig {
    /// Full model: alignment over D2 and D3.
    pub fn full(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            aggregate: vec![Block::D2, Block::D3],
        }
    }

    /// Plain backbone: the predicted map is the interpolated D3 stack.
    pub fn backbone_only(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            aggregate: vec![Block::D3],
        }
    }

    pub fn with_aggregate(num_classes: usize, aggregate: Vec<Block>) -> Result<Self> {
        if aggregate.is_empty() {
            return Err(Error::invalid("model", "aggregate list must not be empty"));
        }
        Ok(ModelConfig {
            num_classes,
            aggregate,
        })
    }
}

pub struct ModelOutput<S: Scalar> {
    pub blocks: BlockOutputs<S>,
    /// Class-logit map at the input resolution.
    pub logits: Tensor<S>,
}

pub struct SegModel<S: Scalar> {
    pub backbone: SegBackbone<S>,
    pub aggregate: Vec<Block>,
    /// One alignment module per consecutive pair in `aggregate`.
    pub pairs: Vec<HfamParams<S>>,
    /// 1×1 projection to class logits when the aggregated stack does not
    /// already end at D3.
    pub class_proj: Option<Conv2dParams<S>>,
}

impl<S: Scalar> SegModel<S> {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let k = cfg.num_classes;
        let backbone = SegBackbone::init(rng, k);
        let mut pairs = Vec::new();
        for win in cfg.aggregate.windows(2) {
            pairs.push(HfamParams::init(
                rng,
                win[0].channels(k),
                win[1].channels(k),
            ));
        }
        let last = *cfg.aggregate.last().expect("non-empty aggregate");
        let class_proj = if last == Block::D3 {
            None
        } else {
            Some(Conv2dParams::init(rng, k, last.channels(k), 1, 1, 0))
        };
        SegModel {
            backbone,
            aggregate: cfg.aggregate.clone(),
            pairs,
            class_proj,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes(),
            aggregate: self.aggregate.clone(),
        }
    }

    pub fn forward(&self, image: &Tensor<S>, mode: Mode) -> Result<ModelOutput<S>> {
        let blocks = self.backbone.forward_blocks(image, mode)?;
        let (target_h, target_w) = (blocks.d2.dim(2), blocks.d2.dim(3));
        let pick = |b: Block| match b {
            Block::D1 => &blocks.d1,
            Block::D2 => &blocks.d2,
            Block::D3 => &blocks.d3,
        };
        let to_common = |t: &Tensor<S>| -> Result<Tensor<S>> {
            if t.dim(2) == target_h && t.dim(3) == target_w {
                Ok(t.clone())
            } else {
                bilinear_interpolate(t, target_h, target_w)
            }
        };

        let mut acc = to_common(pick(self.aggregate[0]))?;
        for (i, &blk) in self.aggregate.iter().skip(1).enumerate() {
            let next = to_common(pick(blk))?;
            acc = crate::hfam::align_fuse(&acc, &next, &self.pairs[i], mode)?;
        }
        if let Some(proj) = &self.class_proj {
            acc = conv2d(&acc, proj)?;
        }
        let logits = bilinear_interpolate(&acc, image.dim(2), image.dim(3))?;
        Ok(ModelOutput { blocks, logits })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        fn visit_conv<S: Scalar>(
            f: &mut dyn FnMut(String, &mut Tensor<S>),
            name: String,
            c: &mut Conv2dParams<S>,
        ) {
            f(format!("{name}.weight"), &mut c.weight);
            f(format!("{name}.bias"), &mut c.bias);
        }
        self.backbone
            .visit_params(&mut |name, t| f(format!("backbone.{name}"), t));
        for (i, pair) in self.pairs.iter_mut().enumerate() {
            visit_conv(f, format!("pair{i}.project"), &mut pair.project);
            for (sname, stream) in [
                ("stream_p", &mut pair.stream_p),
                ("stream_q", &mut pair.stream_q),
            ] {
                visit_conv(f, format!("pair{i}.{sname}.conv1"), &mut stream.conv1);
                f(format!("pair{i}.{sname}.bn.gamma"), &mut stream.bn.gamma);
                f(format!("pair{i}.{sname}.bn.beta"), &mut stream.bn.beta);
                visit_conv(f, format!("pair{i}.{sname}.conv2"), &mut stream.conv2);
            }
        }
        if let Some(proj) = &mut self.class_proj {
            f("class_proj.weight".to_string(), &mut proj.weight);
            f("class_proj.bias".to_string(), &mut proj.bias);
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &RefCell<Vec<S>>)) {
        self.backbone
            .visit_buffers(&mut |name, b| f(format!("backbone.{name}"), b));
        for (i, pair) in self.pairs.iter().enumerate() {
            for (sname, stream) in [("stream_p", &pair.stream_p), ("stream_q", &pair.stream_q)] {
                f(
                    format!("pair{i}.{sname}.bn.running_mean"),
                    &stream.bn.running_mean,
                );
                f(
                    format!("pair{i}.{sname}.bn.running_var"),
                    &stream.bn.running_var,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::seeded_rng;

    #[test]
    fn full_model_emits_class_logits_at_input_resolution() {
        let mut rng = seeded_rng(4, 0);
        let model = SegModel::<f32>::init(&mut rng, &ModelConfig::full(2));
        let x = Tensor::zeros(vec![1, 1, 64, 64]);
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2, 64, 64]);
    }

    #[test]
    fn backbone_only_model_interpolates_d3() {
        let mut rng = seeded_rng(4, 0);
        let model = SegModel::<f32>::init(&mut rng, &ModelConfig::backbone_only(5));
        let x = Tensor::zeros(vec![2, 1, 32, 32]);
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), &[2, 5, 32, 32]);
        assert!(model.pairs.is_empty());
        assert!(model.class_proj.is_none());
    }

    #[test]
    fn d1_d2_aggregate_gets_class_projection() {
        let mut rng = seeded_rng(4, 0);
        let cfg = ModelConfig::with_aggregate(2, vec![Block::D1, Block::D2]).unwrap();
        let model = SegModel::<f32>::init(&mut rng, &cfg);
        assert!(model.class_proj.is_some());
        let x = Tensor::zeros(vec![1, 1, 32, 32]);
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2, 32, 32]);
    }

    #[test]
    fn three_block_aggregate_runs_pairwise() {
        let mut rng = seeded_rng(4, 0);
        let cfg =
            ModelConfig::with_aggregate(2, vec![Block::D1, Block::D2, Block::D3]).unwrap();
        let model = SegModel::<f32>::init(&mut rng, &cfg);
        assert_eq!(model.pairs.len(), 2);
        let x = Tensor::zeros(vec![1, 1, 32, 32]);
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2, 32, 32]);
    }

    #[test]
    fn param_names_are_unique() {
        let mut rng = seeded_rng(4, 0);
        let mut model = SegModel::<f32>::init(&mut rng, &ModelConfig::full(2));
        let mut names = std::collections::HashSet::new();
        model.visit_params(&mut |name, _| {
            assert!(names.insert(name.clone()), "duplicate {name}");
        });
        assert!(names.len() >= 24);
    }
}
