//! Visual extractor: a small stride-2 conv stack that turns each image view
//! into a sequence of patch features.

use crate::corpus::ImageView;
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, Linear, ParamBuilder};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone)]
struct ConvStage {
    /// `[k*k*c_in, c_out]`, rows ordered `(ky, kx, c)`.
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct VisualExtractor {
    stages: Vec<ConvStage>,
    /// 1x1 projection from the last conv width to `d_vis`.
    to_visual: Linear,
    /// Projection from `d_vis` to the model width.
    to_model: Linear,
    in_channels: usize,
}

impl VisualExtractor {
    pub fn new(b: &mut ParamBuilder<'_>, in_channels: usize, conv_channels: &[usize], d_vis: usize, d_model: usize) -> Result<Self> {
        if conv_channels.is_empty() || in_channels == 0 {
            return Err(Error::config("visual extractor needs input channels and at least one conv stage"));
        }
        let mut stages = Vec::with_capacity(conv_channels.len());
        let mut c_in = in_channels;
        for (i, &c_out) in conv_channels.iter().enumerate() {
            let mut s = b.scope(&format!("conv{i}"));
            stages.push(ConvStage {
                weight: s.normal("weight", &[KERNEL * KERNEL * c_in, c_out]),
                bias: s.constant("bias", &[c_out], 0.0),
            });
            c_in = c_out;
        }
        Ok(Self {
            stages,
            to_visual: Linear::new(b, "to_visual", c_in, d_vis, true),
            to_model: Linear::new(b, "to_model", d_vis, d_model, true),
            in_channels,
        })
    }

    /// Total spatial downsampling of the conv stack.
    pub fn stride(&self) -> usize {
        STRIDE.pow(self.stages.len() as u32)
    }

    /// Sequence length produced for `views` images of size `h × w`.
    pub fn seq_len(&self, h: usize, w: usize, views: usize) -> usize {
        (h / self.stride()) * (w / self.stride()) * views
    }

    /// `[B, S, d_model]` patch features; views of one sample are
    /// concatenated along the sequence axis.
    pub fn extract(&self, batch: &[&[ImageView]]) -> Result<Tensor> {
        let first = batch.first().ok_or_else(|| Error::contract("empty image batch"))?;
        let views = first.len();
        if !(1..=2).contains(&views) {
            return Err(Error::config(format!("expected 1 or 2 views per sample, got {views}")));
        }
        let (h, w) = (first[0].height, first[0].width);
        let r = self.stride();
        if h % r != 0 || w % r != 0 {
            return Err(Error::config(format!("image {h}x{w} is not divisible by the extractor stride {r}")));
        }
        for sample in batch {
            if sample.len() != views {
                return Err(Error::config(format!("mixed view counts in one batch ({views} vs {})", sample.len())));
            }
            for img in *sample {
                if img.height != h || img.width != w || img.channels != self.in_channels {
                    return Err(Error::config(format!(
                        "image {}x{}x{} does not match batch geometry {h}x{w}x{}",
                        img.height, img.width, img.channels, self.in_channels
                    )));
                }
            }
        }

        let mut per_view = Vec::with_capacity(views);
        for v in 0..views {
            let mut data = Vec::with_capacity(batch.len() * h * w * self.in_channels);
            for sample in batch {
                data.extend(sample[v].pixels.iter().map(|&p| p as f64));
            }
            let mut x = Tensor::new(&[batch.len(), h, w, self.in_channels], data)?;
            let (mut hh, mut ww) = (h, w);
            for stage in &self.stages {
                let cols = x.im2col(KERNEL, STRIDE, PAD)?;
                hh /= STRIDE;
                ww /= STRIDE;
                let y = cols.matmul(&stage.weight)?.add(&stage.bias)?.relu();
                x = y.reshape(&[batch.len(), hh, ww, stage.bias.numel()])?;
            }
            let c = self.stages.last().unwrap().bias.numel();
            let seq = x.reshape(&[batch.len(), hh * ww, c])?;
            per_view.push(self.to_model.forward(&self.to_visual.forward(&seq)?)?);
        }
        if per_view.len() == 1 {
            Ok(per_view.pop().unwrap())
        } else {
            let refs: Vec<&Tensor> = per_view.iter().collect();
            Tensor::concat(&refs, 1)
        }
    }
}

/// Adds sinusoid encodings of the flattened sequence index to `[B, S, d]`
/// patch features; identity when `enabled` is false.
pub fn add_patch_positions(patches: &Tensor, enabled: bool) -> Result<Tensor> {
    if !enabled {
        return Ok(patches.clone());
    }
    if patches.rank() != 3 {
        return Err(Error::shape("add_patch_positions", patches.shape(), &[]));
    }
    let table = sinusoid_table(patches.shape()[1], patches.shape()[2])?;
    patches.add(&table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use crate::tensor::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn extractor(d_vis: usize) -> (VisualExtractor, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ex = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, 0.2).with_group(ParamGroup::Visual);
            VisualExtractor::new(&mut b, 1, &[4, 8], d_vis, d_vis).unwrap()
        };
        (ex, store)
    }

    fn random_image(rng: &mut impl Rng, n: usize) -> ImageView {
        ImageView::new(n, n, 1, (0..n * n).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_arithmetic_one_and_two_views() {
        let (ex, _) = extractor(64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = [random_image(&mut rng, 32)];
        let out = ex.extract(&[&one]).unwrap();
        assert_eq!(out.shape(), &[1, 64, 64]);
        let two = [random_image(&mut rng, 32), random_image(&mut rng, 32)];
        let out = ex.extract(&[&two]).unwrap();
        assert_eq!(out.shape(), &[1, 128, 64]);
        assert_eq!(ex.seq_len(32, 32, 2), 128);
    }

    #[test]
    fn blank_image_with_zero_bias_gives_zero_features() {
        let (ex, _) = extractor(8);
        let img = [ImageView::blank(16, 16, 1)];
        let out = ex.extract(&[&img]).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geometry_errors() {
        let (ex, _) = extractor(8);
        let three = vec![ImageView::blank(16, 16, 1); 3];
        assert!(matches!(ex.extract(&[&three]), Err(Error::Config(_))));
        let odd = [ImageView::blank(10, 16, 1)];
        assert!(matches!(ex.extract(&[&odd]), Err(Error::Config(_))));
        let a = [ImageView::blank(16, 16, 1)];
        let b = [ImageView::blank(8, 8, 1)];
        assert!(ex.extract(&[&a, &b]).is_err());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let (ex, _) = extractor(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<[ImageView; 1]> = (0..3).map(|_| [random_image(&mut rng, 8)]).collect();
        let fwd = ex.extract(&[&imgs[0], &imgs[1], &imgs[2]]).unwrap().to_vec();
        let rev = ex.extract(&[&imgs[2], &imgs[1], &imgs[0]]).unwrap().to_vec();
        let chunk = fwd.len() / 3;
        for i in 0..3 {
            assert_eq!(&fwd[i * chunk..(i + 1) * chunk], &rev[(2 - i) * chunk..(3 - i) * chunk]);
        }
    }

    #[test]
    fn gradients_reach_conv_weights() {
        let (ex, store) = extractor(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<[ImageView; 1]> = (0..2).map(|_| [random_image(&mut rng, 8)]).collect();
        let weights = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let report = check_gradients(
            || ex.extract(&[&imgs[0], &imgs[1]]).unwrap().mul(&weights).unwrap().sum(),
            &store.tensors(),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn positions_closed_form_and_toggle() {
        let x = Tensor::zeros(&[1, 3, 4]);
        let with = add_patch_positions(&x, true).unwrap().to_vec();
        assert_eq!(&with[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert_ne!(&with[4..8], &with[8..12]);
        assert_eq!(add_patch_positions(&x, false).unwrap().to_vec(), x.to_vec());
    }
}
