//! Trainable model: RoI feature encoder, CAM classification head,
//! contrastive head (encoder `f` and projector `g`) and the class-agnostic
//! mask head.
//!
//! Every map shares the RoI resolution `R`; the mask head fuses
//! `concat(Y, X) + A` with the CAM `A` broadcast over all channels.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{
    add_map_to_channels, concat_channels, global_avg_pool, global_avg_pool_backward,
    split_channels, Conv2d, ConvStack, Linear, Module, Param, StackCache, Tensor,
};

/// Conv blocks in the CAM head before pooling.
pub const CAM_BLOCKS: usize = 2;
/// Conv blocks in the mask head before the 1×1 output layer.
pub const MASK_BLOCKS: usize = 4;

/// Backbone output `X` (`N × R × R × C`).
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatureMap(pub Tensor);

/// Contrastive encoder output `Y`, same shape as `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedFeatureMap(pub Tensor);

/// Min-max normalized class activation maps (`N × R × R × 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub maps: Tensor,
    pub class_used: Vec<usize>,
}

impl ActivationMap {
    pub fn sample(&self, i: usize) -> &[f32] {
        self.maps.sample(i)
    }
}

/// Class-agnostic mask logits (`N × R × R × 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits(pub Tensor);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub backbone_blocks: usize,
    pub encoder_blocks: usize,
    pub projector_layers: usize,
    pub use_cl: bool,
    pub use_cam: bool,
}

impl From<&TrainConfig> for ModelConfig {
    fn from(c: &TrainConfig) -> Self {
        ModelConfig {
            channels: c.channels,
            num_classes: c.num_classes(),
            backbone_blocks: c.backbone_blocks,
            encoder_blocks: c.encoder_blocks,
            projector_layers: c.projector_layers,
            use_cl: c.use_cl,
            use_cam: c.use_cam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: ConvStack,
    pub cam_convs: ConvStack,
    pub classifier: Linear,
    pub cl_encoder: ConvStack,
    pub projector: ConvStack,
    pub mask_head: ConvStack,
    pub mask_out: Conv2d,
}

/// Per-location min-max normalization; a constant map becomes 0.5.
pub fn normalize_min_max(raw: &mut [f32]) {
    let (lo, hi) = raw
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    if !(span > 1e-6 * hi.abs().max(lo.abs()).max(1.0)) {
        raw.iter_mut().for_each(|v| *v = 0.5);
    } else {
        raw.iter_mut().for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
    }
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let mut backbone_ch = vec![3];
        backbone_ch.extend(std::iter::repeat(c).take(cfg.backbone_blocks));
        let backbone = ConvStack::new("backbone", 3, &backbone_ch, true, rng);
        let cam_convs = ConvStack::new("cam", 3, &vec![c; CAM_BLOCKS + 1], true, rng);
        let classifier = Linear::new("cam.classifier", c, cfg.num_classes, rng);
        let cl_encoder = ConvStack::new("cl.encoder", 3, &vec![c; cfg.encoder_blocks + 1], true, rng);
        let projector = ConvStack::new("cl.projector", 1, &vec![c; cfg.projector_layers + 1], false, rng);
        let mask_in = if cfg.use_cl { 2 * c } else { c };
        let mut mask_ch = vec![mask_in];
        mask_ch.extend(std::iter::repeat(c).take(MASK_BLOCKS));
        let mask_head = ConvStack::new("mask", 3, &mask_ch, true, rng);
        let mask_out = Conv2d::new("mask.out", 1, c, 1, rng);
        Model {
            cfg,
            backbone,
            cam_convs,
            classifier,
            cl_encoder,
            projector,
            mask_head,
            mask_out,
        }
    }

    /// Parameters of the contrastive head (`f` and `g`).
    pub fn cl_head_params(&self) -> Vec<&Param> {
        let mut p = self.cl_encoder.params();
        p.extend(self.projector.params());
        p
    }

    fn check_input(&self, crops: &Tensor) -> Result<()> {
        if crops.c != 3 || crops.h != crops.w {
            return Err(Error::Shape(format!(
                "crops must be N x R x R x 3, got {:?}",
                crops.shape()
            )));
        }
        Ok(())
    }

    pub fn backbone_forward(&self, crops: &Tensor) -> Result<RoiFeatureMap> {
        self.check_input(crops)?;
        self.backbone.forward(crops).map(RoiFeatureMap)
    }

    pub fn cl_encoder_forward(&self, x: &RoiFeatureMap) -> Result<EnhancedFeatureMap> {
        self.cl_encoder.forward(&x.0).map(EnhancedFeatureMap)
    }

    pub fn projector_forward(&self, y: &EnhancedFeatureMap) -> Result<Tensor> {
        self.projector.forward(&y.0)
    }

    fn cam_from_features(&self, feat: &Tensor, classes: &[usize]) -> ActivationMap {
        let k = self.cfg.num_classes;
        let c = feat.c;
        let mut maps = Tensor::zeros(feat.n, feat.h, feat.w, 1);
        for (i, &cls) in classes.iter().enumerate() {
            let w: Vec<f32> = (0..c).map(|ch| self.classifier.weight.value[ch * k + cls]).collect();
            let out = maps.sample_mut(i);
            for (o, px) in out.iter_mut().zip(feat.sample(i).chunks_exact(c)) {
                *o = px.iter().zip(&w).map(|(a, b)| a * b).sum();
            }
            normalize_min_max(out);
        }
        ActivationMap {
            maps,
            class_used: classes.to_vec(),
        }
    }

    fn check_classes(&self, classes: &[usize], n: usize) -> Result<()> {
        if classes.len() != n {
            return Err(Error::Shape(format!("{} class ids for {n} samples", classes.len())));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.cfg.num_classes) {
            return Err(Error::InvalidClass {
                id: bad,
                num_classes: self.cfg.num_classes,
            });
        }
        Ok(())
    }

    /// Class logits (`N × classes`, row-major) and the CAM for each sample's
    /// target class; `None` uses the arg-max prediction.
    pub fn cam_head_forward(
        &self,
        x: &RoiFeatureMap,
        target_classes: Option<&[usize]>,
    ) -> Result<(Vec<f32>, ActivationMap)> {
        let feat = self.cam_convs.forward(&x.0)?;
        let logits = self.classifier.forward(&global_avg_pool(&feat), feat.n);
        let classes = match target_classes {
            Some(t) => {
                self.check_classes(t, feat.n)?;
                t.to_vec()
            }
            None => argmax_rows(&logits, self.cfg.num_classes),
        };
        let cam = self.cam_from_features(&feat, &classes);
        Ok((logits, cam))
    }

    fn fuse(
        &self,
        x: &RoiFeatureMap,
        y: Option<&EnhancedFeatureMap>,
        a: Option<&ActivationMap>,
    ) -> Result<Tensor> {
        let mut fused = match (self.cfg.use_cl, y) {
            (true, Some(y)) => concat_channels(&y.0, &x.0)?,
            (false, None) => x.0.clone(),
            (true, None) => return Err(Error::Shape("mask head expects Y".into())),
            (false, Some(_)) => return Err(Error::Shape("mask head built without Y".into())),
        };
        match (self.cfg.use_cam, a) {
            (true, Some(a)) => add_map_to_channels(&mut fused, &a.maps)?,
            (false, None) => {}
            (true, None) => return Err(Error::Shape("mask head expects a CAM".into())),
            (false, Some(_)) => return Err(Error::Shape("mask head built without CAM".into())),
        }
        Ok(fused)
    }

    pub fn mask_head_forward(
        &self,
        x: &RoiFeatureMap,
        y: Option<&EnhancedFeatureMap>,
        a: Option<&ActivationMap>,
    ) -> Result<MaskLogits> {
        let fused = self.fuse(x, y, a)?;
        let h = self.mask_head.forward(&fused)?;
        self.mask_out.forward(&h).map(MaskLogits)
    }

    /// Inference: class logits, CAM (arg-max class unless given) and mask
    /// logits.
    pub fn predict(
        &self,
        crops: &Tensor,
        target_classes: Option<&[usize]>,
    ) -> Result<(Vec<f32>, ActivationMap, MaskLogits)> {
        let x = self.backbone_forward(crops)?;
        let (logits, cam) = self.cam_head_forward(&x, target_classes)?;
        let y = if self.cfg.use_cl {
            Some(self.cl_encoder_forward(&x)?)
        } else {
            None
        };
        let a = self.cfg.use_cam.then_some(&cam);
        let mask = self.mask_head_forward(&x, y.as_ref(), a)?;
        Ok((logits, cam, mask))
    }

    /// Training forward pass retaining every activation needed by
    /// [`Model::backward`]. The CAM is computed for `target_classes` and
    /// enters the mask head as a constant.
    pub fn forward_train(&self, crops: Tensor, target_classes: &[usize]) -> Result<TrainForward> {
        self.check_input(&crops)?;
        self.check_classes(target_classes, crops.n)?;
        let backbone = self.backbone.forward_train(crops)?;
        let x = RoiFeatureMap(backbone.output().clone());

        let cam = self.cam_convs.forward_train(x.0.clone())?;
        let pooled = global_avg_pool(cam.output());
        let class_logits = self.classifier.forward(&pooled, x.0.n);
        let cam_map = self.cam_from_features(cam.output(), target_classes);

        let (encoder, projector) = if self.cfg.use_cl {
            let e = self.cl_encoder.forward_train(x.0.clone())?;
            let p = self.projector.forward_train(e.output().clone())?;
            (Some(e), Some(p))
        } else {
            (None, None)
        };
        let y = encoder.as_ref().map(|e| EnhancedFeatureMap(e.output().clone()));
        let fused = self.fuse(&x, y.as_ref(), self.cfg.use_cam.then_some(&cam_map))?;
        let mask_stack = self.mask_head.forward_train(fused)?;
        let mask_logits = self.mask_out.forward(mask_stack.output())?;
        Ok(TrainForward {
            backbone,
            cam,
            pooled,
            class_logits,
            cam_map,
            encoder,
            projector,
            mask_stack,
            mask_logits: MaskLogits(mask_logits),
        })
    }

    /// Accumulate parameter gradients from output gradients.
    pub fn backward(&mut self, fwd: &TrainForward, grads: OutputGrads) -> Result<()> {
        let x_shape = fwd.backbone.output().shape();
        let d_mask_hidden = self.mask_out.backward(fwd.mask_stack.output(), &grads.d_mask_logits);
        let d_fused = self.mask_head.backward(&fwd.mask_stack, d_mask_hidden);

        let (mut d_x, d_y) = if self.cfg.use_cl {
            let (dy, dx) = split_channels(&d_fused, self.cfg.channels);
            (dx, Some(dy))
        } else {
            (d_fused, None)
        };

        if let (Some(mut d_y), Some(enc), Some(proj)) = (d_y, &fwd.encoder, &fwd.projector) {
            if let Some(dz) = grads.d_projected {
                if dz.shape() != proj.output().shape() {
                    return Err(Error::Shape("projected-map gradient shape".into()));
                }
                let from_z = self.projector.backward(proj, dz);
                d_y.add_assign(&from_z);
            }
            let from_y = self.cl_encoder.backward(enc, d_y);
            d_x.add_assign(&from_y);
        }

        let d_pooled = self
            .classifier
            .backward(&fwd.pooled, &grads.d_class_logits, x_shape[0]);
        let d_feat = global_avg_pool_backward(&d_pooled, fwd.cam.output().shape());
        let from_cam = self.cam_convs.backward(&fwd.cam, d_feat);
        d_x.add_assign(&from_cam);

        self.backbone.backward(&fwd.backbone, d_x);
        Ok(())
    }
}

impl Module for Model {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        p.extend(self.cam_convs.params());
        p.extend(self.classifier.params());
        p.extend(self.cl_encoder.params());
        p.extend(self.projector.params());
        p.extend(self.mask_head.params());
        p.extend(self.mask_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.cam_convs.params_mut());
        p.extend(self.classifier.params_mut());
        p.extend(self.cl_encoder.params_mut());
        p.extend(self.projector.params_mut());
        p.extend(self.mask_head.params_mut());
        p.extend(self.mask_out.params_mut());
        p
    }
}

pub fn argmax_rows(values: &[f32], cols: usize) -> Vec<usize> {
    values
        .chunks_exact(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Activations of a training forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    backbone: StackCache,
    cam: StackCache,
    pooled: Vec<f32>,
    pub class_logits: Vec<f32>,
    pub cam_map: ActivationMap,
    encoder: Option<StackCache>,
    projector: Option<StackCache>,
    mask_stack: StackCache,
    pub mask_logits: MaskLogits,
}

impl TrainForward {
    pub fn features(&self) -> &Tensor {
        self.backbone.output()
    }

    /// Projected features `Z`, present when the contrastive head is enabled.
    pub fn projected(&self) -> Option<&Tensor> {
        self.projector.as_ref().map(|p| p.output())
    }

    pub fn enhanced(&self) -> Option<&Tensor> {
        self.encoder.as_ref().map(|p| p.output())
    }
}

/// Loss gradients with respect to the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub d_class_logits: Vec<f32>,
    pub d_mask_logits: Tensor,
    pub d_projected: Option<Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng_from_seed;

    fn cfg(c: usize) -> ModelConfig {
        ModelConfig {
            channels: c,
            num_classes: 8,
            backbone_blocks: 3,
            encoder_blocks: 8,
            projector_layers: 3,
            use_cl: true,
            use_cam: true,
        }
    }

    fn crops(n: usize, r: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_vec(n, r, r, 3, (0..n * r * r * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn cl_head_parameter_count() {
        for c in [4usize, 16] {
            let m = Model::new(cfg(c), &mut rng_from_seed(0));
            let count: usize = m.cl_head_params().iter().map(|p| p.len()).sum();
            assert_eq!(count, 8 * (9 * c * c + c) + 3 * (c * c + c));
        }
    }

    #[test]
    fn ablation_depths() {
        let mut c = cfg(4);
        c.encoder_blocks = 4;
        c.projector_layers = 2;
        let m = Model::new(c, &mut rng_from_seed(0));
        assert_eq!(m.cl_encoder.depth(), 4);
        assert_eq!(m.projector.depth(), 2);
        assert_eq!(m.projector.relu, vec![true, false]);
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let m = Model::new(cfg(6), &mut rng_from_seed(1));
        let x = m.backbone_forward(&crops(2, 12, 2)).unwrap();
        assert_eq!(x.0.shape(), [2, 12, 12, 6]);
        let y = m.cl_encoder_forward(&x).unwrap();
        assert_eq!(y.0.shape(), [2, 12, 12, 6]);
        assert!(y.0.data.iter().all(|&v| v >= 0.0));
        let z = m.projector_forward(&y).unwrap();
        assert_eq!(z.shape(), [2, 12, 12, 6]);
        let (logits, a) = m.cam_head_forward(&x, Some(&[3, 5])).unwrap();
        assert_eq!(logits.len(), 16);
        assert_eq!(a.class_used, vec![3, 5]);
        for i in 0..2 {
            let s = a.sample(i);
            let lo = s.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert!(lo == 0.0 && hi == 1.0 || s.iter().all(|&v| v == 0.5));
        }
        let mask = m.mask_head_forward(&x, Some(&y), Some(&a)).unwrap();
        assert_eq!(mask.0.shape(), [2, 12, 12, 1]);
    }

    #[test]
    fn projector_output_can_be_negative() {
        let m = Model::new(cfg(8), &mut rng_from_seed(4));
        let x = m.backbone_forward(&crops(1, 10, 3)).unwrap();
        let z = m.projector_forward(&m.cl_encoder_forward(&x).unwrap()).unwrap();
        assert!(z.data.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn zero_crop_gives_finite_features_and_constant_cam() {
        let m = Model::new(cfg(4), &mut rng_from_seed(0));
        let x = m.backbone_forward(&Tensor::zeros(1, 8, 8, 3)).unwrap();
        assert!(x.0.is_finite());
        // zero biases and zero input: every feature is exactly 0
        let (_, a) = m.cam_head_forward(&x, Some(&[0])).unwrap();
        assert!(a.sample(0).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_crops_identical_outputs() {
        let m = Model::new(cfg(4), &mut rng_from_seed(0));
        let c = crops(1, 8, 9);
        let a = m.predict(&c, None).unwrap();
        let b = m.predict(&c, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_class_is_rejected() {
        let m = Model::new(cfg(4), &mut rng_from_seed(0));
        let x = m.backbone_forward(&crops(1, 8, 1)).unwrap();
        assert!(matches!(
            m.cam_head_forward(&x, Some(&[8])),
            Err(Error::InvalidClass { id: 8, .. })
        ));
    }

    #[test]
    fn inference_uses_argmax_class() {
        let m = Model::new(cfg(4), &mut rng_from_seed(0));
        let x = m.backbone_forward(&crops(3, 8, 5)).unwrap();
        let (logits, a) = m.cam_head_forward(&x, None).unwrap();
        assert_eq!(a.class_used, argmax_rows(&logits, 8));
    }

    #[test]
    fn zero_cam_reduces_to_concatenation() {
        let m = Model::new(cfg(4), &mut rng_from_seed(0));
        let x = m.backbone_forward(&crops(1, 8, 1)).unwrap();
        let y = m.cl_encoder_forward(&x).unwrap();
        let zero = ActivationMap {
            maps: Tensor::zeros(1, 8, 8, 1),
            class_used: vec![0],
        };
        let fused = m.fuse(&x, Some(&y), Some(&zero)).unwrap();
        assert_eq!(fused, concat_channels(&y.0, &x.0).unwrap());
    }

    #[test]
    fn baseline_wiring_uses_x_only() {
        let mut c = cfg(4);
        c.use_cl = false;
        c.use_cam = false;
        let m = Model::new(c, &mut rng_from_seed(0));
        assert_eq!(m.mask_head.layers[0].cin, 4);
        let x = m.backbone_forward(&crops(1, 8, 1)).unwrap();
        assert!(m.mask_head_forward(&x, None, None).is_ok());
        let y = EnhancedFeatureMap(x.0.clone());
        assert!(m.mask_head_forward(&x, Some(&y), None).is_err());
    }

    #[test]
    fn min_max_normalization() {
        let mut v = vec![2.0, 4.0, 3.0];
        normalize_min_max(&mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
        let mut c = vec![1.5; 4];
        normalize_min_max(&mut c);
        assert_eq!(c, vec![0.5; 4]);
    }

    /// Whole-model backward against finite differences of a random linear
    /// functional of all three outputs (CAM fusion off: the CAM is detached).
    #[test]
    fn model_backward_matches_finite_differences() {
        let mut c = cfg(3);
        c.use_cam = false;
        c.encoder_blocks = 2;
        c.projector_layers = 2;
        c.num_classes = 4;
        let mut model = Model::new(c, &mut rng_from_seed(2));
        // nonzero biases keep pre-activations away from the rectifier kink
        let mut brng = rng_from_seed(6);
        for p in model.params_mut() {
            if p.name.ends_with("bias") {
                p.value.iter_mut().for_each(|v| *v = brng.gen_range(-0.3..0.3));
            }
        }
        let x = crops(2, 6, 3);
        let classes = [1usize, 3];
        let fwd = model.forward_train(x.clone(), &classes).unwrap();
        let mut rng = rng_from_seed(8);
        let r_logits: Vec<f32> = (0..fwd.class_logits.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r_mask: Vec<f32> = (0..fwd.mask_logits.0.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = fwd.projected().unwrap().clone();
        let r_z: Vec<f32> = (0..z.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |m: &Model| -> f64 {
            let f = m.forward_train(x.clone(), &classes).unwrap();
            let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
            dot(&f.class_logits, &r_logits)
                + dot(&f.mask_logits.0.data, &r_mask)
                + dot(&f.projected().unwrap().data, &r_z)
        };
        model.zero_grad();
        let mut dm = Tensor::zeros(2, 6, 6, 1);
        dm.data.copy_from_slice(&r_mask);
        let mut dz = z.clone();
        dz.data.copy_from_slice(&r_z);
        model
            .backward(
                &fwd,
                OutputGrads {
                    d_class_logits: r_logits.clone(),
                    d_mask_logits: dm,
                    d_projected: Some(dz),
                },
            )
            .unwrap();
        let analytic: Vec<(String, Vec<f32>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.grad.clone()))
            .collect();
        let h = 2e-4f32;
        let mut checked = 0;
        for (pi, (name, grad)) in analytic.iter().enumerate() {
            for i in (0..grad.len()).step_by(11) {
                let mut mp = model.clone();
                mp.params_mut()[pi].value[i] += h;
                let mut mm = model.clone();
                mm.params_mut()[pi].value[i] -= h;
                let fd = (objective(&mp) - objective(&mm)) / (2.0 * h as f64);
                let an = grad[i] as f64;
                assert!(
                    (fd - an).abs() < 5e-3 * (1.0 + an.abs()),
                    "{name}[{i}]: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
