//! Minimal query-based instance segmentation network.
//!
//! A patch MLP embeds 4×4 patches into per-pixel features; N learnable
//! queries interact with the pooled image feature through one bilinear
//! mixing layer; class logits come from a linear head and mask logits from
//! dot products between projected queries and the per-pixel embeddings,
//! computed on the low-resolution grid and nearest-upsampled to image size.
//! The per-pixel embedding map used in those dot products is exactly the
//! feature map exposed for distillation.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::synthdata::{Image, InstanceLabel, Mask};
use crate::tensor::{Scalar, Tape, Tensor, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub hidden: usize,
    pub embed: usize,
    pub queries: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            patch: 4,
            hidden: 64,
            embed: 32,
            queries: 10,
            classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }
    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }
    pub fn locations(&self) -> usize {
        self.grid_h() * self.grid_w()
    }
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
    /// Class logits width: real classes plus the trailing "no object" slot.
    pub fn logit_width(&self) -> usize {
        self.classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }
}

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub patch_w1: Tensor<T>,
    pub patch_b1: Tensor<T>,
    pub patch_w2: Tensor<T>,
    pub patch_b2: Tensor<T>,
    pub queries: Tensor<T>,
    pub mix_q: Tensor<T>,
    pub mix_p: Tensor<T>,
    pub mix_o: Tensor<T>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    pub mask_w: Tensor<T>,
    pub mask_b: Tensor<T>,
}

pub const PARAM_NAMES: [&str; 12] = [
    "patch_w1", "patch_b1", "patch_w2", "patch_b2", "queries", "mix_q", "mix_p", "mix_o",
    "cls_w", "cls_b", "mask_w", "mask_b",
];

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: ModelConfig) -> Self {
        let (d, h, n, k) = (cfg.embed, cfg.hidden, cfg.queries, cfg.logit_width());
        let p = cfg.patch_dim();
        ModelParams {
            cfg,
            patch_w1: Tensor::zeros(vec![p, h]),
            patch_b1: Tensor::zeros(vec![1, h]),
            patch_w2: Tensor::zeros(vec![h, d]),
            patch_b2: Tensor::zeros(vec![1, d]),
            queries: Tensor::zeros(vec![n, d]),
            mix_q: Tensor::zeros(vec![d, d]),
            mix_p: Tensor::zeros(vec![d, d]),
            mix_o: Tensor::zeros(vec![d, d]),
            cls_w: Tensor::zeros(vec![d, k]),
            cls_b: Tensor::zeros(vec![1, k]),
            mask_w: Tensor::zeros(vec![d, d]),
            mask_b: Tensor::zeros(vec![1, d]),
        }
    }

    /// Seeded Gaussian init; the draw sequence is fixed, so `f32` and `f64`
    /// instantiations hold numerically identical values.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut out = Self::zeros(cfg);
        let mut rng = substream(seed, "model-init", &[]);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        for (name, tensor) in out.named_mut() {
            let std = match name {
                "patch_w1" => 1.0 / (cfg.patch_dim() as f64).sqrt(),
                "patch_w2" => 1.0 / (cfg.hidden as f64).sqrt(),
                "queries" => 0.5,
                "patch_b1" | "patch_b2" | "cls_b" | "mask_b" => 0.0,
                _ => 1.0 / (cfg.embed as f64).sqrt(),
            };
            for v in tensor.data_mut() {
                *v = T::c(normal.sample(&mut rng) * std);
            }
        }
        out
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("patch_w1", &self.patch_w1),
            ("patch_b1", &self.patch_b1),
            ("patch_w2", &self.patch_w2),
            ("patch_b2", &self.patch_b2),
            ("queries", &self.queries),
            ("mix_q", &self.mix_q),
            ("mix_p", &self.mix_p),
            ("mix_o", &self.mix_o),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
            ("mask_w", &self.mask_w),
            ("mask_b", &self.mask_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("patch_w1", &mut self.patch_w1),
            ("patch_b1", &mut self.patch_b1),
            ("patch_w2", &mut self.patch_w2),
            ("patch_b2", &mut self.patch_b2),
            ("queries", &mut self.queries),
            ("mix_q", &mut self.mix_q),
            ("mix_p", &mut self.mix_p),
            ("mix_o", &mut self.mix_o),
            ("cls_w", &mut self.cls_w),
            ("cls_b", &mut self.cls_b),
            ("mask_w", &mut self.mask_w),
            ("mask_b", &mut self.mask_b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg,
            patch_w1: self.patch_w1.cast(),
            patch_b1: self.patch_b1.cast(),
            patch_w2: self.patch_w2.cast(),
            patch_b2: self.patch_b2.cast(),
            queries: self.queries.cast(),
            mix_q: self.mix_q.cast(),
            mix_p: self.mix_p.cast(),
            mix_o: self.mix_o.cast(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
            mask_w: self.mask_w.cast(),
            mask_b: self.mask_b.cast(),
        }
    }

    /// Flatten all parameters in `PARAM_NAMES` order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (_, t) in self.named() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn from_flat(cfg: ModelConfig, flat: &[T]) -> Result<Self> {
        let mut out = Self::zeros(cfg);
        let mut pos = 0;
        for (_, t) in out.named_mut() {
            let n = t.numel();
            if pos + n > flat.len() {
                return Err(Error::invalid("flat parameter vector too short"));
            }
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        if pos != flat.len() {
            return Err(Error::invalid("flat parameter vector too long"));
        }
        Ok(out)
    }
}

/// Tape handles for registered parameters.
pub struct ParamVars {
    pub ids: Vec<(&'static str, VarId)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> VarId {
        self.ids
            .iter()
            .find(|(n, _)| *n == name)
            .expect("known param name")
            .1
    }
}

pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Result<ParamVars> {
    let mut ids = Vec::new();
    for (name, tensor) in params.named() {
        ids.push((name, tape.leaf(tensor.clone())?));
    }
    Ok(ParamVars { ids })
}

/// Flatten an image into one row per `patch×patch` block, row-major over
/// the feature grid; each row is the block's pixels `(dy, dx, channel)`.
pub fn patchify<T: Scalar>(image: &Image, cfg: &ModelConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if image.h != cfg.height || image.w != cfg.width {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: vec![image.h, image.w],
            rhs: vec![cfg.height, cfg.width],
        });
    }
    let p = cfg.patch;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut data = Vec::with_capacity(gh * gw * cfg.patch_dim());
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let rgb = image.px(gy * p + dy, gx * p + dx);
                    for ch in rgb {
                        data.push(T::c(ch as f64));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, cfg.patch_dim()], data)
}

/// Forward-pass tape handles.
pub struct ForwardVars {
    pub class_logits: VarId,
    /// N×(H·W), raw logits.
    pub mask_logits: VarId,
    /// N×(H'·W'), the pre-upsample logits.
    pub mask_logits_lr: VarId,
    /// (H'W')×d rows; the same tensor the mask dot products read.
    pub pixel_features: VarId,
}

pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    patches: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<ForwardVars> {
    cfg.validate()?;
    if patches.shape() != [cfg.locations(), cfg.patch_dim()] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: patches.shape().to_vec(),
            rhs: vec![cfg.locations(), cfg.patch_dim()],
        });
    }
    let x = tape.leaf(patches.clone())?;
    let h1 = tape.matmul(x, vars.get("patch_w1"))?;
    let h1 = tape.add(h1, vars.get("patch_b1"))?;
    let h1 = tape.sigmoid(h1)?;
    let pixf = tape.matmul(h1, vars.get("patch_w2"))?;
    let pixf = tape.add(pixf, vars.get("patch_b2"))?;

    let pooled = tape.sum_axis(pixf, 0)?;
    let pooled = tape.scale(pooled, T::c(1.0 / cfg.locations() as f64))?;

    let queries = vars.get("queries");
    let a = tape.matmul(queries, vars.get("mix_q"))?;
    let b = tape.matmul(pooled, vars.get("mix_p"))?;
    let gate = tape.mul(a, b)?; // broadcast 1×d over N×d
    let delta = tape.matmul(gate, vars.get("mix_o"))?;
    let mixed = tape.add(queries, delta)?;

    let cls = tape.matmul(mixed, vars.get("cls_w"))?;
    let class_logits = tape.add(cls, vars.get("cls_b"))?;

    let membed = tape.matmul(mixed, vars.get("mask_w"))?;
    let membed = tape.add(membed, vars.get("mask_b"))?;
    let pixf_t = tape.transpose(pixf)?;
    let mask_logits_lr = tape.matmul(membed, pixf_t)?;
    let mask_logits = tape.upsample_nearest(mask_logits_lr, cfg.grid_h(), cfg.grid_w(), cfg.patch)?;

    Ok(ForwardVars {
        class_logits,
        mask_logits,
        mask_logits_lr,
        pixel_features: pixf,
    })
}

/// Detached forward outputs.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
    pub pixel_features: Tensor,
    pub h: usize,
    pub w: usize,
}

/// Run the network on one image and detach the outputs.
pub fn forward(params: &ModelParams, image: &Image) -> Result<Prediction> {
    let cfg = params.cfg;
    let mut tape: Tape<f32> = Tape::new();
    let vars = register_params(&mut tape, params)?;
    let patches = patchify::<f32>(image, &cfg)?;
    let out = forward_on_tape(&mut tape, &vars, &patches, &cfg)?;
    Ok(Prediction {
        class_logits: tape.value(out.class_logits).clone(),
        mask_logits: tape.value(out.mask_logits).clone(),
        pixel_features: tape.value(out.pixel_features).clone(),
        h: cfg.height,
        w: cfg.width,
    })
}

/// Per-query softmax over real classes and "no object".
pub fn class_probabilities(pred: &Prediction) -> Vec<Vec<f32>> {
    let k1 = pred.class_logits.shape()[1];
    pred.class_logits
        .data()
        .chunks(k1)
        .map(|row| {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f32 = exps.iter().sum();
            exps.iter().map(|&e| e / sum).collect()
        })
        .collect()
}

/// Keep queries whose best real class clears `tau_c` and whose binarized
/// mask (soft > 0.5) has at least `min_size` pixels. The soft mask rides
/// along for downstream refinement.
pub fn decode_predictions(pred: &Prediction, tau_c: f32, min_size: usize) -> Vec<InstanceLabel> {
    let probs = class_probabilities(pred);
    let hw = pred.h * pred.w;
    let mut out = Vec::new();
    for (q, p) in probs.iter().enumerate() {
        let k = p.len() - 1; // last slot is "no object"
        let (best, &conf) = p[..k]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        if conf <= tau_c {
            continue;
        }
        let logits = &pred.mask_logits.data()[q * hw..(q + 1) * hw];
        let soft: Vec<f32> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let mut mask = Mask::new(pred.h, pred.w);
        for (px, &s) in soft.iter().enumerate() {
            mask.data[px] = (s > 0.5) as u8;
        }
        if mask.area() < min_size {
            continue;
        }
        out.push(InstanceLabel {
            class_id: (best + 1) as u16,
            mask,
            confidence: conf,
            soft_mask: Some(soft),
        });
    }
    out
}

/// `θ_T ← α·θ_T + (1−α)·θ_S`, elementwise, returning new teacher params.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f32) -> Result<ModelParams> {
    if teacher.cfg != student.cfg {
        return Err(Error::invalid("EMA over mismatched model configs"));
    }
    let mut out = teacher.clone();
    for ((_, t), (_, s)) in out.named_mut().into_iter().zip(student.named()) {
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 32,
            hidden: 16,
            embed: 16,
            queries: 6,
            ..ModelConfig::default()
        }
    }

    fn scene_image(seed: u64) -> Image {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            ..SceneConfig::default()
        };
        generate_scene(&cfg, seed).unwrap().image
    }

    #[test]
    fn zero_weights_give_uniform_class_softmax() {
        let cfg = small_cfg();
        let params = ModelParams::<f32>::zeros(cfg);
        let pred = forward(&params, &scene_image(1)).unwrap();
        assert!(pred.class_logits.data().iter().all(|&x| x == 0.0));
        let probs = class_probabilities(&pred);
        for row in probs {
            for p in row {
                assert!((p - 1.0 / cfg.logit_width() as f32).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn output_shapes_match_config() {
        let cfg = small_cfg();
        let params = ModelParams::<f32>::init(cfg, 7);
        let pred = forward(&params, &scene_image(2)).unwrap();
        assert_eq!(pred.class_logits.shape(), &[cfg.queries, cfg.logit_width()]);
        assert_eq!(pred.mask_logits.shape(), &[cfg.queries, cfg.height * cfg.width]);
        assert_eq!(pred.pixel_features.shape(), &[cfg.locations(), cfg.embed]);
    }

    #[test]
    fn mask_logits_are_query_pixel_dot_products() {
        // Recompute the projected queries and dot products with separate
        // loops and compare against the forward output.
        let cfg = small_cfg();
        let params = ModelParams::<f32>::init(cfg, 3);
        let image = scene_image(3);
        let pred = forward(&params, &image).unwrap();

        let d = cfg.embed;
        let pixf = &pred.pixel_features;
        // pooled
        let mut pooled = vec![0.0f32; d];
        for loc in 0..cfg.locations() {
            for c in 0..d {
                pooled[c] += pixf.data()[loc * d + c] / cfg.locations() as f32;
            }
        }
        let matvec = |m: &Tensor, v: &[f32]| -> Vec<f32> {
            let cols = m.shape()[1];
            let mut out = vec![0.0f32; cols];
            for r in 0..m.shape()[0] {
                for c in 0..cols {
                    out[c] += v[r] * m.data()[r * cols + c];
                }
            }
            out
        };
        let pb = matvec(&params.mix_p, &pooled);
        for q in 0..cfg.queries {
            let qv = params.queries.row(q);
            let aq = matvec(&params.mix_q, qv);
            let gate: Vec<f32> = aq.iter().zip(&pb).map(|(a, b)| a * b).collect();
            let delta = matvec(&params.mix_o, &gate);
            let mixed: Vec<f32> = qv.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let mut membed = matvec(&params.mask_w, &mixed);
            for (m, &b) in membed.iter_mut().zip(params.mask_b.data()) {
                *m += b;
            }
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let loc = (y / cfg.patch) * cfg.grid_w() + (x / cfg.patch);
                    let dot: f32 = membed
                        .iter()
                        .zip(&pixf.data()[loc * d..(loc + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum();
                    let got = pred.mask_logits.data()[q * cfg.height * cfg.width + y * cfg.width + x];
                    assert!(
                        (dot - got).abs() < 1e-4,
                        "query {q} at ({y},{x}): {dot} vs {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn decode_applies_confidence_and_size_thresholds() {
        let cfg = ModelConfig {
            height: 8,
            width: 8,
            patch: 4,
            hidden: 4,
            embed: 4,
            queries: 2,
            classes: 4,
        };
        // Hand-built prediction: query 0 confident class 1 with a large
        // mask, query 1 at confidence below the cut.
        let k1 = cfg.logit_width();
        let mut cls = Tensor::zeros(vec![2, k1]);
        cls.data_mut()[0] = 5.0; // query 0 → class 1 dominant
        // query 1: logits tuned so best prob ≈ 0.69 < 0.7
        let target = 0.69f32;
        let rest = (1.0 - target) / (k1 as f32 - 1.0);
        let logit = (target / rest).ln();
        cls.data_mut()[k1] = logit;
        let mut mask_logits = Tensor::zeros(vec![2, 64]);
        for px in 0..32 {
            mask_logits.data_mut()[px] = 9.0;
            mask_logits.data_mut()[64 + px] = 9.0;
        }
        for px in 32..64 {
            mask_logits.data_mut()[px] = -9.0;
            mask_logits.data_mut()[64 + px] = -9.0;
        }
        let pred = Prediction {
            class_logits: cls,
            mask_logits,
            pixel_features: Tensor::zeros(vec![4, 4]),
            h: 8,
            w: 8,
        };
        let labels = decode_predictions(&pred, 0.7, 5);
        assert_eq!(labels.len(), 1, "confidence 0.69 must be dropped");
        assert_eq!(labels[0].class_id, 1);
        assert_eq!(labels[0].mask.area(), 32);
        assert!(labels[0].soft_mask.is_some());

        // Shrink the confident mask below min_size: dropped too.
        let mut pred2 = pred.clone();
        for px in 0..64 {
            pred2.mask_logits.data_mut()[px] = if px < 4 { 9.0 } else { -9.0 };
        }
        assert!(decode_predictions(&pred2, 0.7, 5).is_empty());
        // min_size 4 keeps it.
        assert_eq!(decode_predictions(&pred2, 0.7, 4).len(), 1);
    }

    #[test]
    fn decode_is_monotone_in_tau() {
        let cfg = small_cfg();
        let params = ModelParams::<f32>::init(cfg, 11);
        let pred = forward(&params, &scene_image(4)).unwrap();
        let mut prev = usize::MAX;
        for tau in [0.05, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let n = decode_predictions(&pred, tau, 1).len();
            assert!(n <= prev, "raising tau added instances");
            prev = n;
        }
    }

    #[test]
    fn ema_identities() {
        let cfg = small_cfg();
        let teacher = ModelParams::<f32>::init(cfg, 1);
        let student = ModelParams::<f32>::init(cfg, 2);
        // α = 1 leaves the teacher unchanged.
        assert_eq!(ema_update(&teacher, &student, 1.0).unwrap(), teacher);
        // θ_T=1, θ_S=0, α=0.5 → 0.5 everywhere.
        let ones = {
            let mut p = ModelParams::<f32>::zeros(cfg);
            for (_, t) in p.named_mut() {
                for v in t.data_mut() {
                    *v = 1.0;
                }
            }
            p
        };
        let zeroes = ModelParams::<f32>::zeros(cfg);
        let mid = ema_update(&ones, &zeroes, 0.5).unwrap();
        for (_, t) in mid.named() {
            assert!(t.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn ema_gap_decays_as_alpha_power() {
        let cfg = small_cfg();
        let student = ModelParams::<f32>::init(cfg, 1);
        for alpha in [0.5f32, 0.9996] {
            let mut teacher = ModelParams::<f32>::init(cfg, 2);
            let gap0: f32 = teacher
                .named()
                .iter()
                .zip(student.named())
                .flat_map(|((_, t), (_, s))| {
                    t.data()
                        .iter()
                        .zip(s.data())
                        .map(|(&a, &b)| (a - b).abs())
                        .collect::<Vec<_>>()
                })
                .fold(0.0, f32::max);
            let n = 100;
            for _ in 0..n {
                teacher = ema_update(&teacher, &student, alpha).unwrap();
            }
            let gap: f32 = teacher
                .named()
                .iter()
                .zip(student.named())
                .flat_map(|((_, t), (_, s))| {
                    t.data()
                        .iter()
                        .zip(s.data())
                        .map(|(&a, &b)| (a - b).abs())
                        .collect::<Vec<_>>()
                })
                .fold(0.0, f32::max);
            let expected = alpha.powi(n) * gap0;
            assert!(
                (gap - expected).abs() / expected.max(1e-12) < 1e-5,
                "alpha {alpha}: gap {gap} vs {expected}"
            );
        }
    }

    #[test]
    fn flat_roundtrip() {
        let cfg = small_cfg();
        let params = ModelParams::<f32>::init(cfg, 5);
        let flat = params.to_flat();
        let back = ModelParams::from_flat(cfg, &flat).unwrap();
        assert_eq!(back, params);
    }
}
