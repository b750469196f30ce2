//! Procedural multi-instance scenes with exact ground truth, plus the
//! on-disk dataset format (P6 images, binary label files, key=value
//! manifest) and labeled/unlabeled splits.

mod gen;
mod io;
mod rle;
mod split;

pub use gen::generate_scene;
pub use io::{read_dataset, read_labels_dir, write_dataset, write_labels_dir};
pub use rle::{rle_decode, rle_encode};
pub use split::{make_split, read_split, write_split, DatasetSplit};

use crate::error::{Error, Result};

/// H×W×3 raster, channel-last row-major, values in [0,1] quantized to
/// 255ths so the P6 round-trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    #[inline]
    pub fn px(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.w + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_px(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.w + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Snap every channel to the 8-bit grid.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_area(other) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Pixels of `self` not covered by `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a & !b & 1)
                .collect(),
        }
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }
}

/// One instance: class, visible binary mask, confidence, and (for decoded
/// predictions) the soft mask the binary mask was thresholded from.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabel {
    pub class_id: u16,
    pub mask: Mask,
    pub confidence: f32,
    pub soft_mask: Option<Vec<f32>>,
}

impl InstanceLabel {
    pub fn ground_truth(class_id: u16, mask: Mask) -> Self {
        InstanceLabel {
            class_id,
            mask,
            confidence: 1.0,
            soft_mask: None,
        }
    }
}

/// Per-instance sub-part, stored at full (pre-occlusion) extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub instance: usize,
    pub mask: Mask,
}

/// Ground-truth side information the promptable oracle reads: full masks,
/// sub-parts, and visible id maps (0 = background, else index+1).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneIndex {
    pub full_masks: Vec<Mask>,
    pub parts: Vec<Part>,
    pub instance_map: Vec<u32>,
    pub part_map: Vec<u32>,
}

impl SceneIndex {
    /// Rebuild the visible id maps from visible instance masks and
    /// full-extent parts.
    pub fn rebuild_maps(visible: &[Mask], parts: &[Part], h: usize, w: usize) -> (Vec<u32>, Vec<u32>) {
        let mut instance_map = vec![0u32; h * w];
        for (i, m) in visible.iter().enumerate() {
            for (px, &v) in m.data.iter().enumerate() {
                if v != 0 {
                    instance_map[px] = (i + 1) as u32;
                }
            }
        }
        let mut part_map = vec![0u32; h * w];
        for (p, part) in parts.iter().enumerate() {
            let owner = (part.instance + 1) as u32;
            for (px, &v) in part.mask.data.iter().enumerate() {
                if v != 0 && instance_map[px] == owner {
                    part_map[px] = (p + 1) as u32;
                }
            }
        }
        (instance_map, part_map)
    }
}

/// A generated scene. `instances` hold the visible (post-occlusion) masks:
/// pairwise disjoint, each with area ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub instances: Vec<InstanceLabel>,
    pub seed: u64,
    pub index: SceneIndex,
}

/// Scene generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Shape classes in use: 1=disc, 2=rectangle, 3=triangle, 4=ring.
    pub num_classes: u16,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_parts: usize,
    pub max_parts: usize,
    pub allow_occlusion: bool,
    /// Per-instance color spread around the class base color. Instances of
    /// one class look alike but are separable.
    pub appearance_jitter: f32,
    pub pixel_noise: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            min_instances: 2,
            max_instances: 6,
            min_parts: 2,
            max_parts: 4,
            allow_occlusion: true,
            appearance_jitter: 0.22,
            pixel_noise: 0.015,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(32..=256).contains(&self.height) || !(32..=256).contains(&self.width) {
            return Err(Error::invalid(format!(
                "scene dims {}x{} outside [32,256]",
                self.height, self.width
            )));
        }
        if self.min_instances == 0 || self.max_instances < self.min_instances {
            return Err(Error::invalid("instance count range must be 1 <= min <= max"));
        }
        if self.min_parts == 0 || self.max_parts < self.min_parts {
            return Err(Error::invalid("part count range must be 1 <= min <= max"));
        }
        if self.num_classes == 0 || self.num_classes > 4 {
            return Err(Error::invalid("num_classes must be in 1..=4"));
        }
        Ok(())
    }
}

/// A set of scenes sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: u16,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, count: usize, base_seed: u64, workers: usize) -> Result<Dataset> {
        cfg.validate()?;
        let scenes = crate::util::parallel_map(count, workers, |i| {
            let seed = crate::rng::derive_seed(base_seed, "scene", &[i as u64]);
            generate_scene(cfg, seed)
        });
        let scenes: Result<Vec<Scene>> = scenes.into_iter().collect();
        Ok(Dataset {
            height: cfg.height,
            width: cfg.width,
            num_classes: cfg.num_classes,
            scenes: scenes?,
        })
    }
}
