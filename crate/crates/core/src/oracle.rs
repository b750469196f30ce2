//! Promptable oracle segmenter over synthetic scenes.
//!
//! Stands in for a segmentation foundation model: point prompts vote on an
//! instance and get its mask back, and per-pixel meta features come in two
//! flavors. Encoder features one-hot the sub-part id, so their
//! self-similarity over-segments; decoder features (one per prompt point)
//! one-hot the prompted instance, so the prompt row lights up the whole
//! instance. `part_bias` controls how often a single-point prompt collapses
//! to the containing part.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthdata::{Mask, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Additive Gaussian feature noise.
    pub noise_std: f32,
    /// Probability that a single-point prompt returns the containing part
    /// instead of the whole instance.
    pub part_bias: f32,
    /// Meta feature dimensionality; must exceed the number of one-hot codes
    /// a scene needs.
    pub feature_dim: usize,
    /// Feature grid stride relative to the image.
    pub stride: usize,
    /// Return visible (post-occlusion) masks instead of full masks.
    pub return_visible: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            noise_std: 0.1,
            part_bias: 0.5,
            feature_dim: 32,
            stride: 4,
            return_visible: false,
        }
    }
}

/// Point prompts in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub points: Vec<(usize, usize)>,
}

impl PromptSet {
    pub fn new(points: Vec<(usize, usize)>) -> Self {
        PromptSet { points }
    }
}

/// Dense embedding grid, location-major: `data[(y*w + x) * dim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dim: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.w + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn locations(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    Encoder,
    Decoder,
}

/// Majority id per `stride×stride` block, ties toward the smaller id.
pub fn downsample_ids(map: &[u32], h: usize, w: usize, stride: usize) -> Vec<u32> {
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0u32; oh * ow];
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for y in 0..oh {
        for x in 0..ow {
            counts.clear();
            for dy in 0..stride {
                for dx in 0..stride {
                    let id = map[(y * stride + dy) * w + (x * stride + dx)];
                    match counts.iter_mut().find(|(v, _)| *v == id) {
                        Some((_, n)) => *n += 1,
                        None => counts.push((id, 1)),
                    }
                }
            }
            let mut best = (u32::MAX, 0usize);
            for &(id, n) in &counts {
                if n > best.1 || (n == best.1 && id < best.0) {
                    best = (id, n);
                }
            }
            out[y * ow + x] = best.0;
        }
    }
    out
}

/// Segment by point prompts: the plurality instance (ties toward the
/// smaller id, background is id 0) wins; background plurality yields an
/// empty mask. A prompt with exactly one distinct foreground location may
/// return only the containing part, with probability `part_bias`.
pub fn prompt_segment(
    scene: &Scene,
    prompts: &PromptSet,
    cfg: &OracleConfig,
    rng: &mut Rng,
) -> Result<Mask> {
    if prompts.points.is_empty() {
        return Err(Error::invalid("prompt set must contain at least one point"));
    }
    let (h, w) = (scene.image.h, scene.image.w);
    let mut votes: Vec<(u32, usize)> = Vec::new();
    let mut fg_locations: Vec<(usize, usize)> = Vec::new();
    for &(r, c) in &prompts.points {
        if r >= h || c >= w {
            return Err(Error::invalid(format!(
                "prompt point ({r},{c}) outside {h}x{w} image"
            )));
        }
        let id = scene.index.instance_map[r * w + c];
        match votes.iter_mut().find(|(v, _)| *v == id) {
            Some((_, n)) => *n += 1,
            None => votes.push((id, 1)),
        }
        if id != 0 && !fg_locations.contains(&(r, c)) {
            fg_locations.push((r, c));
        }
    }
    let mut winner = (u32::MAX, 0usize);
    for &(id, n) in &votes {
        if n > winner.1 || (n == winner.1 && id < winner.0) {
            winner = (id, n);
        }
    }
    if winner.0 == 0 {
        return Ok(Mask::new(h, w));
    }
    let instance = (winner.0 - 1) as usize;

    if fg_locations.len() == 1 && cfg.part_bias > 0.0 && rng.gen::<f32>() < cfg.part_bias {
        let (r, c) = fg_locations[0];
        let part_id = scene.index.part_map[r * w + c];
        if part_id != 0 {
            let part = &scene.index.parts[(part_id - 1) as usize];
            return Ok(restrict(scene, part.instance, &part.mask, cfg));
        }
    }
    let full = &scene.index.full_masks[instance];
    Ok(restrict(scene, instance, full, cfg))
}

fn restrict(scene: &Scene, instance: usize, mask: &Mask, cfg: &OracleConfig) -> Mask {
    if !cfg.return_visible {
        return mask.clone();
    }
    let mut out = mask.clone();
    let owner = (instance + 1) as u32;
    for (px, v) in out.data.iter_mut().enumerate() {
        if scene.index.instance_map[px] != owner {
            *v = 0;
        }
    }
    out
}

/// Bounding-box prompt stub: union of full masks of instances whose visible
/// area lies mostly inside the box. Ambiguous when a box spans several
/// objects, which is the point of the ablation row it backs.
pub fn prompt_box(
    scene: &Scene,
    (r0, c0, r1, c1): (usize, usize, usize, usize),
    cfg: &OracleConfig,
) -> Result<Mask> {
    let (h, w) = (scene.image.h, scene.image.w);
    if r1 < r0 || c1 < c0 || r1 >= h || c1 >= w {
        return Err(Error::invalid(format!(
            "box ({r0},{c0})-({r1},{c1}) invalid for {h}x{w} image"
        )));
    }
    let mut out = Mask::new(h, w);
    for (i, inst) in scene.instances.iter().enumerate() {
        let total = inst.mask.area();
        let inside = (r0..=r1)
            .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
            .filter(|&(r, c)| inst.mask.get(r, c))
            .count();
        if total > 0 && inside * 10 >= total * 6 {
            out.union_with(&restrict(scene, i, &scene.index.full_masks[i], cfg));
        }
    }
    Ok(out)
}

/// Mask prompt stub: echoes the query mask with a one-pixel dilation, a mild
/// quality drop standing in for mask-prompt degradation.
pub fn prompt_mask(scene: &Scene, query: &Mask) -> Result<Mask> {
    let (h, w) = (scene.image.h, scene.image.w);
    if query.h != h || query.w != w {
        return Err(Error::ShapeMismatch {
            op: "prompt_mask",
            lhs: vec![query.h, query.w],
            rhs: vec![h, w],
        });
    }
    let mut out = query.clone();
    for r in 0..h {
        for c in 0..w {
            if query.get(r, c) {
                for (dr, dc) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                        out.set(nr as usize, nc as usize, true);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Encoder-mode meta features: one-hot of the sub-part id per feature cell
/// plus Gaussian noise. Self-similarity rows light up only sub-parts.
pub fn meta_features_encoder(scene: &Scene, cfg: &OracleConfig, rng: &mut Rng) -> Result<FeatureMap> {
    let n_codes = scene.index.parts.len() + 1;
    one_hot_features(scene, &scene.index.part_map, n_codes, cfg, rng)
}

/// Decoder-mode meta features for one prompt point in feature-grid
/// coordinates: one-hot of the prompted instance on its own cells, a
/// distinct code elsewhere. The prompt's similarity row is the instance
/// membership indicator.
pub fn meta_features_decoder(
    scene: &Scene,
    point: (usize, usize),
    cfg: &OracleConfig,
    rng: &mut Rng,
) -> Result<FeatureMap> {
    let (h, w) = (scene.image.h, scene.image.w);
    let (fh, fw) = (h / cfg.stride, w / cfg.stride);
    let (py, px) = point;
    if py >= fh || px >= fw {
        return Err(Error::invalid(format!(
            "decoder prompt ({py},{px}) outside {fh}x{fw} feature grid"
        )));
    }
    let d = cfg.feature_dim;
    if scene.instances.len() + 1 > d || d < 2 {
        return Err(Error::invalid(format!(
            "feature_dim {d} too small for {} instances",
            scene.instances.len()
        )));
    }
    let ids = downsample_ids(&scene.index.instance_map, h, w, cfg.stride);
    let target = ids[py * fw + px];
    // Background prompts flip the roles: matching cells carry the
    // background code, everything else a reserved "other" code.
    let other_code = if target == 0 { d - 1 } else { 0 };
    let mut data = vec![0.0f32; fh * fw * d];
    for (cell, &id) in ids.iter().enumerate() {
        let code = if id == target {
            target as usize
        } else {
            other_code
        };
        data[cell * d + code] = 1.0;
    }
    add_noise(&mut data, cfg.noise_std, rng);
    Ok(FeatureMap {
        dim: d,
        h: fh,
        w: fw,
        data,
    })
}

/// Combined entry point. Decoder mode requires prompt points (feature-grid
/// coordinates) and yields one map per point.
pub fn meta_features(
    scene: &Scene,
    mode: MetaMode,
    prompts: Option<&[(usize, usize)]>,
    cfg: &OracleConfig,
    rng: &mut Rng,
) -> Result<Vec<FeatureMap>> {
    match mode {
        MetaMode::Encoder => Ok(vec![meta_features_encoder(scene, cfg, rng)?]),
        MetaMode::Decoder => {
            let prompts = prompts.ok_or_else(|| {
                Error::invalid("decoder-mode meta features require prompt points")
            })?;
            prompts
                .iter()
                .map(|&p| meta_features_decoder(scene, p, cfg, rng))
                .collect()
        }
    }
}

fn one_hot_features(
    scene: &Scene,
    map: &[u32],
    n_codes: usize,
    cfg: &OracleConfig,
    rng: &mut Rng,
) -> Result<FeatureMap> {
    let (h, w) = (scene.image.h, scene.image.w);
    let (fh, fw) = (h / cfg.stride, w / cfg.stride);
    let d = cfg.feature_dim;
    if n_codes > d {
        return Err(Error::invalid(format!(
            "feature_dim {d} too small for {n_codes} one-hot codes"
        )));
    }
    let ids = downsample_ids(map, h, w, cfg.stride);
    let mut data = vec![0.0f32; fh * fw * d];
    for (cell, &id) in ids.iter().enumerate() {
        data[cell * d + id as usize] = 1.0;
    }
    add_noise(&mut data, cfg.noise_std, rng);
    Ok(FeatureMap {
        dim: d,
        h: fh,
        w: fw,
        data,
    })
}

fn add_noise(data: &mut [f32], std: f32, rng: &mut Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0f32, std).expect("valid std");
    for v in data.iter_mut() {
        *v += normal.sample(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::synthdata::{generate_scene, SceneConfig};

    fn test_scene(seed: u64) -> Scene {
        generate_scene(&SceneConfig::default(), seed).unwrap()
    }

    fn exact_cfg() -> OracleConfig {
        OracleConfig {
            noise_std: 0.0,
            part_bias: 0.0,
            ..OracleConfig::default()
        }
    }

    fn points_inside(scene: &Scene, instance: usize, n: usize) -> Vec<(usize, usize)> {
        let w = scene.image.w;
        let owner = (instance + 1) as u32;
        scene
            .index
            .instance_map
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == owner)
            .map(|(px, _)| (px / w, px % w))
            .take(n)
            .collect()
    }

    #[test]
    fn multi_point_prompt_returns_full_mask() {
        let scene = test_scene(12);
        let cfg = OracleConfig {
            part_bias: 1.0,
            noise_std: 0.0,
            ..OracleConfig::default()
        };
        let pts = points_inside(&scene, 0, 4);
        assert!(pts.len() >= 2);
        let mut rng = substream(0, "t", &[]);
        let mask = prompt_segment(&scene, &PromptSet::new(pts), &cfg, &mut rng).unwrap();
        assert_eq!(mask, scene.index.full_masks[0]);
    }

    #[test]
    fn plurality_vote_two_vs_one() {
        let scene = test_scene(12);
        let w = scene.image.w;
        let fg = points_inside(&scene, 0, 2);
        let bg = scene
            .index
            .instance_map
            .iter()
            .position(|&id| id == 0)
            .map(|px| (px / w, px % w))
            .unwrap();
        let mut rng = substream(0, "t", &[]);
        let mask = prompt_segment(
            &scene,
            &PromptSet::new(vec![fg[0], fg[1], bg]),
            &exact_cfg(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(mask, scene.index.full_masks[0]);
    }

    #[test]
    fn background_plurality_yields_empty_mask() {
        let scene = test_scene(12);
        let w = scene.image.w;
        let bg: Vec<(usize, usize)> = scene
            .index
            .instance_map
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == 0)
            .map(|(px, _)| (px / w, px % w))
            .take(3)
            .collect();
        let mut rng = substream(0, "t", &[]);
        let mask = prompt_segment(&scene, &PromptSet::new(bg), &exact_cfg(), &mut rng).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn out_of_bounds_point_is_an_error() {
        let scene = test_scene(12);
        let mut rng = substream(0, "t", &[]);
        assert!(prompt_segment(
            &scene,
            &PromptSet::new(vec![(999, 0)]),
            &exact_cfg(),
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn exact_oracle_has_unit_iou() {
        // part_bias = 0: returned mask matches the plurality instance's
        // full mask exactly, so IoU is 1.
        let scene = test_scene(3);
        let mut rng = substream(1, "t", &[]);
        for i in 0..scene.instances.len() {
            let pts = points_inside(&scene, i, 3);
            let mask =
                prompt_segment(&scene, &PromptSet::new(pts), &exact_cfg(), &mut rng).unwrap();
            assert_eq!(mask.iou(&scene.index.full_masks[i]), 1.0);
        }
    }

    #[test]
    fn multi_point_prompts_never_return_a_strict_sub_part() {
        let scene = test_scene(9);
        let cfg = OracleConfig {
            part_bias: 1.0,
            noise_std: 0.0,
            ..OracleConfig::default()
        };
        for i in 0..scene.instances.len() {
            let pts = points_inside(&scene, i, 2);
            if pts.len() < 2 {
                continue;
            }
            for trial in 0..20 {
                let mut rng = substream(trial, "t", &[]);
                let mask =
                    prompt_segment(&scene, &PromptSet::new(pts.clone()), &cfg, &mut rng).unwrap();
                assert_eq!(mask, scene.index.full_masks[i]);
            }
        }
    }

    #[test]
    fn single_point_with_full_bias_returns_containing_part() {
        let scene = test_scene(9);
        let cfg = OracleConfig {
            part_bias: 1.0,
            noise_std: 0.0,
            ..OracleConfig::default()
        };
        let (r, c) = points_inside(&scene, 0, 1)[0];
        let part_id = scene.index.part_map[r * scene.image.w + c];
        assert!(part_id > 0);
        let mut rng = substream(0, "t", &[]);
        let mask = prompt_segment(&scene, &PromptSet::new(vec![(r, c)]), &cfg, &mut rng).unwrap();
        assert_eq!(mask, scene.index.parts[(part_id - 1) as usize].mask);
        // Same location repeated still counts as one distinct point.
        let mut rng = substream(0, "t", &[]);
        let mask2 = prompt_segment(
            &scene,
            &PromptSet::new(vec![(r, c), (r, c), (r, c)]),
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(mask2, mask);
    }

    fn cos(a: &[f32], b: &[f32]) -> f32 {
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-8);
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-8);
        dot / (na * nb)
    }

    #[test]
    fn encoder_features_separate_parts() {
        let scene = test_scene(21);
        let cfg = exact_cfg();
        let mut rng = substream(0, "t", &[]);
        let fm = meta_features_encoder(&scene, &cfg, &mut rng).unwrap();
        let ids = downsample_ids(
            &scene.index.part_map,
            scene.image.h,
            scene.image.w,
            cfg.stride,
        );
        let mut same_part = None;
        let mut cross_part = None;
        'outer: for a in 0..ids.len() {
            if ids[a] == 0 {
                continue;
            }
            for b in a + 1..ids.len() {
                if ids[b] == 0 {
                    continue;
                }
                let pa = scene.index.parts[(ids[a] - 1) as usize].instance;
                let pb = scene.index.parts[(ids[b] - 1) as usize].instance;
                if ids[a] == ids[b] && same_part.is_none() {
                    same_part = Some((a, b));
                }
                if ids[a] != ids[b] && pa == pb && cross_part.is_none() {
                    cross_part = Some((a, b));
                }
                if same_part.is_some() && cross_part.is_some() {
                    break 'outer;
                }
            }
        }
        let (a, b) = same_part.expect("two cells in one part");
        let fa = fm.at(a / fm.w, a % fm.w);
        let fb = fm.at(b / fm.w, b % fm.w);
        assert!((cos(fa, fb) - 1.0).abs() < 1e-6);
        let (a, b) = cross_part.expect("two parts of one instance");
        let fa = fm.at(a / fm.w, a % fm.w);
        let fb = fm.at(b / fm.w, b % fm.w);
        assert!(cos(fa, fb).abs() < 1e-6);
    }

    #[test]
    fn decoder_row_is_instance_indicator() {
        // Independent oracle: majority-vote downsample the instance map by
        // hand and compare against the similarity row at the prompt.
        let scene = test_scene(17);
        let cfg = exact_cfg();
        let (h, w, s) = (scene.image.h, scene.image.w, cfg.stride);
        let (fh, fw) = (h / s, w / s);

        let mut indicator = vec![0u32; fh * fw];
        let mut prompt = None;
        for fy in 0..fh {
            for fx in 0..fw {
                let mut counts = std::collections::BTreeMap::new();
                for dy in 0..s {
                    for dx in 0..s {
                        *counts
                            .entry(scene.index.instance_map[(fy * s + dy) * w + (fx * s + dx)])
                            .or_insert(0usize) += 1;
                    }
                }
                // BTreeMap iterates ids ascending, so strict > keeps the
                // smaller id on ties.
                let mut best = (0u32, 0usize);
                let mut first = true;
                for (&id, &n) in &counts {
                    if first || n > best.1 {
                        best = (id, n);
                        first = false;
                    }
                }
                indicator[fy * fw + fx] = best.0;
                if best.0 == 2 && prompt.is_none() {
                    prompt = Some((fy, fx));
                }
            }
        }
        let prompt = prompt.expect("a feature cell owned by instance 2");
        let mut rng = substream(0, "t", &[]);
        let fm = meta_features_decoder(&scene, prompt, &cfg, &mut rng).unwrap();
        let fp = fm.at(prompt.0, prompt.1).to_vec();
        for cell in 0..fh * fw {
            let row_val = cos(&fp, fm.at(cell / fw, cell % fw));
            let expected = (indicator[cell] == 2) as usize as f32;
            assert!(
                (row_val - expected).abs() < 1e-6,
                "cell {cell}: {row_val} vs {expected}"
            );
        }
        let u8ind: Vec<u8> = indicator.iter().map(|&v| (v == 2) as u8).collect();
        assert!(u8ind.iter().any(|&v| v == 1));
    }

    #[test]
    fn meta_features_deterministic_without_noise() {
        let scene = test_scene(5);
        let cfg = exact_cfg();
        let mut r1 = substream(0, "a", &[]);
        let mut r2 = substream(99, "b", &[]);
        assert_eq!(
            meta_features_encoder(&scene, &cfg, &mut r1).unwrap(),
            meta_features_encoder(&scene, &cfg, &mut r2).unwrap()
        );
    }

    #[test]
    fn decoder_mode_requires_prompts() {
        let scene = test_scene(5);
        let mut rng = substream(0, "t", &[]);
        assert!(meta_features(&scene, MetaMode::Decoder, None, &exact_cfg(), &mut rng).is_err());
    }
}
