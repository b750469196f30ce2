//! Scene generator: colored geometric instances painted back-to-front, each
//! tiled into brightness-varied sub-parts so a promptable oracle can expose
//! part-level granularity.

use rand::Rng as _;

use super::{Image, InstanceLabel, Mask, Part, Scene, SceneConfig, SceneIndex};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

const CLASS_COLORS: [[f32; 3]; 4] = [
    [0.80, 0.25, 0.20], // disc
    [0.20, 0.72, 0.30], // rectangle
    [0.25, 0.35, 0.85], // triangle
    [0.82, 0.78, 0.20], // ring
];

/// Minimum pixels an already-placed instance must keep visible before a new
/// instance is allowed on top of it.
const MIN_VISIBLE: usize = 12;

struct Placed {
    class_id: u16,
    full: Mask,
    parts: Vec<Mask>,
    color: [f32; 3],
}

/// Deterministic function of `(cfg, seed)`. Later-drawn instances occlude
/// earlier ones; fully occluded instances are dropped from ground truth.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = substream(seed, "scene-gen", &[]);

    let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let inst = place_instance(cfg, &placed, &mut rng)?;
        placed.push(inst);
    }

    let mut image = background(h, w, &mut rng);
    let mut owner = vec![0u32; h * w]; // instance idx+1 per pixel, pre-drop
    for (i, inst) in placed.iter().enumerate() {
        let nparts = inst.parts.len();
        for (p, part) in inst.parts.iter().enumerate() {
            let spread = if nparts > 1 {
                p as f32 / (nparts - 1) as f32 - 0.5
            } else {
                0.0
            };
            let factor = 1.0 + 0.5 * spread;
            for px in 0..h * w {
                if part.data[px] != 0 {
                    let mut rgb = [0.0f32; 3];
                    for c in 0..3 {
                        let noise = rng.gen_range(-cfg.pixel_noise..=cfg.pixel_noise);
                        rgb[c] = (inst.color[c] * factor + noise).clamp(0.0, 1.0);
                    }
                    image.data[px * 3..px * 3 + 3].copy_from_slice(&rgb);
                    owner[px] = (i + 1) as u32;
                }
            }
        }
    }
    image.quantize();

    // Visible masks; drop instances occluded down to nothing.
    let mut keep: Vec<usize> = Vec::new();
    let mut visible: Vec<Mask> = Vec::new();
    for i in 0..placed.len() {
        let mut m = Mask::new(h, w);
        for px in 0..h * w {
            if owner[px] == (i + 1) as u32 {
                m.data[px] = 1;
            }
        }
        if !m.is_empty() {
            keep.push(i);
            visible.push(m);
        }
    }

    let mut instances = Vec::with_capacity(keep.len());
    let mut full_masks = Vec::with_capacity(keep.len());
    let mut parts = Vec::new();
    for (new_idx, &old_idx) in keep.iter().enumerate() {
        let inst = &placed[old_idx];
        instances.push(InstanceLabel::ground_truth(
            inst.class_id,
            visible[new_idx].clone(),
        ));
        full_masks.push(inst.full.clone());
        for part_mask in &inst.parts {
            parts.push(Part {
                instance: new_idx,
                mask: part_mask.clone(),
            });
        }
    }
    let (instance_map, part_map) = SceneIndex::rebuild_maps(&visible, &parts, h, w);

    Ok(Scene {
        image,
        instances,
        seed,
        index: SceneIndex {
            full_masks,
            parts,
            instance_map,
            part_map,
        },
    })
}

fn background(h: usize, w: usize, rng: &mut Rng) -> Image {
    let mut img = Image::new(h, w);
    let tone: f32 = rng.gen_range(0.10..0.20);
    for r in 0..h {
        for c in 0..w {
            let grad = 0.06 * (r as f32 / h as f32);
            let base = tone + grad;
            let mut rgb = [base, base + 0.01, base + 0.02];
            for ch in &mut rgb {
                *ch = (*ch + rng.gen_range(-0.01..=0.01)).clamp(0.0, 1.0);
            }
            img.set_px(r, c, rgb);
        }
    }
    img
}

fn place_instance(cfg: &SceneConfig, placed: &[Placed], rng: &mut Rng) -> Result<Placed> {
    let (h, w) = (cfg.height, cfg.width);
    for _attempt in 0..100 {
        let class_id = rng.gen_range(1..=cfg.num_classes);
        let full = rasterize(class_id, h, w, rng);
        if full.area() < 24 {
            continue;
        }
        let acceptable = if cfg.allow_occlusion {
            // Everyone underneath must keep a visible remnant once the
            // candidate is painted on top.
            placed.iter().enumerate().all(|(idx, p)| {
                let mut vis = p.full.clone();
                for later in &placed[idx + 1..] {
                    vis = vis.minus(&later.full);
                }
                vis.minus(&full).area() >= MIN_VISIBLE
            })
        } else {
            placed.iter().all(|p| p.full.intersection_area(&full) == 0)
        };
        if !acceptable {
            continue;
        }
        let n_parts = rng.gen_range(cfg.min_parts..=cfg.max_parts).min(full.area());
        let parts = split_parts(&full, n_parts, rng);
        let base = CLASS_COLORS[(class_id - 1) as usize];
        let j = cfg.appearance_jitter;
        let mut color = [0.0f32; 3];
        for c in 0..3 {
            color[c] = (base[c] + rng.gen_range(-j..=j)).clamp(0.08, 0.92);
        }
        return Ok(Placed {
            class_id,
            full,
            parts,
            color,
        });
    }
    Err(Error::invalid(
        "could not place instance under the occlusion constraints",
    ))
}

fn rasterize(class_id: u16, h: usize, w: usize, rng: &mut Rng) -> Mask {
    let hf = h as f32;
    let wf = w as f32;
    let cy = rng.gen_range(0.15 * hf..0.85 * hf);
    let cx = rng.gen_range(0.15 * wf..0.85 * wf);
    let scale = hf.min(wf);
    let mut mask = Mask::new(h, w);
    match class_id {
        1 => {
            let r = rng.gen_range(0.09 * scale..0.18 * scale);
            fill(&mut mask, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                dy * dy + dx * dx <= r * r
            });
        }
        2 => {
            let a = rng.gen_range(0.08 * scale..0.17 * scale);
            let b = rng.gen_range(0.06 * scale..0.14 * scale);
            let th = rng.gen_range(0.0..std::f32::consts::PI);
            let (s, c) = th.sin_cos();
            fill(&mut mask, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= a && v.abs() <= b
            });
        }
        3 => {
            let r = rng.gen_range(0.11 * scale..0.20 * scale);
            let th0 = rng.gen_range(0.0..std::f32::consts::TAU);
            let mut vx = [0.0f32; 3];
            let mut vy = [0.0f32; 3];
            for k in 0..3 {
                let th = th0 + k as f32 * std::f32::consts::TAU / 3.0
                    + rng.gen_range(-0.3..0.3);
                let rr = r * rng.gen_range(0.8..1.25);
                vx[k] = cx + rr * th.cos();
                vy[k] = cy + rr * th.sin();
            }
            fill(&mut mask, |y, x| point_in_triangle(x, y, &vx, &vy));
        }
        _ => {
            let ro = rng.gen_range(0.10 * scale..0.18 * scale);
            let ri = ro * rng.gen_range(0.40..0.60);
            fill(&mut mask, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                let d2 = dy * dy + dx * dx;
                d2 <= ro * ro && d2 >= ri * ri
            });
        }
    }
    mask
}

fn fill(mask: &mut Mask, inside: impl Fn(f32, f32) -> bool) {
    for r in 0..mask.h {
        for c in 0..mask.w {
            if inside(r as f32 + 0.5, c as f32 + 0.5) {
                mask.set(r, c, true);
            }
        }
    }
}

fn point_in_triangle(x: f32, y: f32, vx: &[f32; 3], vy: &[f32; 3]) -> bool {
    let sign = |x1: f32, y1: f32, x2: f32, y2: f32| (x - x2) * (y1 - y2) - (x1 - x2) * (y - y2);
    let d1 = sign(vx[0], vy[0], vx[1], vy[1]);
    let d2 = sign(vx[1], vy[1], vx[2], vy[2]);
    let d3 = sign(vx[2], vy[2], vx[0], vy[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Slice the mask into `n` near-equal chunks along a random direction; the
/// chunks partition the full mask exactly.
fn split_parts(full: &Mask, n: usize, rng: &mut Rng) -> Vec<Mask> {
    let mut pixels: Vec<usize> = (0..full.data.len())
        .filter(|&px| full.data[px] != 0)
        .collect();
    let th = rng.gen_range(0.0..std::f32::consts::PI);
    let (s, c) = th.sin_cos();
    let w = full.w;
    pixels.sort_by(|&a, &b| {
        let pa = (a / w) as f32 * s + (a % w) as f32 * c;
        let pb = (b / w) as f32 * s + (b % w) as f32 * c;
        pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
    });
    let n = n.max(1).min(pixels.len());
    let mut parts = Vec::with_capacity(n);
    let len = pixels.len();
    for p in 0..n {
        let lo = p * len / n;
        let hi = (p + 1) * len / n;
        let mut m = Mask::new(full.h, full.w);
        for &px in &pixels[lo..hi] {
            m.data[px] = 1;
        }
        parts.push(m);
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 42).unwrap();
        let b = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_count_yields_exact_instances_with_disjoint_masks() {
        let cfg = SceneConfig {
            min_instances: 3,
            max_instances: 3,
            ..SceneConfig::default()
        };
        for seed in 0..8 {
            let scene = generate_scene(&cfg, seed).unwrap();
            assert_eq!(scene.instances.len(), 3, "seed {seed}");
            for i in 0..3 {
                for j in i + 1..3 {
                    assert_eq!(
                        scene.instances[i].mask.intersection_area(&scene.instances[j].mask),
                        0
                    );
                }
            }
        }
    }

    #[test]
    fn visible_masks_and_background_partition_every_pixel() {
        // Exhaustive pixel scan: each pixel belongs to exactly one visible
        // mask or to the background.
        let cfg = SceneConfig::default();
        for seed in [1u64, 7, 99] {
            let scene = generate_scene(&cfg, seed).unwrap();
            let hw = cfg.height * cfg.width;
            for px in 0..hw {
                let owners = scene
                    .instances
                    .iter()
                    .filter(|inst| inst.mask.data[px] != 0)
                    .count();
                let in_bg = scene.index.instance_map[px] == 0;
                assert_eq!(owners + in_bg as usize, 1, "pixel {px} seed {seed}");
            }
        }
    }

    #[test]
    fn visible_is_subset_of_full_and_parts_partition_full() {
        let scene = generate_scene(&SceneConfig::default(), 5).unwrap();
        for (i, inst) in scene.instances.iter().enumerate() {
            let full = &scene.index.full_masks[i];
            assert!(inst.mask.area() >= 1);
            assert_eq!(inst.mask.minus(full).area(), 0, "visible ⊆ full");
            let mut union = Mask::new(full.h, full.w);
            let mut total = 0;
            for part in scene.index.parts.iter().filter(|p| p.instance == i) {
                total += part.mask.area();
                union.union_with(&part.mask);
            }
            assert_eq!(union, *full);
            assert_eq!(total, full.area(), "parts are disjoint");
        }
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let cfg = SceneConfig {
            min_instances: 0,
            max_instances: 0,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 1).is_err());
        let cfg = SceneConfig {
            height: 8,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 1).is_err());
    }

    #[test]
    fn no_occlusion_mode_keeps_full_masks_disjoint() {
        let cfg = SceneConfig {
            min_instances: 2,
            max_instances: 3,
            allow_occlusion: false,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 11).unwrap();
        for i in 0..scene.index.full_masks.len() {
            for j in i + 1..scene.index.full_masks.len() {
                assert_eq!(
                    scene.index.full_masks[i].intersection_area(&scene.index.full_masks[j]),
                    0
                );
            }
        }
    }

    #[test]
    fn image_is_quantized() {
        let scene = generate_scene(&SceneConfig::default(), 3).unwrap();
        for &v in &scene.image.data {
            let q = (v * 255.0).round() / 255.0;
            assert_eq!(v, q);
        }
    }
}
