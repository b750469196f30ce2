//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.txt          key=value lines, UTF-8
//! <dir>/scene_00000.ppm       P6, maxval 255
//! <dir>/scene_00000.s4ml      labels + oracle side data
//! ```
//!
//! Label file, all integers little-endian:
//!
//! ```text
//! magic "S4ML" | version u16 | instance_count u32
//! per instance:
//!   class u16 | confidence f32 | visible-mask RLE | soft flag u8
//!   [h*w f32 soft values when flag = 1]
//! oracle section:
//!   per instance: full-mask RLE
//!   part_count u32
//!   per part: instance_index u32 | full-extent RLE
//! ```
//!
//! An RLE block is `run_count u32` followed by `run_count` u32 lengths,
//! alternating values starting with zeros.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::rle::{rle_decode, rle_encode};
use super::{Dataset, Image, InstanceLabel, Mask, Part, Scene, SceneIndex};
use crate::error::{Error, Result};

const LABEL_MAGIC: &[u8; 4] = b"S4ML";
const LABEL_VERSION: u16 = 1;

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("format=s4m-dataset\n");
    manifest.push_str("version=1\n");
    manifest.push_str(&format!("count={}\n", ds.scenes.len()));
    manifest.push_str(&format!("height={}\n", ds.height));
    manifest.push_str(&format!("width={}\n", ds.width));
    manifest.push_str(&format!("classes={}\n", ds.num_classes));
    for (i, scene) in ds.scenes.iter().enumerate() {
        manifest.push_str(&format!("scene_{i:05}.seed={}\n", scene.seed));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    for (i, scene) in ds.scenes.iter().enumerate() {
        write_ppm(&dir.join(format!("scene_{i:05}.ppm")), &scene.image)?;
        let mut buf = Vec::new();
        encode_labels(&mut buf, &scene.instances, Some(&scene.index));
        fs::write(dir.join(format!("scene_{i:05}.s4ml")), buf)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let kv = parse_kv(&manifest_path, &text)?;
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::format(manifest_path.display().to_string(), 0, format!("missing key {key}")))
    };
    if get("format")? != "s4m-dataset" {
        return Err(Error::format(
            manifest_path.display().to_string(),
            0,
            "not an s4m dataset manifest",
        ));
    }
    let count: usize = parse_num(&manifest_path, get("count")?)?;
    let height: usize = parse_num(&manifest_path, get("height")?)?;
    let width: usize = parse_num(&manifest_path, get("width")?)?;
    let num_classes: u16 = parse_num(&manifest_path, get("classes")?)?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let seed: u64 = parse_num(&manifest_path, get(&format!("scene_{i:05}.seed"))?)?;
        let image = read_ppm(&dir.join(format!("scene_{i:05}.ppm")))?;
        if image.h != height || image.w != width {
            return Err(Error::invalid(format!(
                "scene {i}: image {}x{} does not match manifest {height}x{width}",
                image.h, image.w
            )));
        }
        let label_path = dir.join(format!("scene_{i:05}.s4ml"));
        let bytes = fs::read(&label_path)?;
        let (instances, index) = decode_labels(&label_path, &bytes, height, width)?;
        let index = index.ok_or_else(|| {
            Error::format(label_path.display().to_string(), 0, "missing oracle section")
        })?;
        scenes.push(Scene {
            image,
            instances,
            seed,
            index,
        });
    }
    Ok(Dataset {
        height,
        width,
        num_classes,
        scenes,
    })
}

/// Write bare label lists (no oracle section), one file per scene. Used for
/// pseudo-label and refined-label outputs.
pub fn write_labels_dir(dir: &Path, labels: &[Vec<InstanceLabel>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("format=s4m-labels\n");
    manifest.push_str("version=1\n");
    manifest.push_str(&format!("count={}\n", labels.len()));
    fs::write(dir.join("manifest.txt"), manifest)?;
    for (i, scene_labels) in labels.iter().enumerate() {
        let mut buf = Vec::new();
        encode_labels(&mut buf, scene_labels, None);
        fs::write(dir.join(format!("labels_{i:05}.s4ml")), buf)?;
    }
    Ok(())
}

pub fn read_labels_dir(dir: &Path, height: usize, width: usize) -> Result<Vec<Vec<InstanceLabel>>> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let kv = parse_kv(&manifest_path, &text)?;
    let count: usize = parse_num(
        &manifest_path,
        kv.get("count").ok_or_else(|| {
            Error::format(manifest_path.display().to_string(), 0, "missing key count")
        })?,
    )?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("labels_{i:05}.s4ml"));
        let bytes = fs::read(&path)?;
        let (labels, _) = decode_labels(&path, &bytes, height, width)?;
        out.push(labels);
    }
    Ok(out)
}

fn parse_kv(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let (k, v) = trimmed.split_once('=').ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    offset,
                    format!("expected key=value, got {trimmed:?}"),
                )
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        offset += line.len() as u64 + 1;
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| {
        Error::format(
            path.display().to_string(),
            0,
            format!("invalid number {s:?}"),
        )
    })
}

// ── P6 images ─────────────────────────────────────────────────────────

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", image.w, image.h).into_bytes();
    buf.reserve(image.h * image.w * 3);
    for &v in &image.data {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(name.clone(), start as u64, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(Error::format(name, 0, "not a P6 file"));
    }
    let w: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::format(name.clone(), pos as u64, "bad width"))?;
    let h: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::format(name.clone(), pos as u64, "bad height"))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::format(name.clone(), pos as u64, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(name, pos as u64, "maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err(Error::format(
            name,
            bytes.len() as u64,
            format!("truncated pixel payload: need {need} bytes"),
        ));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(Image { h, w, data })
}

// ── Label binary ──────────────────────────────────────────────────────

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_rle(buf: &mut Vec<u8>, mask: &Mask) {
    let runs = rle_encode(&mask.data);
    put_u32(buf, runs.len() as u32);
    for r in runs {
        put_u32(buf, r);
    }
}

fn encode_labels(buf: &mut Vec<u8>, labels: &[InstanceLabel], index: Option<&SceneIndex>) {
    buf.extend_from_slice(LABEL_MAGIC);
    put_u16(buf, LABEL_VERSION);
    put_u32(buf, labels.len() as u32);
    for label in labels {
        put_u16(buf, label.class_id);
        put_f32(buf, label.confidence);
        put_rle(buf, &label.mask);
        match &label.soft_mask {
            Some(soft) => {
                buf.push(1);
                for &v in soft {
                    put_f32(buf, v);
                }
            }
            None => buf.push(0),
        }
    }
    if let Some(index) = index {
        for full in &index.full_masks {
            put_rle(buf, full);
        }
        put_u32(buf, index.parts.len() as u32);
        for part in &index.parts {
            put_u32(buf, part.instance as u32);
            put_rle(buf, &part.mask);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path.clone(), self.pos as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated payload: wanted {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn rle_mask(&mut self, h: usize, w: usize) -> Result<Mask> {
        let n = self.u32()? as usize;
        if n > h * w + 1 {
            return Err(self.err(format!("RLE run count {n} exceeds pixel count")));
        }
        let mut runs = Vec::with_capacity(n);
        for _ in 0..n {
            runs.push(self.u32()?);
        }
        let at = self.pos as u64;
        let data = rle_decode(&runs, h * w)
            .map_err(|e| Error::format(self.path.clone(), at, e.to_string()))?;
        Ok(Mask { h, w, data })
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_labels(
    path: &Path,
    bytes: &[u8],
    h: usize,
    w: usize,
) -> Result<(Vec<InstanceLabel>, Option<SceneIndex>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if cur.take(4)? != LABEL_MAGIC {
        return Err(Error::format(cur.path, 0, "bad magic, expected S4ML"));
    }
    let version = cur.u16()?;
    if version != LABEL_VERSION {
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = cur.u16()?;
        let confidence = cur.f32()?;
        let mask = cur.rle_mask(h, w)?;
        let soft_mask = if cur.u8()? == 1 {
            let mut soft = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                soft.push(cur.f32()?);
            }
            Some(soft)
        } else {
            None
        };
        labels.push(InstanceLabel {
            class_id,
            mask,
            confidence,
            soft_mask,
        });
    }
    if cur.done() {
        return Ok((labels, None));
    }
    let mut full_masks = Vec::with_capacity(count);
    for _ in 0..count {
        full_masks.push(cur.rle_mask(h, w)?);
    }
    let part_count = cur.u32()? as usize;
    let mut parts = Vec::with_capacity(part_count);
    for _ in 0..part_count {
        let instance = cur.u32()? as usize;
        if instance >= count {
            return Err(cur.err(format!("part references instance {instance} of {count}")));
        }
        let mask = cur.rle_mask(h, w)?;
        parts.push(Part { instance, mask });
    }
    if !cur.done() {
        return Err(cur.err("trailing bytes after oracle section"));
    }
    let visible: Vec<Mask> = labels.iter().map(|l| l.mask.clone()).collect();
    let (instance_map, part_map) = SceneIndex::rebuild_maps(&visible, &parts, h, w);
    Ok((
        labels,
        Some(SceneIndex {
            full_masks,
            parts,
            instance_map,
            part_map,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            height: 64,
            width: 64,
            num_classes: 4,
            scenes: vec![],
        };
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn dataset_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let ds = Dataset::generate(&cfg, 3, 99, 1).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn labels_roundtrip_with_soft_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = Mask::new(4, 4);
        mask.set(1, 1, true);
        mask.set(1, 2, true);
        let soft: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let labels = vec![vec![InstanceLabel {
            class_id: 2,
            mask,
            confidence: 0.75,
            soft_mask: Some(soft),
        }]];
        write_labels_dir(dir.path(), &labels).unwrap();
        let back = read_labels_dir(dir.path(), 4, 4).unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let ds = Dataset::generate(&cfg, 1, 7, 1).unwrap();
        write_dataset(dir.path(), &ds).unwrap();

        // Truncate the label payload.
        let label_path = dir.path().join("scene_00000.s4ml");
        let bytes = std::fs::read(&label_path).unwrap();
        std::fs::write(&label_path, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("format error at byte"), "{err}");

        // Corrupt the magic.
        let mut bytes2 = bytes.clone();
        bytes2[0] = b'X';
        std::fs::write(&label_path, &bytes2).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SceneConfig::default(), 31).unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &scene.image).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), scene.image);
    }
}
