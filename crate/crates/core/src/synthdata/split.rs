//! Labeled/unlabeled dataset splits.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Disjoint labeled/unlabeled scene id lists. `ratio` is the realized
/// labeled fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    pub ratio: f64,
}

/// Sample `round(ratio·n)` labeled scene ids; deterministic in `seed`.
pub fn make_split(n_scenes: usize, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0,1]")));
    }
    let n_labeled = (ratio * n_scenes as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} yields 0 labeled scenes out of {n_scenes}"
        )));
    }
    let mut ids: Vec<usize> = (0..n_scenes).collect();
    let mut rng = substream(seed, "split", &[]);
    ids.shuffle(&mut rng);
    let mut labeled_ids: Vec<usize> = ids[..n_labeled].to_vec();
    let mut unlabeled_ids: Vec<usize> = ids[n_labeled..].to_vec();
    labeled_ids.sort_unstable();
    unlabeled_ids.sort_unstable();
    Ok(DatasetSplit {
        labeled_ids,
        unlabeled_ids,
        ratio: n_labeled as f64 / n_scenes as f64,
    })
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let join = |ids: &[usize]| {
        ids.iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let text = format!(
        "format=s4m-split\nratio={}\nlabeled={}\nunlabeled={}\n",
        split.ratio,
        join(&split.labeled_ids),
        join(&split.unlabeled_ids),
    );
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut ratio = None;
    let mut labeled = None;
    let mut unlabeled = None;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        match k.trim() {
            "ratio" => {
                ratio = Some(v.trim().parse::<f64>().map_err(|_| {
                    Error::format(name.clone(), 0, format!("bad ratio {v:?}"))
                })?)
            }
            "labeled" => labeled = Some(parse_ids(&name, v)?),
            "unlabeled" => unlabeled = Some(parse_ids(&name, v)?),
            _ => {}
        }
    }
    match (ratio, labeled, unlabeled) {
        (Some(ratio), Some(labeled_ids), Some(unlabeled_ids)) => Ok(DatasetSplit {
            labeled_ids,
            unlabeled_ids,
            ratio,
        }),
        _ => Err(Error::format(name, 0, "missing split keys")),
    }
}

fn parse_ids(name: &str, v: &str) -> Result<Vec<usize>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(name.to_string(), 0, format!("bad id {s:?}")))
        })
        .collect()
}
