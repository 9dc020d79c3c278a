//! Registered infrared/visible image pairs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{read_pnm, rgb_to_luma, PnmKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    /// `1×1×H×W` in `[0, 1]`.
    pub infrared: Tensor,
    /// `1×1×H×W` in `[0, 1]`.
    pub visible_luma: Tensor,
    /// Present when the visible source was a colour image.
    pub visible_rgb: Option<Tensor>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, infrared: Tensor, visible_luma: Tensor, visible_rgb: Option<Tensor>) -> Result<Self> {
        let id = id.into();
        let (_, ci, hi, wi) = infrared.dims4("ImagePair")?;
        let (_, cv, hv, wv) = visible_luma.dims4("ImagePair")?;
        if ci != 1 || cv != 1 {
            return Err(Error::Dataset(format!("pair `{id}`: sources must be single-channel")));
        }
        if (hi, wi) != (hv, wv) {
            return Err(Error::Dataset(format!(
                "pair `{id}`: infrared is {hi}x{wi} but visible is {hv}x{wv}"
            )));
        }
        Ok(Self {
            id,
            infrared,
            visible_luma,
            visible_rgb,
        })
    }

    pub fn height(&self) -> usize {
        self.infrared.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.infrared.shape()[3]
    }
}

/// Reads a PGM or PPM file, returning its luma plus the colour original when
/// there was one.
pub fn read_luma(path: impl AsRef<Path>) -> Result<(Tensor, Option<Tensor>)> {
    match read_pnm(path)? {
        (PnmKind::Gray, t) => Ok((t, None)),
        (PnmKind::Rgb, t) => Ok((rgb_to_luma(&t)?, Some(t))),
    }
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("pgm" | "ppm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            // first path in sorted order wins if a stem has both extensions
            let stem = stem.to_string();
            match out.get(&stem) {
                Some(existing) if existing <= &path => {}
                _ => {
                    out.insert(stem, path);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct PairListing {
    pub pairs: Vec<ImagePair>,
    /// Stems present in only one of the two directories.
    pub unmatched: Vec<String>,
}

/// Matches files with identical base names across the two directories and
/// loads them, sorted by id.
pub fn pair_directory(ir_dir: impl AsRef<Path>, vis_dir: impl AsRef<Path>) -> Result<PairListing> {
    let (ir_dir, vis_dir) = (ir_dir.as_ref(), vis_dir.as_ref());
    let ir = images_by_stem(ir_dir)?;
    let vis = images_by_stem(vis_dir)?;
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (stem, ir_path) in &ir {
        let Some(vis_path) = vis.get(stem) else {
            unmatched.push(stem.clone());
            continue;
        };
        let (infrared, _) = read_luma(ir_path)?;
        let (visible_luma, visible_rgb) = read_luma(vis_path)?;
        pairs.push(ImagePair::new(stem.clone(), infrared, visible_luma, visible_rgb)?);
    }
    unmatched.extend(vis.keys().filter(|k| !ir.contains_key(*k)).cloned());
    unmatched.sort();
    for stem in &unmatched {
        log::warn!("no counterpart for `{stem}`; skipped");
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no pairs: no common file names between {} and {}",
            ir_dir.display(),
            vis_dir.display()
        )));
    }
    Ok(PairListing { pairs, unmatched })
}
