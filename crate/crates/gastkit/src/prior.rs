//! Per-view geometry priors estimated from training annotations, stored as
//! `view_<id>.json` documents at working resolution.

use std::path::{Path, PathBuf};

use gast_core::geometry::{Annotation, GeometryPrior, PseudoDepthMap};
use gast_core::model::OUTPUT_STRIDE;
use gast_core::synth::Split;
use serde::{Deserialize, Serialize};

use crate::audit::FileAudit;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorCategory {
    pub id: u32,
    pub rows: Vec<f64>,
    /// True when the view had no boxes of this category and the map is uniform.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub view: u32,
    pub width: usize,
    pub height: usize,
    pub categories: Vec<PriorCategory>,
}

impl PriorFile {
    pub fn from_prior(prior: &GeometryPrior, fallbacks: &[u32]) -> Self {
        PriorFile {
            view: prior.view,
            width: prior.width(),
            height: prior.height(),
            categories: prior
                .depth_maps
                .iter()
                .map(|d| PriorCategory {
                    id: d.category,
                    rows: d.rows().to_vec(),
                    fallback: fallbacks.contains(&d.category),
                })
                .collect(),
        }
    }

    pub fn to_prior(&self) -> Result<GeometryPrior> {
        let maps = self
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.id as usize != i {
                    return Err(Error::Data(format!("prior of view {} lists categories out of order", self.view)));
                }
                if c.rows.len() != self.height {
                    return Err(Error::Data(format!(
                        "prior of view {} has {} rows, expected {}",
                        self.view,
                        c.rows.len(),
                        self.height
                    )));
                }
                Ok(PseudoDepthMap::from_rows(self.view, c.id, self.width, c.rows.clone())?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GeometryPrior::new(self.view, maps)?)
    }
}

pub fn prior_path(dir: &Path, view: u32) -> PathBuf {
    dir.join(format!("view_{view}.json"))
}

/// Working resolution of a dataset.
pub fn working_hw(ds: &Dataset) -> Result<(usize, usize)> {
    let m = ds.manifest();
    if m.image_height % OUTPUT_STRIDE != 0 || m.image_width % OUTPUT_STRIDE != 0 {
        return Err(Error::Contract(format!(
            "image size {}x{} is not a multiple of the output stride",
            m.image_height, m.image_width
        )));
    }
    Ok((m.image_height / OUTPUT_STRIDE, m.image_width / OUTPUT_STRIDE))
}

/// Estimates one prior per view from the training split only.
pub fn estimate(ds: &Dataset) -> Result<Vec<PriorFile>> {
    let (h, w) = working_hw(ds)?;
    let n = ds.num_categories();
    let scale = 1.0 / OUTPUT_STRIDE as f64;
    let mut out = Vec::new();
    for &view in &ds.manifest().views {
        let mut anns = Vec::new();
        for v in ds.videos(Split::Train).filter(|v| v.view == view) {
            for frame in ds.annotations(v)? {
                anns.extend(frame.into_iter().map(|b| Annotation {
                    view,
                    category: b.category as u32,
                    bbox: b.bbox.scaled(scale),
                }));
            }
        }
        if anns.is_empty() {
            return Err(gast_core::Error::PriorUnavailable { view, category: 0 }.into());
        }
        let (prior, fallbacks) = GeometryPrior::estimate(&anns, view, n, h, w)?;
        for c in &fallbacks {
            log::warn!("view {view}: no training boxes of category {c}, using a uniform map");
        }
        out.push(PriorFile::from_prior(&prior, &fallbacks));
    }
    Ok(out)
}

pub fn save(dir: &Path, priors: &[PriorFile]) -> Result<()> {
    io::create_dir(dir)?;
    for p in priors {
        io::write_json(&prior_path(dir, p.view), p)?;
    }
    Ok(())
}

/// Loads the priors of `views`, checking they match `working_hw` and `n` categories.
pub fn load(
    dir: &Path,
    views: &[u32],
    n: usize,
    working_hw: (usize, usize),
    audit: &FileAudit,
) -> Result<Vec<GeometryPrior>> {
    views
        .iter()
        .map(|&view| {
            let path = prior_path(dir, view);
            let text = audit.read_to_string(&path)?;
            let file: PriorFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
            if file.view != view || (file.height, file.width) != working_hw || file.categories.len() != n {
                return Err(Error::Data(format!(
                    "{}: prior does not match view {view}, {}x{} and {n} categories",
                    path.display(),
                    working_hw.0,
                    working_hw.1
                )));
            }
            file.to_prior()
        })
        .collect()
}
