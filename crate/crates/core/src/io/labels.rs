//! Patch-resolution instance and class grids.
//!
//! Stored in a tensor archive as `labels/{image}/instance` and
//! `labels/{image}/class`, each `[side, side]` with integer values carried
//! in f32. [`IGNORE_ID`] marks unlabeled patches.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::archive::{read_archive, ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const IGNORE_ID: i32 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    pub image_id: String,
    pub side: usize,
    pub instance: Vec<i32>,
    pub class: Vec<i32>,
}

impl LabelRaster {
    /// Build and validate a raster.
    pub fn new(image_id: impl Into<String>, side: usize, instance: Vec<i32>, class: Vec<i32>) -> Result<Self> {
        let r = Self {
            image_id: image_id.into(),
            side,
            instance,
            class,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn patches(&self) -> usize {
        self.side * self.side
    }

    /// Check shapes, ignore-id agreement and the instance → class map.
    pub fn validate(&self) -> Result<()> {
        let n = self.patches();
        if self.instance.len() != n || self.class.len() != n {
            return Err(Error::Labels(format!(
                "image `{}`: grids must hold {n} patches, got {} and {}",
                self.image_id,
                self.instance.len(),
                self.class.len()
            )));
        }
        let mut seen: HashMap<i32, i32> = HashMap::new();
        for (&inst, &cls) in self.instance.iter().zip(&self.class) {
            if inst == IGNORE_ID {
                continue;
            }
            if inst < 0 || cls < 0 {
                return Err(Error::Labels(format!(
                    "image `{}`: negative label ({inst}, {cls}) other than the ignore id",
                    self.image_id
                )));
            }
            match seen.get(&inst) {
                Some(&c) if c != cls => {
                    return Err(Error::LabelConsistency {
                        image: self.image_id.clone(),
                        instance: inst,
                        first: c,
                        second: cls,
                    })
                }
                Some(_) => {}
                None => {
                    seen.insert(inst, cls);
                }
            }
        }
        Ok(())
    }

    pub fn check_side(&self, expected: usize) -> Result<()> {
        if self.side != expected {
            return Err(Error::Labels(format!(
                "image `{}` has a {}×{} grid but the model expects {expected}×{expected}",
                self.image_id, self.side, self.side
            )));
        }
        Ok(())
    }

    pub fn labeled(&self) -> Vec<usize> {
        (0..self.patches()).filter(|&i| self.instance[i] != IGNORE_ID).collect()
    }

    /// Distinct instance ids in ascending order, excluding the ignore id.
    pub fn instances(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.instance.iter().copied().filter(|&i| i != IGNORE_ID).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Patch indices grouped by instance id.
    pub fn instance_patches(&self) -> BTreeMap<i32, Vec<usize>> {
        let mut out: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &inst) in self.instance.iter().enumerate() {
            if inst != IGNORE_ID {
                out.entry(inst).or_default().push(i);
            }
        }
        out
    }

    pub fn coords(&self, patch: usize) -> (usize, usize) {
        (patch / self.side, patch % self.side)
    }
}

fn grid_to_ids(t: &DenseTensor, name: &str) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || !v.is_finite() || v < IGNORE_ID as f32 {
                Err(Error::Labels(format!("`{name}` holds non-integer label {v}")))
            } else {
                Ok(v as i32)
            }
        })
        .collect()
}

pub fn labels_from_archive(archive: &TensorArchive) -> Result<Vec<LabelRaster>> {
    let mut images: Vec<String> = archive
        .names()
        .filter_map(|n| n.strip_prefix("labels/").and_then(|r| r.strip_suffix("/instance")))
        .map(str::to_string)
        .collect();
    images.sort();
    let mut out = Vec::with_capacity(images.len());
    for id in images {
        let iname = format!("labels/{id}/instance");
        let cname = format!("labels/{id}/class");
        let inst = archive.get(&iname)?;
        let cls = archive
            .get(&cname)
            .map_err(|_| Error::Labels(format!("image `{id}` has an instance grid but no class grid")))?;
        let side = match inst.shape() {
            [a, b] if a == b => *a,
            s => return Err(Error::Labels(format!("`{iname}` must be square, got {s:?}"))),
        };
        if cls.shape() != inst.shape() {
            return Err(Error::shape(cname, inst.shape(), cls.shape()));
        }
        out.push(LabelRaster::new(
            id,
            side,
            grid_to_ids(&inst, &iname)?,
            grid_to_ids(&cls, &cname)?,
        )?);
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRaster>> {
    labels_from_archive(&read_archive(path)?)
}

pub fn add_labels(builder: &mut ArchiveBuilder, raster: &LabelRaster) -> Result<()> {
    raster.validate()?;
    let shape = vec![raster.side, raster.side];
    let to_t = |v: &[i32]| DenseTensor::new(shape.clone(), v.iter().map(|&x| x as f32).collect());
    builder.add(format!("labels/{}/instance", raster.image_id), to_t(&raster.instance)?)?;
    builder.add(format!("labels/{}/class", raster.image_id), to_t(&raster.class)?)?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, rasters: &[LabelRaster]) -> Result<()> {
    let mut b = ArchiveBuilder::new();
    for r in rasters {
        add_labels(&mut b, r)?;
    }
    b.write(path)
}
