//! Preprocessed image sets: `images/{id}/pixels`, each `[C, H, W]` f32.

use std::path::Path;

use super::archive::{read_archive, ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: DenseTensor,
}

/// All images of an archive, sorted by id.
pub fn images_from_archive(archive: &TensorArchive) -> Result<Vec<ImageRecord>> {
    let mut ids: Vec<String> = archive
        .names()
        .filter_map(|n| n.strip_prefix("images/").and_then(|r| r.strip_suffix("/pixels")))
        .map(str::to_string)
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let name = format!("images/{id}/pixels");
            let pixels = archive.get(&name)?;
            if pixels.shape().len() != 3 {
                return Err(Error::shape(name, &[0, 0, 0], pixels.shape()));
            }
            Ok(ImageRecord { id, pixels })
        })
        .collect()
}

pub fn load_images(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    images_from_archive(&read_archive(path)?)
}

pub fn add_image(builder: &mut ArchiveBuilder, image: &ImageRecord) -> Result<()> {
    if image.pixels.shape().len() != 3 {
        return Err(Error::shape("image pixels", &[0, 0, 0], image.pixels.shape()));
    }
    builder.add(format!("images/{}/pixels", image.id), image.pixels.clone())?;
    Ok(())
}

/// Mirror `[C, H, W]` pixels left-to-right.
pub fn mirror_pixels(pixels: &DenseTensor) -> Result<DenseTensor> {
    let &[c, h, w] = pixels.shape() else {
        return Err(Error::shape("image pixels", &[0, 0, 0], pixels.shape()));
    };
    let src = pixels.data();
    DenseTensor::new(
        vec![c, h, w],
        (0..c * h * w)
            .map(|i| {
                let (plane, col) = (i / w, i % w);
                src[plane * w + (w - 1 - col)]
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mirror() {
        let px = DenseTensor::from_fn(vec![2, 3, 4], |i| i as f32);
        let rec = ImageRecord {
            id: "b".into(),
            pixels: px.clone(),
        };
        let mut builder = ArchiveBuilder::new();
        add_image(&mut builder, &rec).unwrap();
        add_image(
            &mut builder,
            &ImageRecord {
                id: "a".into(),
                pixels: px.clone(),
            },
        )
        .unwrap();
        let back = images_from_archive(&TensorArchive::from_bytes(builder.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(back[1], rec);
        let m = mirror_pixels(&px).unwrap();
        assert_eq!(&m.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(mirror_pixels(&m).unwrap(), px);
    }
}
