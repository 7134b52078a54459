use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel instance ids, row-major; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
}

impl SegmentMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    pub fn from_ids(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::invalid(format!(
                "mask buffer has {} entries, expected {}",
                ids.len(),
                width * height
            )));
        }
        Ok(Self { width, height, ids })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u32 {
        self.ids[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, id: u32) {
        self.ids[v * self.width + u] = id;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn check_same_dims(&self, other: &SegmentMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "mask dimensions differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Pixel count per non-zero id.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &id in self.ids.iter().filter(|&&i| i > 0) {
            *out.entry(id).or_insert(0) += 1;
        }
        out
    }

    /// 16-bit grayscale encoding; ids above 65535 are rejected.
    pub fn to_u16_image(&self) -> Result<image::ImageBuffer<image::Luma<u16>, Vec<u16>>> {
        let raw = self
            .ids
            .iter()
            .map(|&i| u16::try_from(i).map_err(|_| Error::invalid(format!("mask id {i} exceeds 16 bits"))))
            .collect::<Result<Vec<u16>>>()?;
        Ok(image::ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("size matches"))
    }

    pub fn from_u16_image(img: &image::ImageBuffer<image::Luma<u16>, Vec<u16>>) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            ids: img.as_raw().iter().map(|&v| v as u32).collect(),
        }
    }
}

/// Inclusive pixel rectangle around one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub instance_id: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && self.x_max < width && self.y_max < height
    }
}

/// One tight box per non-zero id (union over disconnected regions), sorted
/// by id. Boxes narrower or shorter than `min_size` pixels are dropped.
pub fn mask_to_bboxes(mask: &SegmentMask, min_size: u32) -> Vec<BBox> {
    let mut boxes: BTreeMap<u32, BBox> = BTreeMap::new();
    for v in 0..mask.height {
        for u in 0..mask.width {
            let id = mask.get(u, v);
            if id == 0 {
                continue;
            }
            let (u, v) = (u as u32, v as u32);
            boxes
                .entry(id)
                .and_modify(|b| {
                    b.x_min = b.x_min.min(u);
                    b.x_max = b.x_max.max(u);
                    b.y_min = b.y_min.min(v);
                    b.y_max = b.y_max.max(v);
                })
                .or_insert(BBox {
                    x_min: u,
                    y_min: v,
                    x_max: u,
                    y_max: v,
                    instance_id: id,
                });
        }
    }
    boxes
        .into_values()
        .filter(|b| b.width() >= min_size && b.height() >= min_size)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_bound() {
        let mut m = SegmentMask::zeros(10, 8);
        for v in 2..=4 {
            for u in 3..=7 {
                m.set(u, v, 5);
            }
        }
        assert_eq!(
            mask_to_bboxes(&m, 1),
            vec![BBox {
                x_min: 3,
                y_min: 2,
                x_max: 7,
                y_max: 4,
                instance_id: 5
            }]
        );
    }

    #[test]
    fn background_only_gives_nothing() {
        assert!(mask_to_bboxes(&SegmentMask::zeros(6, 6), 1).is_empty());
    }

    #[test]
    fn disconnected_pixels_form_union_box() {
        let mut m = SegmentMask::zeros(64, 64);
        m.set(0, 0, 5);
        m.set(50, 50, 5);
        let b = mask_to_bboxes(&m, 1);
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].x_min, b[0].y_min, b[0].x_max, b[0].y_max), (0, 0, 50, 50));
    }

    #[test]
    fn min_size_filter() {
        let mut m = SegmentMask::zeros(32, 32);
        for v in 0..4 {
            for u in 0..4 {
                m.set(u, v, 1);
            }
        }
        for v in 10..22 {
            for u in 10..22 {
                m.set(u, v, 2);
            }
        }
        let b = mask_to_bboxes(&m, 10);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].instance_id, 2);
    }

    #[test]
    fn u16_round_trip() {
        let m = SegmentMask::from_ids(3, 2, vec![0, 1, 2, 3, 65535, 0]).unwrap();
        assert_eq!(SegmentMask::from_u16_image(&m.to_u16_image().unwrap()), m);
        let big = SegmentMask::from_ids(1, 1, vec![70000]).unwrap();
        assert!(big.to_u16_image().is_err());
    }
}
