//! Pixel-level segmentation masks and the region labels derived from them.
//!
//! A mask assigns every pixel one of five classes: background, benign
//! calcification, benign mass, malignant calcification, malignant mass. A
//! region's zoom label is 1 exactly when its most severe class is malignant,
//! so a node should be zoomed into iff it still contains malignant tissue.

use crate::error::{Error, Result};
use crate::image::Region;
use crate::pgm::{decode_pgm, encode_pgm, Pgm};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_BENIGN_CALC: u8 = 1;
pub const CLASS_BENIGN_MASS: u8 = 2;
pub const CLASS_MALIGNANT_CALC: u8 = 3;
pub const CLASS_MALIGNANT_MASS: u8 = 4;
pub const MAX_CLASS: u8 = CLASS_MALIGNANT_MASS;

pub fn is_malignant_class(class: u8) -> bool {
    class == CLASS_MALIGNANT_CALC || class == CLASS_MALIGNANT_MASS
}

/// Row-major per-pixel class map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    classes: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || classes.len() != width * height {
            return Err(Error::Dimension {
                op: "mask_new",
                lhs: vec![width, height],
                rhs: vec![classes.len()],
            });
        }
        if let Some(&bad) = classes.iter().find(|&&c| c > MAX_CLASS) {
            return Err(Error::Usage(format!(
                "mask class {bad} outside 0..={MAX_CLASS}"
            )));
        }
        Ok(Mask {
            width,
            height,
            classes,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Mask::new(width, height, vec![CLASS_BACKGROUND; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn full_region(&self) -> Region {
        Region::new(0, 0, self.width, self.height)
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.classes[y * self.width + x]
    }

    /// Overwrites a pixel's class; the class must be valid.
    pub fn set(&mut self, x: usize, y: usize, class: u8) -> Result<()> {
        if class > MAX_CLASS {
            return Err(Error::Usage(format!(
                "mask class {class} outside 0..={MAX_CLASS}"
            )));
        }
        debug_assert!(x < self.width && y < self.height);
        self.classes[y * self.width + x] = class;
        Ok(())
    }

    fn check_region(&self, region: Region) -> Result<()> {
        let x1 = region.x0.checked_add(region.width);
        let y1 = region.y0.checked_add(region.height);
        let inside =
            matches!((x1, y1), (Some(x1), Some(y1)) if x1 <= self.width && y1 <= self.height);
        if region.width == 0 || region.height == 0 || !inside {
            return Err(Error::Bounds {
                op: "mask_region",
                detail: format!(
                    "region {region:?} outside {}x{} mask",
                    self.width, self.height
                ),
            });
        }
        Ok(())
    }

    /// Most severe class inside the region.
    pub fn max_class(&self, region: Region) -> Result<u8> {
        self.check_region(region)?;
        let mut best = CLASS_BACKGROUND;
        for y in region.y0..region.y0 + region.height {
            let row = &self.classes
                [y * self.width + region.x0..y * self.width + region.x0 + region.width];
            for &c in row {
                if c > best {
                    best = c;
                    if best == MAX_CLASS {
                        return Ok(best);
                    }
                }
            }
        }
        Ok(best)
    }
}

/// Collapses pixel classes to a binary zoom target: 1 when the region's most
/// severe class is malignant, else 0.
pub fn zoom_label(mask: &Mask, region: Region) -> Result<u8> {
    Ok(u8::from(is_malignant_class(mask.max_class(region)?)))
}

/// Image-level malignancy target: the zoom label of the full frame.
pub fn image_label(mask: &Mask) -> u8 {
    zoom_label(mask, mask.full_region()).expect("full region is always valid")
}

/// Zoom targets for a batch of node regions, in input order.
pub fn node_zoom_labels(mask: &Mask, regions: &[Region]) -> Result<Vec<u8>> {
    regions.iter().map(|&r| zoom_label(mask, r)).collect()
}

/// Serializes the class map as a P5 raster with maxval 4.
pub fn mask_to_pgm(mask: &Mask) -> Vec<u8> {
    let samples: Vec<u16> = mask.classes.iter().map(|&c| u16::from(c)).collect();
    encode_pgm(mask.width, mask.height, u16::from(MAX_CLASS), &samples)
        .expect("mask extents and classes are valid")
}

/// Decodes a class map; the raster must use maxval 4.
pub fn pgm_to_mask(bytes: &[u8]) -> Result<Mask> {
    let Pgm {
        width,
        height,
        maxval,
        samples,
    } = decode_pgm(bytes)?;
    if maxval != u16::from(MAX_CLASS) {
        return Err(Error::Format {
            offset: 0,
            what: format!("mask raster must use maxval {MAX_CLASS}, found {maxval}"),
        });
    }
    Mask::new(width, height, samples.iter().map(|&s| s as u8).collect())
}
