//! Grayscale raster images and the region arithmetic used to grow zoom
//! graphs: axis-aligned crops, bilinear resampling, and near-uniform grid
//! splits whose cells tile a region exactly.

use crate::error::{Error, Result};

/// Row-major grayscale image with `f64` samples (nominally in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Axis-aligned pixel rectangle: `x0..x0+width` by `y0..y0+height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn new(x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Region {
            x0,
            y0,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Dimension {
                op: "image_new",
                lhs: vec![width, height],
                rhs: vec![data.len()],
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Image::new(width, height, vec![0.0; width * height])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    /// Copies out a rectangle that must lie inside the image.
    pub fn crop(&self, region: Region) -> Result<Image> {
        let x1 = region.x0.checked_add(region.width);
        let y1 = region.y0.checked_add(region.height);
        let inside =
            matches!((x1, y1), (Some(x1), Some(y1)) if x1 <= self.width && y1 <= self.height);
        if region.width == 0 || region.height == 0 || !inside {
            return Err(Error::Bounds {
                op: "crop",
                detail: format!(
                    "region {region:?} outside {}x{} image",
                    self.width, self.height
                ),
            });
        }
        let mut data = Vec::with_capacity(region.area());
        for y in region.y0..region.y0 + region.height {
            let row =
                &self.data[y * self.width + region.x0..y * self.width + region.x0 + region.width];
            data.extend_from_slice(row);
        }
        Image::new(region.width, region.height, data)
    }

    /// Bilinear resampling with half-pixel-aligned centers. Each output
    /// sample is a convex combination of its four source neighbours and is
    /// clamped into their hull, so the output range never escapes the input
    /// range and an identity resize is exact.
    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> Result<Image> {
        if new_width == 0 || new_height == 0 {
            return Err(Error::Dimension {
                op: "resize_bilinear",
                lhs: vec![self.width, self.height],
                rhs: vec![new_width, new_height],
            });
        }
        if new_width == self.width && new_height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        let mut data = Vec::with_capacity(new_width * new_height);
        for oy in 0..new_height {
            let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for ox in 0..new_width {
                let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                let (a, b) = (self.get(x0, y0), self.get(x1, y0));
                let (c, d) = (self.get(x0, y1), self.get(x1, y1));
                let top = a + (b - a) * fx;
                let bot = c + (d - c) * fx;
                let v = top + (bot - top) * fy;
                let lo = a.min(b).min(c).min(d);
                let hi = a.max(b).max(c).max(d);
                data.push(v.clamp(lo, hi));
            }
        }
        Image::new(new_width, new_height, data)
    }
}

/// Splits a region into an `s x s` grid of cells that tile it exactly, in
/// row-major order. Cell extents along each axis differ by at most one; the
/// boundary of cell `i` is `round(i * extent / s)` with round-half-up.
pub fn grid_split(region: Region, s: usize) -> Result<Vec<Region>> {
    if s == 0 || region.width < s || region.height < s {
        return Err(Error::Config(format!(
            "cannot split {}x{} region into {s}x{s} grid",
            region.width, region.height
        )));
    }
    let bounds =
        |extent: usize| -> Vec<usize> { (0..=s).map(|i| (2 * i * extent + s) / (2 * s)).collect() };
    let xs = bounds(region.width);
    let ys = bounds(region.height);
    let mut cells = Vec::with_capacity(s * s);
    for gy in 0..s {
        for gx in 0..s {
            cells.push(Region::new(
                region.x0 + xs[gx],
                region.y0 + ys[gy],
                xs[gx + 1] - xs[gx],
                ys[gy + 1] - ys[gy],
            ));
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_image(rng: &mut ChaCha20Rng, w: usize, h: usize) -> Image {
        let data = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length_and_zero_extent() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn crop_extracts_expected_rows() {
        let img = Image::new(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let out = img.crop(Region::new(1, 1, 2, 2)).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn crop_rejects_out_of_bounds_region() {
        let img = Image::zeros(4, 4).unwrap();
        for bad in [
            Region::new(3, 0, 2, 2),
            Region::new(0, 3, 2, 2),
            Region::new(0, 0, 5, 1),
            Region::new(0, 0, 0, 2),
            Region::new(usize::MAX, 0, 2, 2),
        ] {
            assert!(
                matches!(img.crop(bad), Err(Error::Bounds { op: "crop", .. })),
                "{bad:?} accepted"
            );
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let img = rand_image(&mut rng, 7, 5);
        let out = img.resize_bilinear(7, 5).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn upscale_two_by_two_checkerboard_matches_hand_computation() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = img.resize_bilinear(4, 4).unwrap();
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.25, 0.375, 0.625, 0.75, //
            0.75, 0.625, 0.375, 0.25, //
            1.0, 0.75, 0.25, 0.0,
        ];
        for (a, e) in out.data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = Image::new(5, 3, vec![0.42; 15]).unwrap();
        for (w, h) in [(1, 1), (3, 7), (10, 10), (32, 32)] {
            let out = img.resize_bilinear(w, h).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.42));
        }
    }

    #[test]
    fn resize_never_escapes_source_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        for _ in 0..20 {
            let w = rng.gen_range(1..24);
            let h = rng.gen_range(1..24);
            let img = rand_image(&mut rng, w, h);
            let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let nw = rng.gen_range(1..40);
            let nh = rng.gen_range(1..40);
            let out = img.resize_bilinear(nw, nh).unwrap();
            for &v in out.data() {
                assert!(v >= lo && v <= hi, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = Image::zeros(2, 2).unwrap();
        assert!(img.resize_bilinear(0, 4).is_err());
        assert!(img.resize_bilinear(4, 0).is_err());
    }

    #[test]
    fn grid_split_hundred_by_three_gives_frozen_cell_sizes() {
        let cells = grid_split(Region::new(0, 0, 100, 100), 3).unwrap();
        assert_eq!(cells.len(), 9);
        let mut widths: Vec<usize> = cells[..3].iter().map(|c| c.width).collect();
        widths.sort_unstable();
        assert_eq!(widths, vec![33, 33, 34]);
        // Boundaries land on 0, 33, 67, 100.
        assert_eq!(cells[0].x0, 0);
        assert_eq!(cells[1].x0, 33);
        assert_eq!(cells[2].x0, 67);
        assert_eq!(cells[2].x0 + cells[2].width, 100);
    }

    #[test]
    fn grid_split_partitions_exactly_with_near_uniform_cells() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..50 {
            let s = rng.gen_range(1..6);
            let w = rng.gen_range(s..60);
            let h = rng.gen_range(s..60);
            let x0 = rng.gen_range(0..10);
            let y0 = rng.gen_range(0..10);
            let region = Region::new(x0, y0, w, h);
            let cells = grid_split(region, s).unwrap();
            assert_eq!(cells.len(), s * s);

            // Every pixel of the region is covered exactly once.
            let mut hits = vec![0u8; w * h];
            for c in &cells {
                assert!(c.width > 0 && c.height > 0);
                for y in c.y0..c.y0 + c.height {
                    for x in c.x0..c.x0 + c.width {
                        hits[(y - y0) * w + (x - x0)] += 1;
                    }
                }
            }
            assert!(hits.iter().all(|&n| n == 1));

            // Extents along each axis differ by at most one pixel.
            let ws: Vec<usize> = cells[..s].iter().map(|c| c.width).collect();
            let hs: Vec<usize> = (0..s).map(|gy| cells[gy * s].height).collect();
            for group in [ws, hs] {
                let lo = *group.iter().min().unwrap();
                let hi = *group.iter().max().unwrap();
                assert!(hi - lo <= 1, "extents {group:?}");
            }
        }
    }

    #[test]
    fn grid_split_rejects_too_small_regions() {
        assert!(grid_split(Region::new(0, 0, 2, 10), 3).is_err());
        assert!(grid_split(Region::new(0, 0, 10, 10), 0).is_err());
    }

    #[test]
    fn grid_split_row_major_order() {
        let cells = grid_split(Region::new(0, 0, 4, 4), 2).unwrap();
        assert_eq!(cells[0], Region::new(0, 0, 2, 2));
        assert_eq!(cells[1], Region::new(2, 0, 2, 2));
        assert_eq!(cells[2], Region::new(0, 2, 2, 2));
        assert_eq!(cells[3], Region::new(2, 2, 2, 2));
    }
}
