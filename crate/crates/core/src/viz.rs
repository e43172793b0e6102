//! Part-box overlays for inspecting the localized crops.

use crate::data::RgbImage;
use crate::stn::{TransformParams, NUM_PARTS};

/// Box colours for the head-shoulder, upper-body and lower-body parts.
pub const PART_COLORS: [[u8; 3]; NUM_PARTS] = [[255, 0, 0], [0, 255, 0], [0, 96, 255]];

/// Crop boundary in pixel coordinates of a `width x height` image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

impl PixelBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.left + self.right) / 2.0, (self.top + self.bottom) / 2.0)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.left >= 0.0 && self.top >= 0.0 && self.right <= (width - 1) as f64 && self.bottom <= (height - 1) as f64
    }
}

/// Map the crop extent of `theta` through `p = (v + 1)(n − 1)/2`.
pub fn part_box(theta: &TransformParams, width: usize, height: usize) -> PixelBox {
    let (x0, x1, y0, y1) = theta.extent();
    let px = |v: f64| (v + 1.0) * (width - 1) as f64 / 2.0;
    let py = |v: f64| (v + 1.0) * (height - 1) as f64 / 2.0;
    PixelBox {
        left: px(x0),
        right: px(x1),
        top: py(y0),
        bottom: py(y1),
    }
}

/// Draw one-pixel rectangles for the three parts, clipped to the image.
pub fn draw_part_boxes(img: &mut RgbImage, thetas: &[TransformParams; NUM_PARTS]) {
    let (w, h) = (img.width, img.height);
    let clamp = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
    for (theta, color) in thetas.iter().zip(PART_COLORS) {
        let b = part_box(theta, w, h);
        let (l, r) = (clamp(b.left, w), clamp(b.right, w));
        let (t, btm) = (clamp(b.top, h), clamp(b.bottom, h));
        for x in l..=r {
            img.put(x, t, color);
            img.put(x, btm, color);
        }
        for y in t..=btm {
            img.put(l, y, color);
            img.put(r, y, color);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::part_losses::PartPrior;

    #[test]
    fn prior_boxes_sit_on_expected_rows() {
        let rows: Vec<f64> = PartPrior::defaults()
            .iter()
            .map(|p| part_box(&TransformParams::new(0.4, p.cx, 0.4, p.cy), 64, 160).center().1)
            .collect();
        for (got, want) in rows.iter().zip([32.0, 80.0, 128.0]) {
            assert!((got - want).abs() < 1.0, "row {got} vs {want}");
        }
    }

    #[test]
    fn draws_outline_only() {
        let mut img = RgbImage::new(64, 160, [0, 0, 0]);
        let thetas = [TransformParams::new(0.4, 0.0, 0.4, 0.0); 3];
        draw_part_boxes(&mut img, &thetas);
        let b = part_box(&thetas[0], 64, 160);
        assert_eq!(img.get(b.left.round() as usize, b.top.round() as usize), PART_COLORS[2]);
        let (cx, cy) = b.center();
        assert_eq!(img.get(cx as usize, cy as usize), [0, 0, 0]);
    }

    #[test]
    fn oversized_boxes_are_clipped() {
        let mut img = RgbImage::new(10, 10, [0, 0, 0]);
        draw_part_boxes(&mut img, &[TransformParams::new(3.0, 0.0, 3.0, 0.0); 3]);
        assert_eq!(img.get(0, 5), PART_COLORS[2]);
        assert!(!part_box(&TransformParams::new(3.0, 0.0, 3.0, 0.0), 10, 10).within(10, 10));
    }
}
