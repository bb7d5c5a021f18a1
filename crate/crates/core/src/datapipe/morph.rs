//! Binary morphology with a square structuring element of side `2r + 1`.
//!
//! Both operators only look at in-bounds pixels, which makes them an adjoint
//! pair: closing is then extensive and idempotent right up to the border.

use crate::raster::Mask;

/// Separable square-window pass. With `want = true` a pixel is set when any
/// window pixel is set (dilation); with `want = false` it stays set only when
/// no window pixel is clear (erosion).
fn sweep(mask: &Mask, radius: usize, want: bool) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut rows = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            let found = (lo..=hi).any(|xx| mask.get(xx, y) == want);
            rows.set(x, y, found == want);
        }
    }
    let mut out = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            let found = (lo..=hi).any(|yy| rows.get(x, yy) == want);
            out.set(x, y, found == want);
        }
    }
    out
}

pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    sweep(mask, radius, true)
}

pub fn erode(mask: &Mask, radius: usize) -> Mask {
    sweep(mask, radius, false)
}

/// Dilation followed by erosion; smooths mask edges and fills small gaps.
pub fn morph_close(mask: &Mask, radius: usize) -> Mask {
    erode(&dilate(mask, radius), radius)
}
