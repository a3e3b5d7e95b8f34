//! Attribute-level image mutation by rectangle transplant.
//!
//! Substitution replaces an attribute in a base image with a donor's version
//! of it; preservation copies the base's attribute into another image. Both
//! paste the source rectangle, bilinearly resized to the target rectangle,
//! leaving every other pixel untouched.

use crate::annotation::{Attribute, AttributeAnnotation, Rect};
use crate::error::{invalid, Result};
use crate::tensor::{source_coord, Tensor};

/// Copy of `base` whose `attr` rectangle holds the donor's `attr` content.
pub fn substitute_attribute(
    base: &Tensor,
    base_ann: &AttributeAnnotation,
    donor: &Tensor,
    donor_ann: &AttributeAnnotation,
    attr: Attribute,
) -> Result<Tensor> {
    let target = base_ann.rect(attr)?;
    let source = donor_ann.rect(attr)?;
    transplant(donor, source, base, target)
}

/// Copy of `other` whose `attr` rectangle holds the base's `attr` content.
pub fn preserve_attribute(
    base: &Tensor,
    base_ann: &AttributeAnnotation,
    other: &Tensor,
    other_ann: &AttributeAnnotation,
    attr: Attribute,
) -> Result<Tensor> {
    substitute_attribute(other, other_ann, base, base_ann, attr)
}

/// Pastes `src[src_rect]` into a copy of `dst` at `dst_rect`.
pub fn transplant(src: &Tensor, src_rect: Rect, dst: &Tensor, dst_rect: Rect) -> Result<Tensor> {
    let (sc, sh, sw) = src.dims_3d()?;
    let (dc, dh, dw) = dst.dims_3d()?;
    if sc != dc {
        return Err(invalid(format!("channel mismatch: {sc} vs {dc}")));
    }
    if src_rect.w == 0 || src_rect.h == 0 || !src_rect.fits(sw, sh) {
        return Err(invalid(format!("source box {src_rect:?} outside {sw}x{sh} image")));
    }
    if dst_rect.w == 0 || dst_rect.h == 0 || !dst_rect.fits(dw, dh) {
        return Err(invalid(format!("target box {dst_rect:?} outside {dw}x{dh} image")));
    }

    let mut out = dst.clone();
    let rows: Vec<(usize, usize, f64)> = (0..dst_rect.h).map(|i| bilinear_tap(i, src_rect.h, dst_rect.h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..dst_rect.w).map(|j| bilinear_tap(j, src_rect.w, dst_rect.w)).collect();
    let sdata = src.data();
    for c in 0..sc {
        let sample = |r: usize, col: usize| sdata[(c * sh + src_rect.y + r) * sw + src_rect.x + col] as f64;
        let plane = out.channel_slice_mut(c);
        for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                let top = sample(r0, c0) * (1.0 - fx) + sample(r0, c1) * fx;
                let bottom = sample(r1, c0) * (1.0 - fx) + sample(r1, c1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                plane[(dst_rect.y + i) * dw + dst_rect.x + j] = v as f32;
            }
        }
    }
    Ok(out)
}

// Lower index, upper index and blend weight of the upper one.
fn bilinear_tap(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = source_coord(i, src, dst).clamp(0.0, (src - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}
