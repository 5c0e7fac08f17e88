//! The 2x3 multi-view composite and its twelve 448x448 patch slots.

use serde::{Deserialize, Serialize};

use crate::corpus::scene::{ViewImage, VIEW_HEIGHT, VIEW_WIDTH};
use crate::corpus::NUM_VIEWS;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const PATCH_SIZE: usize = 448;
pub const NUM_SLOTS: usize = 12;
pub const PATCHES_PER_VIEW: usize = VIEW_WIDTH / PATCH_SIZE;
pub const COMPOSITE_HEIGHT: usize = 2 * VIEW_HEIGHT;
pub const COMPOSITE_WIDTH: usize = 3 * VIEW_WIDTH;

/// (row, column) of each view in the composite, indexed by view id.
/// Row 0 holds front-left, front, front-right; row 1 the three rear views.
const VIEW_CELL: [(usize, usize); NUM_VIEWS] = [(0, 1), (0, 0), (0, 2), (1, 1), (1, 0), (1, 2)];

/// Slot index of the `patch_index`-th (left to right) patch of a view.
pub fn slot_of(view_id: usize, patch_index: usize) -> usize {
    let (row, col) = VIEW_CELL[view_id];
    row * 6 + col * PATCHES_PER_VIEW + patch_index
}

/// `(view_id, patch_index)` shown in composite slot `slot`.
pub fn slot_view(slot: usize) -> (usize, usize) {
    let row = slot / 6;
    let col = (slot % 6) / PATCHES_PER_VIEW;
    let view = VIEW_CELL
        .iter()
        .position(|&c| c == (row, col))
        .expect("every cell holds a view");
    (view, slot % PATCHES_PER_VIEW)
}

/// Top-left pixel of a slot inside the composite, `(y, x)`.
pub fn slot_origin(slot: usize) -> (usize, usize) {
    ((slot / 6) * PATCH_SIZE, (slot % 6) * PATCH_SIZE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeImage {
    pub pixels: Tensor,
}

impl CompositeImage {
    /// Copies view `view_id` back out of the composite.
    pub fn view_region(&self, view_id: usize) -> Tensor {
        let (row, col) = VIEW_CELL[view_id];
        crop(&self.pixels, row * VIEW_HEIGHT, col * VIEW_WIDTH, VIEW_HEIGHT, VIEW_WIDTH)
    }
}

fn crop(img: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let (src_h, src_w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in y0..y0 + h {
            let start = (c * src_h + y) * src_w + x0;
            out.extend_from_slice(&img.data()[start..start + w]);
        }
    }
    Tensor::new(vec![3, h, w], out).expect("crop shape")
}

/// Places the six views into the 2x3 composite.
pub fn stitch_views(views: &[ViewImage]) -> Result<CompositeImage> {
    let mut by_id: [Option<&ViewImage>; NUM_VIEWS] = [None; NUM_VIEWS];
    for v in views {
        if v.view_id >= NUM_VIEWS {
            return Err(Error::InvalidArgument(format!("view id {}", v.view_id)));
        }
        if v.pixels.shape() != [3, VIEW_HEIGHT, VIEW_WIDTH] {
            return Err(Error::Shape(format!(
                "view {} has shape {:?}, expected [3, {VIEW_HEIGHT}, {VIEW_WIDTH}]",
                v.view_id,
                v.pixels.shape()
            )));
        }
        by_id[v.view_id] = Some(v);
    }
    let mut data = vec![0.0f32; 3 * COMPOSITE_HEIGHT * COMPOSITE_WIDTH];
    for (id, view) in by_id.iter().enumerate() {
        let view = view.ok_or_else(|| Error::InvalidArgument(format!("missing view {id}")))?;
        let (row, col) = VIEW_CELL[id];
        let src = view.pixels.data();
        for c in 0..3 {
            for y in 0..VIEW_HEIGHT {
                let s = (c * VIEW_HEIGHT + y) * VIEW_WIDTH;
                let d = (c * COMPOSITE_HEIGHT + row * VIEW_HEIGHT + y) * COMPOSITE_WIDTH + col * VIEW_WIDTH;
                data[d..d + VIEW_WIDTH].copy_from_slice(&src[s..s + VIEW_WIDTH]);
            }
        }
    }
    Ok(CompositeImage {
        pixels: Tensor::new(vec![3, COMPOSITE_HEIGHT, COMPOSITE_WIDTH], data)?,
    })
}

/// Which of the twelve composite slots go to the vision encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    pub bits: [bool; NUM_SLOTS],
    pub threshold: f32,
    /// Set when no score cleared the threshold and the argmax view was used.
    pub fallback: bool,
}

impl PatchMask {
    pub fn all() -> Self {
        Self { bits: [true; NUM_SLOTS], threshold: 0.0, fallback: false }
    }

    pub fn from_bits(bits: [bool; NUM_SLOTS]) -> Self {
        Self { bits, threshold: 0.0, fallback: false }
    }

    /// Both patches of every listed view.
    pub fn from_views(views: &[usize]) -> Self {
        let mut bits = [false; NUM_SLOTS];
        for &v in views {
            for p in 0..PATCHES_PER_VIEW {
                bits[slot_of(v, p)] = true;
            }
        }
        Self::from_bits(bits)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn slots(&self) -> Vec<usize> {
        (0..NUM_SLOTS).filter(|&s| self.bits[s]).collect()
    }
}

/// One 448x448 crop of the composite, tagged with its slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub slot: usize,
    pub pixels: Tensor,
}

/// Selected patches in slot order.
pub fn extract_patches(composite: &CompositeImage, mask: &PatchMask) -> Result<Vec<Patch>> {
    if mask.count() == 0 {
        return Err(Error::InvalidArgument("patch mask selects nothing".into()));
    }
    Ok(mask
        .slots()
        .into_iter()
        .map(|slot| {
            let (y, x) = slot_origin(slot);
            Patch { slot, pixels: crop(&composite.pixels, y, x, PATCH_SIZE, PATCH_SIZE) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_views() -> Vec<ViewImage> {
        (0..NUM_VIEWS)
            .map(|v| ViewImage {
                view_id: v,
                pixels: Tensor::full(&[3, VIEW_HEIGHT, VIEW_WIDTH], v as f32 / 10.0),
            })
            .collect()
    }

    #[test]
    fn slot_mapping_is_a_bijection_with_two_patches_per_view() {
        let mut seen = [0usize; NUM_VIEWS];
        for s in 0..NUM_SLOTS {
            let (v, p) = slot_view(s);
            assert_eq!(slot_of(v, p), s);
            seen[v] += 1;
        }
        assert_eq!(seen, [2; NUM_VIEWS]);
        assert_eq!(slot_view(0), (1, 0));
        assert_eq!(slot_view(6), (4, 0));
        assert_eq!(slot_view(3), (0, 1));
    }

    #[test]
    fn constant_views_fill_their_blocks() {
        let comp = stitch_views(&constant_views()).unwrap();
        for v in 0..NUM_VIEWS {
            let region = comp.view_region(v);
            assert!(region.data().iter().all(|&x| x == v as f32 / 10.0));
        }
    }

    #[test]
    fn slot_zero_is_the_left_half_of_front_left() {
        let spec = crate::corpus::gen_scene(3, 11);
        let views = crate::corpus::render_all(&spec);
        let comp = stitch_views(&views).unwrap();
        let p = extract_patches(&comp, &PatchMask::from_bits({
            let mut b = [false; NUM_SLOTS];
            b[0] = true;
            b
        }))
        .unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].pixels, crop(&views[1].pixels, 0, 0, 448, 448));
    }

    #[test]
    fn round_trip_recovers_views() {
        let spec = crate::corpus::gen_scene(9, 1);
        let views = crate::corpus::render_all(&spec);
        let mut shuffled = views.clone();
        shuffled.reverse();
        let comp = stitch_views(&shuffled).unwrap();
        for v in &views {
            assert_eq!(comp.view_region(v.view_id), v.pixels);
        }
    }

    #[test]
    fn missing_or_malformed_views_are_rejected() {
        let mut views = constant_views();
        views.pop();
        assert!(stitch_views(&views).is_err());
        let mut views = constant_views();
        views[2].pixels = Tensor::zeros(&[3, 448, 448]);
        assert!(matches!(stitch_views(&views), Err(Error::Shape(_))));
    }

    #[test]
    fn extraction_counts_order_and_disjointness() {
        let comp = stitch_views(&constant_views()).unwrap();
        assert_eq!(extract_patches(&comp, &PatchMask::all()).unwrap().len(), 12);
        let mut bits = [false; NUM_SLOTS];
        bits[9] = true;
        bits[2] = true;
        let two = extract_patches(&comp, &PatchMask::from_bits(bits)).unwrap();
        assert_eq!(two.iter().map(|p| p.slot).collect::<Vec<_>>(), vec![2, 9]);
        assert!(extract_patches(&comp, &PatchMask::from_bits([false; NUM_SLOTS])).is_err());

        let mut cover = vec![0u8; COMPOSITE_HEIGHT * COMPOSITE_WIDTH];
        for s in 0..NUM_SLOTS {
            let (y0, x0) = slot_origin(s);
            for y in y0..y0 + PATCH_SIZE {
                for x in x0..x0 + PATCH_SIZE {
                    cover[y * COMPOSITE_WIDTH + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn view_masks_set_both_patches() {
        let m = PatchMask::from_views(&[0, 3]);
        assert_eq!(m.count(), 4);
        assert_eq!(m.slots(), vec![2, 3, 8, 9]);
    }
}
