//! Synthetic multi-view driving scenes and their rendering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tables::NUM_VIEWS;
use crate::nn::params::keyed_rng;
use crate::nn::Tensor;

pub const VIEW_HEIGHT: usize = 448;
pub const VIEW_WIDTH: usize = 896;
pub const MAX_OBJECTS_PER_VIEW: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Pedestrian,
    Vehicle,
    Sign,
    Cone,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [Self::Pedestrian, Self::Vehicle, Self::Sign, Self::Cone];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn singular(self) -> &'static str {
        match self {
            Self::Pedestrian => "pedestrian",
            Self::Vehicle => "vehicle",
            Self::Sign => "sign",
            Self::Cone => "cone",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Self::Pedestrian => "pedestrians",
            Self::Vehicle => "vehicles",
            Self::Sign => "signs",
            Self::Cone => "cones",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.singular() == name)
    }

    /// Pedestrians and vehicles get forced-keep treatment during pruning.
    pub fn is_critical(self) -> bool {
        matches!(self, Self::Pedestrian | Self::Vehicle)
    }

    fn base_color(self) -> [f32; 3] {
        match self {
            Self::Pedestrian => [0.9, 0.2, 0.2],
            Self::Vehicle => [0.2, 0.3, 0.9],
            Self::Sign => [0.95, 0.9, 0.2],
            Self::Cone => [0.95, 0.55, 0.1],
        }
    }
}

/// Axis-aligned box in view pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn in_view_bounds(&self) -> bool {
        self.w > 0
            && self.h > 0
            && (self.x + self.w) as usize <= VIEW_WIDTH
            && (self.y + self.h) as usize <= VIEW_HEIGHT
    }

    /// Overlap test against the half-open rectangle `[x0, x1) × [y0, y1)`.
    pub fn intersects(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> bool {
        self.x < x1 && x0 < self.x + self.w && self.y < y1 && y0 < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub bbox: BBox,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: u32,
    pub seed: u64,
    pub views: Vec<Vec<SceneObject>>,
}

impl SceneSpec {
    /// Objects of `class` across the given views.
    pub fn count(&self, class: ObjectClass, views: &[usize]) -> usize {
        views
            .iter()
            .map(|&v| self.views[v].iter().filter(|o| o.class == class).count())
            .sum()
    }
}

/// One camera image, `[3, 448, 896]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub view_id: usize,
    pub pixels: Tensor,
}

pub fn gen_scene(scene_id: u32, seed: u64) -> SceneSpec {
    let mut rng = keyed_rng(seed, "scene.", &scene_id.to_string());
    let views = (0..NUM_VIEWS)
        .map(|_| {
            let n = rng.gen_range(0..=MAX_OBJECTS_PER_VIEW);
            (0..n)
                .map(|_| {
                    let class = ObjectClass::ALL[rng.gen_range(0..4)];
                    let w = rng.gen_range(16..=160u32);
                    let h = rng.gen_range(16..=160u32);
                    let x = rng.gen_range(0..=(VIEW_WIDTH as u32 - w));
                    let y = rng.gen_range(0..=(VIEW_HEIGHT as u32 - h));
                    let base = class.base_color();
                    let color = base.map(|c| (c + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0));
                    SceneObject {
                        class,
                        bbox: BBox { x, y, w, h },
                        color,
                    }
                })
                .collect()
        })
        .collect();
    SceneSpec {
        scene_id,
        seed,
        views,
    }
}

pub fn background(view_id: usize) -> f32 {
    0.15 + 0.08 * view_id as f32
}

/// Flat view-keyed background with solid object rectangles painted in order.
pub fn render_view(spec: &SceneSpec, view_id: usize) -> ViewImage {
    let plane = VIEW_HEIGHT * VIEW_WIDTH;
    let mut data = vec![background(view_id); 3 * plane];
    for obj in &spec.views[view_id] {
        let b = obj.bbox;
        for c in 0..3 {
            for y in b.y as usize..(b.y + b.h) as usize {
                let row = c * plane + y * VIEW_WIDTH;
                data[row + b.x as usize..row + (b.x + b.w) as usize].fill(obj.color[c]);
            }
        }
    }
    ViewImage {
        view_id,
        pixels: Tensor::new(vec![3, VIEW_HEIGHT, VIEW_WIDTH], data).expect("sized"),
    }
}

pub fn render_all(spec: &SceneSpec) -> Vec<ViewImage> {
    (0..NUM_VIEWS).map(|v| render_view(spec, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        assert_eq!(gen_scene(3, 7), gen_scene(3, 7));
        let scenes: Vec<_> = (0..100).map(|s| gen_scene(0, s)).collect();
        for i in 0..scenes.len() {
            for j in i + 1..scenes.len() {
                assert_ne!(scenes[i].views, scenes[j].views, "seeds {i} and {j} collide");
            }
        }
    }

    #[test]
    fn boxes_stay_in_bounds() {
        for seed in 0..1000 {
            let s = gen_scene(seed as u32, seed);
            for v in &s.views {
                assert!(v.len() <= MAX_OBJECTS_PER_VIEW);
                assert!(v.iter().all(|o| o.bbox.in_view_bounds()));
            }
        }
    }

    #[test]
    fn rendering() {
        let empty = SceneSpec {
            scene_id: 0,
            seed: 0,
            views: vec![Vec::new(); NUM_VIEWS],
        };
        let img = render_view(&empty, 2);
        assert!(img.pixels.data().iter().all(|&p| p == background(2)));

        let s = (0..50).map(|i| gen_scene(i, 1)).find(|s| !s.views[0].is_empty()).unwrap();
        let a = render_view(&s, 0);
        assert_eq!(a, render_view(&s, 0));
        let last = s.views[0].last().unwrap();
        let (cx, cy) = (
            (last.bbox.x + last.bbox.w / 2) as usize,
            (last.bbox.y + last.bbox.h / 2) as usize,
        );
        for c in 0..3 {
            let p = a.pixels.data()[c * VIEW_HEIGHT * VIEW_WIDTH + cy * VIEW_WIDTH + cx];
            assert_eq!(p, last.color[c]);
        }
        assert!(a.pixels.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
