//! Pinhole cameras, z-buffered coverage, top-view selection and 2-D box filtering.

use serde::{Deserialize, Serialize};

use super::SceneObject;
use crate::geometry::Aabb;

pub const MIN_VIEW_COVERAGE: f64 = 0.10;
pub const MAX_VIEWS: usize = 3;
pub const BOX_EXPANSION: f64 = 1.10;
pub const MIN_BOX_PIXELS: f64 = 50.0;
/// depth slack when comparing against the z-buffer
const ZBUF_TOLERANCE: f64 = 1e-3;

/// World-to-camera transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Camera at `eye` looking at `target` with world +z as up. Camera axes: x right, y down, z forward.
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Self {
        let f = normalize(sub(target, eye));
        let r = normalize(cross(f, [0.0, 0.0, 1.0]));
        let d = cross(f, r);
        let rotation = [r, d, f];
        let translation = [-dot(r, eye), -dot(d, eye), -dot(f, eye)];
        Self { rotation, translation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCamera {
    pub id: usize,
    pub pose: RigidTransform,
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
}

impl SyntheticCamera {
    pub fn is_valid(&self) -> bool {
        self.intrinsics.fx > 0.0 && self.intrinsics.fy > 0.0 && self.width >= 64 && self.height >= 64
    }

    /// Pixel coordinates and depth, or `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.pose.apply(p);
        if c[2] <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]))
    }

    fn pixel(&self, u: f64, v: f64) -> Option<usize> {
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some(v as usize * self.width as usize + u as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2d {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2d {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }
}

/// Cameras evenly spaced on a ring around the scene, all looking at its center.
pub fn ring_cameras(extent: &Aabb, count: usize) -> Vec<SyntheticCamera> {
    let c = extent.center();
    let e = extent.extent();
    let radius = 0.9 * e[0].max(e[1]) + 0.8;
    let height = extent.max[2] + 0.5;
    (0..count)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / count as f64;
            let eye = [c[0] + radius * a.cos(), c[1] + radius * a.sin(), height];
            SyntheticCamera {
                id: i,
                pose: RigidTransform::look_at(eye, c),
                intrinsics: Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0 },
                width: 640,
                height: 480,
            }
        })
        .collect()
}

/// Fraction of the object's points that project inside the image and are not
/// occluded under a per-pixel nearest-point z-buffer of all scene points.
pub fn view_coverage(object: &SceneObject, camera: &SyntheticCamera, scene_points: &[[f64; 3]]) -> f64 {
    if object.point_ids.is_empty() {
        return 0.0;
    }
    let mut zbuf = vec![f64::INFINITY; camera.width as usize * camera.height as usize];
    for &p in scene_points {
        if let Some((u, v, z)) = camera.project(p) {
            if let Some(px) = camera.pixel(u, v) {
                if z < zbuf[px] {
                    zbuf[px] = z;
                }
            }
        }
    }
    let visible = object
        .point_ids
        .iter()
        .filter(|&&i| {
            camera
                .project(scene_points[i as usize])
                .and_then(|(u, v, z)| camera.pixel(u, v).map(|px| z <= zbuf[px] + ZBUF_TOLERANCE))
                .unwrap_or(false)
        })
        .count();
    visible as f64 / object.point_ids.len() as f64
}

/// Threshold-and-rank rule: drop coverages below 10 %, keep the best three.
/// Ties rank by lower camera id. Returns `(camera id, coverage)` pairs.
pub fn rank_views(coverages: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut kept: Vec<(usize, f64)> = coverages.iter().copied().filter(|&(_, c)| c >= MIN_VIEW_COVERAGE).collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(MAX_VIEWS);
    kept
}

/// Up to three camera ids ranked by visible coverage of the object.
pub fn select_views(object: &SceneObject, cameras: &[SyntheticCamera], scene_points: &[[f64; 3]]) -> Vec<usize> {
    select_views_scored(object, cameras, scene_points).into_iter().map(|(id, _)| id).collect()
}

pub fn select_views_scored(
    object: &SceneObject,
    cameras: &[SyntheticCamera],
    scene_points: &[[f64; 3]],
) -> Vec<(usize, f64)> {
    let cov: Vec<(usize, f64)> =
        cameras.iter().map(|c| (c.id, view_coverage(object, c, scene_points))).collect();
    rank_views(&cov)
}

/// Scale a tight box by 1.10 about its center, clamp to the image, and drop it if
/// either side is under 50 px.
pub fn expand_and_filter(tight: Box2d, width: u32, height: u32) -> Option<Box2d> {
    let (cx, cy) = tight.center();
    let hw = 0.5 * tight.width() * BOX_EXPANSION;
    let hh = 0.5 * tight.height() * BOX_EXPANSION;
    let b = Box2d {
        x_min: (cx - hw).max(0.0),
        y_min: (cy - hh).max(0.0),
        x_max: (cx + hw).min(width as f64),
        y_max: (cy + hh).min(height as f64),
    };
    // the 1e-9 px slack absorbs rounding in the 1.1 scaling; the rule itself is strict "< 50"
    if b.width() < MIN_BOX_PIXELS - 1e-9 || b.height() < MIN_BOX_PIXELS - 1e-9 {
        None
    } else {
        Some(b)
    }
}

pub fn project_and_filter_boxes(object: &SceneObject, camera: &SyntheticCamera, scene_points: &[[f64; 3]]) -> Option<Box2d> {
    let mut tight: Option<Box2d> = None;
    for &i in &object.point_ids {
        if let Some((u, v, _)) = camera.project(scene_points[i as usize]) {
            let b = tight.get_or_insert(Box2d { x_min: u, y_min: v, x_max: u, y_max: v });
            b.x_min = b.x_min.min(u);
            b.y_min = b.y_min.min(v);
            b.x_max = b.x_max.max(u);
            b.y_max = b.y_max.max(v);
        }
    }
    let tight = tight?;
    // entirely outside the image
    if tight.x_max < 0.0 || tight.y_max < 0.0 || tight.x_min > camera.width as f64 || tight.y_min > camera.height as f64 {
        return None;
    }
    expand_and_filter(tight, camera.width, camera.height)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}
