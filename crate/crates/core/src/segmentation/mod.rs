//! Voxelization, color-coherent oversegmentation, the query-based instance
//! segmenter and prediction-to-ground-truth matching.

mod hungarian;
mod model;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticScene;
use crate::error::{Error, Result};
use crate::geometry::Aabb;

pub use hungarian::{hungarian_match, Assignment};
pub use model::{
    dump_predictions, iou_cost_matrix, GtInstance, InstancePrediction, SegmenterForward, PreparedScene, SceneEncoding, Segmenter, SegmenterConfig, SegmenterLoss,
    SEGMENTER_CHECKPOINT_KIND,
};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.02;
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelScene {
    /// sorted lexicographically, unique
    pub voxel_coords: Vec<[i32; 3]>,
    pub voxel_colors: Vec<[f64; 3]>,
    pub voxel_size: f64,
    pub point_to_voxel: Vec<usize>,
}

impl VoxelScene {
    pub fn len(&self) -> usize {
        self.voxel_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_coords.is_empty()
    }

    pub fn center(&self, v: usize) -> [f64; 3] {
        let c = self.voxel_coords[v];
        [0, 1, 2].map(|k| (c[k] as f64 + 0.5) * self.voxel_size)
    }

    /// Per-voxel majority vote over point labels; ties go to the smaller label, background loses ties.
    pub fn majority_labels(&self, point_labels: &[Option<u32>]) -> Vec<Option<u32>> {
        let mut votes: Vec<BTreeMap<Option<u32>, usize>> = vec![BTreeMap::new(); self.len()];
        for (p, &v) in self.point_to_voxel.iter().enumerate() {
            *votes[v].entry(point_labels[p]).or_default() += 1;
        }
        votes
            .iter()
            .map(|tally| {
                let mut best: Option<(Option<u32>, usize)> = None;
                // descending label order ends with background, so a later entry wins a tie only if labelled
                for (&label, &n) in tally.iter().rev() {
                    if best.map_or(true, |(_, bn)| n > bn || (n == bn && label.is_some())) {
                        best = Some((label, n));
                    }
                }
                best.and_then(|(l, _)| l)
            })
            .collect()
    }
}

pub fn voxelize(points: &[[f64; 3]], colors: &[[f64; 3]], voxel_size: f64) -> Result<VoxelScene> {
    if points.is_empty() {
        return Err(Error::EmptyInput("voxelize needs at least one point".into()));
    }
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel_size}")));
    }
    if points.len() != colors.len() {
        return Err(Error::Shape(format!("{} points but {} colors", points.len(), colors.len())));
    }
    if points.iter().chain(colors).flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("point coordinates or colors".into()));
    }
    let index_of = |p: &[f64; 3]| p.map(|x| (x / voxel_size).floor() as i32);
    let mut cells: BTreeMap<[i32; 3], ([f64; 3], usize)> = BTreeMap::new();
    for (p, c) in points.iter().zip(colors) {
        let e = cells.entry(index_of(p)).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            e.0[k] += c[k];
        }
        e.1 += 1;
    }
    let slot: HashMap<[i32; 3], usize> = cells.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let voxel_colors = cells.values().map(|(sum, n)| sum.map(|s| s / *n as f64)).collect();
    Ok(VoxelScene {
        voxel_coords: cells.keys().copied().collect(),
        voxel_colors,
        voxel_size,
        point_to_voxel: points.iter().map(|p| slot[&index_of(p)]).collect(),
    })
}

pub fn voxelize_scene(scene: &SyntheticScene, voxel_size: f64) -> Result<VoxelScene> {
    voxelize(&scene.points_f64(), &scene.colors_f64(), voxel_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTable {
    pub segment_of: Vec<usize>,
    pub num_segments: usize,
}

impl SegmentTable {
    /// Voxel ids of every segment, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_segments];
        for (v, &s) in self.segment_of.iter().enumerate() {
            out[s].push(v);
        }
        out
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the 26-neighbourhood graph restricted to edges whose
/// RGB distance is below `merge_threshold`. Ids are numbered by first voxel.
pub fn oversegment(scene: &VoxelScene, merge_threshold: f64) -> SegmentTable {
    let n = scene.len();
    let slot: HashMap<[i32; 3], usize> = scene.voxel_coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for (v, c) in scene.voxel_coords.iter().enumerate() {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(&u) = slot.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                    if u <= v {
                        continue;
                    }
                    let (a, b) = (&scene.voxel_colors[v], &scene.voxel_colors[u]);
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                    if d < merge_threshold {
                        let (ra, rb) = (find(&mut parent, v), find(&mut parent, u));
                        if ra != rb {
                            parent[ra.max(rb)] = ra.min(rb);
                        }
                    }
                }
            }
        }
    }
    let mut id_of_root = HashMap::new();
    let mut segment_of = Vec::with_capacity(n);
    for v in 0..n {
        let r = find(&mut parent, v);
        let next = id_of_root.len();
        segment_of.push(*id_of_root.entry(r).or_insert(next));
    }
    SegmentTable { segment_of, num_segments: id_of_root.len() }
}

/// Box spanning the full extent of every set voxel.
pub fn mask_to_aabb(mask: &[bool], scene: &VoxelScene) -> Result<Aabb> {
    if mask.len() != scene.len() {
        return Err(Error::Shape(format!("mask has {} entries for {} voxels", mask.len(), scene.len())));
    }
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    let mut any = false;
    for (c, _) in scene.voxel_coords.iter().zip(mask).filter(|(_, &m)| m) {
        any = true;
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    let s = scene.voxel_size;
    Ok(Aabb::new(lo.map(|i| i as f64 * s), hi.map(|i| (i + 1) as f64 * s)))
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
