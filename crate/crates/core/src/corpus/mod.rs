//! Procedural scenes of multi-part objects with two-level captions.

pub mod grammar;
pub mod io;
pub mod views;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::rng;

pub use grammar::{AttributeKey, CaptionGrammar, CaptionPair, NO_PARTS_SENTINEL, NUM_CAPTION_VARIANTS};
pub use io::{load_corpus, serialize_corpus, CORPUS_FORMAT_VERSION};
pub use views::{project_and_filter_boxes, select_views, Box2d, Intrinsics, RigidTransform, SyntheticCamera};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub id: u32,
    pub part_name: String,
    pub attributes: BTreeMap<AttributeKey, String>,
    /// ascending; persisted with the scene geometry, not the metadata
    #[serde(skip)]
    pub point_ids: Vec<u32>,
}

/// Seeded caption variants of one object; variant 0 is the evaluation reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub variants: Vec<CaptionPair>,
}

impl CaptionSet {
    pub fn reference(&self) -> &CaptionPair {
        &self.variants[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectViews {
    pub camera_ids: Vec<usize>,
    pub coverages: Vec<f64>,
    pub boxes: Vec<Option<Box2d>>,
}

impl ObjectViews {
    pub fn unviewed(&self) -> bool {
        self.camera_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class_label: String,
    pub aabb: Aabb,
    /// uniform scale applied to the class template (drives the size word)
    pub scale: f64,
    pub parts: Vec<PartRecord>,
    /// ascending; persisted with the scene geometry, not the metadata
    #[serde(skip)]
    pub point_ids: Vec<u32>,
    pub captions: Option<CaptionSet>,
    pub views: ObjectViews,
}

impl SceneObject {
    /// Degenerate objects have no distinct parts.
    pub fn is_degenerate(&self) -> bool {
        self.parts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<SyntheticCamera>,
}

impl SyntheticScene {
    /// Object index per point (`None` for background).
    pub fn point_object_labels(&self) -> Vec<Option<u32>> {
        let mut labels = vec![None; self.points.len()];
        for (k, o) in self.objects.iter().enumerate() {
            for &p in &o.point_ids {
                labels[p as usize] = Some(k as u32);
            }
        }
        labels
    }

    pub fn points_f64(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
    }

    pub fn colors_f64(&self) -> Vec<[f64; 3]> {
        self.colors.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_scenes: usize,
    pub objects_per_scene: [usize; 2],
    pub parts_per_object: [usize; 2],
    pub grammar_seed: u64,
    pub geometry_seed: u64,
    pub label_schema: String,
    pub cameras_per_scene: usize,
    /// spacing of the surface sampling grid in meters
    pub point_spacing: f64,
    pub max_caption_tokens: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            objects_per_scene: [3, 6],
            parts_per_object: [1, 3],
            grammar_seed: 0,
            geometry_seed: 0,
            label_schema: grammar::LABEL_SCHEMA_VERSION.to_string(),
            cameras_per_scene: 8,
            point_spacing: 0.018,
            max_caption_tokens: 32,
        }
    }
}

const MAX_OBJECTS: usize = 16;
const MAX_PARTS: usize = 4;
const CELL: f64 = 0.5;
const COLOR_NOISE: f64 = 0.03;

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let [olo, ohi] = self.objects_per_scene;
        let [plo, phi] = self.parts_per_object;
        if olo > ohi || olo == 0 {
            return Err(Error::Spec(format!("objects_per_scene range [{olo}, {ohi}] is empty or zero")));
        }
        if ohi > MAX_OBJECTS {
            return Err(Error::Spec(format!("at most {MAX_OBJECTS} objects per scene")));
        }
        if plo > phi {
            return Err(Error::Spec(format!("parts_per_object range [{plo}, {phi}] is empty")));
        }
        if phi > MAX_PARTS {
            return Err(Error::Spec(format!("at most {MAX_PARTS} parts per object")));
        }
        if self.label_schema != grammar::LABEL_SCHEMA_VERSION {
            return Err(Error::Spec(format!("unknown label schema {:?}", self.label_schema)));
        }
        if self.cameras_per_scene == 0 {
            return Err(Error::Spec("at least one camera per scene".into()));
        }
        if !(self.point_spacing > 0.0 && self.point_spacing.is_finite()) {
            return Err(Error::Spec("point_spacing must be positive".into()));
        }
        if self.max_caption_tokens < 8 {
            return Err(Error::Spec("max_caption_tokens must be at least 8".into()));
        }
        Ok(())
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Deterministic corpus: scene `i` depends only on `(spec, i)`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    (0..spec.num_scenes).map(|i| generate_scene(spec, i)).collect()
}

pub fn generate_scene(spec: &CorpusSpec, index: usize) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut geo = rng::stream(spec.geometry_seed, "scene-geometry", index as u64);
    let grammar = CaptionGrammar { max_tokens: spec.max_caption_tokens };
    let noise = Normal::new(0.0, COLOR_NOISE).expect("valid normal");

    let n_objects = geo.gen_range(spec.objects_per_scene[0]..=spec.objects_per_scene[1]);
    let grid = (n_objects as f64).sqrt().ceil() as usize;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(&mut geo);

    let mut points: Vec<[f32; 3]> = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();
    let mut objects = Vec::with_capacity(n_objects);

    for (obj_idx, &cell) in cells.iter().take(n_objects).enumerate() {
        let class = &grammar::CLASSES[geo.gen_range(0..grammar::CLASSES.len())];
        let scale = geo.gen_range(0.8..1.25);
        let yaw_quarter = geo.gen_range(0..4u8);
        let dims = [class.dims[0] * scale, class.dims[1] * scale, class.dims[2] * scale];
        let (fx, fy) = if yaw_quarter % 2 == 0 { (dims[0], dims[1]) } else { (dims[1], dims[0]) };
        let slack_x = ((CELL - fx - 0.06) / 2.0).max(0.0);
        let slack_y = ((CELL - fy - 0.06) / 2.0).max(0.0);
        let cx = (cell % grid) as f64 * CELL + CELL / 2.0 + geo.gen_range(-slack_x..=slack_x);
        let cy = (cell / grid) as f64 * CELL + CELL / 2.0 + geo.gen_range(-slack_y..=slack_y);

        let max_parts = spec.parts_per_object[1].min(class.parts.len());
        let min_parts = spec.parts_per_object[0].min(max_parts);
        let n_parts = geo.gen_range(min_parts..=max_parts);
        let mut chosen: Vec<usize> = (0..class.parts.len()).collect();
        chosen.shuffle(&mut geo);
        chosen.truncate(n_parts);
        chosen.sort_unstable();

        let to_world = |u: [f64; 3]| -> [f64; 3] {
            let lx = (u[0] - 0.5) * dims[0];
            let ly = (u[1] - 0.5) * dims[1];
            let (rx, ry) = match yaw_quarter {
                0 => (lx, ly),
                1 => (-ly, lx),
                2 => (-lx, -ly),
                _ => (ly, -lx),
            };
            [cx + rx, cy + ry, u[2] * dims[2]]
        };

        let mut object_point_ids = Vec::new();
        let mut parts = Vec::with_capacity(n_parts);
        let mut push_box = |unit: &[f64; 6], rgb: [f64; 3], ids: &mut Vec<u32>, geo: &mut rand_chacha::ChaCha8Rng| {
            let a = to_world([unit[0], unit[1], unit[2]]);
            let b = to_world([unit[3], unit[4], unit[5]]);
            let lo = [a[0].min(b[0]), a[1].min(b[1]), a[2].min(b[2])];
            let hi = [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])];
            for p in box_surface_grid(lo, hi, spec.point_spacing) {
                let c = [
                    (rgb[0] + noise.sample(geo)).clamp(0.0, 1.0),
                    (rgb[1] + noise.sample(geo)).clamp(0.0, 1.0),
                    (rgb[2] + noise.sample(geo)).clamp(0.0, 1.0),
                ];
                ids.push(points.len() as u32);
                points.push([p[0] as f32, p[1] as f32, p[2] as f32]);
                colors.push([c[0] as f32, c[1] as f32, c[2] as f32]);
            }
        };

        for (pid, &ti) in chosen.iter().enumerate() {
            let tpl = &class.parts[ti];
            let color = *tpl.colors.choose(&mut geo).expect("nonempty palette");
            let material = *tpl.materials.choose(&mut geo).expect("nonempty materials");
            let texture = *grammar::TEXTURES.choose(&mut geo).expect("nonempty textures");
            let rgb = grammar::color_rgb(color).expect("palette color");
            let mut ids = Vec::new();
            for unit in tpl.boxes {
                push_box(unit, rgb, &mut ids, &mut geo);
            }
            object_point_ids.extend_from_slice(&ids);
            let mut attributes = BTreeMap::new();
            attributes.insert(AttributeKey::Color, color.to_string());
            attributes.insert(AttributeKey::Material, material.to_string());
            attributes.insert(AttributeKey::Texture, texture.to_string());
            attributes.insert(AttributeKey::Function, tpl.function.to_string());
            parts.push(PartRecord { id: pid as u32, part_name: tpl.name.to_string(), attributes, point_ids: ids });
        }
        if parts.is_empty() {
            let rgb = grammar::color_rgb(class.body_color).expect("palette color");
            let mut ids = Vec::new();
            push_box(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], rgb, &mut ids, &mut geo);
            object_point_ids = ids;
        }

        let pts = &points;
        let aabb = Aabb::from_points(object_point_ids.iter().map(|&i| {
            let p = pts[i as usize];
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }))
        .expect("objects always own points");

        objects.push(SceneObject {
            id: obj_idx as u32,
            class_label: class.name.to_string(),
            aabb,
            scale,
            parts,
            point_ids: object_point_ids,
            captions: None,
            views: ObjectViews { camera_ids: vec![], coverages: vec![], boxes: vec![] },
        });
    }

    for (k, obj) in objects.iter_mut().enumerate() {
        let mut cap_rng = rng::stream(spec.grammar_seed, "captions", ((index as u64) << 16) | k as u64);
        obj.captions = Some(synthesize_captions(obj, &grammar, &mut cap_rng)?);
    }

    let extent = Aabb::from_points(points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]))
        .unwrap_or(Aabb::new([0.0; 3], [1.0; 3]));
    let cameras = views::ring_cameras(&extent, spec.cameras_per_scene);
    let scene_pts: Vec<[f64; 3]> = points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    for obj in objects.iter_mut() {
        let ranked = views::select_views_scored(obj, &cameras, &scene_pts);
        let boxes = ranked.iter().map(|&(cid, _)| project_and_filter_boxes(obj, &cameras[cid], &scene_pts)).collect();
        obj.views = ObjectViews {
            camera_ids: ranked.iter().map(|r| r.0).collect(),
            coverages: ranked.iter().map(|r| r.1).collect(),
            boxes,
        };
    }

    Ok(SyntheticScene { id: scene_id(index), points, colors, objects, cameras })
}

/// Color summary used by the object-level caption: color of the part owning most points.
pub fn dominant_color(object: &SceneObject) -> Option<&str> {
    let mut best: Option<&PartRecord> = None;
    for p in &object.parts {
        if best.map_or(true, |b| p.point_ids.len() > b.point_ids.len()) {
            best = Some(p);
        }
    }
    best.and_then(|p| p.attributes.get(&AttributeKey::Color)).map(String::as_str)
}

/// `NUM_CAPTION_VARIANTS` caption pairs for one object.
pub fn synthesize_captions<R: Rng>(object: &SceneObject, grammar: &CaptionGrammar, rng: &mut R) -> Result<CaptionSet> {
    let class = grammar::class_template(&object.class_label)
        .ok_or_else(|| Error::Generation(format!("class {:?} is not in the label schema", object.class_label)))?;
    let color = dominant_color(object).unwrap_or(class.body_color);
    let content = grammar::ObjectContent {
        class_label: &object.class_label,
        size: grammar::size_word(object.scale),
        color_summary: color,
        parts: object
            .parts
            .iter()
            .map(|p| grammar::PartContent { name: &p.part_name, attributes: &p.attributes })
            .collect(),
    };
    Ok(CaptionSet { variants: grammar.synthesize(&content, rng)? })
}

fn box_surface_grid(lo: [f64; 3], hi: [f64; 3], spacing: f64) -> Vec<[f64; 3]> {
    let steps = |a: f64, b: f64| -> Vec<f64> {
        let len = b - a;
        let n = (len / spacing).ceil().max(1.0) as usize;
        (0..=n).map(|i| a + len * i as f64 / n as f64).collect()
    };
    let xs = steps(lo[0], hi[0]);
    let ys = steps(lo[1], hi[1]);
    let zs = steps(lo[2], hi[2]);
    let mut out = Vec::new();
    // z faces
    for &z in &[lo[2], hi[2]] {
        for &x in &xs {
            for &y in &ys {
                out.push([x, y, z]);
            }
        }
    }
    // y faces (skip rows already on z faces)
    for &y in &[lo[1], hi[1]] {
        for &x in &xs {
            for &z in &zs[1..zs.len() - 1] {
                out.push([x, y, z]);
            }
        }
    }
    // x faces
    for &x in &[lo[0], hi[0]] {
        for &y in &ys[1..ys.len() - 1] {
            for &z in &zs[1..zs.len() - 1] {
                out.push([x, y, z]);
            }
        }
    }
    out
}
