//! On-disk corpus layout:
//!
//! ```text
//! <dir>/corpus.json            index: format version, label schema, scene ids
//! <dir>/scenes/<id>.bin        container: f32 points, f32 colors, i32 object id, i32 part id
//! <dir>/scenes/<id>.meta.json  objects, parts, captions, cameras
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{grammar, SceneObject, SyntheticCamera, SyntheticScene};
use crate::container::{self, pack};
use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: &str = "v1";
const SCENE_MAGIC: &[u8; 4] = b"MLSC";

#[derive(Debug, Serialize, Deserialize)]
struct CorpusIndex {
    version: String,
    label_schema: String,
    scenes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    version: String,
    id: String,
    num_points: usize,
    objects: Vec<SceneObject>,
    cameras: Vec<SyntheticCamera>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeometryHeader {
    scene_id: String,
    num_points: usize,
}

pub fn serialize_corpus(corpus: &[SyntheticScene], dir: &Path) -> Result<()> {
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let index = CorpusIndex {
        version: CORPUS_FORMAT_VERSION.to_string(),
        label_schema: grammar::LABEL_SCHEMA_VERSION.to_string(),
        scenes: corpus.iter().map(|s| s.id.clone()).collect(),
    };
    write_json(&dir.join("corpus.json"), &index)?;
    for scene in corpus {
        write_scene(scene, &scenes_dir)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    let n = scene.points.len();
    let mut object_of = vec![-1i32; n];
    let mut part_of = vec![-1i32; n];
    for (k, o) in scene.objects.iter().enumerate() {
        for &p in &o.point_ids {
            object_of[p as usize] = k as i32;
        }
        for part in &o.parts {
            for &p in &part.point_ids {
                part_of[p as usize] = part.id as i32;
            }
        }
    }
    let mut payload = Vec::with_capacity(n * 32);
    pack::put_f32s(&mut payload, scene.points.iter().flatten().copied());
    pack::put_f32s(&mut payload, scene.colors.iter().flatten().copied());
    pack::put_i32s(&mut payload, object_of);
    pack::put_i32s(&mut payload, part_of);
    let header = serde_json::to_string(&GeometryHeader { scene_id: scene.id.clone(), num_points: n })
        .expect("header serializes");
    container::write(&dir.join(format!("{}.bin", scene.id)), SCENE_MAGIC, CORPUS_FORMAT_VERSION, &header, &payload)?;

    let meta = SceneMeta {
        version: CORPUS_FORMAT_VERSION.to_string(),
        id: scene.id.clone(),
        num_points: n,
        objects: scene.objects.clone(),
        cameras: scene.cameras.clone(),
    };
    write_json(&dir.join(format!("{}.meta.json", scene.id)), &meta)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn check_version(found: &str) -> Result<()> {
    if found != CORPUS_FORMAT_VERSION {
        return Err(Error::Version { found: found.to_string(), expected: CORPUS_FORMAT_VERSION.to_string() });
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let index_path = dir.join("corpus.json");
    if !index_path.exists() {
        return Err(Error::Missing { what: "corpus index", path: index_path });
    }
    let index: CorpusIndex = read_json(&index_path)?;
    check_version(&index.version)?;
    if index.label_schema != grammar::LABEL_SCHEMA_VERSION {
        return Err(Error::Version { found: index.label_schema, expected: grammar::LABEL_SCHEMA_VERSION.into() });
    }
    index.scenes.iter().map(|id| load_scene(&dir.join("scenes"), id)).collect()
}

fn load_scene(dir: &Path, id: &str) -> Result<SyntheticScene> {
    let meta_path = dir.join(format!("{id}.meta.json"));
    let meta: SceneMeta = read_json(&meta_path)?;
    check_version(&meta.version)?;
    let bin_path = dir.join(format!("{id}.bin"));
    let c = container::read(&bin_path, SCENE_MAGIC, CORPUS_FORMAT_VERSION)?;
    let header: GeometryHeader = serde_json::from_str(&c.header).map_err(|e| Error::json(&bin_path, e))?;
    let integrity = |reason: &str| Error::Integrity { path: bin_path.clone(), reason: reason.to_string() };
    if header.scene_id != id || header.num_points != meta.num_points {
        return Err(integrity("geometry header disagrees with metadata"));
    }
    let n = header.num_points;
    let mut r = pack::Reader::new(&c.payload);
    let flat_points = r.f32s(3 * n).ok_or_else(|| integrity("short point array"))?;
    let flat_colors = r.f32s(3 * n).ok_or_else(|| integrity("short color array"))?;
    let object_of = r.i32s(n).ok_or_else(|| integrity("short object id array"))?;
    let part_of = r.i32s(n).ok_or_else(|| integrity("short part id array"))?;
    if !r.is_done() {
        return Err(integrity("unexpected trailing payload"));
    }
    let triples = |v: Vec<f32>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();

    let mut objects = meta.objects;
    for o in objects.iter_mut() {
        o.point_ids.clear();
        for p in o.parts.iter_mut() {
            p.point_ids.clear();
        }
    }
    for (i, (&obj, &part)) in object_of.iter().zip(&part_of).enumerate() {
        if obj < 0 {
            continue;
        }
        let o = objects.get_mut(obj as usize).ok_or_else(|| integrity("object id out of range"))?;
        o.point_ids.push(i as u32);
        if part >= 0 {
            let p = o
                .parts
                .iter_mut()
                .find(|p| p.id == part as u32)
                .ok_or_else(|| integrity("part id out of range"))?;
            p.point_ids.push(i as u32);
        }
    }
    Ok(SyntheticScene {
        id: id.to_string(),
        points: triples(flat_points),
        colors: triples(flat_colors),
        objects,
        cameras: meta.cameras,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&CorpusSpec { num_scenes: 3, ..Default::default() }).unwrap();
        serialize_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
        for (a, b) in back.iter().zip(&corpus) {
            assert!(a.points.iter().flatten().zip(b.points.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn empty_corpus_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        serialize_corpus(&[], dir.path()).unwrap();
        assert!(load_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        serialize_corpus(&[], dir.path()).unwrap();
        let p = dir.path().join("corpus.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"v1\"", "\"v999\"");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Version { .. })));
    }

    #[test]
    fn truncated_geometry_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&CorpusSpec { num_scenes: 1, ..Default::default() }).unwrap();
        serialize_corpus(&corpus, dir.path()).unwrap();
        let bin = dir.path().join("scenes").join(format!("{}.bin", corpus[0].id));
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Integrity { .. })));
    }
}
