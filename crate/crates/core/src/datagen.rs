//! Synthetic scenes of colored rectangles with relation and interaction
//! annotations, and the JSON-lines annotation format.
//!
//! # Annotation file
//!
//! UTF-8, one JSON object per line, keys sorted, floats quantized to `1e-6`
//! and written in shortest round-trip form.
//!
//! Line 1 is the header:
//!
//! ```text
//! {"action_classes":4,"count":2,"format":"scenehoi-annotations","human_class":0,"object_classes":8,"relation_classes":6,"version":1}
//! ```
//!
//! Each following line is one scene:
//!
//! ```text
//! {"hois":[[0,1,1]],"image":{"render":{"height":32,"width":32}},"index":0,
//!  "objects":[{"box":[0.25,0.5,0.3,0.2],"label":0},{"box":[0.7,0.5,0.25,0.2],"label":3}],
//!  "relations":[[0,2,1]],"split":"train"}
//! ```
//!
//! (shown wrapped; records are single lines). `objects[i].box` is
//! `[cx, cy, w, h]` in normalized coordinates. `relations` holds
//! `[subject, predicate, object]` and `hois` holds `[human, action, object]`,
//! both indexing into `objects`. `image` is either `{"render": {...}}`, meaning
//! the raster is redrawn from the objects with the fixed palette, or
//! `{"pixels": {"height", "width", "rgb"}}` with `rgb` the base64 of the raw
//! 8-bit RGB bytes in row-major order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::features::Image;
use crate::geometry::{box_iou, BBox};

pub const FORMAT_NAME: &str = "scenehoi-annotations";
pub const FORMAT_VERSION: u64 = 1;

const BACKGROUND: [u8; 3] = [24, 24, 24];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub object_classes: usize,
    pub relation_classes: usize,
    pub action_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Exponent of the power law over predicate ids; 0 is uniform.
    pub skew: f64,
    pub human_class: usize,
    /// Probability that an object is a human.
    pub human_fraction: f64,
    pub image_size: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            object_classes: 8,
            relation_classes: 6,
            action_classes: 4,
            min_objects: 2,
            max_objects: 3,
            skew: 1.0,
            human_class: 0,
            human_fraction: 0.4,
            image_size: 32,
            seed: 0,
            max_retries: 100,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.object_classes < 2 {
            return fail("object_classes must be at least 2");
        }
        if self.human_class >= self.object_classes {
            return fail("human_class must be a valid object class");
        }
        if self.relation_classes == 0 || self.action_classes == 0 {
            return fail("relation_classes and action_classes must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail("object range must satisfy 1 <= min_objects <= max_objects");
        }
        if !(self.skew >= 0.0) {
            return fail("skew must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.human_fraction) {
            return fail("human_fraction must be in [0, 1]");
        }
        if self.image_size == 0 {
            return fail("image_size must be positive");
        }
        Ok(())
    }

    pub fn header(&self) -> Header {
        Header {
            object_classes: self.object_classes,
            relation_classes: self.relation_classes,
            action_classes: self.action_classes,
            human_class: self.human_class,
        }
    }

    /// Predicate to action map used for interactions: `p * N^a / N^r`.
    pub fn action_for(&self, predicate: usize) -> usize {
        predicate * self.action_classes / self.relation_classes
    }
}

/// Class-count header shared by every scene in a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub object_classes: usize,
    pub relation_classes: usize,
    pub action_classes: usize,
    pub human_class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub human: usize,
    pub action: usize,
    pub object: usize,
}

/// How the raster is stored in an annotation file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStorage {
    #[default]
    Render,
    Pixels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub index: u64,
    pub split: String,
    pub image: Image,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub hois: Vec<Interaction>,
}

/// Relation ground truth with boxes and labels resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelTarget {
    pub subj_box: BBox,
    pub subj_label: usize,
    pub predicate: usize,
    pub obj_box: BBox,
    pub obj_label: usize,
}

/// Interaction ground truth with boxes and labels resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoiTarget {
    pub human_box: BBox,
    pub action: usize,
    pub obj_box: BBox,
    pub obj_label: usize,
}

impl Scene {
    pub fn rel_targets(&self) -> Vec<RelTarget> {
        self.relations
            .iter()
            .map(|r| RelTarget {
                subj_box: self.objects[r.subject].bbox,
                subj_label: self.objects[r.subject].label,
                predicate: r.predicate,
                obj_box: self.objects[r.object].bbox,
                obj_label: self.objects[r.object].label,
            })
            .collect()
    }

    pub fn hoi_targets(&self) -> Vec<HoiTarget> {
        self.hois
            .iter()
            .map(|h| HoiTarget {
                human_box: self.objects[h.human].bbox,
                action: h.action,
                obj_box: self.objects[h.object].bbox,
                obj_label: self.objects[h.object].label,
            })
            .collect()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.label).collect()
    }

    /// Mirror image and boxes left to right.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        out.image = self.image.flipped();
        for o in &mut out.objects {
            o.bbox = o.bbox.flipped();
        }
        out
    }

    /// Checks the annotation invariants against a header.
    pub fn validate(&self, header: &Header) -> std::result::Result<(), String> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.label >= header.object_classes {
                return Err(format!("object {i} label {} out of range ({} classes)", o.label, header.object_classes));
            }
            let b = o.bbox;
            BBox::new(b.cx, b.cy, b.w, b.h).map_err(|e| format!("object {i}: {e}"))?;
        }
        let n = self.objects.len();
        for (i, r) in self.relations.iter().enumerate() {
            if r.subject >= n || r.object >= n {
                return Err(format!(
                    "relation {i} references object {} of {n}",
                    if r.subject >= n { r.subject } else { r.object }
                ));
            }
            if r.subject == r.object {
                return Err(format!("relation {i} relates object {} to itself", r.subject));
            }
            if r.predicate >= header.relation_classes {
                return Err(format!("relation {i} predicate {} out of range", r.predicate));
            }
        }
        for (i, h) in self.hois.iter().enumerate() {
            if h.human >= n || h.object >= n {
                return Err(format!(
                    "interaction {i} references object {} of {n}",
                    if h.human >= n { h.human } else { h.object }
                ));
            }
            if h.human == h.object {
                return Err(format!("interaction {i} relates object {} to itself", h.human));
            }
            if self.objects[h.human].label != header.human_class {
                return Err(format!("interaction {i} subject {} is not the human class", h.human));
            }
            if h.action >= header.action_classes {
                return Err(format!("interaction {i} action {} out of range", h.action));
            }
        }
        Ok(())
    }
}

/// Fixed per-class color, channel values multiples of 1/255.
pub fn class_color(label: usize) -> [u8; 3] {
    let hue = (label as f64 * 0.618_033_988_75).fract() * 6.0;
    let sector = hue.floor() as usize;
    let f = hue - sector as f64;
    let (v, lo) = (1.0, 0.25 + 0.2 * ((label / 6) % 3) as f64);
    let mid_up = lo + (v - lo) * f;
    let mid_down = v - (v - lo) * f;
    let rgb = match sector % 6 {
        0 => [v, mid_up, lo],
        1 => [mid_down, v, lo],
        2 => [lo, v, mid_up],
        3 => [lo, mid_down, v],
        4 => [mid_up, lo, v],
        _ => [v, lo, mid_down],
    };
    rgb.map(|c| (c * 255.0).round() as u8)
}

/// Draws objects in order over a dark background; a pixel takes the color of
/// the last object whose box contains its center.
pub fn render(objects: &[SceneObject], height: usize, width: usize) -> Image {
    let mut bytes = vec![BACKGROUND; height * width];
    for o in objects {
        let color = class_color(o.label);
        for r in 0..height {
            let y = (r as f64 + 0.5) / height as f64;
            for c in 0..width {
                let x = (c as f64 + 0.5) / width as f64;
                if o.bbox.contains_point(x, y) {
                    bytes[r * width + c] = color;
                }
            }
        }
    }
    image_from_bytes(height, width, &bytes.concat()).expect("sized buffer")
}

fn image_from_bytes(height: usize, width: usize, rgb: &[u8]) -> Result<Image> {
    Image::new(height, width, rgb.iter().map(|&b| f64::from(b) / 255.0).collect())
}

fn image_to_bytes(image: &Image) -> Vec<u8> {
    image.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn sample_predicate(rng: &mut ChaCha8Rng, classes: usize, skew: f64) -> usize {
    let weights: Vec<f64> = (0..classes).map(|p| ((p + 1) as f64).powf(-skew)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (p, w) in weights.iter().enumerate() {
        if u < *w {
            return p;
        }
        u -= w;
    }
    classes - 1
}

/// One deterministic scene for `(cfg.seed, index)`.
///
/// Objects form a chain: each object after the first is placed relative to
/// its predecessor in the direction `pi * p / N^r`, where `p` is the predicate
/// linking them, so predicates are recoverable from geometry. The layout is
/// then scaled and centered into the unit square.
pub fn generate_scene(cfg: &GenConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let labels: Vec<usize> = (0..count)
        .map(|_| {
            if rng.gen::<f64>() < cfg.human_fraction {
                cfg.human_class
            } else {
                let other = rng.gen_range(0..cfg.object_classes - 1);
                if other >= cfg.human_class {
                    other + 1
                } else {
                    other
                }
            }
        })
        .collect();
    let predicates: Vec<usize> =
        (1..count).map(|_| sample_predicate(&mut rng, cfg.relation_classes, cfg.skew)).collect();

    for attempt in 0..cfg.max_retries.max(1) {
        // later attempts spread the chain further apart
        let spread = 1.25 + 0.05 * attempt as f64;
        let sizes: Vec<(f64, f64)> = (0..count).map(|_| (rng.gen_range(0.22..0.36), rng.gen_range(0.22..0.36))).collect();
        let mut centers = vec![(0.0f64, 0.0f64)];
        for i in 1..count {
            let angle = std::f64::consts::PI * predicates[i - 1] as f64 / cfg.relation_classes as f64;
            let (dx, dy) = (angle.cos(), angle.sin());
            let (pw, ph) = sizes[i - 1];
            let (w, h) = sizes[i];
            // distance at which the two boxes just touch along the direction
            let reach = ((pw + w) / 2.0 / dx.abs().max(1e-9)).min((ph + h) / 2.0 / dy.abs().max(1e-9));
            let dist = reach * rng.gen_range(1.05..spread);
            let (px, py) = centers[i - 1];
            centers.push((px + dist * dx, py + dist * dy));
        }
        let x0 = (0..count).map(|i| centers[i].0 - sizes[i].0 / 2.0).fold(f64::INFINITY, f64::min);
        let x1 = (0..count).map(|i| centers[i].0 + sizes[i].0 / 2.0).fold(f64::NEG_INFINITY, f64::max);
        let y0 = (0..count).map(|i| centers[i].1 - sizes[i].1 / 2.0).fold(f64::INFINITY, f64::min);
        let y1 = (0..count).map(|i| centers[i].1 + sizes[i].1 / 2.0).fold(f64::NEG_INFINITY, f64::max);
        let scale = (0.96 / (x1 - x0).max(y1 - y0)).min(1.0);
        let (ox, oy) = (0.5 - scale * (x0 + x1) / 2.0, 0.5 - scale * (y0 + y1) / 2.0);
        let boxes: Vec<BBox> = (0..count)
            .map(|i| {
                BBox::unchecked(
                    quantize(ox + scale * centers[i].0),
                    quantize(oy + scale * centers[i].1),
                    quantize(scale * sizes[i].0),
                    quantize(scale * sizes[i].1),
                )
            })
            .collect();
        let min_side = 1.5 / cfg.image_size as f64;
        let crowded = (0..count).any(|i| (i + 1..count).any(|j| box_iou(&boxes[i], &boxes[j]) > 0.3));
        let valid = boxes.iter().all(|b| BBox::new(b.cx, b.cy, b.w, b.h).is_ok() && b.w.min(b.h) >= min_side);
        if crowded || !valid {
            continue;
        }
        let objects: Vec<SceneObject> =
            boxes.into_iter().zip(&labels).map(|(bbox, &label)| SceneObject { bbox, label }).collect();
        let relations: Vec<Relation> =
            (1..count).map(|i| Relation { subject: i - 1, predicate: predicates[i - 1], object: i }).collect();
        let hois = relations
            .iter()
            .filter(|r| labels[r.subject] == cfg.human_class)
            .map(|r| Interaction { human: r.subject, action: cfg.action_for(r.predicate), object: r.object })
            .collect();
        let image = render(&objects, cfg.image_size, cfg.image_size);
        return Ok(Scene { index, split: "train".into(), image, objects, relations, hois });
    }
    Err(Error::Placement { index, retries: cfg.max_retries })
}

/// Scenes `start..start + count` tagged with `split`.
pub fn generate_split(cfg: &GenConfig, start: u64, count: usize, split: &str) -> Result<Vec<Scene>> {
    (start..start + count as u64)
        .map(|i| {
            let mut s = generate_scene(cfg, i)?;
            s.split = split.to_string();
            Ok(s)
        })
        .collect()
}

fn scene_record(scene: &Scene, storage: ImageStorage) -> Value {
    let image = match storage {
        ImageStorage::Render => json!({"render": {"height": scene.image.height, "width": scene.image.width}}),
        ImageStorage::Pixels => json!({"pixels": {
            "height": scene.image.height,
            "width": scene.image.width,
            "rgb": base64::engine::general_purpose::STANDARD.encode(image_to_bytes(&scene.image)),
        }}),
    };
    let objects: Vec<Value> = scene
        .objects
        .iter()
        .map(|o| json!({"box": o.bbox.to_array().map(quantize), "label": o.label}))
        .collect();
    let relations: Vec<Value> = scene.relations.iter().map(|r| json!([r.subject, r.predicate, r.object])).collect();
    let hois: Vec<Value> = scene.hois.iter().map(|h| json!([h.human, h.action, h.object])).collect();
    json!({
        "index": scene.index,
        "split": scene.split,
        "image": image,
        "objects": objects,
        "relations": relations,
        "hois": hois,
    })
}

/// Canonical byte form of an annotation file.
pub fn annotations_to_string(scenes: &[Scene], header: &Header, storage: ImageStorage) -> String {
    let mut out = String::new();
    let head = json!({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "object_classes": header.object_classes,
        "relation_classes": header.relation_classes,
        "action_classes": header.action_classes,
        "human_class": header.human_class,
        "count": scenes.len(),
    });
    out.push_str(&head.to_string());
    out.push('\n');
    for s in scenes {
        out.push_str(&scene_record(s, storage).to_string());
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: &Path, scenes: &[Scene], header: &Header, storage: ImageStorage) -> Result<()> {
    let text = annotations_to_string(scenes, header, storage);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn field<'a>(obj: &'a Value, key: &str, line: usize) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Parse { line, message: format!("missing field `{key}`") })
}

fn as_usize(v: &Value, what: &str, line: usize) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| Error::Parse { line, message: format!("`{what}` must be a non-negative integer") })
}

fn triple(v: &Value, what: &str, line: usize) -> Result<[usize; 3]> {
    let arr = v.as_array().filter(|a| a.len() == 3).ok_or_else(|| Error::Parse {
        line,
        message: format!("{what} entries must be 3-element arrays"),
    })?;
    Ok([as_usize(&arr[0], what, line)?, as_usize(&arr[1], what, line)?, as_usize(&arr[2], what, line)?])
}

fn parse_header(v: &Value) -> Result<(Header, usize)> {
    let line = 1;
    let format = field(v, "format", line)?.as_str().unwrap_or_default();
    if format != FORMAT_NAME {
        return Err(Error::Parse { line, message: format!("unknown format `{format}`") });
    }
    let version = field(v, "version", line)?.as_u64().unwrap_or(0);
    if version != FORMAT_VERSION {
        return Err(Error::Parse { line, message: format!("unsupported version {version}") });
    }
    let get = |k: &str| field(v, k, line).and_then(|x| as_usize(x, k, line));
    let header = Header {
        object_classes: get("object_classes")?,
        relation_classes: get("relation_classes")?,
        action_classes: get("action_classes")?,
        human_class: get("human_class")?,
    };
    if header.human_class >= header.object_classes {
        return Err(Error::Parse { line, message: "human_class out of range".into() });
    }
    Ok((header, get("count")?))
}

fn parse_scene(v: &Value, line: usize) -> Result<Scene> {
    let index = field(v, "index", line)?
        .as_u64()
        .ok_or_else(|| Error::Parse { line, message: "`index` must be an integer".into() })?;
    let split = field(v, "split", line)?
        .as_str()
        .ok_or_else(|| Error::Parse { line, message: "`split` must be a string".into() })?
        .to_string();
    let mut objects = Vec::new();
    for o in field(v, "objects", line)?
        .as_array()
        .ok_or_else(|| Error::Parse { line, message: "`objects` must be an array".into() })?
    {
        let b: Vec<f64> = field(o, "box", line)?
            .as_array()
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(Value::as_f64).collect())
            .ok_or_else(|| Error::Parse { line, message: "`box` must be 4 numbers".into() })?;
        let label = as_usize(field(o, "label", line)?, "label", line)?;
        objects.push(SceneObject { bbox: BBox::unchecked(b[0], b[1], b[2], b[3]), label });
    }
    let list = |key: &str| -> Result<Vec<[usize; 3]>> {
        field(v, key, line)?
            .as_array()
            .ok_or_else(|| Error::Parse { line, message: format!("`{key}` must be an array") })?
            .iter()
            .map(|t| triple(t, key, line))
            .collect()
    };
    let relations = list("relations")?
        .into_iter()
        .map(|[subject, predicate, object]| Relation { subject, predicate, object })
        .collect();
    let hois = list("hois")?.into_iter().map(|[human, action, object]| Interaction { human, action, object }).collect();
    let img = field(v, "image", line)?;
    let dims = |x: &Value| -> Result<(usize, usize)> {
        Ok((as_usize(field(x, "height", line)?, "height", line)?, as_usize(field(x, "width", line)?, "width", line)?))
    };
    let image = if let Some(r) = img.get("render") {
        let (h, w) = dims(r)?;
        render(&objects, h, w)
    } else if let Some(p) = img.get("pixels") {
        let (h, w) = dims(p)?;
        let rgb = field(p, "rgb", line)?
            .as_str()
            .and_then(|s| base64::engine::general_purpose::STANDARD.decode(s).ok())
            .ok_or_else(|| Error::Parse { line, message: "`rgb` must be base64".into() })?;
        image_from_bytes(h, w, &rgb).map_err(|e| Error::Parse { line, message: e.to_string() })?
    } else {
        return Err(Error::Parse { line, message: "`image` needs `render` or `pixels`".into() });
    };
    Ok(Scene { index, split, image, objects, relations, hois })
}

/// Parses and validates an annotation document.
pub fn annotations_from_str(text: &str) -> Result<(Header, Vec<Scene>)> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())))
}

fn parse_lines(lines: impl Iterator<Item = Result<String>>) -> Result<(Header, Vec<Scene>)> {
    let mut header = None;
    let mut scenes = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        match &header {
            None => header = Some(parse_header(&v)?),
            Some((h, _)) => {
                let scene = parse_scene(&v, line_no)?;
                scene.validate(h).map_err(|message| Error::Invariant { record: scenes.len(), line: line_no, message })?;
                scenes.push(scene);
            }
        }
    }
    let (header, count) = header.ok_or_else(|| Error::Parse { line: 1, message: "missing header".into() })?;
    if count != scenes.len() {
        return Err(Error::Parse { line: 1, message: format!("header count {count} but {} records", scenes.len()) });
    }
    Ok((header, scenes))
}

pub fn load_annotations(path: &Path) -> Result<(Header, Vec<Scene>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_lines(BufReader::new(f).lines().map(|l| l.map_err(|e| Error::io(path, e))))
}

/// Converter from an external dataset layout into scenes. No converters ship
/// with this crate.
pub trait DatasetImporter {
    fn name(&self) -> &str;
    fn header(&self) -> Header;
    fn import(&self, source: &Path) -> Result<Vec<Scene>>;
}

/// Per-class histograms of a scene collection.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Statistics {
    pub scenes: usize,
    pub objects: BTreeMap<usize, usize>,
    pub predicates: BTreeMap<usize, usize>,
    pub actions: BTreeMap<usize, usize>,
}

pub fn statistics(scenes: &[Scene]) -> Statistics {
    let mut s = Statistics { scenes: scenes.len(), ..Default::default() };
    for scene in scenes {
        for o in &scene.objects {
            *s.objects.entry(o.label).or_default() += 1;
        }
        for r in &scene.relations {
            *s.predicates.entry(r.predicate).or_default() += 1;
        }
        for h in &scene.hois {
            *s.actions.entry(h.action).or_default() += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenConfig {
        GenConfig { seed: 7, ..GenConfig::default() }
    }

    #[test]
    fn single_object_scene_has_no_relations() {
        let c = GenConfig { min_objects: 1, max_objects: 1, ..cfg() };
        for i in 0..20 {
            let s = generate_scene(&c, i).unwrap();
            assert_eq!(s.objects.len(), 1);
            assert!(s.relations.is_empty() && s.hois.is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let c = cfg();
        for i in 0..200 {
            let a = generate_scene(&c, i).unwrap();
            assert_eq!(a, generate_scene(&c, i).unwrap());
            a.validate(&c.header()).unwrap();
            for h in &a.hois {
                assert_eq!(a.objects[h.human].label, c.human_class);
            }
        }
        assert_ne!(generate_scene(&c, 0).unwrap(), generate_scene(&c, 1).unwrap());
    }

    #[test]
    fn uniform_predicates_pass_chi_square() {
        let c = GenConfig { skew: 0.0, ..cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = vec![0usize; c.relation_classes];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_predicate(&mut rng, c.relation_classes, c.skew)] += 1;
        }
        let expect = n as f64 / c.relation_classes as f64;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        // 5 degrees of freedom, 99.9th percentile
        assert!(chi2 < 20.52, "chi2 {chi2}");
    }

    #[test]
    fn render_paints_class_colors() {
        let objects = [SceneObject { bbox: BBox::new(0.5, 0.5, 0.5, 0.5).unwrap(), label: 2 }];
        let img = render(&objects, 8, 8);
        let c = class_color(2).map(|v| f64::from(v) / 255.0);
        assert_eq!(img.pixel(4, 4), c);
        assert_eq!(img.pixel(0, 0), BACKGROUND.map(|v| f64::from(v) / 255.0));
        let distinct: std::collections::BTreeSet<[u8; 3]> = (0..20).map(class_color).collect();
        assert_eq!(distinct.len(), 20);
    }

    #[test]
    fn round_trip_both_storages() {
        let c = cfg();
        let scenes = generate_split(&c, 0, 30, "val").unwrap();
        for storage in [ImageStorage::Render, ImageStorage::Pixels] {
            let text = annotations_to_string(&scenes, &c.header(), storage);
            assert_eq!(text, annotations_to_string(&scenes, &c.header(), storage));
            let (header, back) = annotations_from_str(&text).unwrap();
            assert_eq!(header, c.header());
            assert_eq!(back, scenes);
        }
        let empty = annotations_to_string(&[], &c.header(), ImageStorage::Render);
        assert!(annotations_from_str(&empty).unwrap().1.is_empty());
    }

    #[test]
    fn dangling_index_names_the_record() {
        let c = cfg();
        let mut scenes = generate_split(&c, 0, 3, "train").unwrap();
        let n = scenes[1].objects.len();
        scenes[1].relations.push(Relation { subject: 0, predicate: 0, object: 9 });
        let text = annotations_to_string(&scenes, &c.header(), ImageStorage::Render);
        match annotations_from_str(&text) {
            Err(Error::Invariant { record, line, message }) => {
                assert_eq!((record, line), (1, 3));
                assert!(message.contains(&format!("object 9 of {n}")), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn large_class_header_is_accepted() {
        let c = GenConfig { object_classes: 150, relation_classes: 50, action_classes: 29, ..cfg() };
        let scenes = generate_split(&c, 0, 5, "train").unwrap();
        let text = annotations_to_string(&scenes, &c.header(), ImageStorage::Render);
        assert_eq!(annotations_from_str(&text).unwrap().1.len(), 5);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(annotations_from_str("").is_err());
        assert!(annotations_from_str("{\"format\":\"other\"}").is_err());
        let c = cfg();
        let scenes = generate_split(&c, 0, 2, "train").unwrap();
        let text = annotations_to_string(&scenes, &c.header(), ImageStorage::Render);
        let truncated: Vec<&str> = text.lines().take(2).collect();
        assert!(annotations_from_str(&truncated.join("\n")).is_err());
        assert!(annotations_from_str(&text.replace("\"label\":", "\"lbl\":")).is_err());
    }
}
