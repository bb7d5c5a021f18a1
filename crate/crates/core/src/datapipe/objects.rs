//! Object extraction and mask generation over the ground-truth scene.

use serde::{Deserialize, Serialize};

use super::world::{SceneSpec, ShapeKind};
use crate::raster::Mask;

/// One captioned object of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    /// Index of the shape in `SceneSpec::shapes`.
    pub id: usize,
    pub kind: ShapeKind,
    pub color: usize,
    pub simple_caption: String,
    pub detailed_caption: String,
    pub confidence: f64,
    pub mask: Option<Mask>,
}

/// Captions emitted for a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCaptions {
    pub global_caption: String,
}

/// "a circle near the top left of the image, colored red, small"
pub fn detailed_caption(kind: &str, region: &str, color: &str, size: &str) -> String {
    format!("a {kind} near the {region} of the image, colored {color}, {size}")
}

/// One record per visible shape, plus the scene's global caption.
pub fn extract_objects(scene: &SceneSpec) -> (Vec<ObjectRecord>, SceneCaptions) {
    let records = scene
        .shapes
        .iter()
        .enumerate()
        .filter(|(i, _)| !scene.visible_mask(*i).is_empty())
        .map(|(i, s)| ObjectRecord {
            id: i,
            kind: s.kind,
            color: s.color,
            simple_caption: s.simple_caption(),
            detailed_caption: detailed_caption(
                s.kind.name(),
                s.region(),
                s.color_name(),
                s.size_word(),
            ),
            confidence: 0.0,
            mask: None,
        })
        .collect();
    let captions = SceneCaptions {
        global_caption: scene.global_caption(),
    };
    (records, captions)
}

/// Attach exact visible masks; confidence is the visible fraction of the
/// shape's footprint. Records below `tau_conf` are dropped.
pub fn gen_masks(scene: &SceneSpec, records: Vec<ObjectRecord>, tau_conf: f64) -> Vec<ObjectRecord> {
    records
        .into_iter()
        .filter_map(|mut r| {
            let visible = scene.visible_mask(r.id);
            let total = scene.shapes[r.id].footprint().count();
            r.confidence = if total == 0 {
                0.0
            } else {
                visible.count() as f64 / total as f64
            };
            r.mask = Some(visible);
            (r.confidence >= tau_conf && r.confidence > 0.0).then_some(r)
        })
        .collect()
}
