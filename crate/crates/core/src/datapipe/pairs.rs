//! Edit-pair construction with closed-mask blending.

use rand::Rng;

use super::grammar::{template_instruction, InstructionMode, Task};
use super::morph::morph_close;
use super::objects::ObjectRecord;
use super::scorer::QualityScores;
use super::world::{SceneSpec, ShapeKind, SHAPE_COLORS};
use crate::error::{Error, Result};
use crate::raster::{Mask, RasterImage};

/// One source/target/instruction triple.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSample {
    /// `s{seed}_o{object}_{task}`; shared by every instruction variant.
    pub pair_id: String,
    pub task: Task,
    pub mode: InstructionMode,
    pub source: RasterImage,
    pub target: RasterImage,
    /// Closed blending mask.
    pub mask: Mask,
    pub instruction: String,
    pub seed: u64,
    pub object_id: usize,
    pub object: String,
    pub replacement: Option<String>,
    pub scores: Option<QualityScores>,
}

impl EditSample {
    /// Row identifier including the instruction mode.
    pub fn id(&self) -> String {
        format!("{}_{}", self.pair_id, self.mode.name())
    }

    pub fn with_instruction(&self, mode: InstructionMode, instruction: String) -> EditSample {
        EditSample {
            mode,
            instruction,
            ..self.clone()
        }
    }

    /// Number of pixels that differ between source and target outside the mask.
    pub fn outside_mask_differences(&self) -> usize {
        let mut n = 0;
        for y in 0..self.mask.height() {
            for x in 0..self.mask.width() {
                if !self.mask.get(x, y) && self.source.pixel(x, y) != self.target.pixel(x, y) {
                    n += 1;
                }
            }
        }
        n
    }
}

pub fn pair_id(seed: u64, object_id: usize, task: Task) -> String {
    format!("s{seed:06}_o{object_id}_{}", task.name())
}

/// A random (kind, color) differing from every shape already in the scene.
pub fn propose_replacement<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R) -> (ShapeKind, usize) {
    let free: Vec<(ShapeKind, usize)> = ShapeKind::ALL
        .into_iter()
        .flat_map(|k| (0..SHAPE_COLORS.len()).map(move |c| (k, c)))
        .filter(|&(k, c)| !scene.shapes.iter().any(|s| s.kind == k && s.color == c))
        .collect();
    free[rng.random_range(0..free.len())]
}

fn visible(scene: &SceneSpec, record: &ObjectRecord) -> Mask {
    record
        .mask
        .clone()
        .unwrap_or_else(|| scene.visible_mask(record.id))
}

fn sample(
    scene: &SceneSpec,
    record: &ObjectRecord,
    task: Task,
    source: RasterImage,
    target: RasterImage,
    mask: Mask,
    replacement: Option<String>,
) -> EditSample {
    EditSample {
        pair_id: pair_id(scene.seed, record.id, task),
        task,
        mode: InstructionMode::Template,
        source,
        target,
        mask,
        instruction: template_instruction(task, &record.simple_caption, replacement.as_deref()),
        seed: scene.seed,
        object_id: record.id,
        object: record.simple_caption.clone(),
        replacement,
        scores: None,
    }
}

/// Replace the object with an explicit substitute.
pub fn build_replacement(
    scene: &SceneSpec,
    record: &ObjectRecord,
    kind: ShapeKind,
    color: usize,
    radius: usize,
) -> Result<EditSample> {
    let original = &scene.shapes[record.id];
    if original.kind == kind && original.color == color {
        return Err(Error::InvalidArgument(format!(
            "replacement for {} is the object itself",
            original.simple_caption()
        )));
    }
    let edited = scene.replaced(record.id, kind, color);
    let mask = morph_close(&visible(scene, record).union(&edited.visible_mask(record.id)), radius);
    let source = scene.render();
    let target = source.composite(&edited.render(), &mask)?;
    let name = edited.shapes[record.id].simple_caption();
    Ok(sample(scene, record, Task::Replacement, source, target, mask, Some(name)))
}

/// Build the template-mode sample for `task`. The blending mask is the
/// closed visible mask; outside it the target copies the source exactly.
pub fn build_edit_pair<R: Rng + ?Sized>(
    scene: &SceneSpec,
    record: &ObjectRecord,
    task: Task,
    radius: usize,
    rng: &mut R,
) -> Result<EditSample> {
    match task {
        Task::Removal | Task::Addition => {
            let mask = morph_close(&visible(scene, record), radius);
            let with_object = scene.render();
            let without = with_object.composite(&scene.without(record.id).render(), &mask)?;
            let (source, target) = if task == Task::Removal {
                (with_object, without)
            } else {
                (without, with_object)
            };
            Ok(sample(scene, record, task, source, target, mask, None))
        }
        Task::Replacement => {
            let (kind, color) = propose_replacement(scene, rng);
            build_replacement(scene, record, kind, color, radius)
        }
    }
}
