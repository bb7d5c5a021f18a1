//! Instruction templates, the recaptioning grammar, and the closed word list
//! the toy tokenizer is built from.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::objects::ObjectRecord;
use super::world::{SceneSpec, ShapeKind, BACKGROUND_COLORS, REGIONS, SHAPE_COLORS, SIZE_WORDS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Removal,
    Addition,
    Replacement,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Removal, Task::Addition, Task::Replacement];

    pub fn name(self) -> &'static str {
        match self {
            Task::Removal => "removal",
            Task::Addition => "addition",
            Task::Replacement => "replacement",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionMode {
    Template,
    Simple,
    Advanced,
}

impl InstructionMode {
    pub const ALL: [InstructionMode; 3] = [
        InstructionMode::Template,
        InstructionMode::Simple,
        InstructionMode::Advanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstructionMode::Template => "template",
            InstructionMode::Simple => "simple",
            InstructionMode::Advanced => "advanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        InstructionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown instruction mode {s:?}")))
    }
}

/// Step-3 template instruction. `replacement` names the substitute object.
pub fn template_instruction(task: Task, object: &str, replacement: Option<&str>) -> String {
    match task {
        Task::Removal => format!("remove the {object}."),
        Task::Addition => format!("add the {object}."),
        Task::Replacement => format!(
            "replace the {object} with the {}.",
            replacement.unwrap_or("object")
        ),
    }
}

const SIMPLE_REMOVAL: [&str; 5] = [
    "Remove the {x}.",
    "Delete the {x}.",
    "Erase the {x}.",
    "Take away the {x}.",
    "Get rid of the {x}.",
];
const SIMPLE_ADDITION: [&str; 4] = [
    "Add the {x}.",
    "Insert the {x}.",
    "Put the {x} in the picture.",
    "Place the {x} in the image.",
];
const SIMPLE_REPLACEMENT: [&str; 4] = [
    "Swap the {x} for the {y}.",
    "Change the {x} into the {y}.",
    "Turn the {x} into the {y}.",
    "Swap out the {x} for the {y}.",
];
const DETAILED_REMOVAL: [&str; 2] = ["Remove {d}.", "Please erase {d}."];
const DETAILED_ADDITION: [&str; 2] = ["Add {d}.", "Please insert {d}."];
const DETAILED_REPLACEMENT: [&str; 2] = ["Replace {d} with the {y}.", "Please turn {d} into the {y}."];
const ACTION_REMOVAL: [&str; 2] = ["Remove it.", "Please erase this object."];
const ACTION_REPLACEMENT: [&str; 2] = [
    "Replace it with the {y}.",
    "Please change this object to the {y}.",
];

/// The simple-mode synonym templates for `task`.
pub fn simple_templates(task: Task) -> &'static [&'static str] {
    match task {
        Task::Removal => &SIMPLE_REMOVAL,
        Task::Addition => &SIMPLE_ADDITION,
        Task::Replacement => &SIMPLE_REPLACEMENT,
    }
}

/// A question that singles out one object of a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    Color(usize),
    Kind(ShapeKind),
    Region(&'static str),
    Largest,
    Smallest,
}

impl Query {
    pub fn render(&self) -> String {
        match self {
            Query::Color(c) => format!("What is the {} object?", SHAPE_COLORS[*c].0),
            Query::Kind(k) => format!("Which object is a {}?", k.name()),
            Query::Region(r) => format!("What is in the {r} of the image?"),
            Query::Largest => "What is the largest object?".to_string(),
            Query::Smallest => "What is the smallest object?".to_string(),
        }
    }

    /// The unique shape index answering the query, if exactly one does.
    pub fn resolve(&self, scene: &SceneSpec) -> Option<usize> {
        let sizes: Vec<i32> = scene.shapes.iter().map(|s| s.size).collect();
        let hits: Vec<usize> = scene
            .shapes
            .iter()
            .enumerate()
            .filter(|(i, s)| match self {
                Query::Color(c) => s.color == *c,
                Query::Kind(k) => s.kind == *k,
                Query::Region(r) => s.region() == *r,
                Query::Largest => sizes.iter().all(|&z| z <= s.size),
                Query::Smallest => sizes.iter().all(|&z| z >= s.size),
            } && scene.visible_mask(*i).count() > 0)
            .map(|(i, _)| i)
            .collect();
        let superlative = matches!(self, Query::Largest | Query::Smallest);
        match hits.as_slice() {
            [_] if superlative && scene.shapes.len() < 2 => None,
            [one] => Some(*one),
            _ => None,
        }
    }

    /// Every query that resolves to `index` in `scene`.
    pub fn candidates(scene: &SceneSpec, index: usize) -> Vec<Query> {
        let s = &scene.shapes[index];
        [
            Query::Color(s.color),
            Query::Kind(s.kind),
            Query::Region(s.region()),
            Query::Largest,
            Query::Smallest,
        ]
        .into_iter()
        .filter(|q| q.resolve(scene) == Some(index))
        .collect()
    }
}

fn pick<'a, R: Rng + ?Sized>(options: &[&'a str], rng: &mut R) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn fill(template: &str, x: &str, y: &str, d: &str) -> String {
    template.replace("{x}", x).replace("{y}", y).replace("{d}", d)
}

/// Rewrite a template instruction in `mode`.
///
/// `scene` is the scene that contains the object (the source for removal and
/// replacement, the target for addition); reasoning questions are only used
/// when they resolve to exactly that object there.
pub fn recaption<R: Rng + ?Sized>(
    instruction: &str,
    task: Task,
    record: &ObjectRecord,
    replacement: Option<&str>,
    scene: &SceneSpec,
    mode: InstructionMode,
    rng: &mut R,
) -> String {
    let x = record.simple_caption.as_str();
    let y = replacement.unwrap_or("");
    let d = record.detailed_caption.as_str();
    match mode {
        InstructionMode::Template => instruction.to_string(),
        InstructionMode::Simple => fill(pick(simple_templates(task), rng), x, y, d),
        InstructionMode::Advanced => {
            let queries = if task == Task::Addition {
                Vec::new()
            } else {
                Query::candidates(scene, record.id)
            };
            if !queries.is_empty() && rng.random_bool(0.5) {
                let q = &queries[rng.random_range(0..queries.len())];
                let action = match task {
                    Task::Replacement => pick(&ACTION_REPLACEMENT, rng),
                    _ => pick(&ACTION_REMOVAL, rng),
                };
                format!("{} {}", q.render(), fill(action, x, y, d))
            } else {
                let t = match task {
                    Task::Removal => pick(&DETAILED_REMOVAL, rng),
                    Task::Addition => pick(&DETAILED_ADDITION, rng),
                    Task::Replacement => pick(&DETAILED_REPLACEMENT, rng),
                };
                fill(t, x, y, d)
            }
        }
    }
}

/// Recaption by mode name; rejects anything but `simple` and `advanced`.
pub fn recaption_named<R: Rng + ?Sized>(
    instruction: &str,
    task: Task,
    record: &ObjectRecord,
    replacement: Option<&str>,
    scene: &SceneSpec,
    mode: &str,
    rng: &mut R,
) -> Result<String> {
    let mode = match mode {
        "simple" => InstructionMode::Simple,
        "advanced" => InstructionMode::Advanced,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown recaption mode {other:?}"
            )))
        }
    };
    Ok(recaption(instruction, task, record, replacement, scene, mode, rng))
}

/// Lowercased word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = String::new();
        for ch in raw.chars() {
            if matches!(ch, '.' | ',' | '?' | '!') {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Every word the world's grammar can produce, sorted.
pub fn closed_vocabulary() -> Vec<String> {
    let mut words = BTreeSet::new();
    let mut add = |text: &str| {
        for t in tokenize(&text.replace("{x}", " ").replace("{y}", " ").replace("{d}", " ")) {
            words.insert(t);
        }
    };
    for t in Task::ALL {
        add(&template_instruction(t, "", Some("")));
        for s in simple_templates(t) {
            add(s);
        }
    }
    for s in DETAILED_REMOVAL
        .iter()
        .chain(&DETAILED_ADDITION)
        .chain(&DETAILED_REPLACEMENT)
        .chain(&ACTION_REMOVAL)
        .chain(&ACTION_REPLACEMENT)
    {
        add(s);
    }
    add(&super::objects::detailed_caption("", "", "", ""));
    for (c, _) in SHAPE_COLORS.iter().chain(&BACKGROUND_COLORS) {
        add(c);
    }
    for k in ShapeKind::ALL {
        add(k.name());
    }
    for r in REGIONS {
        add(r);
    }
    for s in SIZE_WORDS {
        add(s);
    }
    for q in [
        Query::Color(0),
        Query::Kind(ShapeKind::Circle),
        Query::Region("center"),
        Query::Largest,
        Query::Smallest,
    ] {
        add(&q.render());
    }
    add("a background with and");
    words.into_iter().collect()
}
