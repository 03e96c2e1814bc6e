//! Closed label schema and the two-level caption grammar.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_SCHEMA_VERSION: &str = "v1";
pub const NUM_CAPTION_VARIANTS: usize = 5;
pub const NO_PARTS_SENTINEL: &str = "an object with no distinct parts";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKey {
    Color,
    Material,
    Texture,
    Function,
}

impl AttributeKey {
    pub const ALL: [AttributeKey; 4] =
        [AttributeKey::Color, AttributeKey::Material, AttributeKey::Texture, AttributeKey::Function];
}

pub struct PaletteColor {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

pub const PALETTE: &[PaletteColor] = &[
    PaletteColor { name: "red", rgb: [0.85, 0.12, 0.10] },
    PaletteColor { name: "green", rgb: [0.15, 0.65, 0.20] },
    PaletteColor { name: "blue", rgb: [0.12, 0.25, 0.85] },
    PaletteColor { name: "yellow", rgb: [0.95, 0.85, 0.15] },
    PaletteColor { name: "white", rgb: [0.95, 0.95, 0.95] },
    PaletteColor { name: "black", rgb: [0.08, 0.08, 0.08] },
    PaletteColor { name: "brown", rgb: [0.50, 0.30, 0.12] },
    PaletteColor { name: "gray", rgb: [0.50, 0.50, 0.50] },
    PaletteColor { name: "orange", rgb: [0.98, 0.55, 0.05] },
    PaletteColor { name: "purple", rgb: [0.55, 0.15, 0.65] },
    PaletteColor { name: "pink", rgb: [0.98, 0.60, 0.75] },
    PaletteColor { name: "teal", rgb: [0.05, 0.55, 0.55] },
];

pub const MATERIALS: &[&str] = &["wood", "metal", "plastic", "fabric", "leather", "glass", "ceramic", "stone"];
pub const TEXTURES: &[&str] = &["smooth", "rough", "glossy", "matte", "woven", "polished"];

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|c| c.name == name).map(|c| c.rgb)
}

/// One part of a class template. Boxes are in the unit object frame `[0,1]^3`
/// (x, y footprint; z up) as `[min_x, min_y, min_z, max_x, max_y, max_z]`.
pub struct PartTemplate {
    pub name: &'static str,
    pub function: &'static str,
    pub boxes: &'static [[f64; 6]],
    pub colors: &'static [&'static str],
    pub materials: &'static [&'static str],
}

pub struct ClassTemplate {
    pub name: &'static str,
    /// base extent in meters (x, y, z)
    pub dims: [f64; 3],
    pub body_color: &'static str,
    pub parts: &'static [PartTemplate],
}

macro_rules! part {
    ($name:expr, $func:expr, $boxes:expr, $colors:expr, $mats:expr) => {
        PartTemplate { name: $name, function: $func, boxes: $boxes, colors: $colors, materials: $mats }
    };
}

const LEGS4: &[[f64; 6]] = &[
    [0.0, 0.0, 0.0, 0.15, 0.15, 0.45],
    [0.85, 0.0, 0.0, 1.0, 0.15, 0.45],
    [0.0, 0.85, 0.0, 0.15, 1.0, 0.45],
    [0.85, 0.85, 0.0, 1.0, 1.0, 0.45],
];
const TABLE_LEGS: &[[f64; 6]] = &[
    [0.0, 0.0, 0.0, 0.1, 0.1, 0.88],
    [0.9, 0.0, 0.0, 1.0, 0.1, 0.88],
    [0.0, 0.9, 0.0, 0.1, 1.0, 0.88],
    [0.9, 0.9, 0.0, 1.0, 1.0, 0.88],
];

const SOFT: &[&str] = &["red", "blue", "green", "gray", "purple", "teal", "pink"];
const WOODY: &[&str] = &["brown", "black", "white", "gray"];
const BRIGHT: &[&str] = &["red", "yellow", "blue", "green", "orange", "white"];
const METALLIC: &[&str] = &["gray", "black", "white"];

pub const CLASSES: &[ClassTemplate] = &[
    ClassTemplate {
        name: "chair",
        dims: [0.16, 0.16, 0.26],
        body_color: "brown",
        parts: &[
            part!("seat", "sitting", &[[0.0, 0.0, 0.45, 1.0, 1.0, 0.55]], SOFT, &["fabric", "leather", "wood"]),
            part!("legs", "support", LEGS4, WOODY, &["wood", "metal"]),
            part!("backrest", "leaning", &[[0.0, 0.85, 0.55, 1.0, 1.0, 1.0]], SOFT, &["fabric", "wood", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "table",
        dims: [0.30, 0.22, 0.20],
        body_color: "brown",
        parts: &[
            part!("top", "placing", &[[0.0, 0.0, 0.88, 1.0, 1.0, 1.0]], WOODY, &["wood", "glass", "stone"]),
            part!("legs", "support", TABLE_LEGS, METALLIC, &["metal", "wood"]),
            part!("shelf", "storage", &[[0.1, 0.1, 0.3, 0.9, 0.9, 0.38]], WOODY, &["wood", "metal"]),
        ],
    },
    ClassTemplate {
        name: "lamp",
        dims: [0.12, 0.12, 0.32],
        body_color: "white",
        parts: &[
            part!("base", "balance", &[[0.1, 0.1, 0.0, 0.9, 0.9, 0.1]], METALLIC, &["metal", "stone", "ceramic"]),
            part!("pole", "height", &[[0.42, 0.42, 0.1, 0.58, 0.58, 0.7]], METALLIC, &["metal", "wood"]),
            part!("shade", "lighting", &[[0.0, 0.0, 0.7, 1.0, 1.0, 1.0]], BRIGHT, &["fabric", "glass", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "sofa",
        dims: [0.34, 0.16, 0.16],
        body_color: "gray",
        parts: &[
            part!("cushions", "sitting", &[[0.12, 0.0, 0.3, 0.88, 0.8, 0.55]], SOFT, &["fabric", "leather"]),
            part!("backrest", "leaning", &[[0.0, 0.8, 0.0, 1.0, 1.0, 1.0]], SOFT, &["fabric", "leather"]),
            part!("armrests", "resting", &[[0.0, 0.0, 0.0, 0.12, 0.8, 0.75], [0.88, 0.0, 0.0, 1.0, 0.8, 0.75]], SOFT, &["fabric", "leather", "wood"]),
            part!("frame", "support", &[[0.12, 0.0, 0.0, 0.88, 0.8, 0.3]], WOODY, &["wood", "metal"]),
        ],
    },
    ClassTemplate {
        name: "bed",
        dims: [0.30, 0.36, 0.14],
        body_color: "white",
        parts: &[
            part!("frame", "support", &[[0.0, 0.0, 0.0, 1.0, 1.0, 0.35]], WOODY, &["wood", "metal"]),
            part!("mattress", "sleeping", &[[0.05, 0.0, 0.35, 0.95, 0.9, 0.6]], &["white", "blue", "gray", "pink"], &["fabric"]),
            part!("headboard", "decoration", &[[0.0, 0.9, 0.35, 1.0, 1.0, 1.0]], WOODY, &["wood", "leather", "fabric"]),
            part!("pillow", "comfort", &[[0.25, 0.7, 0.6, 0.75, 0.88, 0.72]], &["white", "yellow", "pink", "teal"], &["fabric"]),
        ],
    },
    ClassTemplate {
        name: "cabinet",
        dims: [0.20, 0.14, 0.26],
        body_color: "brown",
        parts: &[
            part!("body", "storage", &[[0.0, 0.1, 0.0, 1.0, 1.0, 1.0]], WOODY, &["wood", "metal"]),
            part!("doors", "closing", &[[0.02, 0.0, 0.05, 0.98, 0.1, 0.95]], &["white", "brown", "gray", "blue"], &["wood", "glass", "metal"]),
            part!("handles", "opening", &[[0.4, -0.08, 0.45, 0.6, 0.0, 0.55]], METALLIC, &["metal", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "bookshelf",
        dims: [0.24, 0.12, 0.32],
        body_color: "brown",
        parts: &[
            part!("frame", "support", &[[0.0, 0.0, 0.0, 0.08, 1.0, 1.0], [0.92, 0.0, 0.0, 1.0, 1.0, 1.0]], WOODY, &["wood", "metal"]),
            part!("shelves", "storage", &[[0.08, 0.0, 0.0, 0.92, 1.0, 0.06], [0.08, 0.0, 0.47, 0.92, 1.0, 0.53], [0.08, 0.0, 0.94, 0.92, 1.0, 1.0]], WOODY, &["wood", "glass"]),
            part!("books", "reading", &[[0.12, 0.1, 0.06, 0.6, 0.9, 0.35]], BRIGHT, &["plastic", "fabric"]),
        ],
    },
    ClassTemplate {
        name: "desk",
        dims: [0.30, 0.18, 0.20],
        body_color: "brown",
        parts: &[
            part!("top", "working", &[[0.0, 0.0, 0.88, 1.0, 1.0, 1.0]], WOODY, &["wood", "glass"]),
            part!("legs", "support", &[[0.0, 0.0, 0.0, 0.08, 1.0, 0.88], [0.92, 0.0, 0.0, 1.0, 1.0, 0.88]], METALLIC, &["metal", "wood"]),
            part!("drawer", "storage", &[[0.6, 0.0, 0.6, 0.9, 0.9, 0.88]], WOODY, &["wood", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "monitor",
        dims: [0.20, 0.08, 0.18],
        body_color: "black",
        parts: &[
            part!("screen", "display", &[[0.0, 0.3, 0.35, 1.0, 0.55, 1.0]], &["black", "gray", "white"], &["glass", "plastic"]),
            part!("stand", "height", &[[0.42, 0.4, 0.08, 0.58, 0.6, 0.35]], METALLIC, &["metal", "plastic"]),
            part!("base", "balance", &[[0.25, 0.0, 0.0, 0.75, 1.0, 0.08]], METALLIC, &["metal", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "toilet",
        dims: [0.14, 0.22, 0.2],
        body_color: "white",
        parts: &[
            part!("bowl", "flushing", &[[0.1, 0.0, 0.0, 0.9, 0.7, 0.55]], &["white", "gray", "black"], &["ceramic"]),
            part!("tank", "water", &[[0.0, 0.7, 0.3, 1.0, 1.0, 1.0]], &["white", "gray"], &["ceramic", "plastic"]),
            part!("lid", "covering", &[[0.1, 0.0, 0.55, 0.9, 0.7, 0.62]], &["white", "black", "blue"], &["plastic", "wood"]),
        ],
    },
    ClassTemplate {
        name: "sink",
        dims: [0.20, 0.16, 0.12],
        body_color: "white",
        parts: &[
            part!("basin", "washing", &[[0.0, 0.0, 0.5, 1.0, 0.8, 0.8]], &["white", "gray", "black"], &["ceramic", "stone", "metal"]),
            part!("faucet", "water", &[[0.42, 0.8, 0.5, 0.58, 1.0, 1.0]], METALLIC, &["metal"]),
            part!("cabinet", "storage", &[[0.05, 0.0, 0.0, 0.95, 0.8, 0.5]], WOODY, &["wood", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "bathtub",
        dims: [0.34, 0.18, 0.12],
        body_color: "white",
        parts: &[
            part!("tub", "bathing", &[[0.0, 0.0, 0.0, 1.0, 1.0, 0.8]], &["white", "gray", "pink"], &["ceramic", "stone", "plastic"]),
            part!("faucet", "water", &[[0.45, 0.9, 0.8, 0.55, 1.0, 1.0]], METALLIC, &["metal"]),
            part!("rim", "resting", &[[0.0, 0.0, 0.8, 1.0, 0.08, 0.88]], &["white", "gray", "brown"], &["ceramic", "wood"]),
        ],
    },
    ClassTemplate {
        name: "refrigerator",
        dims: [0.18, 0.18, 0.36],
        body_color: "white",
        parts: &[
            part!("body", "cooling", &[[0.0, 0.1, 0.0, 1.0, 1.0, 1.0]], &["white", "gray", "black", "red"], &["metal", "plastic"]),
            part!("door", "closing", &[[0.0, 0.0, 0.02, 1.0, 0.1, 0.98]], &["white", "gray", "black", "red"], &["metal", "plastic", "glass"]),
            part!("handle", "opening", &[[0.8, -0.08, 0.4, 0.9, 0.0, 0.8]], METALLIC, &["metal", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "door",
        dims: [0.20, 0.04, 0.36],
        body_color: "brown",
        parts: &[
            part!("panel", "closing", &[[0.06, 0.0, 0.0, 0.94, 1.0, 0.96]], &["white", "brown", "gray", "blue", "green"], &["wood", "metal", "glass"]),
            part!("frame", "support", &[[0.0, 0.0, 0.0, 0.06, 1.0, 1.0], [0.94, 0.0, 0.0, 1.0, 1.0, 1.0], [0.06, 0.0, 0.96, 0.94, 1.0, 1.0]], WOODY, &["wood", "metal"]),
            part!("knob", "opening", &[[0.75, -0.6, 0.45, 0.85, 0.0, 0.55]], &["gray", "yellow", "black"], &["metal", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "window",
        dims: [0.24, 0.04, 0.22],
        body_color: "white",
        parts: &[
            part!("frame", "support", &[[0.0, 0.0, 0.0, 1.0, 1.0, 0.08], [0.0, 0.0, 0.92, 1.0, 1.0, 1.0], [0.0, 0.0, 0.08, 0.08, 1.0, 0.92], [0.92, 0.0, 0.08, 1.0, 1.0, 0.92]], &["white", "brown", "black", "gray"], &["wood", "metal", "plastic"]),
            part!("glass", "viewing", &[[0.08, 0.3, 0.08, 0.92, 0.7, 0.92]], &["blue", "teal", "white"], &["glass"]),
            part!("sill", "placing", &[[0.0, -1.0, 0.0, 1.0, 0.0, 0.06]], &["white", "brown", "gray"], &["wood", "stone"]),
        ],
    },
    ClassTemplate {
        name: "stool",
        dims: [0.12, 0.12, 0.22],
        body_color: "brown",
        parts: &[
            part!("seat", "sitting", &[[0.0, 0.0, 0.85, 1.0, 1.0, 1.0]], SOFT, &["wood", "leather", "plastic"]),
            part!("legs", "support", &[[0.0, 0.0, 0.0, 0.15, 0.15, 0.85], [0.85, 0.0, 0.0, 1.0, 0.15, 0.85], [0.42, 0.85, 0.0, 0.58, 1.0, 0.85]], WOODY, &["wood", "metal"]),
            part!("footrest", "resting", &[[0.1, 0.1, 0.3, 0.9, 0.9, 0.36]], METALLIC, &["metal", "wood"]),
        ],
    },
    ClassTemplate {
        name: "bench",
        dims: [0.34, 0.12, 0.16],
        body_color: "brown",
        parts: &[
            part!("seat", "sitting", &[[0.0, 0.0, 0.5, 1.0, 0.8, 0.62]], WOODY, &["wood", "stone", "metal"]),
            part!("legs", "support", &[[0.02, 0.05, 0.0, 0.1, 0.75, 0.5], [0.9, 0.05, 0.0, 0.98, 0.75, 0.5]], METALLIC, &["metal", "stone"]),
            part!("backrest", "leaning", &[[0.0, 0.85, 0.62, 1.0, 1.0, 1.0]], WOODY, &["wood", "metal"]),
        ],
    },
    ClassTemplate {
        name: "plant",
        dims: [0.12, 0.12, 0.26],
        body_color: "green",
        parts: &[
            part!("pot", "holding", &[[0.15, 0.15, 0.0, 0.85, 0.85, 0.35]], &["brown", "white", "orange", "black"], &["ceramic", "plastic", "stone"]),
            part!("leaves", "decoration", &[[0.0, 0.0, 0.5, 1.0, 1.0, 1.0]], &["green", "teal", "yellow"], &["plastic", "fabric"]),
            part!("stem", "growing", &[[0.44, 0.44, 0.35, 0.56, 0.56, 0.5]], &["green", "brown"], &["wood"]),
        ],
    },
    ClassTemplate {
        name: "trashcan",
        dims: [0.10, 0.10, 0.16],
        body_color: "gray",
        parts: &[
            part!("bin", "disposal", &[[0.0, 0.0, 0.0, 1.0, 1.0, 0.88]], &["gray", "black", "blue", "green", "white"], &["plastic", "metal"]),
            part!("lid", "covering", &[[0.0, 0.0, 0.88, 1.0, 1.0, 0.96]], &["gray", "black", "blue", "green", "white"], &["plastic", "metal"]),
            part!("pedal", "opening", &[[0.35, -0.25, 0.0, 0.65, 0.0, 0.06]], METALLIC, &["metal", "plastic"]),
        ],
    },
    ClassTemplate {
        name: "microwave",
        dims: [0.16, 0.12, 0.10],
        body_color: "white",
        parts: &[
            part!("body", "heating", &[[0.0, 0.1, 0.0, 1.0, 1.0, 1.0]], &["white", "black", "gray", "red"], &["metal", "plastic"]),
            part!("door", "closing", &[[0.0, 0.0, 0.05, 0.72, 0.1, 0.95]], &["black", "gray"], &["glass", "metal"]),
            part!("panel", "control", &[[0.75, 0.0, 0.05, 1.0, 0.1, 0.95]], &["black", "gray", "white"], &["plastic", "metal"]),
        ],
    },
];

pub fn class_template(name: &str) -> Option<&'static ClassTemplate> {
    CLASSES.iter().find(|c| c.name == name)
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASSES.iter().position(|c| c.name == name)
}

pub fn num_classes() -> usize {
    CLASSES.len()
}

const COUNT_WORDS: &[&str] = &["no", "one", "two", "three", "four", "five", "six"];

pub fn count_word(n: usize) -> &'static str {
    COUNT_WORDS.get(n).copied().unwrap_or("many")
}

pub fn size_word(scale: f64) -> &'static str {
    if scale < 0.93 {
        "small"
    } else if scale > 1.1 {
        "large"
    } else {
        "medium"
    }
}

/// Attribute content of one part as seen by the caption grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct PartContent<'a> {
    pub name: &'a str,
    pub attributes: &'a BTreeMap<AttributeKey, String>,
}

/// Everything the grammar needs to caption one object.
#[derive(Debug, Clone)]
pub struct ObjectContent<'a> {
    pub class_label: &'a str,
    pub size: &'a str,
    pub color_summary: &'a str,
    pub parts: Vec<PartContent<'a>>,
}

/// The closed grammar: templates plus the terminal vocabulary they may emit.
#[derive(Debug, Clone)]
pub struct CaptionGrammar {
    pub max_tokens: usize,
}

impl Default for CaptionGrammar {
    fn default() -> Self {
        Self { max_tokens: 32 }
    }
}

const OBJECT_TEMPLATES: &[&str] = &[
    "a {size} {color} {class} with {count} {parts}",
    "a {size} {color} {class} that has {count} {parts}",
    "this {size} {color} {class} has {count} {parts}",
    "a {color} {class} of {size} size with {count} {parts}",
    "a {size} {class} in {color} featuring {count} {parts}",
    "there is a {size} {color} {class} with {count} {parts}",
    "a {color} {size} {class} having {count} {parts}",
];

const FUNCTION_PHRASES: &[&str] = &["for", "used for", "meant for"];
const CLAUSE_JOINERS: &[&str] = &["and", "and also"];

impl CaptionGrammar {
    /// Every token the grammar can emit.
    pub fn terminals(&self) -> BTreeSet<String> {
        let mut t = BTreeSet::new();
        let mut add = |s: &str| {
            for w in s.split_whitespace() {
                if !w.starts_with('{') {
                    t.insert(w.to_string());
                }
            }
        };
        for tpl in OBJECT_TEMPLATES {
            add(tpl);
        }
        for p in FUNCTION_PHRASES.iter().chain(CLAUSE_JOINERS) {
            add(p);
        }
        add(NO_PARTS_SENTINEL);
        add("a part parts");
        for w in COUNT_WORDS.iter().chain(&["many", "small", "medium", "large"]) {
            add(w);
        }
        for c in PALETTE {
            add(c.name);
        }
        for m in MATERIALS.iter().chain(TEXTURES) {
            add(m);
        }
        for c in CLASSES {
            add(c.name);
            for p in c.parts {
                add(p.name);
                add(p.function);
            }
        }
        t
    }

    fn check_vocab(&self, content: &ObjectContent) -> Result<()> {
        let terminals = self.terminals();
        let check = |what: &str, w: &str| {
            if w.split_whitespace().all(|tok| terminals.contains(tok)) && !w.is_empty() {
                Ok(())
            } else {
                Err(Error::Generation(format!("{what} {w:?} is outside the caption grammar")))
            }
        };
        check("class", content.class_label)?;
        check("size", content.size)?;
        check("color", content.color_summary)?;
        for p in &content.parts {
            check("part", p.name)?;
            for key in AttributeKey::ALL {
                let v = p
                    .attributes
                    .get(&key)
                    .ok_or_else(|| Error::Generation(format!("part {} lacks attribute {key:?}", p.name)))?;
                check("attribute", v)?;
            }
            for k in p.attributes.keys() {
                if !AttributeKey::ALL.contains(k) {
                    return Err(Error::Generation(format!("unknown attribute key {k:?}")));
                }
            }
        }
        Ok(())
    }

    fn object_caption(&self, c: &ObjectContent, template: &str) -> String {
        let n = c.parts.len();
        let parts_word = if n == 1 { "part" } else { "parts" };
        template
            .replace("{size}", c.size)
            .replace("{color}", c.color_summary)
            .replace("{class}", c.class_label)
            .replace("{count}", count_word(n))
            .replace("{parts}", parts_word)
    }

    fn part_clause(p: &PartContent, phrase: &str) -> String {
        let a = |k| p.attributes[&k].as_str();
        format!(
            "a {} {} {} {} {} {}",
            a(AttributeKey::Texture),
            a(AttributeKey::Color),
            a(AttributeKey::Material),
            p.name,
            phrase,
            a(AttributeKey::Function)
        )
    }

    fn part_caption(&self, c: &ObjectContent, order: &[usize], phrase: &str, joiner: &str) -> String {
        if c.parts.is_empty() {
            return NO_PARTS_SENTINEL.to_string();
        }
        order
            .iter()
            .map(|&i| Self::part_clause(&c.parts[i], phrase))
            .collect::<Vec<_>>()
            .join(&format!(" {joiner} "))
    }

    fn fits(&self, s: &str) -> bool {
        s.split_whitespace().count() <= self.max_tokens
    }

    /// Canonical captions plus `NUM_CAPTION_VARIANTS - 1` seeded surface variants.
    ///
    /// Variant 0 is seed-independent. All variants carry the same attribute content.
    pub fn synthesize<R: Rng>(&self, content: &ObjectContent, rng: &mut R) -> Result<Vec<CaptionPair>> {
        self.check_vocab(content)?;
        let canonical_order: Vec<usize> = (0..content.parts.len()).collect();
        let obj0 = self.object_caption(content, OBJECT_TEMPLATES[0]);
        let part0 = self.part_caption(content, &canonical_order, FUNCTION_PHRASES[0], CLAUSE_JOINERS[0]);
        if !self.fits(&obj0) || !self.fits(&part0) {
            return Err(Error::Generation(format!(
                "canonical caption exceeds {} tokens for a {} with {} parts",
                self.max_tokens,
                content.class_label,
                content.parts.len()
            )));
        }
        let mut out = vec![CaptionPair { object_caption: obj0, part_caption: part0 }];
        let mut templates: Vec<&str> = OBJECT_TEMPLATES[1..].to_vec();
        templates.shuffle(rng);
        for k in 1..NUM_CAPTION_VARIANTS {
            let obj = self.object_caption(content, templates[(k - 1) % templates.len()]);
            let mut part = String::new();
            // a few attempts to find a variant within the length budget
            for _ in 0..16 {
                let mut order = canonical_order.clone();
                order.shuffle(rng);
                let phrase = FUNCTION_PHRASES[rng.gen_range(0..FUNCTION_PHRASES.len())];
                let joiner = CLAUSE_JOINERS[rng.gen_range(0..CLAUSE_JOINERS.len())];
                part = self.part_caption(content, &order, phrase, joiner);
                if self.fits(&part) {
                    break;
                }
                part = self.part_caption(content, &order, FUNCTION_PHRASES[0], CLAUSE_JOINERS[0]);
            }
            out.push(CaptionPair { object_caption: obj, part_caption: part });
        }
        Ok(out)
    }
}

/// Object-level and part-level caption of one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub object_caption: String,
    pub part_caption: String,
}
