//! Procedural scenes with exact symbolic ground truth: a 2×2 grid holding one or two
//! groups of identical shapes, templated captions with a strict parser, single-attribute
//! semantic edits, and a rasterizer.

mod caption;
pub mod dataset;
mod edit;
mod render;
mod vocab;

pub use caption::{caption, caption_words, paraphrase_positive, parse_caption, parse_words, Paraphraser, TEMPLATES};
pub use edit::{applicable_edits, diff, random_edit, semantic_edit, EditKind, EditOp, Field};
pub use render::{positive_image_view, render, Image, RenderParams};
pub use vocab::{Vocab, END, PAD, START, UNK};

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.12, 0.1],
            Color::Green => [0.1, 0.78, 0.2],
            Color::Blue => [0.12, 0.3, 0.95],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn inverse(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Relation of a group in cell `a` to a group in cell `b`, if they share a row or column.
    pub fn between(a: u8, b: u8) -> Option<Relation> {
        let (ra, ca, rb, cb) = (a / 2, a % 2, b / 2, b % 2);
        match (ra == rb, ca == cb) {
            (true, false) => Some(if ca < cb { Relation::LeftOf } else { Relation::RightOf }),
            (false, true) => Some(if ra < rb { Relation::Above } else { Relation::Below }),
            _ => None,
        }
    }
}

pub const MAX_COUNT: u8 = 4;
pub const CELLS: u8 = 4;

/// A group of `count` identical shapes in one cell of the 2×2 grid (cells numbered
/// row-major from the top left).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Group {
    pub shape: Shape,
    pub color: Color,
    pub count: u8,
    pub cell: u8,
}

impl Group {
    /// Same shape, colour and count (placement ignored).
    pub fn same_look(&self, other: &Group) -> bool {
        self.shape == other.shape && self.color == other.color && self.count == other.count
    }
}

/// One group, or two groups sharing a row or column with `relation` describing group 0
/// relative to group 1.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SceneSpec {
    pub groups: Vec<Group>,
    pub relation: Option<Relation>,
}

impl SceneSpec {
    pub fn single(g: Group) -> Self {
        Self { groups: vec![g], relation: None }
    }

    pub fn pair(a: Group, b: Group) -> Result<Self> {
        let relation = Relation::between(a.cell, b.cell);
        let s = Self { groups: vec![a, b], relation };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Scene(m.to_string()));
        match self.groups.as_slice() {
            [g] => {
                if self.relation.is_some() {
                    return bad("relation on a single-group scene");
                }
                check_group(g)
            }
            [a, b] => {
                check_group(a)?;
                check_group(b)?;
                if a.cell == b.cell {
                    return bad("two groups share a cell");
                }
                if a.same_look(b) {
                    return bad("two groups are indistinguishable");
                }
                match (self.relation, Relation::between(a.cell, b.cell)) {
                    (Some(r), Some(expected)) if r == expected => Ok(()),
                    (_, None) => bad("groups must share a row or column"),
                    _ => bad("relation disagrees with cells"),
                }
            }
            _ => bad("scenes hold one or two groups"),
        }
    }

    /// Key shared by every spec that renders to the same picture (group order ignored).
    pub fn canonical_key(&self) -> Vec<Group> {
        let mut g = self.groups.clone();
        g.sort_by_key(|x| x.cell);
        g
    }

    /// Every valid spec, in a fixed order.
    pub fn enumerate() -> Vec<SceneSpec> {
        let mut looks = Vec::new();
        for shape in Shape::ALL {
            for color in Color::ALL {
                for count in 1..=MAX_COUNT {
                    looks.push((shape, color, count));
                }
            }
        }
        let mut out = Vec::new();
        for &(shape, color, count) in &looks {
            for cell in 0..CELLS {
                out.push(SceneSpec::single(Group { shape, color, count, cell }));
            }
        }
        for &(s0, c0, n0) in &looks {
            for &(s1, c1, n1) in &looks {
                if (s0, c0, n0) == (s1, c1, n1) {
                    continue;
                }
                for a in 0..CELLS {
                    for b in 0..CELLS {
                        if a == b || Relation::between(a, b).is_none() {
                            continue;
                        }
                        let ga = Group { shape: s0, color: c0, count: n0, cell: a };
                        let gb = Group { shape: s1, color: c1, count: n1, cell: b };
                        out.push(SceneSpec::pair(ga, gb).expect("enumerated specs are valid"));
                    }
                }
            }
        }
        out
    }
}

fn check_group(g: &Group) -> Result<()> {
    if !(1..=MAX_COUNT).contains(&g.count) {
        return Err(Error::Scene(format!("count {} outside 1..={MAX_COUNT}", g.count)));
    }
    if g.cell >= CELLS {
        return Err(Error::Scene(format!("cell {} outside the 2x2 grid", g.cell)));
    }
    Ok(())
}

fn random_group(rng: &mut crate::rng::Rng, cell: u8) -> Group {
    Group {
        shape: Shape::ALL[rng.random_range(0..3)],
        color: Color::ALL[rng.random_range(0..4)],
        count: rng.random_range(1..=MAX_COUNT),
        cell,
    }
}

/// Number of valid specs with one group, and with two.
pub const SINGLE_SPECS: usize = 3 * 4 * 4 * 4;
pub const PAIR_SPECS: usize = 48 * 47 * 8;

/// Uniform draw over the whole spec space.
pub fn sample_scene(seed: u64) -> SceneSpec {
    let mut rng = crate::rng::rng_for(&[seed, crate::rng::purpose::SCENE]);
    let single = rng.random_range(0..SINGLE_SPECS + PAIR_SPECS) < SINGLE_SPECS;
    sample_with_groups(&mut rng, if single { 1 } else { 2 })
}

/// Uniform draw over specs with exactly `groups` groups.
pub fn sample_scene_with(seed: u64, groups: usize) -> SceneSpec {
    let mut rng = crate::rng::rng_for(&[seed, crate::rng::purpose::SCENE, groups as u64]);
    sample_with_groups(&mut rng, groups)
}

fn sample_with_groups(rng: &mut crate::rng::Rng, groups: usize) -> SceneSpec {
    if groups == 1 {
        let cell = rng.random_range(0..CELLS);
        return SceneSpec::single(random_group(rng, cell));
    }
    // 8 ordered placements sharing a row or column, then two distinct looks.
    loop {
        let a = rng.random_range(0..CELLS);
        let b = rng.random_range(0..CELLS);
        if a == b || Relation::between(a, b).is_none() {
            continue;
        }
        let ga = random_group(rng, a);
        let gb = random_group(rng, b);
        if let Ok(s) = SceneSpec::pair(ga, gb) {
            return s;
        }
    }
}

impl fmt::Display for SceneSpec {
    /// Compact form, e.g. `3-red-circle@0|1-blue-square@1|left-of`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| format!("{}-{}-{}@{}", g.count, g.color.word(), g.shape.word(), g.cell))
            .collect();
        write!(f, "{}", parts.join("|"))?;
        if let Some(r) = self.relation {
            write!(f, "|{}", r.name())?;
        }
        Ok(())
    }
}

impl FromStr for SceneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Scene(format!("cannot parse spec {s:?}"));
        let mut groups = Vec::new();
        let mut relation = None;
        for part in s.split('|') {
            if let Some(r) = Relation::ALL.iter().find(|r| r.name() == part) {
                relation = Some(*r);
                continue;
            }
            let (look, cell) = part.split_once('@').ok_or_else(bad)?;
            let fields: Vec<&str> = look.split('-').collect();
            let [count, color, shape] = fields.as_slice() else { return Err(bad()) };
            groups.push(Group {
                count: count.parse().map_err(|_| bad())?,
                color: *Color::ALL.iter().find(|c| c.word() == *color).ok_or_else(bad)?,
                shape: *Shape::ALL.iter().find(|x| x.word() == *shape).ok_or_else(bad)?,
                cell: cell.parse().map_err(|_| bad())?,
            });
        }
        let spec = SceneSpec { groups, relation };
        spec.validate()?;
        Ok(spec)
    }
}
