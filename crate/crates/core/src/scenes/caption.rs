use rand::Rng as _;

use super::vocab::Vocab;
use super::{Color, Group, Relation, SceneSpec, Shape};
use crate::error::{Error, Result};

/// Surface templates per scene kind.
pub const TEMPLATES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Part {
    Lit(&'static str),
    /// count colour shape(s) of group i
    Group(usize),
    /// "is"/"are" agreeing with group i
    Be(usize),
    /// "top left" etc. for a single group
    Loc,
    /// "top row", "left column" for a pair
    Line,
    Rel,
}

use Part::*;

const SINGLE: [&[Part]; TEMPLATES] = [
    &[Group(0), Lit("in"), Lit("the"), Loc],
    &[Lit("there"), Be(0), Group(0), Lit("in"), Lit("the"), Loc],
    &[Lit("the"), Loc, Lit("has"), Group(0)],
];

const PAIR: [&[Part]; TEMPLATES] = [
    &[Group(0), Rel, Group(1), Lit("in"), Lit("the"), Line],
    &[Lit("in"), Lit("the"), Line, Lit("there"), Be(0), Group(0), Rel, Group(1)],
    &[Lit("the"), Line, Lit("shows"), Group(0), Rel, Group(1)],
];

const COUNTS: [&str; 4] = ["one", "two", "three", "four"];

const SYNONYMS: &[(&str, &str)] = &[
    ("red", "crimson"),
    ("green", "emerald"),
    ("blue", "azure"),
    ("yellow", "golden"),
    ("circle", "disk"),
    ("circles", "disks"),
    ("square", "box"),
    ("squares", "boxes"),
    ("above", "over"),
    ("below", "under"),
    ("top", "upper"),
    ("bottom", "lower"),
];

fn canonical(word: &str) -> &str {
    SYNONYMS.iter().find(|(_, s)| *s == word).map(|(c, _)| *c).unwrap_or(word)
}

fn shape_word(shape: Shape, count: u8) -> &'static str {
    match (shape, count == 1) {
        (Shape::Circle, true) => "circle",
        (Shape::Circle, false) => "circles",
        (Shape::Square, true) => "square",
        (Shape::Square, false) => "squares",
        (Shape::Triangle, true) => "triangle",
        (Shape::Triangle, false) => "triangles",
    }
}

fn vertical(row: u8) -> &'static str {
    if row == 0 {
        "top"
    } else {
        "bottom"
    }
}

fn horizontal(col: u8) -> &'static str {
    if col == 0 {
        "left"
    } else {
        "right"
    }
}

fn fill(spec: &SceneSpec, template: usize) -> Vec<&'static str> {
    let parts = if spec.groups.len() == 1 { SINGLE[template] } else { PAIR[template] };
    let mut out = Vec::with_capacity(16);
    for part in parts {
        match *part {
            Lit(w) => out.push(w),
            Group(i) => {
                let g = spec.groups[i];
                out.extend([COUNTS[g.count as usize - 1], g.color.word(), shape_word(g.shape, g.count)]);
            }
            Be(i) => out.push(if spec.groups[i].count == 1 { "is" } else { "are" }),
            Loc => {
                let c = spec.groups[0].cell;
                out.extend([vertical(c / 2), horizontal(c % 2)]);
            }
            Line => {
                let (a, b) = (spec.groups[0].cell, spec.groups[1].cell);
                if a / 2 == b / 2 {
                    out.extend([vertical(a / 2), "row"]);
                } else {
                    out.extend([horizontal(a % 2), "column"]);
                }
            }
            Rel => match spec.relation.expect("pairs carry a relation") {
                Relation::LeftOf => out.extend(["left", "of"]),
                Relation::RightOf => out.extend(["right", "of"]),
                Relation::Above => out.push("above"),
                Relation::Below => out.push("below"),
            },
        }
    }
    out
}

/// Caption words for `spec` using template `template_seed % TEMPLATES`.
pub fn caption_words(spec: &SceneSpec, template_seed: u64) -> Vec<&'static str> {
    fill(spec, (template_seed % TEMPLATES as u64) as usize)
}

pub fn caption(spec: &SceneSpec, template_seed: u64) -> Vec<u32> {
    Vocab::shared().encode(&caption_words(spec, template_seed))
}

#[derive(Default)]
struct Partial {
    looks: [Option<(Shape, Color, u8)>; 2],
    be: Option<bool>,
    loc: Option<u8>,
    /// (is_row, index)
    line: Option<(bool, u8)>,
    rel: Option<Relation>,
}

fn take_group<'a>(w: &[&'a str]) -> Option<((Shape, Color, u8), usize)> {
    let count = COUNTS.iter().position(|c| Some(c) == w.first())? as u8 + 1;
    let color = *Color::ALL.iter().find(|c| Some(&c.word()) == w.get(1))?;
    let shape = *Shape::ALL.iter().find(|s| Some(&shape_word(**s, count)) == w.get(2))?;
    Some(((shape, color, count), 3))
}

fn match_template(words: &[&str], parts: &[Part]) -> Option<Partial> {
    let mut p = Partial::default();
    let mut k = 0;
    for part in parts {
        let rest = &words[k.min(words.len())..];
        let used = match *part {
            Lit(w) => (rest.first() == Some(&w)).then_some(1)?,
            Group(i) => {
                let (look, n) = take_group(rest)?;
                p.looks[i] = Some(look);
                n
            }
            Be(_) => {
                p.be = Some(match rest.first() {
                    Some(&"is") => true,
                    Some(&"are") => false,
                    _ => return None,
                });
                1
            }
            Loc => {
                let r = ["top", "bottom"].iter().position(|w| Some(w) == rest.first())? as u8;
                let c = ["left", "right"].iter().position(|w| Some(w) == rest.get(1))? as u8;
                p.loc = Some(2 * r + c);
                2
            }
            Line => {
                let first = rest.first()?;
                match rest.get(1) {
                    Some(&"row") => p.line = Some((true, ["top", "bottom"].iter().position(|w| w == first)? as u8)),
                    Some(&"column") => p.line = Some((false, ["left", "right"].iter().position(|w| w == first)? as u8)),
                    _ => return None,
                }
                2
            }
            Rel => match rest {
                ["left", "of", ..] => {
                    p.rel = Some(Relation::LeftOf);
                    2
                }
                ["right", "of", ..] => {
                    p.rel = Some(Relation::RightOf);
                    2
                }
                ["above", ..] => {
                    p.rel = Some(Relation::Above);
                    1
                }
                ["below", ..] => {
                    p.rel = Some(Relation::Below);
                    1
                }
                _ => return None,
            },
        };
        k += used;
    }
    (k == words.len()).then_some(p)
}

fn assemble(p: Partial, pair: bool) -> Option<SceneSpec> {
    let group = |look: (Shape, Color, u8), cell| Group { shape: look.0, color: look.1, count: look.2, cell };
    let first = p.looks[0]?;
    if let Some(is_singular) = p.be {
        if is_singular != (first.2 == 1) {
            return None;
        }
    }
    let spec = if !pair {
        SceneSpec::single(group(first, p.loc?))
    } else {
        let (is_row, idx) = p.line?;
        let rel = p.rel?;
        let (a, b) = match (rel, is_row) {
            (Relation::LeftOf, true) => (2 * idx, 2 * idx + 1),
            (Relation::RightOf, true) => (2 * idx + 1, 2 * idx),
            (Relation::Above, false) => (idx, 2 + idx),
            (Relation::Below, false) => (2 + idx, idx),
            _ => return None,
        };
        SceneSpec::pair(group(first, a), group(p.looks[1]?, b)).ok()?
    };
    spec.validate().ok().map(|_| spec)
}

/// Parses caption words (synonyms allowed); returns the spec and the template it matched.
pub(crate) fn parse_with_template(words: &[&str]) -> Option<(SceneSpec, usize)> {
    let norm: Vec<&str> = words.iter().map(|w| canonical(w)).collect();
    for (pair, table) in [(false, &SINGLE), (true, &PAIR)] {
        for (t, parts) in table.iter().enumerate() {
            if let Some(spec) = match_template(&norm, parts).and_then(|p| assemble(p, pair)) {
                return Some((spec, t));
            }
        }
    }
    None
}

pub fn parse_words(words: &[&str]) -> Option<SceneSpec> {
    parse_with_template(words).map(|(s, _)| s)
}

/// Inverse of [`caption`]; `None` for anything no template produces.
pub fn parse_caption(tokens: &[u32]) -> Option<SceneSpec> {
    let words = Vocab::shared().decode(tokens).ok()?;
    parse_words(&words)
}

/// Controls the paraphrase tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Paraphraser {
    /// Number of templates to choose from (1 disables re-templating).
    pub templates: usize,
    /// Probability that each word with a synonym is replaced by it.
    pub synonym_rate: f64,
}

impl Default for Paraphraser {
    fn default() -> Self {
        Self { templates: TEMPLATES, synonym_rate: 0.5 }
    }
}

/// Re-captions the parsed scene with a different template and random synonyms, keeping
/// the group order so the parse is unchanged. Falls back to the input when the tables
/// leave no alternative.
pub fn paraphrase_positive(tokens: &[u32], seed: u64, para: &Paraphraser) -> Result<Vec<u32>> {
    let vocab = Vocab::shared();
    let words = vocab.decode(tokens)?;
    let (spec, current) = parse_with_template(&words).ok_or_else(|| Error::Scene("paraphrase of an unparseable caption".into()))?;
    let n = para.templates.clamp(1, TEMPLATES);
    let mut rng = crate::rng::rng_for(&[seed, crate::rng::purpose::CAPTION]);
    let template = if n == 1 {
        0
    } else if current < n {
        (current + 1 + rng.random_range(0..n - 1)) % n
    } else {
        rng.random_range(0..n)
    };
    let mut out = fill(&spec, template);
    if para.synonym_rate > 0.0 {
        for w in out.iter_mut() {
            if let Some((_, syn)) = SYNONYMS.iter().find(|(c, _)| c == w) {
                if rng.random_bool(para.synonym_rate.min(1.0)) {
                    *w = syn;
                }
            }
        }
    }
    let out = vocab.encode(&out);
    if parse_caption(&out).as_ref() != Some(&spec) {
        return Ok(tokens.to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: &str) -> SceneSpec {
        s.parse().unwrap()
    }

    #[test]
    fn surface_forms() {
        let s = spec("1-red-circle@0");
        assert_eq!(caption_words(&s, 0).join(" "), "one red circle in the top left");
        assert_eq!(caption_words(&s, 1).join(" "), "there is one red circle in the top left");
        let p = spec("3-red-circle@2|1-blue-square@0|below");
        assert_eq!(caption_words(&p, 0).join(" "), "three red circles below one blue square in the left column");
        assert_eq!(caption_words(&p, 2).join(" "), "the left column shows three red circles below one blue square");
    }

    #[test]
    fn rejects_garbage_and_disagreement() {
        assert!(parse_words(&["red", "red", "red"]).is_none());
        assert!(parse_words(&["one", "red", "circles", "in", "the", "top", "left"]).is_none());
        assert!(parse_words(&["there", "are", "one", "red", "circle", "in", "the", "top", "left"]).is_none());
        assert!(parse_words(&["one", "red", "circle", "left", "of", "two", "blue", "squares", "in", "the", "left", "column"]).is_none());
        assert!(parse_words(&[]).is_none());
    }

    #[test]
    fn synonyms_parse_to_the_same_spec() {
        let w = ["two", "crimson", "boxes", "over", "one", "azure", "disk", "in", "the", "right", "column"];
        assert_eq!(parse_words(&w), Some(spec("2-red-square@1|1-blue-circle@3|above")));
    }
}
