use rand::seq::IndexedRandom;

use super::{Color, SceneSpec, Shape, MAX_COUNT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditKind {
    Count,
    Color,
    Shape,
    RelationSwap,
}

/// A single-attribute change. `value` is the new count, or the index into
/// `Color::ALL` / `Shape::ALL`; it is ignored by relation swaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EditOp {
    pub kind: EditKind,
    pub target: usize,
    pub value: u8,
}

/// Independently editable fields of a spec. Cells and relation move together as
/// `Placement`, since a relation is determined by the two cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Field {
    GroupCount,
    Shape(usize),
    Color(usize),
    Count(usize),
    Placement,
}

pub fn diff(a: &SceneSpec, b: &SceneSpec) -> Vec<Field> {
    if a.groups.len() != b.groups.len() {
        return vec![Field::GroupCount];
    }
    let mut out = Vec::new();
    for (i, (x, y)) in a.groups.iter().zip(&b.groups).enumerate() {
        if x.shape != y.shape {
            out.push(Field::Shape(i));
        }
        if x.color != y.color {
            out.push(Field::Color(i));
        }
        if x.count != y.count {
            out.push(Field::Count(i));
        }
    }
    let cells = |s: &SceneSpec| s.groups.iter().map(|g| g.cell).collect::<Vec<_>>();
    if cells(a) != cells(b) || a.relation != b.relation {
        out.push(Field::Placement);
    }
    out
}

pub fn semantic_edit(spec: &SceneSpec, op: EditOp) -> Result<SceneSpec> {
    let bad = |m: String| Err(Error::Scene(format!("inapplicable edit {op:?}: {m}")));
    let mut out = spec.clone();
    match op.kind {
        EditKind::RelationSwap => {
            let Some(rel) = spec.relation else { return bad("scene has no relation".into()) };
            let (a, b) = (out.groups[0].cell, out.groups[1].cell);
            out.groups[0].cell = b;
            out.groups[1].cell = a;
            out.relation = Some(rel.inverse());
        }
        kind => {
            let Some(g) = out.groups.get_mut(op.target) else { return bad("no such group".into()) };
            match kind {
                EditKind::Count => {
                    if !(1..=MAX_COUNT).contains(&op.value) || op.value == g.count {
                        return bad(format!("count {} -> {}", g.count, op.value));
                    }
                    g.count = op.value;
                }
                EditKind::Color => {
                    let Some(&c) = Color::ALL.get(op.value as usize) else { return bad("colour index".into()) };
                    if c == g.color {
                        return bad("colour unchanged".into());
                    }
                    g.color = c;
                }
                EditKind::Shape => {
                    let Some(&s) = Shape::ALL.get(op.value as usize) else { return bad("shape index".into()) };
                    if s == g.shape {
                        return bad("shape unchanged".into());
                    }
                    g.shape = s;
                }
                EditKind::RelationSwap => unreachable!(),
            }
        }
    }
    match out.validate() {
        Ok(()) => Ok(out),
        Err(e) => bad(e.to_string()),
    }
}

/// Every edit applicable to `spec`, in a fixed order.
pub fn applicable_edits(spec: &SceneSpec) -> Vec<EditOp> {
    let mut ops = Vec::new();
    for target in 0..spec.groups.len() {
        for value in 1..=MAX_COUNT {
            ops.push(EditOp { kind: EditKind::Count, target, value });
        }
        for value in 0..Color::ALL.len() as u8 {
            ops.push(EditOp { kind: EditKind::Color, target, value });
        }
        for value in 0..Shape::ALL.len() as u8 {
            ops.push(EditOp { kind: EditKind::Shape, target, value });
        }
    }
    if spec.relation.is_some() {
        ops.push(EditOp { kind: EditKind::RelationSwap, target: 0, value: 0 });
    }
    ops.retain(|op| semantic_edit(spec, *op).is_ok());
    ops
}

/// A uniformly chosen kind of edit (among applicable kinds), then a uniform op of that kind.
pub fn random_edit(spec: &SceneSpec, seed: u64) -> (EditOp, SceneSpec) {
    let mut rng = crate::rng::rng_for(&[seed, crate::rng::purpose::GECO]);
    let ops = applicable_edits(spec);
    let mut kinds: Vec<EditKind> = ops.iter().map(|o| o.kind).collect();
    kinds.dedup();
    let kind = *kinds.choose(&mut rng).expect("every spec admits an edit");
    let of_kind: Vec<&EditOp> = ops.iter().filter(|o| o.kind == kind).collect();
    let op = **of_kind.choose(&mut rng).expect("non-empty");
    let edited = semantic_edit(spec, op).expect("applicable");
    (op, edited)
}
