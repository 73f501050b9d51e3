use crate::error::{invalid, Result};
use crate::models::Params;
use crate::tensor::Real;

/// Momentum schedule of the EMA teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmaSchedule {
    Constant(f64),
    /// Cosine ramp from `start` at step 0 to `end` at the last step.
    Cosine { start: f64, end: f64 },
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule::Cosine { start: 0.992, end: 1.0 }
    }
}

impl EmaSchedule {
    pub fn momentum(&self, step: u64, total: u64) -> f64 {
        match *self {
            EmaSchedule::Constant(m) => m,
            EmaSchedule::Cosine { start, end } => {
                let frac = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
                end - (end - start) * ((std::f64::consts::PI * frac.min(1.0)).cos() + 1.0) / 2.0
            }
        }
    }
}

/// The teacher: parameter snapshot of the student image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T> {
    pub params: Params<T>,
}

impl<T: Real> TeacherState<T> {
    /// Copies every `vision.*` tensor of the student.
    pub fn from_student(student: &Params<T>) -> Self {
        Self { params: student.subset("vision.") }
    }
}

/// `θ_T ← m·θ_T + (1−m)·θ_S` for every teacher tensor, matched by name.
///
/// `m` may be 1 (the end of a cosine ramp), which leaves the teacher unchanged.
pub fn ema_update<T: Real>(teacher: &mut TeacherState<T>, student: &Params<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid("ema_update", format!("momentum {m} outside [0, 1]")));
    }
    for (name, t) in teacher.params.iter() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(invalid("ema_update", format!("shape mismatch for {name}: {:?} vs {:?}", t.shape(), s.shape())));
        }
    }
    let (mt, ms) = (T::of(m), T::of(1.0 - m));
    for (name, t) in teacher.params.iter_mut() {
        let s = student.get(name)?;
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = mt * *a + ms * b;
        }
    }
    Ok(())
}
