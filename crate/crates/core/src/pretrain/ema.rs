use crate::tensor::ParamStore;

use super::PretrainError;

/// `teacher ← m·teacher + (1−m)·student`, parameter by parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<(), PretrainError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(PretrainError::Momentum(m));
    }
    if teacher.len() != student.len() {
        return Err(PretrainError::Mismatch(format!("{} vs {} parameters", teacher.len(), student.len())));
    }
    for (id, name, s) in student.iter() {
        let t = teacher.get_mut(id);
        if t.shape() != s.shape() {
            return Err(PretrainError::Mismatch(name.to_string()));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}
