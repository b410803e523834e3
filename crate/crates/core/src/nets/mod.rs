//! Teacher CNN and student ViT.

mod params;
mod student;
mod teacher;

pub use params::{is_buffer, Bound, Checkpoint, Params, CHECKPOINT_MAGIC};
pub use student::{
    student_forward, student_infer, StudentForward, StudentOutputs, VitConfig, LN_EPS, SPECIAL_TOKENS,
};
pub use teacher::{
    teacher_forward, teacher_infer, update_running_stats, BatchStats, NormMode, TeacherConfig,
    TeacherForward, TeacherOutputs, BN_EPS, BN_MOMENTUM,
};

use crate::error::{Error, Result};

/// Checks that the student's patch grid is exactly twice the teacher's feature grid.
pub fn check_grid_ratio(teacher: &TeacherConfig, student: &VitConfig) -> Result<()> {
    let (tg, sg) = (teacher.feature_grid(), student.grid());
    if sg != 2 * tg {
        return Err(Error::Config(format!(
            "student patch grid {sg}x{sg} must be twice the teacher grid {tg}x{tg}"
        )));
    }
    if teacher.num_classes != student.num_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes, student {}",
            teacher.num_classes, student.num_classes
        )));
    }
    Ok(())
}
