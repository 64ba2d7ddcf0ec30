//! Knowledge-distillation losses with a verifying gradient tape, a toy
//! teacher/student training harness, calibration and selective-prediction
//! metrics, ANLS scoring, and layout-aware document prompt construction.

pub mod enrich;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod kd;
pub mod metrics;
pub mod tensor;
pub mod toy;
