//! Dual regression: subject time courses from group maps, then subject maps
//! from those time courses. The spatial regression runs on spatially
//! demeaned data and group maps, so an offset in either does not leak
//! between components.

use crate::error::{Result, TicaError};
use crate::linalg::lstsq;
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct DualRegResult {
    /// T×L subject time courses.
    pub mixing: Matrix,
    /// L×V subject maps.
    pub sources: Matrix,
}

pub fn dual_regress(x: &Matrix, s_grp: &Matrix) -> Result<DualRegResult> {
    if x.ncols() != s_grp.ncols() {
        return Err(TicaError::DimensionMismatch(format!(
            "data have {} locations, group maps have {}",
            x.ncols(),
            s_grp.ncols()
        )));
    }
    let mixing_t = lstsq(
        &spatially_centered(s_grp).transpose(),
        &spatially_centered(x).transpose(),
        "group maps",
    )?;
    let mixing = mixing_t.transpose();
    let sources = lstsq(&mixing, x, "subject time courses")?;
    Ok(DualRegResult { mixing, sources })
}

fn spatially_centered(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}
