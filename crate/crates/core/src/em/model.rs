//! Parameter containers, fit options and results.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TicaError};
use crate::matrix::{read_matrix, write_matrix, Matrix, MatrixFormat};
use crate::mog::MogParams;
use crate::template::Template;

/// Parameters `θ = (A, ν₀², MoG)` of the reduced model. `a1` mixes the
/// template sources and `a2` the nuisance sources; both have `Q` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaState {
    pub a1: Matrix,
    pub a2: Matrix,
    pub nu0_sq: f64,
    /// One mixture per nuisance source, activation component last.
    pub mog: Vec<MogParams>,
}

impl ThetaState {
    pub fn q(&self) -> usize {
        self.a1.nrows()
    }

    pub fn l(&self) -> usize {
        self.a1.ncols()
    }

    pub fn q_prime(&self) -> usize {
        self.a2.ncols()
    }

    /// `[a1 | a2]`.
    pub fn mixing(&self) -> Matrix {
        let mut a = Matrix::zeros(self.q(), self.l() + self.q_prime());
        a.columns_mut(0, self.l()).copy_from(&self.a1);
        a.columns_mut(self.l(), self.q_prime()).copy_from(&self.a2);
        a
    }
}

/// Template prior used inside the fit. Rows of the mean are spatially
/// centred and every component is scaled to unit mean square, matching the
/// scale of sources under whitened data and an orthonormal mixing matrix.
#[derive(Debug, Clone)]
pub struct PreparedTemplate {
    pub mean: Matrix,
    /// Floored prior variance in the same units as `mean`.
    pub var: Matrix,
    /// Per-component scale `k_q`; internal units times `k_q` give template units.
    pub scale: Vec<f64>,
    /// Spatial mean of each original template mean row.
    pub offset: Vec<f64>,
}

impl PreparedTemplate {
    pub fn new(template: &Template) -> Result<Self> {
        template.validate()?;
        let var = template.floored_variance();
        let (l, v) = (template.l(), template.v());
        let mut mean = template.mean.clone();
        let mut scaled_var = var;
        let mut scale = Vec::with_capacity(l);
        let mut offset = Vec::with_capacity(l);
        for q in 0..l {
            let mu = mean.row(q).sum() / v as f64;
            mean.row_mut(q).add_scalar_mut(-mu);
            let spread = mean.row(q).map(|x| x * x).sum() / v as f64;
            let ms = spread + scaled_var.row(q).sum() / v as f64;
            if !(spread > 0.0) || !ms.is_finite() {
                return Err(TicaError::DegenerateInput(format!(
                    "template component {q} has no spatial variation"
                )));
            }
            let k = ms.sqrt();
            mean.row_mut(q).scale_mut(1.0 / k);
            scaled_var.row_mut(q).scale_mut(1.0 / (k * k));
            scale.push(k);
            offset.push(mu);
        }
        Ok(PreparedTemplate {
            mean,
            var: scaled_var,
            scale,
            offset,
        })
    }

    pub fn l(&self) -> usize {
        self.mean.nrows()
    }

    pub fn v(&self) -> usize {
        self.mean.ncols()
    }

    pub(crate) fn restore_mean(&self, internal: &Matrix) -> Matrix {
        let mut out = internal.clone();
        for q in 0..self.l() {
            let (k, mu) = (self.scale[q], self.offset[q]);
            out.row_mut(q).apply(|x| *x = *x * k + mu);
        }
        out
    }

    pub(crate) fn to_internal(&self, mean: &Matrix) -> Matrix {
        let mut out = mean.clone();
        for q in 0..self.l() {
            let (k, mu) = (self.scale[q], self.offset[q]);
            out.row_mut(q).apply(|x| *x = (*x - mu) / k);
        }
        out
    }

    pub(crate) fn restore_var(&self, internal: &Matrix) -> Matrix {
        let mut out = internal.clone();
        for q in 0..self.l() {
            out.row_mut(q).scale_mut(self.scale[q] * self.scale[q]);
        }
        out
    }
}

/// Prior on the template sources at one location.
#[derive(Debug, Clone, Copy)]
pub struct TemplateSlice<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Bound on the largest change in any posterior template mean.
    pub mean_tol: f64,
    /// Bound on the relative change of `ν₀²`.
    pub nu_tol: f64,
    pub orthogonalize: bool,
    /// Mixture components per nuisance source.
    pub m: usize,
    pub seed: u64,
    pub space_cap: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 100,
            mean_tol: 1e-3,
            nu_tol: 1e-5,
            orthogonalize: true,
            m: 3,
            seed: 0,
            space_cap: super::space::DEFAULT_SPACE_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// L×V posterior means of the template sources, in template units.
    pub template_mean: Matrix,
    /// L×V posterior variances, in squared template units.
    pub template_var: Matrix,
    /// Q′×V nuisance source estimates.
    pub nuisance_mean: Option<Matrix>,
    pub theta: ThetaState,
    pub n_iters: usize,
    pub converged: bool,
    /// Observed-data log-likelihood at the initial and each updated θ.
    pub loglik_trace: Vec<f64>,
    /// Model order `Q` of the data.
    pub order: usize,
    pub q_prime: usize,
}

impl FitResult {
    pub fn l(&self) -> usize {
        self.template_mean.nrows()
    }

    pub fn meta(&self) -> FitMeta {
        FitMeta {
            order: self.order,
            l: self.l(),
            q_prime: self.q_prime,
            n_iters: self.n_iters,
            converged: self.converged,
            loglik_trace: self.loglik_trace.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub order: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "Q_prime")]
    pub q_prime: usize,
    pub n_iters: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
}

pub fn parse_fit_meta(text: &str) -> Result<FitMeta> {
    let meta: FitMeta =
        serde_json::from_str(text).map_err(|e| TicaError::Format(format!("fit meta: {e}")))?;
    if meta.l == 0 {
        return Err(TicaError::Format("fit meta: L must be positive".into()));
    }
    if meta.order < meta.l {
        return Err(TicaError::Format(format!(
            "fit meta: order {} below L {}",
            meta.order, meta.l
        )));
    }
    Ok(meta)
}

/// Stored form of a fit: meta plus the posterior maps.
#[derive(Debug, Clone)]
pub struct StoredFit {
    pub meta: FitMeta,
    pub template_mean: Matrix,
    pub template_var: Matrix,
    pub nuisance_mean: Option<Matrix>,
}

pub fn save_fit(fit: &FitResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| TicaError::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&fit.meta())
        .map_err(|e| TicaError::Format(format!("fit meta: {e}")))?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, meta).map_err(|e| TicaError::io(&meta_path, e))?;
    write_matrix(&fit.template_mean, dir.join("template_mean.bin"), MatrixFormat::Bin)?;
    write_matrix(&fit.template_var, dir.join("template_var.bin"), MatrixFormat::Bin)?;
    if let Some(n) = &fit.nuisance_mean {
        write_matrix(n, dir.join("nuisance_mean.bin"), MatrixFormat::Bin)?;
    }
    Ok(())
}

pub fn load_fit(dir: impl AsRef<Path>) -> Result<StoredFit> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| TicaError::io(&meta_path, e))?;
    let meta = parse_fit_meta(&text)?;
    let template_mean = read_matrix(dir.join("template_mean.bin"), MatrixFormat::Bin)?;
    let template_var = read_matrix(dir.join("template_var.bin"), MatrixFormat::Bin)?;
    if template_mean.nrows() != meta.l || template_var.shape() != template_mean.shape() {
        return Err(TicaError::DimensionMismatch(format!(
            "stored fit maps do not match L = {}",
            meta.l
        )));
    }
    let nuisance_path = dir.join("nuisance_mean.bin");
    let nuisance_mean = if nuisance_path.exists() {
        Some(read_matrix(nuisance_path, MatrixFormat::Bin)?)
    } else {
        None
    };
    Ok(StoredFit {
        meta,
        template_mean,
        template_var,
        nuisance_mean,
    })
}
