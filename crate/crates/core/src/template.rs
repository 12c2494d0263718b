//! Population templates: per-component mean and between-subject variance
//! maps, estimated from two-session cohorts.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualreg::dual_regress;
use crate::error::{Result, TicaError};
use crate::matrix::{center_scale_with, read_matrix, split_sessions, write_matrix, Matrix, MatrixFormat, Scaling};

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    /// L×V population mean maps.
    pub mean: Matrix,
    /// L×V between-subject variance maps.
    pub var_between: Matrix,
    pub var_total: Matrix,
    pub var_noise: Matrix,
    pub n_subjects: usize,
}

impl Template {
    /// A template with known mean and between-subject variance and no
    /// estimation noise.
    pub fn known(mean: Matrix, var_between: Matrix) -> Result<Self> {
        let t = Template {
            var_total: var_between.clone(),
            var_noise: Matrix::zeros(mean.nrows(), mean.ncols()),
            mean,
            var_between,
            n_subjects: 0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn l(&self) -> usize {
        self.mean.nrows()
    }

    pub fn v(&self) -> usize {
        self.mean.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.mean.shape();
        for (name, m) in [
            ("var_between", &self.var_between),
            ("var_total", &self.var_total),
            ("var_noise", &self.var_noise),
        ] {
            if m.shape() != shape {
                return Err(TicaError::DimensionMismatch(format!(
                    "{name} is {:?}, mean is {shape:?}",
                    m.shape()
                )));
            }
        }
        if shape.0 == 0 || shape.1 == 0 {
            return Err(TicaError::Format("template has no components".into()));
        }
        let all = [&self.mean, &self.var_between, &self.var_total, &self.var_noise];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(TicaError::Format("template has non-finite values".into()));
        }
        if self.var_between.iter().any(|&v| v < 0.0) || self.var_total.iter().any(|&v| v < 0.0) {
            return Err(TicaError::Format("template variances must be non-negative".into()));
        }
        Ok(())
    }

    /// Between-subject variance with zeros replaced by a small positive
    /// floor, `1e-6` times the median of the component's total variance,
    /// so the prior precision is defined everywhere.
    pub fn floored_variance(&self) -> Matrix {
        let mut out = self.var_between.clone();
        for q in 0..self.l() {
            let floor = variance_floor(self.var_total.row(q).iter().copied());
            for v in out.row_mut(q).iter_mut() {
                if *v < floor {
                    *v = floor;
                }
            }
        }
        out
    }
}

fn variance_floor(row: impl Iterator<Item = f64>) -> f64 {
    let mut values: Vec<f64> = row.collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    if median > 0.0 {
        1e-6 * median
    } else if mean > 0.0 {
        1e-6 * mean
    } else {
        1e-12
    }
}

/// One dual-regression estimate for a subject and session (1 or 2).
#[derive(Debug, Clone)]
pub struct SessionEstimate {
    pub subject: usize,
    pub session: u8,
    pub sources: Matrix,
}

pub fn accumulate_estimates(estimates: &[SessionEstimate]) -> Result<Template> {
    let mut sorted: Vec<&SessionEstimate> = estimates.iter().collect();
    sorted.sort_by_key(|e| (e.subject, e.session));
    let first = sorted
        .first()
        .ok_or_else(|| TicaError::DegenerateInput("no estimates to accumulate".into()))?;
    let shape = first.sources.shape();

    let mut pairs: Vec<(&Matrix, &Matrix)> = Vec::new();
    for chunk in sorted.chunk_by(|a, b| a.subject == b.subject) {
        let subject = chunk[0].subject;
        let sessions: Vec<u8> = chunk.iter().map(|e| e.session).collect();
        if sessions != [1, 2] {
            return Err(TicaError::InconsistentCohort(format!(
                "subject {subject} has sessions {sessions:?}, expected [1, 2]"
            )));
        }
        for e in chunk {
            if e.sources.shape() != shape {
                return Err(TicaError::InconsistentCohort(format!(
                    "subject {subject} session {} is {:?}, expected {shape:?}",
                    e.session,
                    e.sources.shape()
                )));
            }
        }
        pairs.push((&chunk[0].sources, &chunk[1].sources));
    }
    let n = pairs.len();
    if n < 2 {
        return Err(TicaError::DegenerateInput(format!(
            "template estimation needs at least 2 subjects, got {n}"
        )));
    }

    let nf = n as f64;
    let (l, v) = shape;
    let mut mean = Matrix::zeros(l, v);
    let mut var_total = Matrix::zeros(l, v);
    let mut var_noise = Matrix::zeros(l, v);
    let mut var_between = Matrix::zeros(l, v);
    for c in 0..v {
        for r in 0..l {
            let (mut sum1, mut sum2, mut sumd) = (0.0, 0.0, 0.0);
            for (a, b) in &pairs {
                sum1 += a[(r, c)];
                sum2 += b[(r, c)];
                sumd += b[(r, c)] - a[(r, c)];
            }
            let (m1, m2, md) = (sum1 / nf, sum2 / nf, sumd / nf);
            let (mut ss1, mut ss2, mut ssd) = (0.0, 0.0, 0.0);
            for (a, b) in &pairs {
                let (x1, x2) = (a[(r, c)], b[(r, c)]);
                ss1 += (x1 - m1) * (x1 - m1);
                ss2 += (x2 - m2) * (x2 - m2);
                let d = x2 - x1 - md;
                ssd += d * d;
            }
            let total = 0.5 * (ss1 + ss2) / (nf - 1.0);
            let noise = 0.5 * ssd / (nf - 1.0);
            mean[(r, c)] = (sum1 + sum2) / (2.0 * nf);
            var_total[(r, c)] = total;
            var_noise[(r, c)] = noise;
            var_between[(r, c)] = (total - noise).max(0.0);
        }
    }
    Ok(Template {
        mean,
        var_between,
        var_total,
        var_noise,
        n_subjects: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Each subject supplies two sessions, centred and scaled separately.
    ProvidedSessions,
    /// Each subject supplies one scan, centred and scaled, then cut in half.
    #[default]
    Halve,
}

/// The scans of one cohort subject.
#[derive(Debug, Clone)]
pub struct SubjectScans {
    pub scans: Vec<Matrix>,
}

pub fn build_template(cohort: &[SubjectScans], s_grp: &Matrix, split: SplitMode) -> Result<Template> {
    build_template_with(cohort, s_grp, split, Scaling::default())
}

pub fn build_template_with(
    cohort: &[SubjectScans],
    s_grp: &Matrix,
    split: SplitMode,
    scaling: Scaling,
) -> Result<Template> {
    if cohort.len() < 2 {
        return Err(TicaError::DegenerateInput(format!(
            "template estimation needs at least 2 subjects, got {}",
            cohort.len()
        )));
    }
    let per_subject: Vec<Result<[SessionEstimate; 2]>> = cohort
        .par_iter()
        .enumerate()
        .map(|(subject, scans)| {
            subject_estimates(subject, scans, s_grp, split, scaling)
                .map_err(|e| e.for_subject(subject))
        })
        .collect();
    let mut estimates = Vec::with_capacity(2 * cohort.len());
    for result in per_subject {
        estimates.extend(result?);
    }
    accumulate_estimates(&estimates)
}

fn subject_estimates(
    subject: usize,
    scans: &SubjectScans,
    s_grp: &Matrix,
    split: SplitMode,
    scaling: Scaling,
) -> Result<[SessionEstimate; 2]> {
    let (first, second) = match (split, scans.scans.as_slice()) {
        (SplitMode::Halve, [scan]) => {
            let scaled = center_scale_with(scan, scaling)?;
            split_sessions(&scaled.data)?
        }
        (SplitMode::ProvidedSessions, [a, b]) => (
            center_scale_with(a, scaling)?.data,
            center_scale_with(b, scaling)?.data,
        ),
        (mode, scans) => {
            return Err(TicaError::InconsistentCohort(format!(
                "{mode:?} needs {} scan(s) per subject, got {}",
                if mode == SplitMode::Halve { 1 } else { 2 },
                scans.len()
            )))
        }
    };
    let est = |session: u8, x: &Matrix| -> Result<SessionEstimate> {
        Ok(SessionEstimate {
            subject,
            session,
            sources: dual_regress(x, s_grp)?.sources,
        })
    };
    Ok([est(1, &first)?, est(2, &second)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateMeta {
    pub l: usize,
    pub v: usize,
    pub n_subjects: usize,
    pub version: u32,
}

pub fn parse_template_meta(text: &str) -> Result<TemplateMeta> {
    let meta: TemplateMeta = serde_json::from_str(text)
        .map_err(|e| TicaError::Format(format!("template meta.json: {e}")))?;
    if meta.version != TEMPLATE_VERSION {
        return Err(TicaError::Format(format!(
            "unsupported template version {}",
            meta.version
        )));
    }
    if meta.l == 0 || meta.v == 0 {
        return Err(TicaError::Format("template meta has zero dimension".into()));
    }
    Ok(meta)
}

const MAP_FILES: [&str; 4] = ["mean.bin", "var_between.bin", "var_total.bin", "var_noise.bin"];

pub fn save_template(template: &Template, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| TicaError::io(dir, e))?;
    let meta = TemplateMeta {
        l: template.l(),
        v: template.v(),
        n_subjects: template.n_subjects,
        version: TEMPLATE_VERSION,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text).map_err(|e| TicaError::io(&path, e))?;
    let maps = [
        &template.mean,
        &template.var_between,
        &template.var_total,
        &template.var_noise,
    ];
    for (name, m) in MAP_FILES.iter().zip(maps) {
        write_matrix(m, dir.join(name), MatrixFormat::Bin)?;
    }
    Ok(())
}

pub fn load_template(dir: impl AsRef<Path>) -> Result<Template> {
    let dir = dir.as_ref();
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| TicaError::io(&path, e))?;
    let meta = parse_template_meta(&text)?;
    let mut maps = Vec::with_capacity(4);
    for name in MAP_FILES {
        let m = read_matrix(dir.join(name), MatrixFormat::Bin)?;
        if m.shape() != (meta.l, meta.v) {
            return Err(TicaError::Format(format!(
                "{name} is {:?}, meta.json says {}x{}",
                m.shape(),
                meta.l,
                meta.v
            )));
        }
        maps.push(m);
    }
    let mut maps = maps.into_iter();
    let template = Template {
        mean: maps.next().unwrap(),
        var_between: maps.next().unwrap(),
        var_total: maps.next().unwrap(),
        var_noise: maps.next().unwrap(),
        n_subjects: meta.n_subjects,
    };
    template.validate()?;
    Ok(template)
}
