//! Synthetic benchmarks on a 46×55 grid: Gaussian source maps, subject
//! maps sampled around a template or by perturbing source features, AR(1)
//! time courses and SNR-controlled observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TicaError};
use crate::matrix::Matrix;
use crate::seed::derive_seed;
use crate::template::Template;

pub const GRID_ROWS: usize = 46;
pub const GRID_COLS: usize = 55;
pub const GRID_V: usize = GRID_ROWS * GRID_COLS;

/// Map values below this fraction of the amplitude are set to zero.
const TRUNCATION: f64 = 1e-3;
const AR_COEF: f64 = 0.3;
const MAX_PERTURB_ATTEMPTS: usize = 10;
/// Largest SNR treated as finite; above it the noise is negligible.
const SNR_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn v(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, center: (i64, i64)) -> bool {
        (0..self.rows as i64).contains(&center.0) && (0..self.cols as i64).contains(&center.1)
    }
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            rows: GRID_ROWS,
            cols: GRID_COLS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRole {
    Template,
    Nuisance,
}

/// Group-level Gaussian sources. Location `v = row·cols + col`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub grid: Grid,
    pub centers: Vec<(i64, i64)>,
    pub amplitudes: Vec<f64>,
    pub fwhm: Vec<f64>,
    pub roles: Vec<SourceRole>,
}

impl SourceSpec {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        if self.amplitudes.len() != k || self.fwhm.len() != k || self.roles.len() != k {
            return Err(TicaError::DimensionMismatch("source feature lists differ in length".into()));
        }
        if let Some(c) = self.centers.iter().find(|c| !self.grid.contains(**c)) {
            return Err(TicaError::DegenerateInput(format!("center {c:?} outside the grid")));
        }
        if self.fwhm.iter().any(|f| !(*f > 0.0)) {
            return Err(TicaError::DegenerateInput("FWHM must be positive".into()));
        }
        Ok(())
    }

    /// K×V group maps.
    pub fn maps(&self) -> Matrix {
        let mut out = Matrix::zeros(self.len(), self.grid.v());
        for q in 0..self.len() {
            let map = gaussian_source(self.grid, self.centers[q], self.amplitudes[q], self.fwhm[q]);
            for (v, x) in map.into_iter().enumerate() {
                out[(q, v)] = x;
            }
        }
        out
    }

    pub fn indices(&self, role: SourceRole) -> Vec<usize> {
        (0..self.len()).filter(|&q| self.roles[q] == role).collect()
    }
}

/// `amplitude·exp(−d²/(2σ²))` with `σ = fwhm/(2√(2 ln 2))`, truncated to zero
/// below `1e-3·amplitude`.
pub fn gaussian_source(grid: Grid, center: (i64, i64), amplitude: f64, fwhm: f64) -> Vec<f64> {
    let sigma = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let threshold = TRUNCATION * amplitude.abs();
    let mut out = Vec::with_capacity(grid.v());
    for r in 0..grid.rows as i64 {
        for c in 0..grid.cols as i64 {
            let d2 = ((r - center.0).pow(2) + (c - center.1).pow(2)) as f64;
            let value = amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
            out.push(if value.abs() < threshold { 0.0 } else { value });
        }
    }
    out
}

/// Three sources with amplitudes 5, FWHM 30/40/45 at (12,15), (35,40), (15,40).
pub fn table1_spec() -> SourceSpec {
    SourceSpec {
        grid: Grid::default(),
        centers: vec![(12, 15), (35, 40), (15, 40)],
        amplitudes: vec![5.0; 3],
        fwhm: vec![30.0, 40.0, 45.0],
        roles: vec![SourceRole::Template; 3],
    }
}

/// The three Table 1 sources plus a fourth at (36,12) with FWHM 30; the
/// first two are template sources, the others nuisance.
pub fn nuisance_study_spec() -> SourceSpec {
    SourceSpec {
        grid: Grid::default(),
        centers: vec![(12, 15), (35, 40), (15, 40), (36, 12)],
        amplitudes: vec![5.0; 4],
        fwhm: vec![30.0, 40.0, 45.0, 30.0],
        roles: vec![
            SourceRole::Template,
            SourceRole::Template,
            SourceRole::Nuisance,
            SourceRole::Nuisance,
        ],
    }
}

/// Nine sources with FWHM 12 on a 3×3 lattice; the bottom row is nuisance.
pub fn simc_spec() -> SourceSpec {
    let mut centers = Vec::with_capacity(9);
    for r in [8, 23, 38] {
        for c in [9, 27, 45] {
            centers.push((r, c));
        }
    }
    let mut roles = vec![SourceRole::Template; 6];
    roles.extend([SourceRole::Nuisance; 3]);
    SourceSpec {
        grid: Grid::default(),
        centers,
        amplitudes: vec![5.0; 9],
        fwhm: vec![12.0; 9],
        roles,
    }
}

/// Template with between-subject variance `ratio·|mean|`.
pub fn proportional_template(mean: Matrix, ratio: f64) -> Result<Template> {
    let var = mean.map(|x| ratio * x.abs());
    Template::known(mean, var)
}

/// `s = s₀ + δ` with independent `δ ~ N(0, ν²)`.
pub fn sample_subject_a(template: &Template, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = template.mean.clone();
    for q in 0..template.l() {
        for v in 0..template.v() {
            let z: f64 = rng.sample(StandardNormal);
            out[(q, v)] += template.var_between[(q, v)].sqrt() * z;
        }
    }
    out
}

/// Standard deviations of the feature perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSd {
    pub amplitude: f64,
    pub fwhm: f64,
    pub location: f64,
}

impl Default for PerturbSd {
    fn default() -> Self {
        PerturbSd {
            amplitude: 1.0,
            fwhm: 5.0,
            location: 1.0,
        }
    }
}

/// Subject maps from independently perturbed amplitude, FWHM and location
/// (rounded to whole voxels). A draw that leaves the grid or has
/// non-positive FWHM is redrawn, up to 10 attempts per source.
pub fn sample_subject_b(base: &SourceSpec, sd: PerturbSd, seed: u64) -> Result<Matrix> {
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng, s: f64| -> f64 {
        if s > 0.0 {
            rng.sample(Normal::new(0.0, s).expect("positive sd"))
        } else {
            0.0
        }
    };
    let mut out = Matrix::zeros(base.len(), base.grid.v());
    for q in 0..base.len() {
        let mut accepted = None;
        for _ in 0..MAX_PERTURB_ATTEMPTS {
            let amplitude = base.amplitudes[q] + normal(&mut rng, sd.amplitude);
            let fwhm = base.fwhm[q] + normal(&mut rng, sd.fwhm);
            let center = (
                base.centers[q].0 + normal(&mut rng, sd.location).round() as i64,
                base.centers[q].1 + normal(&mut rng, sd.location).round() as i64,
            );
            if fwhm > 0.0 && base.grid.contains(center) {
                accepted = Some((center, amplitude, fwhm));
                break;
            }
        }
        let (center, amplitude, fwhm) = accepted.ok_or(TicaError::PerturbationOutOfGrid {
            attempts: MAX_PERTURB_ATTEMPTS,
        })?;
        for (v, x) in gaussian_source(base.grid, center, amplitude, fwhm).into_iter().enumerate() {
            out[(q, v)] = x;
        }
    }
    Ok(out)
}

/// Monte Carlo mean and variance of perturbed subject maps.
pub fn simb_template(base: &SourceSpec, sd: PerturbSd, draws: usize, seed: u64) -> Result<Template> {
    if draws < 2 {
        return Err(TicaError::DegenerateInput("need at least two Monte Carlo draws".into()));
    }
    let (k, v) = (base.len(), base.grid.v());
    let mut mean = Matrix::zeros(k, v);
    let mut m2 = Matrix::zeros(k, v);
    for i in 0..draws {
        let s = sample_subject_b(base, sd, derive_seed(seed, i as u64))?;
        let n = (i + 1) as f64;
        let delta = &s - &mean;
        mean += &delta / n;
        m2 += delta.component_mul(&(&s - &mean));
    }
    let var = m2 / (draws - 1) as f64;
    Template::known(mean, var)
}

/// Standard logistic draw by inverse CDF.
fn logistic(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    (u / (1.0 - u)).ln()
}

/// `q` independent AR(1) series with logistic innovations, each
/// standardized to mean 0 and sample SD 1.
pub fn gen_timecourses(t: usize, q: usize, seed: u64) -> Result<Matrix> {
    if t < 10 {
        return Err(TicaError::DegenerateInput(format!("time courses need at least 10 points, got {t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(t, q);
    for j in 0..q {
        let mut x = logistic(&mut rng) / (1.0 - AR_COEF * AR_COEF).sqrt();
        for i in 0..t {
            x = AR_COEF * x + logistic(&mut rng);
            out[(i, j)] = x;
        }
        let mut col = out.column_mut(j);
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / (t - 1) as f64).sqrt();
        col /= sd;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SubjectData {
    pub sources: Matrix,
    pub timecourses: Matrix,
    pub observed: Matrix,
    pub snr: f64,
}

/// Signal variance: per source, the mean over the top 1% of voxels by
/// |intensity| of the temporal variance of that source's contribution,
/// averaged over sources.
pub fn signal_variance(sources: &Matrix, timecourses: &Matrix) -> Result<f64> {
    let (k, v) = sources.shape();
    if timecourses.ncols() != k {
        return Err(TicaError::DimensionMismatch(format!(
            "{} time courses for {k} sources",
            timecourses.ncols()
        )));
    }
    let top = ((v as f64) * 0.01).ceil().max(1.0) as usize;
    let t = timecourses.nrows() as f64;
    let mut total = 0.0;
    for q in 0..k {
        let tc = timecourses.column(q);
        let tc_var = (tc.map(|x| x - tc.mean())).norm_squared() / (t - 1.0);
        let mut mags: Vec<f64> = sources.row(q).iter().map(|x| x * x).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        total += tc_var * mags[..top].iter().sum::<f64>() / top as f64;
    }
    let out = total / k as f64;
    if !(out > 0.0) {
        return Err(TicaError::DegenerateInput("sources carry no signal".into()));
    }
    Ok(out)
}

/// `timecourses·sources` plus iid Gaussian noise with SD `σ_sig/snr`.
pub fn gen_observed(sources: &Matrix, timecourses: &Matrix, snr: f64, seed: u64) -> Result<SubjectData> {
    if !(snr > 0.0) {
        return Err(TicaError::DegenerateInput(format!("SNR must be positive, got {snr}")));
    }
    let sigma_sig = signal_variance(sources, timecourses)?.sqrt();
    let sigma_err = sigma_sig / snr.min(SNR_CAP);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed = timecourses * sources;
    for x in observed.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += sigma_err * z;
    }
    Ok(SubjectData {
        sources: sources.clone(),
        timecourses: timecourses.clone(),
        observed,
        snr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimKind {
    /// Subject maps sampled around the template.
    A,
    /// Subject maps from perturbed source features.
    B,
    /// Six template and three nuisance sources.
    C,
    /// Two template and two nuisance sources.
    N,
}

impl SimKind {
    pub fn default_snr(self) -> f64 {
        match self {
            SimKind::C => 1.0,
            _ => 0.5,
        }
    }
}

/// Everything needed to draw subjects for one simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: SimKind,
    pub spec: SourceSpec,
    /// Group mean and variance of every source, template and nuisance.
    pub population: Template,
    pub perturb: PerturbSd,
}

impl Scenario {
    pub fn new(kind: SimKind, var_ratio: f64, mc_draws: usize, seed: u64) -> Result<Self> {
        let perturb = PerturbSd::default();
        let spec = match kind {
            SimKind::A | SimKind::B => table1_spec(),
            SimKind::C => simc_spec(),
            SimKind::N => nuisance_study_spec(),
        };
        let population = match kind {
            SimKind::B => simb_template(&spec, perturb, mc_draws, derive_seed(seed, u64::MAX))?,
            _ => proportional_template(spec.maps(), var_ratio)?,
        };
        Ok(Scenario {
            kind,
            spec,
            population,
            perturb,
        })
    }

    pub fn template_indices(&self) -> Vec<usize> {
        self.spec.indices(SourceRole::Template)
    }

    pub fn nuisance_indices(&self) -> Vec<usize> {
        self.spec.indices(SourceRole::Nuisance)
    }

    /// The true template: rows of the population for template sources.
    pub fn true_template(&self) -> Template {
        let rows = self.template_indices();
        let pick = |m: &Matrix| Matrix::from_fn(rows.len(), m.ncols(), |i, v| m[(rows[i], v)]);
        Template {
            mean: pick(&self.population.mean),
            var_between: pick(&self.population.var_between),
            var_total: pick(&self.population.var_total),
            var_noise: pick(&self.population.var_noise),
            n_subjects: 0,
        }
    }

    /// All source maps for one subject.
    pub fn subject_sources(&self, seed: u64) -> Result<Matrix> {
        match self.kind {
            SimKind::B => sample_subject_b(&self.spec, self.perturb, seed),
            _ => Ok(sample_subject_a(&self.population, seed)),
        }
    }

    /// Sources plus one observed scan per session, each with its own time
    /// courses and noise.
    pub fn subject(&self, seed: u64, t: usize, sessions: usize, snr: f64) -> Result<(Matrix, Vec<Matrix>)> {
        let sources = self.subject_sources(derive_seed(seed, 0))?;
        let mut scans = Vec::with_capacity(sessions);
        for s in 0..sessions as u64 {
            let tc = gen_timecourses(t, sources.nrows(), derive_seed(seed, 1 + 2 * s))?;
            scans.push(gen_observed(&sources, &tc, snr, derive_seed(seed, 2 + 2 * s))?.observed);
        }
        Ok((sources, scans))
    }
}

/// Where the template used for fitting comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateChoice {
    True,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum QPrimePolicy {
    Estimate,
    Fixed(usize),
}

impl TryFrom<serde_json::Value> for QPrimePolicy {
    type Error = String;

    fn try_from(value: serde_json::Value) -> std::result::Result<Self, String> {
        match value {
            serde_json::Value::String(s) if s == "estimate" => Ok(QPrimePolicy::Estimate),
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|q| QPrimePolicy::Fixed(q as usize))
                .ok_or_else(|| format!("q_prime_policy must be a non-negative integer, got {n}")),
            other => Err(format!("q_prime_policy must be \"estimate\" or an integer, got {other}")),
        }
    }
}

impl From<QPrimePolicy> for serde_json::Value {
    fn from(p: QPrimePolicy) -> Self {
        match p {
            QPrimePolicy::Estimate => serde_json::Value::String("estimate".into()),
            QPrimePolicy::Fixed(q) => serde_json::Value::from(q),
        }
    }
}

fn default_m() -> usize {
    3
}

fn default_ratio() -> f64 {
    0.5
}

fn default_draws() -> usize {
    10_000
}

fn default_policy() -> QPrimePolicy {
    QPrimePolicy::Estimate
}

fn default_template() -> TemplateChoice {
    TemplateChoice::True
}

/// Experiment description read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimKind,
    pub n_train: usize,
    pub n_test: usize,
    pub t_train: usize,
    pub t_test: usize,
    #[serde(default)]
    pub snr: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_policy")]
    pub q_prime_policy: QPrimePolicy,
    #[serde(default = "default_template")]
    pub template: TemplateChoice,
    /// Fit both sessions of each test subject for a reliability study.
    #[serde(default)]
    pub reliability: bool,
    /// Between-subject variance as a multiple of |mean|.
    #[serde(default = "default_ratio")]
    pub var_ratio: f64,
    #[serde(default = "default_draws")]
    pub mc_draws: usize,
}

impl ExperimentConfig {
    pub fn snr(&self) -> f64 {
        self.snr.unwrap_or_else(|| self.sim.default_snr())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(TicaError::Format(format!("{field}: {msg}")));
        if self.t_test < 10 {
            return bad("t_test", format!("must be at least 10, got {}", self.t_test));
        }
        if self.n_train > 0 && self.t_train < 10 {
            return bad("t_train", format!("must be at least 10, got {}", self.t_train));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) || !snr.is_finite() {
                return bad("snr", format!("must be positive, got {snr}"));
            }
        }
        if self.m < 2 {
            return bad("m", format!("must be at least 2, got {}", self.m));
        }
        if !(self.var_ratio >= 0.0) || !self.var_ratio.is_finite() {
            return bad("var_ratio", format!("must be non-negative, got {}", self.var_ratio));
        }
        if self.sim == SimKind::B && self.mc_draws < 2 {
            return bad("mc_draws", format!("must be at least 2, got {}", self.mc_draws));
        }
        if self.template == TemplateChoice::Estimated && self.n_train == 0 {
            return bad("n_train", "an estimated template needs training subjects".into());
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::new(self.sim, self.var_ratio, self.mc_draws, self.seed)
    }
}

pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            TicaError::Format(format!("experiment config: {}", e.inner()))
        } else {
            TicaError::Format(format!("{path}: {}", e.inner()))
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// Seed for training subject `i`.
pub fn train_seed(seed: u64, i: usize) -> u64 {
    derive_seed(derive_seed(seed, 1), i as u64)
}

/// Seed for test subject `i`.
pub fn test_seed(seed: u64, i: usize) -> u64 {
    derive_seed(derive_seed(seed, 2), i as u64)
}
