//! Synthetic studies for the three worked examples.
//!
//! The original data-generating mechanisms are not available; these
//! generators are calibrated to reference descriptive summaries and to
//! the stated true effects. In every example study 1 is the recipient:
//! its analysis file has the shared variable `z` entirely missing, and its
//! truth file keeps the values that were masked.
//!
//! Each study draws from its own ChaCha stream derived from the seed, the
//! example number and the study index, so output depends only on
//! `(example, seed, scale)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fitters::logit::logistic;
use crate::fitters::nelson_aalen_values;
use crate::tabular::{write_table, DataTable};

/// Smallest study the generators will emit.
pub const MIN_STUDY_SIZE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub example: u8,
    pub seed: u64,
    /// Multiplier on the reference study sizes.
    pub scale: f64,
}

/// One simulated study.
#[derive(Debug, Clone)]
pub struct Study {
    /// 1-based index; study 1 is the recipient.
    pub index: usize,
    pub truth: DataTable,
    pub analysis: DataTable,
}

impl Study {
    pub fn has_missing_z(&self) -> bool {
        self.analysis
            .missingness("z")
            .map(|m| m.n_missing > 0)
            .unwrap_or(false)
    }
}

// Example 1: binary outcome, exposure and confounder C; skewed confounder Z.
pub const EX1_SIZES: [usize; 5] = [6437, 1334, 8623, 3603, 6673];
const EX1_OUTCOME: [f64; 5] = [0.120, 0.241, 0.301, 0.153, 0.398];
const EX1_EXPOSURE: [f64; 5] = [0.205, 0.098, 0.188, 0.185, 0.185];
const EX1_CONFOUNDER: [f64; 5] = [0.399, 0.375, 0.283, 0.256, 0.234];
const EX1_Z_MEDIAN: [f64; 5] = [0.45, 0.4, 0.5, 0.4, 0.5];
/// True fully-adjusted odds ratio of Z in every study.
pub const EX1_Z_OR: f64 = 1.4;
/// True fully-adjusted odds ratio of the exposure per study.
pub const EX1_X_OR: [f64; 5] = [1.3, 1.35, 1.4, 1.25, 1.3];
const EX1_C_OR: f64 = 1.6;
const EX1_Z_SIGMA: f64 = 1.3;
const EX1_Z_ON_X: f64 = 0.75;
const EX1_Z_ON_C: f64 = 0.4;

// Example 2: randomized treatment X, three-level effect modifier Z.
pub const EX2_SIZES: [usize; 2] = [4000, 3175];
const EX2_EVENT_FRACTION: [f64; 2] = [1893.0 / 4000.0, 2074.0 / 3175.0];
/// True treatment hazard ratio at Z = 0, 1, 2.
pub const EX2_HR: [f64; 3] = [0.5, 1.0, 1.5];
const EX2_Z_HR: [f64; 3] = [1.0, 3.0, 2.0];
const EX2_Z_PROB: [f64; 3] = [0.35, 0.35, 0.30];
/// Administrative censoring: uniform entry gives follow-up in this range.
const EX2_FOLLOW_UP: [(f64, f64); 2] = [(6.0, 16.0), (6.0, 16.0)];

// Example 3: prediction model with a strong binary predictor Z.
pub const EX3_SIZES: [usize; 2] = [24087, 23614];
const EX3_OUTCOME: [f64; 2] = [0.20, 0.22];
const EX3_X_COEF: [f64; 2] = [0.5, 0.85];
const EX3_C_COEF: [f64; 2] = [0.25, 0.35];
const EX3_Z_COEF: f64 = 2.3;
const EX3_Z_PREVALENCE: f64 = 0.3;

pub fn scaled_size(size: usize, scale: f64) -> usize {
    ((size as f64 * scale).round() as usize).max(MIN_STUDY_SIZE)
}

fn study_rng(seed: u64, example: u8, study: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(example) << 32 | study as u64);
    rng
}

fn bernoulli(rng: &mut ChaCha20Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Intercept `a` with mean over `offsets` of `logistic(a + offset)` equal
/// to `target`.
pub fn calibrate_intercept(offsets: &[f64], target: f64) -> f64 {
    let mean = |a: f64| offsets.iter().map(|o| logistic(a + o)).sum::<f64>() / offsets.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn masked(truth: &DataTable, index: usize) -> Result<DataTable> {
    let mut t = truth.clone();
    if index == 1 {
        t.set_column("z", vec![None; t.n_rows()])?;
    }
    Ok(t)
}

fn study(index: usize, truth: DataTable) -> Result<Study> {
    Ok(Study {
        index,
        analysis: masked(&truth, index)?,
        truth,
    })
}

/// Five studies: `y x c z`, with `z` lognormal given `x` and `c`.
pub fn gen_example1(seed: u64, scale: f64) -> Result<Vec<Study>> {
    (0..5)
        .map(|j| {
            let mut rng = study_rng(seed, 1, j + 1);
            let n = scaled_size(EX1_SIZES[j], scale);
            let (pc, px) = (EX1_CONFOUNDER[j], EX1_EXPOSURE[j]);
            // Exposure is more common when C is present, keeping its margin.
            let px1 = (1.5 * px).min(0.95);
            let px0 = ((px - pc * px1) / (1.0 - pc)).clamp(0.01, 0.95);
            // Location so the marginal median of z is near the target.
            let mu = EX1_Z_MEDIAN[j].ln() - EX1_Z_ON_X * px - EX1_Z_ON_C * pc;
            let mut c = Vec::with_capacity(n);
            let mut x = Vec::with_capacity(n);
            let mut z = Vec::with_capacity(n);
            for _ in 0..n {
                let ci = bernoulli(&mut rng, pc);
                let xi = bernoulli(&mut rng, if ci == 1.0 { px1 } else { px0 });
                let zi = (mu + EX1_Z_ON_X * xi + EX1_Z_ON_C * ci + EX1_Z_SIGMA * normal(&mut rng)).exp();
                c.push(ci);
                x.push(xi);
                z.push(zi);
            }
            let offsets: Vec<f64> = (0..n)
                .map(|i| EX1_X_OR[j].ln() * x[i] + EX1_C_OR.ln() * c[i] + EX1_Z_OR.ln() * z[i])
                .collect();
            let alpha = calibrate_intercept(&offsets, EX1_OUTCOME[j]);
            let y: Vec<f64> = offsets.iter().map(|o| bernoulli(&mut rng, logistic(alpha + o))).collect();
            study(j + 1, DataTable::from_observed(vec![("y", y), ("x", x), ("c", c), ("z", z)])?)
        })
        .collect()
}

/// Survival times with a treatment effect modified by a three-level `z`.
///
/// Columns: `time death x z cumh x_cumh x_d`, where `cumh` is the
/// Nelson–Aalen cumulative hazard at the subject's own time. These derived
/// columns are what a congenial imputation model for `z` conditions on.
pub fn gen_example2(seed: u64, scale: f64) -> Result<Vec<Study>> {
    gen_example2_with(seed, scale, EX2_HR)
}

/// As [`gen_example2`] with the treatment hazard ratios given per level.
pub fn gen_example2_with(seed: u64, scale: f64, hr: [f64; 3]) -> Result<Vec<Study>> {
    (0..2)
        .map(|j| {
            let mut rng = study_rng(seed, 2, j + 1);
            let n = scaled_size(EX2_SIZES[j], scale);
            let (fa, fb) = EX2_FOLLOW_UP[j];
            let mut x = Vec::with_capacity(n);
            let mut z = Vec::with_capacity(n);
            let mut rel = Vec::with_capacity(n);
            let mut follow = Vec::with_capacity(n);
            let mut e = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = bernoulli(&mut rng, 0.5);
                let u: f64 = rng.random();
                let zi = if u < EX2_Z_PROB[0] {
                    0
                } else if u < EX2_Z_PROB[0] + EX2_Z_PROB[1] {
                    1
                } else {
                    2
                };
                x.push(xi);
                z.push(zi as f64);
                rel.push(EX2_Z_HR[zi] * if xi == 1.0 { hr[zi] } else { 1.0 });
                follow.push(fa + (fb - fa) * rng.random::<f64>());
                e.push(exp1(&mut rng));
            }
            // Baseline hazard so the expected event fraction hits the target.
            let expected = |lambda: f64| {
                rel.iter()
                    .map(|r| {
                        let l = lambda * r;
                        1.0 - ((-l * fa).exp() - (-l * fb).exp()) / (l * (fb - fa))
                    })
                    .sum::<f64>()
                    / n as f64
            };
            let (mut lo, mut hi) = (1e-6f64, 10.0f64);
            for _ in 0..200 {
                let mid = (lo * hi).sqrt();
                if expected(mid) < EX2_EVENT_FRACTION[j] {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let lambda = (lo * hi).sqrt();
            let mut time = Vec::with_capacity(n);
            let mut death = Vec::with_capacity(n);
            for i in 0..n {
                let t = e[i] / (lambda * rel[i]);
                if t <= follow[i] {
                    time.push(t);
                    death.push(1.0);
                } else {
                    time.push(follow[i]);
                    death.push(0.0);
                }
            }
            let cumh = nelson_aalen_values(&time, &death)?;
            let x_cumh: Vec<f64> = x.iter().zip(&cumh).map(|(a, b)| a * b).collect();
            let x_d: Vec<f64> = x.iter().zip(&death).map(|(a, b)| a * b).collect();
            study(
                j + 1,
                DataTable::from_observed(vec![
                    ("time", time),
                    ("death", death),
                    ("x", x),
                    ("z", z),
                    ("cumh", cumh),
                    ("x_cumh", x_cumh),
                    ("x_d", x_d),
                ])?,
            )
        })
        .collect()
}

fn exp1(rng: &mut ChaCha20Rng) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

/// Two studies: `y x c z` with `z` a strong binary predictor of `y`.
pub fn gen_example3(seed: u64, scale: f64) -> Result<Vec<Study>> {
    (0..2)
        .map(|j| {
            let mut rng = study_rng(seed, 3, j + 1);
            let n = scaled_size(EX3_SIZES[j], scale);
            let mut x = Vec::with_capacity(n);
            let mut c = Vec::with_capacity(n);
            let mut z = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = normal(&mut rng);
                let ci = bernoulli(&mut rng, 0.4);
                let pz = logistic(EX3_Z_PREVALENCE.ln() - (1.0 - EX3_Z_PREVALENCE).ln() + 0.3 * xi + 0.3 * (ci - 0.4));
                x.push(xi);
                c.push(ci);
                z.push(bernoulli(&mut rng, pz));
            }
            let offsets: Vec<f64> = (0..n)
                .map(|i| EX3_X_COEF[j] * x[i] + EX3_C_COEF[j] * c[i] + EX3_Z_COEF * z[i])
                .collect();
            let alpha = calibrate_intercept(&offsets, EX3_OUTCOME[j]);
            let y: Vec<f64> = offsets.iter().map(|o| bernoulli(&mut rng, logistic(alpha + o))).collect();
            study(j + 1, DataTable::from_observed(vec![("y", y), ("x", x), ("c", c), ("z", z)])?)
        })
        .collect()
}

pub fn generate(cfg: &SimConfig) -> Result<Vec<Study>> {
    if !(cfg.scale > 0.0) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {}", cfg.scale)));
    }
    match cfg.example {
        1 => gen_example1(cfg.seed, cfg.scale),
        2 => gen_example2(cfg.seed, cfg.scale),
        3 => gen_example3(cfg.seed, cfg.scale),
        other => Err(Error::InvalidInput(format!("no example {other}; choose 1, 2 or 3"))),
    }
}

/// Writes `study_<j>.tsv` for every study and `study_<j>_truth.tsv` for
/// the study whose `z` was masked. Returns the paths written.
pub fn write_studies(studies: &[Study], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for s in studies {
        let p = dir.join(format!("study_{}.tsv", s.index));
        write_table(&s.analysis, &p)?;
        out.push(p);
        if s.has_missing_z() {
            let p = dir.join(format!("study_{}_truth.tsv", s.index));
            write_table(&s.truth, &p)?;
            out.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_calibration_hits_target() {
        let offsets: Vec<f64> = (0..100).map(|i| i as f64 / 50.0).collect();
        let a = calibrate_intercept(&offsets, 0.3);
        let mean = offsets.iter().map(|o| logistic(a + o)).sum::<f64>() / 100.0;
        assert!((mean - 0.3).abs() < 1e-12);
    }

    #[test]
    fn generators_are_pure() {
        for ex in 1..=3 {
            let cfg = SimConfig { example: ex, seed: 5, scale: 0.05 };
            let a = generate(&cfg).unwrap();
            let b = generate(&cfg).unwrap();
            for (s, t) in a.iter().zip(&b) {
                assert_eq!(s.truth.to_tsv(), t.truth.to_tsv());
            }
        }
    }

    #[test]
    fn truth_and_analysis_differ_only_in_z_mask() {
        for ex in 1..=3 {
            let studies = generate(&SimConfig { example: ex, seed: 1, scale: 0.05 }).unwrap();
            let s1 = &studies[0];
            assert!(s1.analysis.missingness("z").unwrap().is_systematic());
            for name in s1.truth.names().filter(|n| *n != "z") {
                assert_eq!(s1.truth.column(name).unwrap(), s1.analysis.column(name).unwrap());
            }
            for s in &studies[1..] {
                assert_eq!(s.analysis.missingness("z").unwrap().n_missing, 0);
            }
        }
    }

    #[test]
    fn sizes_scale_with_floor() {
        let studies = gen_example1(2, 0.25).unwrap();
        let n: Vec<usize> = studies.iter().map(|s| s.truth.n_rows()).collect();
        assert_eq!(n, vec![1609, 500, 2156, 901, 1668]);
    }

    #[test]
    fn example1_margins() {
        let studies = gen_example1(3, 1.0).unwrap();
        for (j, s) in studies.iter().enumerate() {
            let y = s.truth.observed_column("y").unwrap();
            let prev = y.iter().sum::<f64>() / y.len() as f64;
            assert!((prev - EX1_OUTCOME[j]).abs() < 0.05, "study {} prevalence {prev}", j + 1);
            let mut z = s.truth.observed_column("z").unwrap();
            z.sort_by(f64::total_cmp);
            let median = z[z.len() / 2];
            assert!((0.3..=0.65).contains(&median), "study {} median {median}", j + 1);
        }
    }

    #[test]
    fn example2_event_counts() {
        let studies = gen_example2(4, 1.0).unwrap();
        for (s, target) in studies.iter().zip([1893.0, 2074.0]) {
            let d: f64 = s.truth.observed_column("death").unwrap().iter().sum();
            assert!((d - target).abs() <= 0.1 * target, "events {d} vs {target}");
        }
    }

    #[test]
    fn writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let studies = gen_example3(1, 0.02).unwrap();
        let paths = write_studies(&studies, dir.path()).unwrap();
        let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, vec!["study_1.tsv", "study_1_truth.tsv", "study_2.tsv"]);
    }
}
