use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng::{shuffle, SplitMix64};
use crate::store::Store;

const TOLERANCE: f64 = 1e-6;
const MAX_ITERATIONS: usize = 1000;

/// Top two principal directions of a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Variance (sample covariance eigenvalue) along each component.
    pub variances: [f64; 2],
    pub iterations: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub record_id: String,
    pub x: f64,
    pub y: f64,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    pub pca: Pca,
}

/// `out = C v` with `C = Xc^T Xc / (n - 1)`, never materializing `C`.
fn cov_times(centered: &[f64], n: usize, d: usize, v: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for row in centered.chunks_exact(d) {
        let s: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        for (o, a) in out.iter_mut().zip(row) {
            *o += s * a;
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    out.iter_mut().for_each(|o| *o *= scale);
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let dot: f64 = v.iter().zip(against).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(against).for_each(|(x, a)| *x -= dot * a);
}

/// Power iteration for the leading eigenvector of the covariance restricted
/// to the complement of `deflate`.
fn power_iterate(
    centered: &[f64],
    n: usize,
    d: usize,
    deflate: Option<&[f64]>,
    trace: f64,
    rng: &mut SplitMix64,
) -> (Vec<f64>, f64, usize) {
    let mut v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
    if let Some(u) = deflate {
        orthogonalize(&mut v, u);
    }
    normalize(&mut v);
    let mut next = vec![0.0; d];
    let mut iterations = 0;
    for it in 1..=MAX_ITERATIONS {
        iterations = it;
        cov_times(centered, n, d, &v, &mut next);
        if let Some(u) = deflate {
            orthogonalize(&mut next, u);
        }
        if normalize(&mut next) <= 1e-12 * trace {
            // The remaining subspace carries no variance.
            return (v, 0.0, it);
        }
        if let Some(u) = deflate {
            orthogonalize(&mut next, u);
            normalize(&mut next);
        }
        let delta = v.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut next);
        if delta < TOLERANCE {
            break;
        }
    }
    cov_times(centered, n, d, &v, &mut next);
    let rayleigh = v.iter().zip(&next).map(|(a, b)| a * b).sum::<f64>();
    // Fix the sign: largest-magnitude coordinate positive.
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, rayleigh.max(0.0), iterations)
}

/// PCA on `n` rows of `d` values by power iteration with deflation.
pub fn pca_top2(data: &[f64], n: usize, d: usize, seed: u64) -> Result<Pca, EvalError> {
    if n < 3 {
        return Err(EvalError::TooFewRecords(n));
    }
    assert_eq!(data.len(), n * d, "data is not n x d");
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = data
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let trace = centered.iter().map(|x| x * x).sum::<f64>() / (n as f64 - 1.0);
    if trace == 0.0 {
        return Err(EvalError::DegenerateData);
    }
    let mut rng = SplitMix64::new(seed);
    let (c1, v1, it1) = power_iterate(&centered, n, d, None, trace, &mut rng);
    if v1 == 0.0 {
        return Err(EvalError::DegenerateData);
    }
    let (c2, v2, it2) = if d >= 2 {
        power_iterate(&centered, n, d, Some(&c1), trace, &mut rng)
    } else {
        (vec![0.0; d], 0.0, 0)
    };
    Ok(Pca {
        mean,
        components: [c1, c2],
        variances: [v1, v2],
        iterations: [it1, it2],
    })
}

/// Projects (a seeded sample of at most `sample_limit`) store records onto
/// their top two principal components.
pub fn project_2d(store: &Store, sample_limit: usize, seed: u64) -> Result<Projection, EvalError> {
    let mut chosen: Vec<usize> = (0..store.record_count()).collect();
    if chosen.len() > sample_limit {
        shuffle(&mut chosen, &mut SplitMix64::new(seed));
        chosen.truncate(sample_limit);
        chosen.sort_unstable();
    }
    let n = chosen.len();
    if n < 3 {
        return Err(EvalError::TooFewRecords(n));
    }
    let d = store.dim();
    let data: Vec<f64> = chosen
        .iter()
        .flat_map(|&i| store.vector(i).iter().map(|&x| f64::from(x)))
        .collect();
    let pca = pca_top2(&data, n, d, seed)?;
    let points = chosen
        .iter()
        .zip(data.chunks_exact(d))
        .map(|(&i, row)| {
            let coord = |c: &[f64]| -> f64 { row.iter().zip(&pca.mean).zip(c).map(|((x, m), w)| (x - m) * w).sum() };
            let meta = store.meta(i);
            ProjectedPoint {
                record_id: meta.record_id.clone(),
                x: coord(&pca.components[0]),
                y: coord(&pca.components[1]),
                label: meta.label.clone(),
            }
        })
        .collect();
    Ok(Projection { points, pca })
}

/// `record_id,x,y,label` with a header row.
pub fn write_projection_csv(projection: &Projection, path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "record_id,x,y,label")?;
    for p in &projection.points {
        writeln!(
            w,
            "{},{},{},{}",
            csv_field(&p.record_id),
            p.x,
            p.y,
            csv_field(p.label.as_deref().unwrap_or(""))
        )?;
    }
    w.flush()
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn recovers_axis_aligned_2d() {
        // x spread larger than y spread; data already 2-D
        let pts = [(-4.0, 1.0), (-2.0, -1.0), (0.0, 0.0), (2.0, -1.0), (4.0, 1.0)];
        let data: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        let pca = pca_top2(&data, 5, 2, 1).unwrap();
        assert!((pca.components[0][0].abs() - 1.0).abs() < 1e-6);
        assert!((pca.components[1][1].abs() - 1.0).abs() < 1e-6);
        assert!(pca.variances[0] >= pca.variances[1]);
        // x: mean 0, sum sq 40, / 4; y: sum sq 4, / 4; sum xy = 0
        assert!((pca.variances[0] - 10.0).abs() < 1e-9);
        assert!((pca.variances[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = SplitMix64::new(3);
        let data: Vec<f64> = (0..40 * 9).map(|_| rng.next_gaussian()).collect();
        let pca = pca_top2(&data, 40, 9, 2).unwrap();
        assert!((dot(&pca.components[0], &pca.components[0]) - 1.0).abs() < 1e-5);
        assert!((dot(&pca.components[1], &pca.components[1]) - 1.0).abs() < 1e-5);
        assert!(dot(&pca.components[0], &pca.components[1]).abs() < 1e-5);
        assert!(pca.variances[0] >= pca.variances[1]);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(pca_top2(&[1.0; 6], 3, 2, 0), Err(EvalError::DegenerateData)));
        assert!(matches!(pca_top2(&[1.0, 2.0], 2, 1, 0), Err(EvalError::TooFewRecords(2))));
    }

    #[test]
    fn rank_one_data_has_zero_second_variance() {
        let data: Vec<f64> = (0..5).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let pca = pca_top2(&data, 5, 2, 0).unwrap();
        assert!(pca.variances[1].abs() < 1e-9);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("q\"x"), "\"q\"\"x\"");
    }
}
