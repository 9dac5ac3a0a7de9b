//! Metrics harness: pairwise MS-SSIM diversity, attribute adherence through
//! the pretrained predictor, regional-volume effect sizes, and a Fréchet
//! distance over predictor features. Cohorts are compared after nearest-age,
//! same-sex matching of real samples to the synthetic condition plan.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{LabelMap, Volume};
use crate::linalg::{matmul_square, symmetric_eigen, symmetric_sqrt};
use crate::nets::{AttributePredictor, Condition, ParamSet, PredictorOutput, Sex};
use crate::phantoms::Dataset;
use crate::rng::uniform_usize;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("image too small for {scales} scales: {spatial:?}")]
    TooSmallForScales { scales: usize, spatial: Vec<usize> },
    #[error("degenerate populations (zero pooled standard deviation)")]
    DegeneratePopulations,
    #[error("covariance not positive semi-definite after flooring")]
    NotPsd,
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("no unmatched real sample of sex {0:?} left")]
    ExhaustedCohort(Sex),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---- MS-SSIM ---------------------------------------------------------------

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Standard per-scale weights; the first `scales` entries are renormalized.
const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Valid-region separable filtering along one axis.
fn filter_axis(data: &[f64], shape: &[usize], axis: usize, window: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let k = window.len();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = shape[axis] - k + 1;
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let n_out: usize = out_shape.iter().product();
    let mut out = vec![0.0; n_out];
    for (lin, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..shape.len() {
            let idx = lin / out_strides[d] % out_shape[d];
            src += idx * strides[d];
        }
        let mut acc = 0.0;
        for (j, &wv) in window.iter().enumerate() {
            acc += wv * data[src + j * strides[axis]];
        }
        *o = acc;
    }
    (out, out_shape)
}

fn gaussian_filter_valid(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let window = gaussian_window();
    let mut cur = data.to_vec();
    let mut cur_shape = shape.to_vec();
    for axis in 0..shape.len() {
        let (next, next_shape) = filter_axis(&cur, &cur_shape, axis, &window);
        cur = next;
        cur_shape = next_shape;
    }
    (cur, cur_shape)
}

/// 2x average-pool along every axis (floor semantics).
fn downsample2(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = shape.iter().map(|&s| s / 2).collect();
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let n_out: usize = out_shape.iter().product();
    let mut out = vec![0.0; n_out];
    let corners = 1usize << rank;
    for (lin, o) in out.iter_mut().enumerate() {
        let mut base = 0usize;
        for d in 0..rank {
            let idx = lin / out_strides[d] % out_shape[d];
            base += 2 * idx * strides[d];
        }
        let mut acc = 0.0;
        for c in 0..corners {
            let mut off = base;
            for d in 0..rank {
                if c >> d & 1 == 1 {
                    off += strides[d];
                }
            }
            acc += data[off];
        }
        *o = acc / corners as f64;
    }
    (out, out_shape)
}

/// Per-scale mean contrast-structure and full SSIM of one channel pair.
fn ssim_scale(x: &[f64], y: &[f64], shape: &[usize]) -> (f64, f64) {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (mu_x, vs) = gaussian_filter_valid(x, shape);
    let (mu_y, _) = gaussian_filter_valid(y, shape);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (m_xx, _) = gaussian_filter_valid(&xx, shape);
    let (m_yy, _) = gaussian_filter_valid(&yy, shape);
    let (m_xy, _) = gaussian_filter_valid(&xy, shape);
    let n: usize = vs.iter().product();
    let mut cs_sum = 0.0;
    let mut ssim_sum = 0.0;
    for i in 0..n {
        let var_x = (m_xx[i] - mu_x[i] * mu_x[i]).max(0.0);
        let var_y = (m_yy[i] - mu_y[i] * mu_y[i]).max(0.0);
        let cov = m_xy[i] - mu_x[i] * mu_y[i];
        let cs = (2.0 * cov + c2) / (var_x + var_y + c2);
        let l = (2.0 * mu_x[i] * mu_y[i] + c1) / (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (cs_sum / n as f64, ssim_sum / n as f64)
}

/// Multi-scale SSIM of two volumes over `scales` scales (channel-averaged).
pub fn ms_ssim_pair<T: Scalar>(a: &Volume<T>, b: &Volume<T>, scales: usize) -> Result<f64, EvalError> {
    assert!(scales >= 1 && scales <= 5, "scales in 1..=5");
    if a.tensor().shape() != b.tensor().shape() {
        return Err(EvalError::CountMismatch(format!(
            "pair shapes {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let spatial = a.spatial().to_vec();
    let min_dim = spatial.iter().min().copied().unwrap();
    if min_dim / (1 << (scales - 1)) < SSIM_WINDOW {
        return Err(EvalError::TooSmallForScales { scales, spatial });
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MSSSIM_WEIGHTS[..scales].iter().map(|w| w / wsum).collect();
    let channels = a.channels();
    let vox: usize = spatial.iter().product();
    let mut total = 0.0;
    for c in 0..channels {
        let mut xs: Vec<f64> = a.tensor().data()[c * vox..(c + 1) * vox].iter().map(|v| v.as_f64()).collect();
        let mut ys: Vec<f64> = b.tensor().data()[c * vox..(c + 1) * vox].iter().map(|v| v.as_f64()).collect();
        let mut shape = spatial.clone();
        let mut score = 1.0;
        for (s, &w) in weights.iter().enumerate() {
            let (cs, ssim) = ssim_scale(&xs, &ys, &shape);
            let term = if s + 1 == weights.len() { ssim } else { cs };
            score *= term.max(0.0).powf(w);
            if s + 1 < weights.len() {
                let (nx, ns) = downsample2(&xs, &shape);
                let (ny, _) = downsample2(&ys, &shape);
                xs = nx;
                ys = ny;
                shape = ns;
            }
        }
        total += score;
    }
    Ok(total / channels as f64)
}

/// Largest scale count the spatial size supports, capped at the standard 5.
pub fn max_scales(spatial: &[usize]) -> usize {
    let min_dim = spatial.iter().min().copied().unwrap_or(0);
    let mut scales = 0usize;
    while scales < 5 && min_dim / (1 << scales) >= SSIM_WINDOW {
        scales += 1;
    }
    scales.max(1)
}

/// Mean MS-SSIM over `n_pairs` random distinct pairs (no pair repeats).
pub fn ms_ssim_pairs<T: Scalar>(
    samples: &[&Volume<T>],
    n_pairs: usize,
    scales: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples(format!("{} samples, need >= 2", samples.len())));
    }
    let total_pairs = samples.len() * (samples.len() - 1) / 2;
    let n_pairs = n_pairs.min(total_pairs);
    let mut seen = HashSet::new();
    let mut acc = 0.0;
    let mut drawn = 0usize;
    while drawn < n_pairs {
        let i = uniform_usize(rng, samples.len());
        let j = uniform_usize(rng, samples.len());
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if !seen.insert(key) {
            continue;
        }
        acc += ms_ssim_pair(samples[key.0], samples[key.1], scales)?;
        drawn += 1;
    }
    Ok(acc / n_pairs as f64)
}

// ---- attribute adherence ----------------------------------------------------

/// Predictor outputs for a cohort, evaluated in deterministic chunks.
pub fn predict_cohort<T: Scalar>(
    predictor: &AttributePredictor,
    ps: &ParamSet<T>,
    samples: &[&Volume<T>],
) -> Vec<PredictorOutput> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        out.extend(predictor.predict_batch(ps, chunk));
    }
    out
}

/// Mean absolute age error (years) and sex accuracy at logit threshold 0.
pub fn attribute_adherence(
    preds: &[PredictorOutput],
    conditions: &[Condition],
) -> Result<(f64, f64), EvalError> {
    if preds.len() != conditions.len() {
        return Err(EvalError::CountMismatch(format!(
            "{} predictions vs {} conditions",
            preds.len(),
            conditions.len()
        )));
    }
    if preds.is_empty() {
        return Err(EvalError::TooFewSamples("empty cohort".into()));
    }
    let mut mae = 0.0;
    let mut correct = 0usize;
    for (p, c) in preds.iter().zip(conditions) {
        mae += (p.age_years - c.age_years).abs();
        let predicted_male = p.sex_logit > 0.0;
        if predicted_male == (c.sex == Sex::Male) {
            correct += 1;
        }
    }
    Ok((mae / preds.len() as f64, correct as f64 / preds.len() as f64))
}

/// Per-decade age MAE rows.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecadeMae {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub mae: f64,
}

/// Decades are `[lo, lo + 10)`, except that an age of exactly 100 joins the
/// [90, 100] decade so a 5..100 sweep does not end in a singleton bin.
pub fn per_decade_mae(preds: &[PredictorOutput], conditions: &[Condition]) -> Vec<DecadeMae> {
    let mut rows = Vec::new();
    for decade in 0..12 {
        let (lo, hi) = (decade as f64 * 10.0, (decade + 1) as f64 * 10.0);
        let mut n = 0usize;
        let mut acc = 0.0;
        for (p, c) in preds.iter().zip(conditions) {
            let in_bin = if c.age_years == 100.0 {
                hi == 100.0
            } else {
                c.age_years >= lo && c.age_years < hi
            };
            if in_bin {
                n += 1;
                acc += (p.age_years - c.age_years).abs();
            }
        }
        if n > 0 {
            rows.push(DecadeMae { lo, hi, n, mae: acc / n as f64 });
        }
    }
    rows
}

// ---- morphometry -------------------------------------------------------------

/// Exact voxel count per region id.
pub fn regional_volumes(labels: &LabelMap) -> Vec<u64> {
    let mut counts = vec![0u64; labels.region_count()];
    for &l in labels.labels() {
        counts[l as usize] += 1;
    }
    counts
}

/// Absolute Cohen's d: |mean difference| / pooled standard deviation.
pub fn cohens_d(pop_a: &[f64], pop_b: &[f64]) -> Result<f64, EvalError> {
    if pop_a.len() < 2 || pop_b.len() < 2 {
        return Err(EvalError::TooFewSamples(format!(
            "cohens_d needs >= 2 per side, got {} and {}",
            pop_a.len(),
            pop_b.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(pop_a), mean(pop_b));
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let (na, nb) = (pop_a.len() as f64, pop_b.len() as f64);
    let pooled = ((ss(pop_a, ma) + ss(pop_b, mb)) / (na + nb - 2.0)).sqrt();
    if pooled <= 0.0 || !pooled.is_finite() {
        return Err(EvalError::DegeneratePopulations);
    }
    Ok((ma - mb).abs() / pooled)
}

// ---- Fréchet feature distance -------------------------------------------------

fn mean_and_cov(feats: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = vec![0.0; d];
    for f in feats {
        for (m, &v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for f in feats {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mu[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (mu, cov)
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, matrix square roots via
/// eigendecomposition with a 1e-10 eigenvalue floor.
pub fn fd_phantom(real: &[Vec<f64>], synth: &[Vec<f64>]) -> Result<f64, EvalError> {
    if real.is_empty() || synth.is_empty() {
        return Err(EvalError::TooFewSamples("empty feature set".into()));
    }
    let d = real[0].len();
    if real.len() <= d || synth.len() <= d {
        return Err(EvalError::TooFewSamples(format!(
            "need more than dim={d} samples per side, got {} and {}",
            real.len(),
            synth.len()
        )));
    }
    let (mu1, cov1) = mean_and_cov(real);
    let (mu2, cov2) = mean_and_cov(synth);
    let mean_term: f64 = mu1.iter().zip(&mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let sqrt1 = symmetric_sqrt(&cov1, d, 1e-10, 1e-5).ok_or(EvalError::NotPsd)?;
    // tr((S1 S2)^{1/2}) = tr((S1^{1/2} S2 S1^{1/2})^{1/2}); symmetrize for
    // numerical hygiene before the eigensolve
    let inner = matmul_square(&sqrt1, &matmul_square(&cov2, &sqrt1, d), d);
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = symmetric_eigen(&sym, d);
    let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut tr_sqrt = 0.0;
    for &l in &vals {
        if l < -1e-5 * max_abs {
            return Err(EvalError::NotPsd);
        }
        tr_sqrt += l.max(1e-10).sqrt();
    }
    let tr1: f64 = (0..d).map(|i| cov1[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| cov2[i * d + i]).sum();
    let fd = mean_term + tr1 + tr2 - 2.0 * tr_sqrt;
    Ok(if fd < 0.0 && fd > -1e-6 { 0.0 } else { fd })
}

// ---- cohort matching and report -------------------------------------------------

/// For each synthetic condition (in order), pick the unused real sample of
/// the same sex nearest in age. Returns indices into the real cohort.
pub fn match_real_cohort(
    real_conditions: &[Condition],
    synth_conditions: &[Condition],
) -> Result<Vec<usize>, EvalError> {
    let mut used = vec![false; real_conditions.len()];
    let mut out = Vec::with_capacity(synth_conditions.len());
    for sc in synth_conditions {
        let mut best: Option<(f64, usize)> = None;
        for (i, rc) in real_conditions.iter().enumerate() {
            if used[i] || rc.sex != sc.sex {
                continue;
            }
            let dist = (rc.age_years - sc.age_years).abs();
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, i));
            }
        }
        let (_, idx) = best.ok_or(EvalError::ExhaustedCohort(sc.sex))?;
        used[idx] = true;
        out.push(idx);
    }
    Ok(out)
}

/// Table-1 style scalar metrics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub ms_ssim: f64,
    pub age_mae: f64,
    pub sex_acc: f64,
    pub fd_phantom: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RealBaseline {
    pub ms_ssim: f64,
    pub age_mae: f64,
    pub sex_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RegionStat {
    pub region: String,
    pub real_mean: f64,
    pub real_std: f64,
    pub synth_mean: f64,
    pub synth_std: f64,
    pub cohens_d: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleCounts {
    pub real: usize,
    pub synth: usize,
}

/// Full evaluation output for one synthetic cohort against a real cohort.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CohortReport {
    pub metrics: Metrics,
    pub real_baseline: RealBaseline,
    pub regions: Vec<RegionStat>,
    pub per_decade_mae: Vec<DecadeMae>,
    pub sample_counts: SampleCounts,
    pub config_fingerprint: String,
}

impl CohortReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn regions_csv(&self) -> String {
        let mut out =
            String::from("region,real_mean,real_std,synth_mean,synth_std,abs_cohens_d\n");
        for r in &self.regions {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.region, r.real_mean, r.real_std, r.synth_mean, r.synth_std, r.cohens_d
            ));
        }
        out
    }

    pub fn decade_csv(&self) -> String {
        let mut out = String::from("age_lo,age_hi,n,age_mae\n");
        for d in &self.per_decade_mae {
            out.push_str(&format!("{},{},{},{:.6}\n", d.lo, d.hi, d.n, d.mae));
        }
        out
    }
}

pub struct EvalOptions {
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_pairs: 1000, seed: 0 }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1).max(1) as f64;
    (m, var.sqrt())
}

/// Evaluate a synthetic cohort against a real dataset.
pub fn evaluate_cohorts<T: Scalar>(
    real: &Dataset<T>,
    synth: &Dataset<T>,
    predictor: &AttributePredictor,
    predictor_params: &ParamSet<T>,
    opts: &EvalOptions,
) -> Result<CohortReport, EvalError> {
    if synth.is_empty() || real.is_empty() {
        return Err(EvalError::TooFewSamples("empty cohort".into()));
    }
    let matched = match_real_cohort(&real.conditions, &synth.conditions)?;
    let real_imgs: Vec<&Volume<T>> = matched.iter().map(|&i| &real.images[i]).collect();
    let real_conds: Vec<Condition> = matched.iter().map(|&i| real.conditions[i]).collect();
    let synth_imgs: Vec<&Volume<T>> = synth.images.iter().collect();

    let scales = max_scales(synth.images[0].spatial()).min(3);
    let ms_synth = ms_ssim_pairs(
        &synth_imgs,
        opts.n_pairs,
        scales,
        &mut crate::rng::substream(opts.seed, "eval.msssim.synth", 0),
    )?;
    let ms_real = ms_ssim_pairs(
        &real_imgs,
        opts.n_pairs,
        scales,
        &mut crate::rng::substream(opts.seed, "eval.msssim.real", 0),
    )?;

    let synth_preds = predict_cohort(predictor, predictor_params, &synth_imgs);
    let real_preds = predict_cohort(predictor, predictor_params, &real_imgs);
    let (age_mae, sex_acc) = attribute_adherence(&synth_preds, &synth.conditions)?;
    let (real_mae, real_acc) = attribute_adherence(&real_preds, &real_conds)?;
    let decades = per_decade_mae(&synth_preds, &synth.conditions);

    let real_feats: Vec<Vec<f64>> = real_preds.iter().map(|p| p.features.clone()).collect();
    let synth_feats: Vec<Vec<f64>> = synth_preds.iter().map(|p| p.features.clone()).collect();
    let fd = fd_phantom(&real_feats, &synth_feats)?;

    let region_names = real.labels[0].region_names().to_vec();
    let mut regions = Vec::new();
    for (r, name) in region_names.iter().enumerate() {
        let real_vols: Vec<f64> = matched
            .iter()
            .map(|&i| regional_volumes(&real.labels[i])[r] as f64)
            .collect();
        let synth_vols: Vec<f64> =
            synth.labels.iter().map(|l| regional_volumes(l)[r] as f64).collect();
        let (rm, rs) = mean_std(&real_vols);
        let (sm, ss) = mean_std(&synth_vols);
        let d = cohens_d(&real_vols, &synth_vols).unwrap_or(0.0);
        regions.push(RegionStat {
            region: name.clone(),
            real_mean: rm,
            real_std: rs,
            synth_mean: sm,
            synth_std: ss,
            cohens_d: d,
        });
    }

    Ok(CohortReport {
        metrics: Metrics { ms_ssim: ms_synth, age_mae, sex_acc, fd_phantom: fd },
        real_baseline: RealBaseline { ms_ssim: ms_real, age_mae: real_mae, sex_acc: real_acc },
        regions,
        per_decade_mae: decades,
        sample_counts: SampleCounts { real: real_imgs.len(), synth: synth_imgs.len() },
        config_fingerprint: format!(
            "real={} synth={} pairs={} seed={}",
            real.manifest.fingerprint(),
            synth.manifest.fingerprint(),
            opts.n_pairs,
            opts.seed
        ),
    })
}

/// Grayscale montage: one row per decade, up to `cols` samples per row.
/// 3D volumes contribute their middle slice along the first spatial axis.
pub fn write_montage<T: Scalar>(
    samples: &[&Volume<T>],
    conditions: &[Condition],
    cols: usize,
    path: &Path,
) -> Result<(), EvalError> {
    assert_eq!(samples.len(), conditions.len());
    let spatial = samples[0].spatial().to_vec();
    let (h, w) = match spatial.len() {
        2 => (spatial[0], spatial[1]),
        _ => (spatial[1], spatial[2]),
    };
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for decade in 0..12 {
        let lo = decade as f64 * 10.0;
        let members: Vec<usize> = conditions
            .iter()
            .enumerate()
            .filter(|(_, c)| c.age_years >= lo && c.age_years < lo + 10.0)
            .map(|(i, _)| i)
            .take(cols)
            .collect();
        if !members.is_empty() {
            rows.push(members);
        }
    }
    if rows.is_empty() {
        return Err(EvalError::TooFewSamples("no montage rows".into()));
    }
    let (img_h, img_w) = (rows.len() * h, cols * w);
    let mut pixels = vec![0u8; img_h * img_w];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, &idx) in row.iter().enumerate() {
            let vol = samples[idx];
            let vox: usize = vol.spatial().iter().product();
            let slice_off = if vol.spatial().len() == 3 {
                (vol.spatial()[0] / 2) * vol.spatial()[1] * vol.spatial()[2]
            } else {
                0
            };
            let data = &vol.tensor().data()[..vox];
            for y in 0..h {
                for x in 0..w {
                    let v = data[slice_off + y * w + x].as_f64().clamp(0.0, 1.0);
                    pixels[(ri * h + y) * img_w + ci * w + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), img_w as u32, img_h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_standard_normal, substream};
    use crate::tensor::Tensor;

    fn noise_volume(seed: u64, mean: f64) -> Volume<f64> {
        let mut rng = substream(seed, "eval.test", 0);
        let mut data = vec![0.0; 64 * 64];
        fill_standard_normal(&mut rng, &mut data);
        data.iter_mut().for_each(|v| *v = (*v * 0.15 + mean).clamp(0.0, 1.0));
        Volume::new(Tensor::new(&[1, 64, 64], data)).unwrap()
    }

    #[test]
    fn ms_ssim_self_is_one() {
        let x = noise_volume(1, 0.5);
        let v = ms_ssim_pair(&x, &x, 3).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "self MS-SSIM {v}");
    }

    #[test]
    fn ms_ssim_symmetric_and_bounded() {
        let x = noise_volume(2, 0.4);
        let y = noise_volume(3, 0.6);
        let a = ms_ssim_pair(&x, &y, 3).unwrap();
        let b = ms_ssim_pair(&y, &x, 3).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ms_ssim_too_small_rejected() {
        let x = Volume::new(Tensor::<f64>::full(&[1, 16, 16], 0.5)).unwrap();
        assert!(ms_ssim_pair(&x, &x, 3).is_err());
        assert!(ms_ssim_pair(&x, &x, 1).is_ok());
        assert_eq!(max_scales(&[64, 64]), 3);
        assert_eq!(max_scales(&[16, 16]), 1);
        assert_eq!(max_scales(&[352, 352]), 5);
    }

    #[test]
    fn ms_ssim_cohorts_identical_vs_noise() {
        let base = noise_volume(4, 0.5);
        let copies: Vec<Volume<f64>> = (0..6).map(|_| base.clone()).collect();
        let refs: Vec<&Volume<f64>> = copies.iter().collect();
        let mut rng = substream(5, "pairs", 0);
        let same = ms_ssim_pairs(&refs, 10, 3, &mut rng).unwrap();
        assert!((same - 1.0).abs() < 1e-6);
        let noisy: Vec<Volume<f64>> = (0..6).map(|i| noise_volume(100 + i, 0.5)).collect();
        let nrefs: Vec<&Volume<f64>> = noisy.iter().collect();
        let mut rng = substream(6, "pairs", 0);
        let diff = ms_ssim_pairs(&nrefs, 10, 3, &mut rng).unwrap();
        assert!(diff < 0.5, "independent noise MS-SSIM {diff}");
    }

    #[test]
    fn adherence_oracle_predictor() {
        let conds = vec![
            Condition::new(30.0, Sex::Female).unwrap(),
            Condition::new(70.0, Sex::Male).unwrap(),
        ];
        let preds = vec![
            PredictorOutput { age_years: 30.0, sex_logit: -2.0, features: vec![] },
            PredictorOutput { age_years: 70.0, sex_logit: 3.0, features: vec![] },
        ];
        let (mae, acc) = attribute_adherence(&preds, &conds).unwrap();
        assert_eq!(mae, 0.0);
        assert_eq!(acc, 1.0);
        assert!(attribute_adherence(&preds, &conds[..1]).is_err());
    }

    #[test]
    fn decade_breakdown_buckets() {
        let conds = vec![
            Condition::new(5.0, Sex::Female).unwrap(),
            Condition::new(7.0, Sex::Male).unwrap(),
            Condition::new(95.0, Sex::Male).unwrap(),
            Condition::new(100.0, Sex::Female).unwrap(),
        ];
        let preds = vec![
            PredictorOutput { age_years: 6.0, sex_logit: 0.0, features: vec![] },
            PredictorOutput { age_years: 9.0, sex_logit: 0.0, features: vec![] },
            PredictorOutput { age_years: 90.0, sex_logit: 0.0, features: vec![] },
            PredictorOutput { age_years: 98.0, sex_logit: 0.0, features: vec![] },
        ];
        let rows = per_decade_mae(&preds, &conds);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n, 2);
        assert!((rows[0].mae - 1.5).abs() < 1e-12);
        // age 100 joins the [90, 100] decade
        assert_eq!(rows[1].n, 2);
        assert!((rows[1].mae - 3.5).abs() < 1e-12);
    }

    #[test]
    fn regional_volumes_enumeration() {
        let labels = LabelMap::new(
            vec![0, 0, 3, 3, 0, 3, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0],
            &[4, 4],
            vec!["bg".into(), "a".into(), "b".into(), "vent".into()],
        )
        .unwrap();
        let v = regional_volumes(&labels);
        assert_eq!(v, vec![9, 4, 0, 3]);
        assert_eq!(v.iter().sum::<u64>(), 16);
        let empty = LabelMap::new(vec![0; 16], &[4, 4], vec!["bg".into(), "fg".into()]).unwrap();
        assert_eq!(regional_volumes(&empty), vec![16, 0]);
    }

    #[test]
    fn cohens_d_closed_forms() {
        let a = vec![0.0, 1.0, -1.0, 0.5, -0.5];
        assert_eq!(cohens_d(&a, &a).unwrap(), 0.0);
        // means 0 and 1, both sample std 1 exactly
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        let sd = (a.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        let expect = 1.0 / sd;
        assert!((cohens_d(&a, &b).unwrap() - expect).abs() < 1e-12);
        // symmetric
        assert_eq!(cohens_d(&a, &b).unwrap(), cohens_d(&b, &a).unwrap());
    }

    #[test]
    fn cohens_d_scale_shift_invariance() {
        let mut rng = substream(7, "cohend", 0);
        let mut a = vec![0.0; 40];
        let mut b = vec![0.0; 50];
        fill_standard_normal(&mut rng, &mut a);
        fill_standard_normal(&mut rng, &mut b);
        b.iter_mut().for_each(|v| *v += 0.8);
        let base = cohens_d(&a, &b).unwrap();
        let (k, m) = (3.7, -11.0);
        let at: Vec<f64> = a.iter().map(|v| k * v + m).collect();
        let bt: Vec<f64> = b.iter().map(|v| k * v + m).collect();
        let scaled = cohens_d(&at, &bt).unwrap();
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn cohens_d_degenerate_errors() {
        let a = vec![2.0, 2.0, 2.0];
        assert!(matches!(cohens_d(&a, &a), Err(EvalError::DegeneratePopulations)));
        assert!(cohens_d(&[1.0], &a).is_err());
    }

    fn gaussian_features(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, "fd", 0);
        (0..n)
            .map(|_| {
                let mut row = vec![0.0; d];
                fill_standard_normal(&mut rng, &mut row);
                row.iter_mut().for_each(|v| *v += shift);
                row
            })
            .collect()
    }

    #[test]
    fn fd_zero_on_identical_sets() {
        let f = gaussian_features(8, 40, 4, 0.0);
        let v = fd_phantom(&f, &f).unwrap();
        assert!(v.abs() < 1e-6, "fd {v}");
    }

    #[test]
    fn fd_mean_shift_closed_form() {
        // identical covariances, means 0 and m: fd ~= |m|^2
        let a = gaussian_features(9, 4000, 3, 0.0);
        let b: Vec<Vec<f64>> =
            a.iter().map(|r| r.iter().enumerate().map(|(i, v)| v + [1.0, -0.5, 2.0][i]).collect()).collect();
        let expect = 1.0f64 + 0.25 + 4.0;
        let v = fd_phantom(&a, &b).unwrap();
        assert!((v - expect).abs() < 1e-6, "fd {v} expect {expect}");
    }

    #[test]
    fn fd_matches_denman_beavers_oracle() {
        // independent dense route: Newton (Denman-Beavers) iteration for the
        // matrix square root of S1 S2
        let a = gaussian_features(10, 60, 3, 0.0);
        let b = gaussian_features(11, 70, 3, 0.7);
        let (mu1, c1) = mean_and_cov(&a);
        let (mu2, c2) = mean_and_cov(&b);
        let d = 3usize;
        let prod = matmul_square(&c1, &c2, d);
        // Denman-Beavers on `prod`
        let mut y = prod.clone();
        let mut z = vec![0.0; d * d];
        for i in 0..d {
            z[i * d + i] = 1.0;
        }
        let inv3 = |m: &[f64]| -> Vec<f64> {
            // direct 3x3 inverse
            let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6]);
            let mut inv = vec![0.0; 9];
            inv[0] = (m[4] * m[8] - m[5] * m[7]) / det;
            inv[1] = (m[2] * m[7] - m[1] * m[8]) / det;
            inv[2] = (m[1] * m[5] - m[2] * m[4]) / det;
            inv[3] = (m[5] * m[6] - m[3] * m[8]) / det;
            inv[4] = (m[0] * m[8] - m[2] * m[6]) / det;
            inv[5] = (m[2] * m[3] - m[0] * m[5]) / det;
            inv[6] = (m[3] * m[7] - m[4] * m[6]) / det;
            inv[7] = (m[1] * m[6] - m[0] * m[7]) / det;
            inv[8] = (m[0] * m[4] - m[1] * m[3]) / det;
            inv
        };
        for _ in 0..60 {
            let yi = inv3(&y);
            let zi = inv3(&z);
            let ny: Vec<f64> = (0..9).map(|i| 0.5 * (y[i] + zi[i])).collect();
            let nz: Vec<f64> = (0..9).map(|i| 0.5 * (z[i] + yi[i])).collect();
            y = ny;
            z = nz;
        }
        let tr_sqrt_oracle: f64 = (0..d).map(|i| y[i * d + i]).sum();
        let mean_term: f64 = mu1.iter().zip(&mu2).map(|(x, y)| (x - y) * (x - y)).sum();
        let tr1: f64 = (0..d).map(|i| c1[i * d + i]).sum();
        let tr2: f64 = (0..d).map(|i| c2[i * d + i]).sum();
        let oracle = mean_term + tr1 + tr2 - 2.0 * tr_sqrt_oracle;
        let ours = fd_phantom(&a, &b).unwrap();
        assert!((ours - oracle).abs() < 1e-5, "{ours} vs oracle {oracle}");
    }

    #[test]
    fn fd_requires_enough_samples() {
        let a = gaussian_features(12, 3, 4, 0.0);
        assert!(fd_phantom(&a, &a).is_err());
    }

    #[test]
    fn matching_is_nearest_age_same_sex_without_replacement() {
        let real = vec![
            Condition::new(10.0, Sex::Female).unwrap(),
            Condition::new(30.0, Sex::Female).unwrap(),
            Condition::new(20.0, Sex::Male).unwrap(),
            Condition::new(11.0, Sex::Female).unwrap(),
        ];
        let synth = vec![
            Condition::new(12.0, Sex::Female).unwrap(),
            Condition::new(12.0, Sex::Female).unwrap(),
            Condition::new(25.0, Sex::Male).unwrap(),
        ];
        let m = match_real_cohort(&real, &synth).unwrap();
        assert_eq!(m, vec![3, 0, 2]);
        // exhausting a sex errors
        let too_many = vec![Condition::new(20.0, Sex::Male).unwrap(); 2];
        assert!(match_real_cohort(&real, &too_many).is_err());
    }

    #[test]
    fn report_serialization_contains_metric_names() {
        let report = CohortReport {
            metrics: Metrics { ms_ssim: 0.7, age_mae: 5.0, sex_acc: 0.9, fd_phantom: 12.0 },
            real_baseline: RealBaseline { ms_ssim: 0.72, age_mae: 4.0, sex_acc: 0.92 },
            regions: vec![RegionStat {
                region: "ventricle".into(),
                real_mean: 10.0,
                real_std: 1.0,
                synth_mean: 11.0,
                synth_std: 1.5,
                cohens_d: 0.3,
            }],
            per_decade_mae: vec![DecadeMae { lo: 0.0, hi: 10.0, n: 5, mae: 3.0 }],
            sample_counts: SampleCounts { real: 5, synth: 5 },
            config_fingerprint: "x".into(),
        };
        let json = report.to_json();
        for key in ["ms_ssim", "age_mae", "sex_acc", "fd_phantom"] {
            assert!(json.contains(key), "missing {key}");
        }
        assert!(report.regions_csv().contains("ventricle"));
        assert!(report.decade_csv().starts_with("age_lo"));
    }
}
