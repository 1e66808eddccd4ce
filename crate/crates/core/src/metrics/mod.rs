//! Evaluation metrics over rendered view sequences: CLIP-space style,
//! content and temporal scores, a Gram-matrix style distance, depth-warped
//! multi-view consistency and the Fréchet distance.

pub mod features;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compute_grid, compute_visibility, resample_mask, Mask2d, WarpPlan};
use crate::imageio::RgbImage;
use crate::renderer::CameraView;
pub use features::{ClipVision, FeatureMap, FeaturePyramid, ImageEmbedder, RandomConvFeatures, Vgg19};

/// Ridge added to covariances that are numerically singular.
pub const FID_RIDGE: f64 = 1e-6;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_s: f64,
    pub clip_c: f64,
    /// Mean over consecutive pairs of the stylized minus the content
    /// frame-to-frame cosine. `None` for single frames.
    pub clip_cons: Option<f64>,
    /// Ratio of mean consecutive cosines, stylized over content.
    pub clip_f: Option<f64>,
}

/// Scores from precomputed embeddings.
pub fn clip_scores(stylized: &[Vec<f64>], content: &[Vec<f64>], style: &[f64]) -> Result<ClipScores> {
    if stylized.is_empty() || stylized.len() != content.len() {
        return Err(Error::InvalidArgument(format!(
            "{} stylized and {} content frames",
            stylized.len(),
            content.len()
        )));
    }
    let n = stylized.len() as f64;
    let clip_s = stylized.iter().map(|f| cosine(f, style)).sum::<f64>() / n;
    let clip_c = stylized.iter().zip(content).map(|(f, c)| cosine(f, c)).sum::<f64>() / n;
    let (clip_cons, clip_f) = if stylized.len() >= 2 {
        let pairs = (stylized.len() - 1) as f64;
        let fs: Vec<f64> = stylized.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
        let cs: Vec<f64> = content.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
        let cons = fs.iter().zip(&cs).map(|(f, c)| f - c).sum::<f64>() / pairs;
        let mean_f = fs.iter().sum::<f64>() / pairs;
        let mean_c = cs.iter().sum::<f64>() / pairs;
        (Some(cons), Some(mean_f / mean_c))
    } else {
        (None, None)
    };
    Ok(ClipScores {
        clip_s,
        clip_c,
        clip_cons,
        clip_f,
    })
}

/// `G = F Fᵀ / (H W)` for a `C x HW` feature matrix.
pub fn gram_matrix(f: &FeatureMap) -> DMatrix<f64> {
    let hw = f.height * f.width;
    let m = DMatrix::from_row_slice(f.channels, hw, &f.data);
    (&m * m.transpose()) / hw.max(1) as f64
}

/// Mean over layers of the Frobenius distance between Gram matrices.
pub fn gram_distance(a: &[FeatureMap], b: &[FeatureMap]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("feature pyramids differ in depth".into()));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.channels != fb.channels {
            return Err(Error::Shape("feature channels differ".into()));
        }
        total += (gram_matrix(fa) - gram_matrix(fb)).norm();
    }
    Ok(total / a.len() as f64)
}

/// S_vgg: mean over frames of the layer-averaged Gram distance to the
/// style image, scaled by 100.
pub fn vgg_style_distance(frames: &[RgbImage], style: &RgbImage, net: &dyn FeaturePyramid) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames".into()));
    }
    let fs = net.features(style)?;
    let mut total = 0.0;
    for f in frames {
        total += gram_distance(&net.features(f)?, &fs)?;
    }
    Ok(100.0 * total / frames.len() as f64)
}

/// Root mean squared difference over masked pixels and channels; `None`
/// when the mask is empty.
pub fn masked_rmse(a: &[f64], b: &[f64], mask: &Mask2d) -> Option<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (p, &m) in mask.data.iter().enumerate() {
        if m {
            for c in 0..3 {
                acc += (a[3 * p + c] - b[3 * p + c]).powi(2);
            }
            count += 3;
        }
    }
    (count > 0).then(|| (acc / count as f64).sqrt())
}

/// LPIPS-style distance with uniform layer weights: per layer, unit-normalize
/// each feature vector over channels, average the squared difference over
/// masked positions, then sum over layers.
pub fn perceptual_distance(a: &[FeatureMap], b: &[FeatureMap], mask: Option<&Mask2d>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("feature pyramids differ in depth".into()));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        let (c, hw) = (fa.channels, fa.height * fa.width);
        let m = mask.map(|m| resample_mask(m, (fa.height, fa.width)));
        let mut acc = 0.0;
        let mut count = 0usize;
        for p in 0..hw {
            if m.as_ref().is_some_and(|m| !m.data[p]) {
                continue;
            }
            let na = (0..c).map(|k| fa.data[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let nb = (0..c).map(|k| fb.data[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            acc += (0..c)
                .map(|k| (fa.data[k * hw + p] / na - fb.data[k * hw + p] / nb).powi(2))
                .sum::<f64>();
            count += 1;
        }
        if count > 0 {
            total += acc / count as f64;
        }
    }
    Ok(total)
}

/// Frame `i + delta` warped into frame `i`, with the visibility mask.
pub fn warp_frame(
    target_camera: &CameraView,
    target_depth: &[f64],
    source_camera: &CameraView,
    source: &RgbImage,
) -> Result<(Vec<f64>, Mask2d)> {
    let (grid, raw) = compute_grid(target_camera, source_camera, target_depth)?;
    let vis = compute_visibility(&grid, &raw)?;
    if source.data.len() != grid.source_width * grid.source_height * 3 {
        return Err(Error::Shape("source frame does not match its camera".into()));
    }
    Ok((WarpPlan::new(&grid).apply(&source.data, 3), vis))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub lpips: Option<f64>,
    pub rmse: f64,
    pub pairs: usize,
}

/// Warped-frame consistency at range `delta` along a path. `depths` are the
/// rendered depths of each frame with background set to zero.
pub fn consistency(
    frames: &[RgbImage],
    depths: &[Vec<f64>],
    cameras: &[CameraView],
    delta: usize,
    net: Option<&dyn FeaturePyramid>,
) -> Result<Consistency> {
    if frames.len() != depths.len() || frames.len() != cameras.len() {
        return Err(Error::Shape("frames, depths and cameras differ in count".into()));
    }
    if delta == 0 || frames.len() < delta + 1 {
        return Err(Error::InvalidArgument(format!(
            "a path of {} frames is too short for range {delta}",
            frames.len()
        )));
    }
    let (mut rmse, mut lpips, mut pairs) = (0.0, 0.0, 0usize);
    for i in 0..frames.len() - delta {
        let j = i + delta;
        let (warped, vis) = warp_frame(&cameras[i], &depths[i], &cameras[j], &frames[j])?;
        let Some(r) = masked_rmse(&frames[i].data, &warped, &vis) else {
            continue;
        };
        rmse += r;
        if let Some(net) = net {
            let masked = |data: &[f64]| -> Result<RgbImage> {
                let d = data
                    .chunks(3)
                    .zip(&vis.data)
                    .flat_map(|(px, &m)| if m { [px[0], px[1], px[2]] } else { [0.0; 3] })
                    .collect();
                RgbImage::new(frames[i].width, frames[i].height, d)
            };
            let fa = net.features(&masked(&frames[i].data)?)?;
            let fb = net.features(&masked(&warped)?)?;
            lpips += perceptual_distance(&fa, &fb, Some(&vis))?;
        }
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument(format!(
            "no co-visible frame pairs at range {delta}"
        )));
    }
    Ok(Consistency {
        lpips: net.map(|_| lpips / pairs as f64),
        rmse: rmse / pairs as f64,
        pairs,
    })
}

fn mean_and_covariance(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument("Fréchet distance needs at least two samples per set".into()));
    }
    let d = x[0].len();
    if x.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    Ok((mean, centered.transpose() * &centered / (n - 1) as f64))
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    min <= 1e-12 * max.max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fid {
    pub value: f64,
    /// Whether the ridge was added to the covariances.
    pub regularized: bool,
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Fid> {
    let (mu1, mut s1) = mean_and_covariance(a)?;
    let (mu2, mut s2) = mean_and_covariance(b)?;
    if mu1.len() != mu2.len() {
        return Err(Error::Shape("embedding sets differ in dimension".into()));
    }
    let regularized = is_singular(&s1) || is_singular(&s2);
    if regularized {
        let ridge = DMatrix::identity(mu1.len(), mu1.len()) * FID_RIDGE;
        s1 += &ridge;
        s2 += &ridge;
    }
    Ok(Fid {
        value: frechet_distance(&mu1, &s1, &mu2, &s2),
        regularized,
    })
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2 (√Σ1 Σ2 √Σ1)^{1/2})`.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let r1 = psd_sqrt(s1);
    let cross = psd_sqrt(&(&r1 * s2 * &r1));
    let v = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    v.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// CLIP and VGG19 weights from the weights directory; metrics whose
    /// weights are missing are skipped.
    Pretrained,
    /// Seeded random convolutional features (plumbing checks only).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub extractor: ExtractorKind,
    pub seed: u64,
    /// Directory with `clip_vision.safetensors` and `vgg19.safetensors`.
    pub weights: Option<PathBuf>,
    pub short_range: usize,
    pub long_range: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            extractor: ExtractorKind::Pretrained,
            seed: 0,
            weights: None,
            short_range: 1,
            long_range: 7,
        }
    }
}

/// Loaded feature extractors; either may be missing.
pub struct Extractors {
    pub embedder: Option<Box<dyn ImageEmbedder>>,
    pub pyramid: Option<Box<dyn FeaturePyramid>>,
    pub notes: Vec<String>,
}

impl Extractors {
    pub fn from_config(config: &MetricsConfig) -> Result<Self> {
        match config.extractor {
            ExtractorKind::Random => Ok(Extractors {
                embedder: Some(Box::new(RandomConvFeatures::new(config.seed)?)),
                pyramid: Some(Box::new(RandomConvFeatures::new(config.seed)?)),
                notes: vec!["random-conv features: values are not comparable to published numbers".into()],
            }),
            ExtractorKind::Pretrained => {
                let dir = config
                    .weights
                    .clone()
                    .or_else(|| std::env::var_os(crate::backbone::WEIGHTS_DIR_ENV).map(PathBuf::from));
                let mut notes = Vec::new();
                let load = |name: &str| dir.as_ref().map(|d| d.join(name)).filter(|p| p.is_file());
                let embedder: Option<Box<dyn ImageEmbedder>> = match load("clip_vision.safetensors") {
                    Some(p) => Some(Box::new(ClipVision::load(&p)?)),
                    None => {
                        notes.push("CLIP weights unavailable: CLIP-* and FID skipped".into());
                        None
                    }
                };
                let pyramid: Option<Box<dyn FeaturePyramid>> = match load("vgg19.safetensors") {
                    Some(p) => Some(Box::new(Vgg19::load(&p)?)),
                    None => {
                        notes.push("VGG19 weights unavailable: S_vgg and LPIPS skipped".into());
                        None
                    }
                };
                Ok(Extractors {
                    embedder,
                    pyramid,
                    notes,
                })
            }
        }
    }
}

/// One evaluated sequence (or the aggregate over several).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub frames: usize,
    pub clip_s: Option<f64>,
    pub clip_c: Option<f64>,
    /// Harness definition; see [`ClipScores::clip_cons`].
    pub clip_cons: Option<f64>,
    pub clip_f: Option<f64>,
    pub s_vgg: Option<f64>,
    pub fid: Option<f64>,
    pub lpips_short: Option<f64>,
    pub rmse_short: Option<f64>,
    pub lpips_long: Option<f64>,
    pub rmse_long: Option<f64>,
    pub notes: Vec<String>,
}

/// Column names of the CSV report.
pub const REPORT_COLUMNS: [&str; 10] = [
    "CLIP-S",
    "CLIP-C",
    "CLIP-CONS",
    "CLIP-F",
    "S_vgg",
    "FID",
    "Short-range consistency LPIPS",
    "Short-range consistency RMSE",
    "Long-range consistency LPIPS",
    "Long-range consistency RMSE",
];

impl MetricReport {
    fn values(&self) -> [Option<f64>; 10] {
        [
            self.clip_s,
            self.clip_c,
            self.clip_cons,
            self.clip_f,
            self.s_vgg,
            self.fid,
            self.lpips_short,
            self.rmse_short,
            self.lpips_long,
            self.rmse_long,
        ]
    }

    /// Mean of every metric over the reports that have it.
    pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
        let mean = |k: usize| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.values()[k]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        MetricReport {
            name: "aggregate".into(),
            frames: reports.iter().map(|r| r.frames).sum(),
            clip_s: mean(0),
            clip_c: mean(1),
            clip_cons: mean(2),
            clip_f: mean(3),
            s_vgg: mean(4),
            fid: mean(5),
            lpips_short: mean(6),
            rmse_short: mean(7),
            lpips_long: mean(8),
            rmse_long: mean(9),
            notes: Vec::new(),
        }
    }
}

pub fn write_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut out = format!("sequence,frames,{}\n", REPORT_COLUMNS.join(","));
    for r in reports {
        let cells: Vec<String> = r
            .values()
            .iter()
            .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
            .collect();
        out.push_str(&format!("{},{},{}\n", r.name, r.frames, cells.join(",")));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_json(reports: &[MetricReport], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(file, reports)?;
    Ok(())
}

/// Inputs for one sequence.
pub struct Sequence<'a> {
    pub name: String,
    pub stylized: &'a [RgbImage],
    pub content: &'a [RgbImage],
    /// Depths and cameras of the frames, when the path geometry is known.
    pub geometry: Option<(&'a [Vec<f64>], &'a [CameraView])>,
}

/// Runs every available metric on one sequence. Metrics that cannot be
/// computed are left empty with a note.
pub fn evaluate_sequence(
    seq: &Sequence<'_>,
    style: &RgbImage,
    extractors: &Extractors,
    config: &MetricsConfig,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        name: seq.name.clone(),
        frames: seq.stylized.len(),
        clip_s: None,
        clip_c: None,
        clip_cons: None,
        clip_f: None,
        s_vgg: None,
        fid: None,
        lpips_short: None,
        rmse_short: None,
        lpips_long: None,
        rmse_long: None,
        notes: extractors.notes.clone(),
    };
    if seq.stylized.len() < 2 {
        report
            .notes
            .push("single frame: temporal and consistency metrics are undefined".into());
        log::warn!("{}: single frame, temporal metrics reported as null", seq.name);
    }
    if let Some(e) = &extractors.embedder {
        let fs = seq.stylized.iter().map(|f| e.embed(f)).collect::<Result<Vec<_>>>()?;
        let cs = seq.content.iter().map(|f| e.embed(f)).collect::<Result<Vec<_>>>()?;
        let scores = clip_scores(&fs, &cs, &e.embed(style)?)?;
        report.clip_s = Some(scores.clip_s);
        report.clip_c = Some(scores.clip_c);
        report.clip_cons = scores.clip_cons;
        report.clip_f = scores.clip_f;
        if fs.len() >= 2 {
            let f = fid(&fs, &cs)?;
            if f.regularized {
                report.notes.push(format!("FID covariance regularized with ridge {FID_RIDGE}"));
            }
            report.notes.push(format!("FID over {} frames per set; small samples bias FID upward", fs.len()));
            report.fid = Some(f.value);
        }
    }
    if let Some(p) = &extractors.pyramid {
        report.s_vgg = Some(vgg_style_distance(seq.stylized, style, p.as_ref())?);
    }
    if let Some((depths, cameras)) = seq.geometry {
        let net = extractors.pyramid.as_deref();
        for (delta, short) in [(config.short_range, true), (config.long_range, false)] {
            match consistency(seq.stylized, depths, cameras, delta, net) {
                Ok(c) => {
                    if short {
                        report.lpips_short = c.lpips;
                        report.rmse_short = Some(c.rmse);
                    } else {
                        report.lpips_long = c.lpips;
                        report.rmse_long = Some(c.rmse);
                    }
                }
                Err(Error::InvalidArgument(msg)) => report.notes.push(msg),
                Err(e) => return Err(e),
            }
        }
    } else {
        report.notes.push("no path geometry: consistency metrics skipped".into());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn clip_scores_match_cosine_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_vecs(3, 8, &mut rng);
        let c = random_vecs(3, 8, &mut rng);
        let s = random_vecs(1, 8, &mut rng).remove(0);
        let cos = |a: &[f64], b: &[f64]| {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..a.len() {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            dot / (na.sqrt() * nb.sqrt())
        };
        let r = clip_scores(&f, &c, &s).unwrap();
        assert_relative_eq!(r.clip_s, (cos(&f[0], &s) + cos(&f[1], &s) + cos(&f[2], &s)) / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.clip_c, (cos(&f[0], &c[0]) + cos(&f[1], &c[1]) + cos(&f[2], &c[2])) / 3.0, epsilon = 1e-12);
        let ff = (cos(&f[0], &f[1]) + cos(&f[1], &f[2])) / 2.0;
        let cc = (cos(&c[0], &c[1]) + cos(&c[1], &c[2])) / 2.0;
        assert_relative_eq!(r.clip_f.unwrap(), ff / cc, epsilon = 1e-12);
        assert_relative_eq!(r.clip_cons.unwrap(), ff - cc, epsilon = 1e-12);
    }

    #[test]
    fn identical_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_vecs(4, 8, &mut rng);
        let r = clip_scores(&f, &f, &f[0]).unwrap();
        assert_relative_eq!(r.clip_c, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.clip_f.unwrap(), 1.0, epsilon = 1e-12);
        let same = vec![f[0].clone(); 3];
        let r = clip_scores(&same, &f[..3], &f[0]).unwrap();
        assert!(r.clip_f.unwrap() > 0.0);
        let r = clip_scores(&same, &same, &f[0]).unwrap();
        assert_relative_eq!(r.clip_f.unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_frame_has_no_temporal_scores() {
        let f = vec![vec![1.0, 2.0]];
        let r = clip_scores(&f, &f, &[1.0, 0.0]).unwrap();
        assert!(r.clip_cons.is_none() && r.clip_f.is_none());
    }

    #[test]
    fn gram_of_constant_map_is_outer_product_of_means() {
        let means = [0.5, -2.0, 3.0];
        let (h, w) = (3, 4);
        let data: Vec<f64> = means.iter().flat_map(|&m| std::iter::repeat(m).take(h * w)).collect();
        let g = gram_matrix(&FeatureMap {
            channels: 3,
            height: h,
            width: w,
            data,
        });
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(g[(i, j)], means[i] * means[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gram_distance_is_symmetric_and_zero_on_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = |rng: &mut ChaCha8Rng| FeatureMap {
            channels: 4,
            height: 3,
            width: 3,
            data: (0..36).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let a = vec![fm(&mut rng), fm(&mut rng)];
        let b = vec![fm(&mut rng), fm(&mut rng)];
        assert_eq!(gram_distance(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(gram_distance(&a, &b).unwrap(), gram_distance(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn masked_rmse_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen()).collect();
        let mask = Mask2d {
            height: 16,
            width: 16,
            data: (0..256).map(|_| rng.gen_bool(0.6)).collect(),
        };
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                if mask.get(x, y) {
                    for c in 0..3 {
                        let i = (y * 16 + x) * 3 + c;
                        acc += (a[i] - b[i]) * (a[i] - b[i]);
                        n += 1.0;
                    }
                }
            }
        }
        assert_relative_eq!(masked_rmse(&a, &b, &mask).unwrap(), (acc / n).sqrt(), epsilon = 1e-12);
        assert!(masked_rmse(&a, &b, &Mask2d::filled(16, 16, false)).is_none());
    }

    #[test]
    fn fid_of_point_masses_is_squared_distance() {
        let a = vec![vec![1.0, 2.0, 3.0]; 4];
        let b = vec![vec![0.0, 0.0, 1.0]; 5];
        let f = fid(&a, &b).unwrap();
        assert!(f.regularized);
        assert_relative_eq!(f.value, 1.0 + 4.0 + 4.0, epsilon = 1e-6);
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_vecs(20, 8, &mut rng);
        assert!(fid(&a, &a).unwrap().value <= 1e-3);
        assert!(fid(&a[..1], &a).is_err());
    }

    #[test]
    fn perceptual_distance_is_zero_on_identical_features() {
        let fm = FeatureMap {
            channels: 2,
            height: 2,
            width: 2,
            data: vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.1, 0.0, 1.0],
        };
        assert_eq!(perceptual_distance(&[fm.clone()], &[fm], None).unwrap(), 0.0);
    }

    /// Denman–Beavers iteration for the principal square root of a general
    /// matrix, used as an independent route to `tr sqrt(Σ1 Σ2)`.
    fn denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut y = a.clone();
        let mut z = DMatrix::identity(n, n);
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            let nz = (&z + yi) * 0.5;
            y = ny;
            z = nz;
        }
        y
    }

    #[test]
    fn fid_matches_denman_beavers_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_vecs(40, 5, &mut rng);
        let b: Vec<Vec<f64>> = random_vecs(30, 5, &mut rng)
            .into_iter()
            .map(|v| v.iter().enumerate().map(|(i, x)| 2.0 * x + 0.1 * i as f64).collect())
            .collect();
        let (m1, s1) = mean_and_covariance(&a).unwrap();
        let (m2, s2) = mean_and_covariance(&b).unwrap();
        let cross = denman_beavers(&(&s1 * &s2));
        let expected = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
        let f = fid(&a, &b).unwrap();
        assert!(!f.regularized);
        assert_relative_eq!(f.value, expected, epsilon = 1e-8);
    }
}
