//! End-to-end reconstruction: patch tiling, Tukey blending, both
//! reconstruction routes, localization metrics, figure outputs and file
//! formats.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::model::{EmitterMap, EmitterPoint, GridSpec, MeasurementOperator, Psf};
use crate::scalar::Scalar;
use crate::simulate::{Emitter, Scene};
use crate::solver::{solve, Problem, SolverConfig};
use crate::stats::{
    compute_v_cov_from_stack, lipschitz_constant, preprocess, resize_to_high_res,
    variance_of_frames, Formulation, FrameStack, GramOperator,
};
use crate::unfolded::{ConvBackend, LsparcomWeights, PreparedNetwork, FOLDS};

/// Denominator floor of the blended average.
pub const BLEND_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchPlan {
    /// Low-resolution patch side.
    pub patch_low: usize,
    /// Low-resolution overlap between neighbouring patches.
    pub overlap_low: usize,
    /// Taper fraction of the Tukey window.
    pub tukey_r: f64,
}

impl Default for PatchPlan {
    fn default() -> Self {
        Self {
            patch_low: 16,
            overlap_low: 8,
            tukey_r: 0.5,
        }
    }
}

impl PatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.patch_low == 0 || self.overlap_low >= self.patch_low {
            return Err(Error::InvalidArgument(format!(
                "patch {} with overlap {}",
                self.patch_low, self.overlap_low
            )));
        }
        if !(0.0..=1.0).contains(&self.tukey_r) {
            return Err(Error::InvalidArgument(format!("Tukey taper {}", self.tukey_r)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.patch_low - self.overlap_low
    }

    /// Same plan measured in high-resolution pixels.
    pub fn scaled(&self, p: usize) -> Self {
        Self {
            patch_low: self.patch_low * p,
            overlap_low: self.overlap_low * p,
            tukey_r: self.tukey_r,
        }
    }
}

/// Where a patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
}

/// Patch origins along one axis of length `len` (already padded to at least
/// one patch). The last patch is aligned to the far border.
pub fn patch_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + patch < len {
        out.push(o);
        o += stride;
    }
    out.push(len - patch);
    out.dedup();
    out
}

/// Tiling of a square canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Tiling {
    pub plan: PatchPlan,
    /// Side of the input image.
    pub side: usize,
    /// Side after zero padding (at least one patch).
    pub padded: usize,
    pub placements: Vec<Placement>,
}

impl Tiling {
    pub fn new(side: usize, plan: PatchPlan) -> Result<Self> {
        plan.validate()?;
        if side == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let padded = side.max(plan.patch_low);
        if padded > side {
            log::info!("padding {side}-pixel image to one {padded}-pixel patch");
        }
        let origins = patch_origins(padded, plan.patch_low, plan.stride());
        let placements = origins
            .iter()
            .flat_map(|&r| origins.iter().map(move |&c| Placement { row: r, col: c }))
            .collect();
        Ok(Self {
            plan,
            side,
            padded,
            placements,
        })
    }

    pub fn was_padded(&self) -> bool {
        self.padded > self.side
    }

    /// Same tiling on the high-resolution canvas.
    pub fn scaled(&self, p: usize) -> Self {
        Self {
            plan: self.plan.scaled(p),
            side: self.side * p,
            padded: self.padded * p,
            placements: self
                .placements
                .iter()
                .map(|pl| Placement {
                    row: pl.row * p,
                    col: pl.col * p,
                })
                .collect(),
        }
    }
}

fn pad_to<T: Scalar>(img: ArrayView2<T>, side: usize) -> Array2<T> {
    let mut out = Array2::zeros((side, side));
    out.slice_mut(s![..img.nrows(), ..img.ncols()]).assign(&img);
    out
}

/// Cuts a square image into overlapping patches.
pub fn extract_patches<T: Scalar>(
    img: ArrayView2<T>,
    plan: PatchPlan,
) -> Result<(Vec<Array2<T>>, Tiling)> {
    let (r, c) = img.dim();
    if r != c {
        return Err(shape_err("square image", format!("{r}x{c}")));
    }
    let tiling = Tiling::new(r, plan)?;
    let padded = pad_to(img, tiling.padded);
    let k = plan.patch_low;
    let patches = tiling
        .placements
        .iter()
        .map(|p| padded.slice(s![p.row..p.row + k, p.col..p.col + k]).to_owned())
        .collect();
    Ok((patches, tiling))
}

/// Sub-stacks of a `(T, M, M)` movie on the tiling's placements.
pub fn extract_stack_patches<T: Scalar>(frames: &Array3<T>, tiling: &Tiling) -> Vec<Array3<T>> {
    let (t, m, _) = frames.dim();
    let mut padded = Array3::zeros((t, tiling.padded, tiling.padded));
    padded.slice_mut(s![.., ..m, ..m]).assign(frames);
    let k = tiling.plan.patch_low;
    tiling
        .placements
        .iter()
        .map(|p| padded.slice(s![.., p.row..p.row + k, p.col..p.col + k]).to_owned())
        .collect()
}

/// Tukey window of length `n` sampled at pixel centers `(i + 0.5) / n`.
pub fn tukey_window(n: usize, r: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) / n as f64;
            if r <= 0.0 {
                1.0
            } else if x < r / 2.0 {
                0.5 * (1.0 + (2.0 * std::f64::consts::PI / r * (x - r / 2.0)).cos())
            } else if x >= 1.0 - r / 2.0 {
                0.5 * (1.0 + (2.0 * std::f64::consts::PI / r * (x - 1.0 + r / 2.0)).cos())
            } else {
                1.0
            }
        })
        .collect()
}

/// Weighted average of overlapping patches with a separable Tukey window.
pub fn recombine_tukey<T: Scalar>(patches: &[Array2<T>], tiling: &Tiling) -> Result<Array2<T>> {
    if patches.len() != tiling.placements.len() {
        return Err(shape_err(
            format!("{} patches", tiling.placements.len()),
            patches.len().to_string(),
        ));
    }
    let k = tiling.plan.patch_low;
    let w1 = tukey_window(k, tiling.plan.tukey_r);
    let mut num = Array2::<f64>::zeros((tiling.padded, tiling.padded));
    let mut den = Array2::<f64>::zeros((tiling.padded, tiling.padded));
    for (patch, pl) in patches.iter().zip(&tiling.placements) {
        if patch.dim() != (k, k) {
            return Err(shape_err(format!("{k}x{k}"), format!("{:?}", patch.dim())));
        }
        for i in 0..k {
            for j in 0..k {
                let w = w1[i] * w1[j];
                num[[pl.row + i, pl.col + j]] += w * patch[[i, j]].to_f64_lossy();
                den[[pl.row + i, pl.col + j]] += w;
            }
        }
    }
    if den.iter().any(|d| *d <= 0.0) {
        return Err(Error::InvalidArgument(
            "tiling leaves pixels without weight".into(),
        ));
    }
    let n = tiling.side;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        T::lit(num[[i, j]] / den[[i, j]].max(BLEND_EPS))
    }))
}

/// Options of the classical solver route.
#[derive(Clone, Debug)]
pub struct SparcomOptions {
    pub psf: Psf<f64>,
    pub solver: SolverConfig,
    /// Interpret `solver.lambda` relative to the largest entry of `v` over the
    /// whole image.
    pub lambda_relative: bool,
    pub plan: PatchPlan,
}

impl SparcomOptions {
    pub fn new(psf: Psf<f64>, solver: SolverConfig) -> Self {
        Self {
            psf,
            solver,
            lambda_relative: true,
            plan: PatchPlan::default(),
        }
    }
}

fn zero_map<T: Scalar>(side: usize) -> EmitterMap<T> {
    EmitterMap::new(Array2::zeros((side, side))).expect("zeros are valid")
}

/// Preprocessed movie, or `None` when the movie is identically zero.
fn preprocessed<T: Scalar>(stack: &FrameStack<T>) -> Result<Option<FrameStack<T>>> {
    match preprocess(stack) {
        Ok(s) => Ok(Some(s)),
        Err(Error::ZeroMovie) => Ok(None),
        Err(e) => Err(e),
    }
}

/// SPARCOM on overlapping patches of the movie.
pub fn reconstruct_sparcom<T: Scalar>(
    stack: &FrameStack<T>,
    opts: &SparcomOptions,
) -> Result<EmitterMap<T>> {
    opts.solver.validate()?;
    let grid = stack.grid;
    let Some(pre) = preprocessed(stack)? else {
        return Ok(zero_map(grid.n));
    };
    let tiling = Tiling::new(grid.m, opts.plan)?;
    let patch_grid = GridSpec::with_pitch(opts.plan.patch_low, grid.p, grid.delta_l)?;
    let psf = psf_cast::<T>(&opts.psf)?;
    let op = MeasurementOperator::convolutional(&psf, patch_grid, false)?;
    let gram = GramOperator::for_formulation(&op, opts.solver.formulation);
    let side = patch_grid.n;
    let l_f = lipschitz_constant(side, |x| gram.apply(x))?;
    if !l_f.nonzero {
        return Ok(zero_map(grid.n));
    }
    let sub = extract_stack_patches(&pre.frames, &tiling);
    let vs: Vec<Array2<T>> = sub
        .into_par_iter()
        .map(|frames| -> Result<Array2<T>> {
            let s = FrameStack::new(frames, patch_grid)?;
            match opts.solver.formulation {
                Formulation::Covariance => compute_v_cov_from_stack(&op, &s),
                Formulation::Variance => {
                    let g = variance_of_frames(&s.frames)?;
                    let sq = match &gram {
                        GramOperator::Variance(sq) => sq,
                        _ => unreachable!("variance Gram"),
                    };
                    sq.apply_adjoint(g.view())
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut cfg = opts.solver.clone();
    if opts.lambda_relative {
        let vmax = vs
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, x| m.max(x.to_f64_lossy()));
        if vmax <= 0.0 {
            return Ok(zero_map(grid.n));
        }
        cfg.lambda *= vmax;
    }
    let patches: Vec<Array2<T>> = vs
        .par_iter()
        .map(|v| -> Result<Array2<T>> {
            let problem = Problem {
                v: v.view(),
                gram: &gram,
                data_energy: 0.0,
            };
            Ok(solve(&problem, l_f.value, &cfg)?.final_x.values)
        })
        .collect::<Result<_>>()?;
    EmitterMap::new(recombine_tukey(&patches, &tiling.scaled(grid.p))?)
}

fn psf_cast<T: Scalar>(psf: &Psf<f64>) -> Result<Psf<T>> {
    use crate::model::PsfKind;
    let kind = match &psf.kind {
        PsfKind::Gaussian { sigma } => PsfKind::Gaussian { sigma: *sigma },
        PsfKind::Delta => PsfKind::Delta,
        PsfKind::Sampled { kernel } => PsfKind::Sampled {
            kernel: kernel.mapv(T::lit),
        },
    };
    let out = Psf {
        kind,
        support_radius: psf.support_radius,
    };
    out.validate()?;
    Ok(out)
}

/// LSPARCOM on overlapping patches of the movie.
pub fn reconstruct_lsparcom<T: Scalar>(
    stack: &FrameStack<T>,
    weights: &LsparcomWeights<T>,
    plan: PatchPlan,
) -> Result<EmitterMap<T>> {
    weights.validate()?;
    let grid = stack.grid;
    let Some(pre) = preprocessed(stack)? else {
        return Ok(zero_map(grid.n));
    };
    let g_y = variance_of_frames(&pre.frames)?;
    let (patches, tiling) = extract_patches(g_y.view(), plan)?;
    let net = PreparedNetwork::new(weights, plan.patch_low * grid.p, ConvBackend::Fourier)?;
    let outs: Vec<Array2<T>> = patches
        .par_iter()
        .map(|p| -> Result<Array2<T>> {
            let g = resize_to_high_res(p.view(), grid.p);
            Ok(net.trace(g.view(), None)?.output)
        })
        .collect::<Result<_>>()?;
    EmitterMap::new(recombine_tukey(&outs, &tiling.scaled(grid.p))?)
}

/// A detected local maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Local maxima of `img` above `fraction` of its maximum. A pixel must be at
/// least as large as its 8 neighbours and strictly larger than those that
/// precede it in raster order, so plateaus yield one detection.
pub fn detect_local_maxima<T: Scalar>(img: ArrayView2<T>, fraction: f64) -> Vec<Detection> {
    let (r, c) = img.dim();
    let max = img.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy()));
    if max <= 0.0 {
        return Vec::new();
    }
    let thresh = fraction * max;
    let mut out = Vec::new();
    for i in 0..r {
        for j in 0..c {
            let v = img[[i, j]].to_f64_lossy();
            if v <= thresh || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= r as isize || nj >= c as isize {
                        continue;
                    }
                    let nv = img[[ni as usize, nj as usize]].to_f64_lossy();
                    let earlier = di < 0 || (di == 0 && dj < 0);
                    if nv > v || (earlier && nv == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                out.push(Detection {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean distance of matched pairs; `None` without matches.
    pub mean_error: Option<f64>,
    pub detections: usize,
    pub ground_truth: usize,
    pub matched: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Matching radius in high-resolution pixels (inclusive).
    pub tol: f64,
    /// Detection threshold as a fraction of the image maximum.
    pub detection_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tol: 1.0,
            detection_fraction: 0.1,
        }
    }
}

/// Greedy nearest matching of detections to ground-truth positions: all pairs
/// within `tol` are taken in order of increasing distance.
pub fn match_points(det: &[(f64, f64)], gt: &[(f64, f64)], tol: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, d) in det.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let dist = ((d.0 - g.0).powi(2) + (d.1 - g.1).powi(2)).sqrt();
            if dist <= tol + 1e-12 {
                pairs.push((i, j, dist));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_d = vec![false; det.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (i, j, d) in pairs {
        if !used_d[i] && !used_g[j] {
            used_d[i] = true;
            used_g[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

pub fn evaluate_localization<T: Scalar>(
    pred: &EmitterMap<T>,
    gt: &[EmitterPoint],
    opts: &EvalOptions,
) -> LocalizationReport {
    let det: Vec<(f64, f64)> = detect_local_maxima(pred.values.view(), opts.detection_fraction)
        .iter()
        .map(|d| (d.row as f64, d.col as f64))
        .collect();
    let g: Vec<(f64, f64)> = gt.iter().map(|p| (p.row as f64, p.col as f64)).collect();
    let matches = match_points(&det, &g, opts.tol);
    let tp = matches.len() as f64;
    let precision = if det.is_empty() { 0.0 } else { tp / det.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mean_error = if matches.is_empty() {
        None
    } else {
        Some(matches.iter().map(|m| m.2).sum::<f64>() / tp)
    };
    LocalizationReport {
        precision,
        recall,
        f1,
        mean_error,
        detections: det.len(),
        ground_truth: g.len(),
        matched: matches.len(),
    }
}

/// RGB overlay: red marks the prediction support, green the ground truth;
/// coinciding support shows yellow. Each image is divided by its maximum and
/// binarized at `threshold`.
pub fn emit_overlay<T: Scalar>(
    pred: ArrayView2<T>,
    gt: ArrayView2<T>,
    threshold: f64,
) -> Result<Array3<u8>> {
    if pred.dim() != gt.dim() {
        return Err(shape_err(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    let binarize = |img: ArrayView2<T>| {
        let max = img.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy()));
        img.mapv(|v| max > 0.0 && v.to_f64_lossy() / max > threshold)
    };
    let (p, g) = (binarize(pred), binarize(gt));
    let (r, c) = pred.dim();
    let mut out = Array3::zeros((r, c, 3));
    for i in 0..r {
        for j in 0..c {
            if p[[i, j]] {
                out[[i, j, 0]] = 255;
            }
            if g[[i, j]] {
                out[[i, j, 1]] = 255;
            }
        }
    }
    Ok(out)
}

/// Integer pixel centers on the segment between two points, one per step of
/// the dominant axis.
pub fn line_pixels(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let (dr, dc) = (to.0 as f64 - from.0 as f64, to.1 as f64 - from.1 as f64);
    let steps = dr.abs().max(dc.abs()) as usize;
    (0..=steps)
        .map(|k| {
            let t = if steps == 0 { 0.0 } else { k as f64 / steps as f64 };
            (
                (from.0 as f64 + t * dr).round() as usize,
                (from.1 as f64 + t * dc).round() as usize,
            )
        })
        .collect()
}

/// Intensity profiles of several images along one line, each divided by its
/// own maximum along the line. Returned as comma-separated text with a header.
pub fn emit_cross_section<T: Scalar>(
    images: &[(&str, ArrayView2<T>)],
    from: (usize, usize),
    to: (usize, usize),
) -> Result<String> {
    let pix = line_pixels(from, to);
    for (name, img) in images {
        let (r, c) = img.dim();
        if from.0 >= r || to.0 >= r || from.1 >= c || to.1 >= c {
            return Err(Error::InvalidArgument(format!(
                "line {from:?} -> {to:?} leaves the {r}x{c} image {name}"
            )));
        }
    }
    let curves: Vec<Vec<f64>> = images
        .iter()
        .map(|(_, img)| {
            let raw: Vec<f64> = pix.iter().map(|&(i, j)| img[[i, j]].to_f64_lossy()).collect();
            let max = raw.iter().cloned().fold(0.0, f64::max);
            raw.iter()
                .map(|v| if max > 0.0 { v / max } else { 0.0 })
                .collect()
        })
        .collect();
    let mut out = String::from("index,row,col");
    for (name, _) in images {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (k, &(i, j)) in pix.iter().enumerate() {
        out.push_str(&format!("{k},{i},{j}"));
        for c in &curves {
            out.push_str(&format!(",{:.6}", c[k]));
        }
        out.push('\n');
    }
    Ok(out)
}

const STACK_MAGIC: &str = "LSPARCOM-STACK 1";
const WEIGHTS_MAGIC: &str = "LSPARCOM-WEIGHTS 1";

/// Reads header lines up to and including `end`.
fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<Vec<(String, String)>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != magic {
        return Err(Error::Format(format!("expected '{magic}', found '{}'", line.trim_end())));
    }
    let mut out = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("header not terminated by 'end'".into()));
        }
        let l = line.trim_end();
        if l == "end" {
            return Ok(out);
        }
        let (k, v) = l.split_once(' ').unwrap_or((l, ""));
        out.push((k.to_string(), v.to_string()));
    }
}

fn header_value<'a>(h: &'a [(String, String)], key: &str) -> Result<&'a str> {
    h.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("missing header key '{key}'")))
}

fn parse<V: std::str::FromStr>(s: &str, key: &str) -> Result<V> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad value '{s}' for '{key}'")))
}

/// Writes a movie as a text header plus little-endian `f32` frames.
pub fn write_stack<T: Scalar>(path: &Path, stack: &FrameStack<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (t, m, _) = stack.frames.dim();
    writeln!(w, "{STACK_MAGIC}")?;
    writeln!(w, "width {m}")?;
    writeln!(w, "height {m}")?;
    writeln!(w, "frames {t}")?;
    writeln!(w, "encoding f32le")?;
    writeln!(w, "pitch {}", stack.grid.delta_l)?;
    writeln!(w, "upsampling {}", stack.grid.p)?;
    for (k, v) in &stack.metadata {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Format(format!("metadata entry '{k}' not representable")));
        }
        writeln!(w, "meta.{k} {v}")?;
    }
    writeln!(w, "end")?;
    for v in stack.frames.iter() {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stack(path: &Path) -> Result<FrameStack<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, STACK_MAGIC)?;
    let width: usize = parse(header_value(&h, "width")?, "width")?;
    let height: usize = parse(header_value(&h, "height")?, "height")?;
    let frames: usize = parse(header_value(&h, "frames")?, "frames")?;
    if width != height {
        return Err(Error::Format(format!("non-square frames {width}x{height}")));
    }
    let enc = header_value(&h, "encoding")?;
    if enc != "f32le" {
        return Err(Error::Format(format!("unsupported encoding '{enc}'")));
    }
    let pitch: f64 = parse(header_value(&h, "pitch").unwrap_or("1"), "pitch")?;
    let p: usize = parse(header_value(&h, "upsampling").unwrap_or("1"), "upsampling")?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = width * height * frames * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload of {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let arr = Array3::from_shape_vec((frames, height, width), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut stack = FrameStack::new(arr, GridSpec::with_pitch(width, p, pitch)?)?;
    stack.metadata = h
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect::<BTreeMap<_, _>>();
    Ok(stack)
}

/// A reconstructed map as a one-frame stack on its own (high-resolution) grid.
pub fn map_to_stack<T: Scalar>(map: &EmitterMap<T>, pitch: f64) -> Result<FrameStack<T>> {
    let n = map.values.nrows();
    let frames = map.values.clone().insert_axis(Axis(0));
    FrameStack::new(frames, GridSpec::with_pitch(n, 1, pitch)?)
}

pub fn stack_to_map(stack: &FrameStack<f64>) -> Result<EmitterMap<f64>> {
    if stack.len() != 1 {
        return Err(Error::Format(format!("expected one frame, found {}", stack.len())));
    }
    EmitterMap::new(stack.frames.index_axis(Axis(0), 0).to_owned())
}

/// Ground-truth point list as `row,col,brightness,on_probability`.
pub fn write_gt_csv(path: &Path, scene: &Scene) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "row,col,brightness,on_probability")?;
    for e in &scene.emitters {
        writeln!(w, "{},{},{},{}", e.row, e.col, e.mean_brightness, e.on_probability)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gt_csv(path: &Path) -> Result<Vec<Emitter>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("row")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("line {}: expected 4 fields", n + 1)));
        }
        out.push(Emitter {
            row: parse(f[0], "row")?,
            col: parse(f[1], "col")?,
            mean_brightness: parse(f[2], "brightness")?,
            on_probability: parse(f[3], "on_probability")?,
        });
    }
    Ok(out)
}

pub fn emitters_to_points(emitters: &[Emitter]) -> Vec<EmitterPoint> {
    emitters
        .iter()
        .map(|e| EmitterPoint {
            row: e.row,
            col: e.col,
            amplitude: e.variance(),
        })
        .collect()
}

/// Writes weights as a text manifest followed by little-endian `f64` tensors
/// in manifest order.
pub fn write_weights<T: Scalar>(path: &Path, w: &LsparcomWeights<T>) -> Result<()> {
    w.validate()?;
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{WEIGHTS_MAGIC}")?;
    writeln!(f, "folds {}", w.w_p.len())?;
    writeln!(f, "radial {}", w.radial_constrained)?;
    writeln!(f, "tensor w_i {} {}", w.w_i.nrows(), w.w_i.ncols())?;
    for (k, t) in w.w_p.iter().enumerate() {
        writeln!(f, "tensor w_p.{k} {} {}", t.nrows(), t.ncols())?;
    }
    writeln!(f, "tensor alpha0 {}", w.alpha0.len())?;
    writeln!(f, "tensor beta0 {}", w.beta0.len())?;
    writeln!(f, "tensor s 1")?;
    writeln!(f, "end")?;
    for v in crate::training::weights_to_flat(w) {
        f.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<LsparcomWeights<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, WEIGHTS_MAGIC)?;
    let folds: usize = parse(header_value(&h, "folds")?, "folds")?;
    if folds != FOLDS {
        return Err(Error::Format(format!("{folds} folds, expected {FOLDS}")));
    }
    let radial: bool = parse(header_value(&h, "radial")?, "radial")?;
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for (k, v) in &h {
        if k == "tensor" {
            let mut it = v.split_whitespace();
            let name = it.next().ok_or_else(|| Error::Format("unnamed tensor".into()))?;
            let dims = it.map(|d| parse(d, name)).collect::<Result<Vec<usize>>>()?;
            shapes.push((name.to_string(), dims));
        }
    }
    let mut names = vec!["w_i".to_string()];
    names.extend((0..FOLDS).map(|k| format!("w_p.{k}")));
    names.extend(["alpha0", "beta0", "s"].map(String::from));
    let got: Vec<&String> = shapes.iter().map(|(n, _)| n).collect();
    if got != names.iter().collect::<Vec<_>>() {
        return Err(Error::Format(format!("unexpected tensor list {got:?}")));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: usize = shapes.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::Format(format!(
            "payload of {} bytes, manifest implies {}",
            payload.len(),
            total * 8
        )));
    }
    let mut vals = payload.chunks_exact(8).map(|b| {
        f64::from_le_bytes(b.try_into().expect("8-byte chunk"))
    });
    let mut tensor = |dims: &[usize]| -> Result<Array2<f64>> {
        let (r, c) = match dims {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::Format(format!("tensor rank {}", dims.len()))),
        };
        let data: Vec<f64> = (&mut vals).take(r * c).collect();
        Ok(Array2::from_shape_vec((r, c), data).expect("length from manifest"))
    };
    let w_i = tensor(&shapes[0].1)?;
    let w_p = (1..=FOLDS)
        .map(|k| tensor(&shapes[k].1))
        .collect::<Result<Vec<_>>>()?;
    let alpha0 = tensor(&shapes[FOLDS + 1].1)?.into_raw_vec_and_offset().0;
    let beta0 = tensor(&shapes[FOLDS + 2].1)?.into_raw_vec_and_offset().0;
    let s = tensor(&shapes[FOLDS + 3].1)?[[0, 0]];
    let w = LsparcomWeights {
        w_i,
        w_p,
        alpha0,
        beta0,
        s,
        radial_constrained: radial,
    };
    w.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(w)
}

/// 16-bit binary portable graymap, scaled so the maximum maps to 65535.
pub fn write_pgm16<T: Scalar>(path: &Path, img: ArrayView2<T>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    let (r, c) = img.dim();
    write!(f, "P5\n{c} {r}\n65535\n")?;
    let max = img.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy()));
    for v in img.iter() {
        let x = if max > 0.0 {
            (v.to_f64_lossy().max(0.0) / max * 65535.0).round() as u16
        } else {
            0
        };
        f.write_all(&x.to_be_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Binary portable pixmap of an `(rows, cols, 3)` image.
pub fn write_ppm(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (r, c, ch) = rgb.dim();
    if ch != 3 {
        return Err(shape_err("3 channels", ch.to_string()));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{c} {r}\n255\n")?;
    f.write_all(rgb.as_standard_layout().as_slice().expect("standard layout"))?;
    f.flush()?;
    Ok(())
}
