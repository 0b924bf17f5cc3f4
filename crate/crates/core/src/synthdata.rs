//! Synthetic vertebra-like point clouds.
//!
//! Each shape is an ellipsoidal body with cylindrical processes attached to
//! its posterior side (`-y`). Surfaces are sampled uniformly by area. A
//! fracture is an anterior wedge: heights are scaled by `1 - s·w(y)` where
//! `w` ramps linearly from 0 at the posterior extreme of the body to 1 at
//! its anterior extreme.
//!
//! Population variation is modelled by per-instance jitter of every shape
//! parameter; the processes vary considerably more than the body.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::Label;
use crate::error::{Error, Result};
use crate::geometry::io::{read_xyz, write_xyz};
use crate::geometry::{normalize, Point, PointCloud};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Body,
    Process,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Body semi-axes: lateral, anterior-posterior, height.
    pub body_axes: [f64; 3],
    pub process_count: usize,
    pub process_length: f64,
    pub process_radius: f64,
    /// Relative standard deviation of the body semi-axes.
    pub body_variation: f64,
    /// Relative standard deviation of process length and radius.
    pub process_variation: f64,
    /// Standard deviation of the process direction perturbation.
    pub process_angle_variation: f64,
    /// Gaussian noise added to every sampled point.
    pub point_noise: f64,
    pub n_points: usize,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams {
            body_axes: [1.0, 0.8, 0.9],
            process_count: 3,
            process_length: 0.6,
            process_radius: 0.08,
            body_variation: 0.02,
            process_variation: 0.15,
            process_angle_variation: 0.2,
            point_noise: 0.002,
            n_points: 2048,
        }
    }
}

impl ShapeParams {
    pub fn validate(&self) -> Result<()> {
        if self.body_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::config("body semi-axes must be positive"));
        }
        if !(self.process_length > 0.0 && self.process_radius > 0.0) {
            return Err(Error::config("process length and radius must be positive"));
        }
        if self.process_count > 3 {
            return Err(Error::config(
                "at most three processes (one spinous, two transverse)",
            ));
        }
        let vars = [
            self.body_variation,
            self.process_variation,
            self.process_angle_variation,
            self.point_noise,
        ];
        if vars.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config("variation parameters must be non-negative"));
        }
        if self.n_points < 4 {
            return Err(Error::config("need at least four points"));
        }
        Ok(())
    }
}

/// A generated shape with the part each point was sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct Vertebra {
    pub cloud: PointCloud,
    pub parts: Vec<Part>,
    /// Jittered body semi-axes of this instance.
    pub body_axes: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
struct Tube {
    start: Point,
    dir: Point,
    length: f64,
    radius: f64,
}

fn norm3(v: Point) -> Point {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Orthonormal vectors perpendicular to the unit vector `d`.
fn frame(d: Point) -> (Point, Point) {
    let helper = if d[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let e1 = norm3(cross(d, helper));
    (e1, cross(d, e1))
}

/// Surface area of an ellipsoid by midpoint quadrature over the sphere.
pub fn ellipsoid_area(axes: [f64; 3]) -> f64 {
    let [a, b, c] = axes;
    let (nu, nphi) = (256, 256);
    let mut sum = 0.0;
    for i in 0..nu {
        let uz = -1.0 + (i as f64 + 0.5) * 2.0 / nu as f64;
        let r = (1.0 - uz * uz).sqrt();
        for j in 0..nphi {
            let phi = (j as f64 + 0.5) * 2.0 * PI / nphi as f64;
            let (ux, uy) = (r * phi.cos(), r * phi.sin());
            sum += (ux * ux / (a * a) + uy * uy / (b * b) + uz * uz / (c * c)).sqrt();
        }
    }
    a * b * c * sum * (2.0 / nu as f64) * (2.0 * PI / nphi as f64)
}

fn unit_sphere(rng: &mut seed::Rng) -> Point {
    loop {
        let v: Point = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-12 {
            return norm3(v);
        }
    }
}

/// Area-uniform point on an ellipsoid: a uniform sphere point mapped onto
/// the ellipsoid, accepted in proportion to the local area stretch.
fn ellipsoid_point(axes: [f64; 3], rng: &mut seed::Rng) -> Point {
    let [a, b, c] = axes;
    let max = 1.0 / a.min(b).min(c);
    loop {
        let u = unit_sphere(rng);
        let stretch =
            (u[0] * u[0] / (a * a) + u[1] * u[1] / (b * b) + u[2] * u[2] / (c * c)).sqrt();
        if rng.random::<f64>() * max < stretch {
            return [a * u[0], b * u[1], c * u[2]];
        }
    }
}

fn inside_ellipsoid(p: &Point, axes: [f64; 3]) -> bool {
    (p[0] / axes[0]).powi(2) + (p[1] / axes[1]).powi(2) + (p[2] / axes[2]).powi(2) < 1.0
}

fn tube_area(t: &Tube) -> f64 {
    2.0 * PI * t.radius * t.length + PI * t.radius * t.radius
}

/// Area-uniform point on the side wall or the far cap of a tube.
fn tube_point(t: &Tube, rng: &mut seed::Rng) -> Point {
    let (e1, e2) = frame(t.dir);
    let side = 2.0 * PI * t.radius * t.length;
    let theta = rng.random_range(0.0..2.0 * PI);
    let (along, rad) = if rng.random::<f64>() * tube_area(t) < side {
        (rng.random_range(0.0..t.length), t.radius)
    } else {
        (t.length, t.radius * rng.random::<f64>().sqrt())
    };
    let (s, c) = theta.sin_cos();
    std::array::from_fn(|k| t.start[k] + along * t.dir[k] + rad * (c * e1[k] + s * e2[k]))
}

/// Point on the ellipsoid along the ray from the centre through `d`.
fn ellipsoid_ray(axes: [f64; 3], d: Point) -> Point {
    let t = 1.0
        / ((d[0] / axes[0]).powi(2) + (d[1] / axes[1]).powi(2) + (d[2] / axes[2]).powi(2)).sqrt();
    [t * d[0], t * d[1], t * d[2]]
}

/// Integer counts proportional to `weights` that sum to `total`.
fn allocate(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&i, &j| {
        (exact[j] - exact[j].floor())
            .total_cmp(&(exact[i] - exact[i].floor()))
            .then(i.cmp(&j))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in rest.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

struct Instance {
    axes: [f64; 3],
    tubes: Vec<Tube>,
}

fn instance(p: &ShapeParams, rng: &mut seed::Rng) -> Instance {
    let jitter = |rng: &mut seed::Rng, sigma: f64| -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        (1.0 + sigma * n.clamp(-3.0, 3.0)).max(0.2)
    };
    let axes = [
        p.body_axes[0] * jitter(rng, p.body_variation),
        p.body_axes[1] * jitter(rng, p.body_variation),
        p.body_axes[2] * jitter(rng, p.body_variation),
    ];
    // spinous process straight back and slightly down, transverse ones to the sides
    let layout: [(Point, Point, f64); 3] = [
        ([0.0, -1.0, 0.0], [0.0, -1.0, -0.3], 1.0),
        ([0.6, -0.8, 0.0], [1.0, -0.55, 0.1], 0.8),
        ([-0.6, -0.8, 0.0], [-1.0, -0.55, 0.1], 0.8),
    ];
    let mut tubes = Vec::with_capacity(p.process_count);
    for &(anchor, dir, len) in layout.iter().take(p.process_count) {
        let length = p.process_length * len * jitter(rng, p.process_variation);
        let radius = p.process_radius * jitter(rng, p.process_variation);
        let mut d = norm3(dir);
        for v in &mut d {
            let n: f64 = rng.sample(StandardNormal);
            *v += p.process_angle_variation * n.clamp(-3.0, 3.0);
        }
        tubes.push(Tube {
            start: ellipsoid_ray(axes, norm3(anchor)),
            dir: norm3(d),
            length,
            radius,
        });
    }
    Instance { axes, tubes }
}

/// Scales heights by `1 - s·w`, `w = clamp((y / b + 1) / 2, 0, 1)`.
fn wedge(p: Point, severity: f64, b: f64) -> Point {
    let w = ((p[1] / b + 1.0) / 2.0).clamp(0.0, 1.0);
    [p[0], p[1], p[2] * (1.0 - severity * w)]
}

/// Noise-free surface samples of one instance, before any fracture.
fn sample_surface(p: &ShapeParams, rng: &mut seed::Rng) -> (Instance, Vec<Point>, Vec<Part>) {
    let inst = instance(p, rng);
    let mut weights = vec![ellipsoid_area(inst.axes)];
    weights.extend(inst.tubes.iter().map(tube_area));
    let counts = allocate(&weights, p.n_points);
    let mut points = Vec::with_capacity(p.n_points);
    let mut parts = Vec::with_capacity(p.n_points);
    for _ in 0..counts[0] {
        points.push(ellipsoid_point(inst.axes, rng));
        parts.push(Part::Body);
    }
    for (t, &count) in inst.tubes.iter().zip(&counts[1..]) {
        let mut k = 0;
        while k < count {
            let q = tube_point(t, rng);
            // the part of a tube buried in the body is not surface
            if inside_ellipsoid(&q, inst.axes) {
                continue;
            }
            points.push(q);
            parts.push(Part::Process);
            k += 1;
        }
    }
    (inst, points, parts)
}

/// Generates one shape in its native units (not normalised).
///
/// The same `seed` yields the same underlying surface samples for every
/// severity, so a fractured cloud and its healthy twin differ only by the
/// wedge.
pub fn make_vertebra(params: &ShapeParams, severity: f64, seed: u64) -> Result<Vertebra> {
    params.validate()?;
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::config(format!("severity {severity} outside [0, 1]")));
    }
    let mut shape_rng = seed::stream(seed, "shape");
    let (inst, points, parts) = sample_surface(params, &mut shape_rng);
    let mut noise_rng = seed::stream(seed, "noise");
    let points = points
        .into_iter()
        .map(|q| {
            let q = wedge(q, severity, inst.axes[1]);
            std::array::from_fn(|k| {
                let n: f64 = noise_rng.sample(StandardNormal);
                q[k] + params.point_noise * n
            })
        })
        .collect();
    Ok(Vertebra {
        cloud: PointCloud::new(points)?,
        parts,
        body_axes: inst.axes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::format(format!("unknown split `{s}`")))
    }
}

/// Number of clouds per split and label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_healthy: usize,
    pub train_fractured: usize,
    pub val_healthy: usize,
    pub val_fractured: usize,
    pub test_healthy: usize,
    pub test_fractured: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_healthy: 200,
            train_fractured: 0,
            val_healthy: 50,
            val_fractured: 55,
            test_healthy: 100,
            test_fractured: 100,
        }
    }
}

impl SplitSpec {
    fn count(&self, split: Split, label: Label) -> usize {
        match (split, label) {
            (Split::Train, Label::Healthy) => self.train_healthy,
            (Split::Train, Label::Fractured) => self.train_fractured,
            (Split::Val, Label::Healthy) => self.val_healthy,
            (Split::Val, Label::Fractured) => self.val_fractured,
            (Split::Test, Label::Healthy) => self.test_healthy,
            (Split::Test, Label::Fractured) => self.test_fractured,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub seed: u64,
    pub severity: f64,
    /// Normalised cloud.
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub seed: u64,
    pub severity: f64,
}

pub const MANIFEST: &str = "manifest.csv";

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn clouds(&self, split: Split, label: Option<Label>) -> Vec<PointCloud> {
        self.split(split)
            .filter(|s| label.is_none_or(|l| s.label == l))
            .map(|s| s.cloud.clone())
            .collect()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                split: s.split,
                label: s.label,
                seed: s.seed,
                severity: s.severity,
            })
            .collect()
    }
}

/// Generates every split. Clouds are normalised; fractured severities are
/// drawn uniformly from `severity`.
pub fn make_dataset(
    spec: &SplitSpec,
    params: &ShapeParams,
    severity: (f64, f64),
    master_seed: u64,
) -> Result<Dataset> {
    if spec.train_fractured > 0 {
        return Err(Error::usage("the training split holds healthy clouds only"));
    }
    let (lo, hi) = severity;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::config(format!(
            "severity range [{lo}, {hi}] must lie in (0, 1]"
        )));
    }
    params.validate()?;
    let mut jobs = Vec::new();
    for split in Split::ALL {
        for label in [Label::Healthy, Label::Fractured] {
            let stream = seed::derive(
                master_seed,
                &format!("data/{}/{}", split.name(), label.name()),
            );
            for i in 0..spec.count(split, label) {
                let s = seed::derive_indexed(stream, "sample", i as u64);
                let sev = match label {
                    Label::Healthy => 0.0,
                    Label::Fractured if lo == hi => lo,
                    Label::Fractured => seed::stream(s, "severity").random_range(lo..=hi),
                };
                let tag = &label.name()[..1];
                jobs.push((
                    format!("{}-{tag}-{i:04}", split.name()),
                    split,
                    label,
                    s,
                    sev,
                ));
            }
        }
    }
    let samples = jobs
        .into_par_iter()
        .map(|(id, split, label, s, sev)| {
            let v = make_vertebra(params, sev, s)?;
            Ok(Sample {
                id,
                split,
                label,
                seed: s,
                severity: sev,
                cloud: normalize(&v.cloud)?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

fn cloud_path(root: &Path, e: &ManifestEntry) -> std::path::PathBuf {
    root.join(e.split.name())
        .join(e.label.name())
        .join(format!("{}.xyz", e.id))
}

/// Writes `<split>/<label>/<id>.xyz` files and the manifest. Text output
/// is shortest round-trip, so loading reproduces every value exactly.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let manifest = ds.manifest();
    for (s, e) in ds.samples.iter().zip(&manifest) {
        let path = cloud_path(root, e);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        write_xyz(&path, &s.cloud)?;
    }
    let mut w = csv::Writer::from_path(root.join(MANIFEST))?;
    for e in &manifest {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(Error::format(format!(
            "{}: manifest not found",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(&path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let samples = manifest
        .into_iter()
        .map(|e| {
            let path = cloud_path(root, &e);
            if !path.exists() {
                return Err(Error::format(format!(
                    "cloud `{}` listed in the manifest is missing ({})",
                    e.id,
                    path.display()
                )));
            }
            Ok(Sample {
                cloud: read_xyz(&path)?,
                id: e.id,
                split: e.split,
                label: e.label,
                seed: e.seed,
                severity: e.severity,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}
