//! Synthetic two-disease grading images.
//!
//! Each image is a dark fundus-like disc with a bright marker standing in
//! for the macula and a number of small bright lesions. Disease A is the
//! bucketed lesion count; disease B is the bucketed distance from the
//! marker to the nearest lesion:
//!
//! ```text
//! d < near        → 2
//! near ≤ d < far  → 1
//! d ≥ far         → 0        (also when there are no lesions)
//! ```
//!
//! The coupling knob `rho` controls how strongly B follows A. With
//! probability `rho` the target B grade is drawn from `b_given_a[a]`,
//! otherwise from `b_marginal`; one lesion is then placed inside the target
//! distance band and the remaining ones farther out.

use serde::{Deserialize, Serialize};

use super::manifest::GradingSample;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: usize,
    /// Inclusive lesion-count range per disease-A grade.
    pub count_buckets: Vec<[usize; 2]>,
    /// Probability of each disease-A grade.
    pub grade_a_probs: Vec<f64>,
    /// Distribution of the disease-B grade for each disease-A grade, used
    /// with probability `rho`.
    pub b_given_a: Vec<Vec<f64>>,
    /// Distribution of the disease-B grade used otherwise.
    pub b_marginal: Vec<f64>,
    /// Marker centre as a fraction of the image side, `[x, y]`.
    pub marker: [f64; 2],
    /// `[near, far]` lesion-to-marker distance thresholds in pixels.
    pub thresholds: [f64; 2],
    pub rho: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Messidor grade-0 share and the column-normalized label table for
/// grades 1..3; grade 0 has no lesions and therefore no exudate.
impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            count_buckets: vec![[0, 0], [1, 2], [3, 5], [6, 9]],
            grade_a_probs: vec![0.455, 0.1275, 0.2058, 0.2117],
            b_given_a: vec![
                vec![1.0, 0.0, 0.0],
                vec![142.0 / 153.0, 5.0 / 153.0, 6.0 / 153.0],
                vec![182.0 / 247.0, 28.0 / 247.0, 37.0 / 247.0],
                vec![104.0 / 254.0, 42.0 / 254.0, 108.0 / 254.0],
            ],
            b_marginal: vec![428.0 / 654.0, 75.0 / 654.0, 151.0 / 654.0],
            marker: [0.5, 0.5],
            thresholds: [8.0, 16.0],
            rho: 0.7,
            noise: 0.03,
            seed: 0,
        }
    }
}

struct Geometry {
    centre: (f64, f64),
    disc_r: f64,
    /// Lesion centres stay within this distance of the image centre.
    lesion_r: f64,
    marker: (f64, f64),
    marker_r: f64,
    blob_sigma: f64,
}

impl Geometry {
    fn of(spec: &SynthSpec) -> Self {
        let s = spec.image_size as f64;
        Geometry {
            centre: (s / 2.0, s / 2.0),
            disc_r: 0.46 * s,
            lesion_r: 0.36 * s,
            marker: (spec.marker[0] * s, spec.marker[1] * s),
            marker_r: 0.06 * s,
            blob_sigma: (s / 64.0).max(0.75),
        }
    }

    /// Closest allowed lesion distance to the marker centre.
    fn min_dist(&self) -> f64 {
        self.marker_r + 1.5 * self.blob_sigma
    }

    /// Farthest point of the lesion region from the marker.
    fn reach(&self) -> f64 {
        dist(self.marker, self.centre) + self.lesion_r
    }

    fn in_region(&self, p: (f64, f64)) -> bool {
        dist(p, self.centre) <= self.lesion_r
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

impl SynthSpec {
    pub fn num_classes_a(&self) -> usize {
        self.count_buckets.len()
    }

    pub fn grade_b_of(&self, min_dist: Option<f64>) -> usize {
        match min_dist {
            Some(d) if d < self.thresholds[0] => 2,
            Some(d) if d < self.thresholds[1] => 1,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} is below 16", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        let k = self.count_buckets.len();
        if k < 2 || self.grade_a_probs.len() != k || self.b_given_a.len() != k {
            return bad(format!(
                "need matching count_buckets, grade_a_probs and b_given_a rows (got {k}, {}, {})",
                self.grade_a_probs.len(),
                self.b_given_a.len()
            ));
        }
        if self.count_buckets.iter().any(|[lo, hi]| lo > hi) {
            return bad("count bucket with min > max".into());
        }
        let dists = std::iter::once(&self.grade_a_probs)
            .chain(&self.b_given_a)
            .chain(std::iter::once(&self.b_marginal));
        for p in dists {
            if p.iter().any(|&v| !(v >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                return bad(format!("invalid probability vector {p:?}"));
            }
        }
        if self.b_marginal.len() != 3 || self.b_given_a.iter().any(|r| r.len() != 3) {
            return bad("disease-B distributions must have 3 entries".into());
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        let g = Geometry::of(self);
        if !g.in_region(g.marker) {
            return bad(format!("marker {:?} lies outside the lesion region", self.marker));
        }
        let [near, far] = self.thresholds;
        if !(g.min_dist() < near && near < far && far < g.reach() - 2.0) {
            return bad(format!(
                "distance thresholds must satisfy {:.2} < near < far < {:.2}, got near={near}, far={far}",
                g.min_dist(),
                g.reach() - 2.0
            ));
        }
        Ok(())
    }
}

/// Uniform point of the lesion region whose marker distance lies in
/// `[lo, hi)`; `None` after many rejections.
fn place_in_band(g: &Geometry, lo: f64, hi: f64, rng: &mut RngState) -> Option<(f64, f64)> {
    for _ in 0..2000 {
        // Area-uniform radius within the annulus.
        let r = (rng.uniform_in(lo * lo, hi * hi)).sqrt();
        let th = rng.uniform_in(0.0, std::f64::consts::TAU);
        let p = (g.marker.0 + r * th.cos(), g.marker.1 + r * th.sin());
        if g.in_region(p) && dist(p, g.marker) >= lo && dist(p, g.marker) < hi {
            return Some(p);
        }
    }
    None
}

struct Layout {
    lesions: Vec<(f64, f64)>,
    grade_a: usize,
    grade_b: usize,
}

fn layout(spec: &SynthSpec, g: &Geometry, rng: &mut RngState) -> Layout {
    let grade_a = rng.categorical(&spec.grade_a_probs);
    let [lo, hi] = spec.count_buckets[grade_a];
    let count = lo + rng.below(hi - lo + 1);
    if count == 0 {
        return Layout {
            lesions: Vec::new(),
            grade_a,
            grade_b: 0,
        };
    }
    let target = if rng.bernoulli(spec.rho) {
        rng.categorical(&spec.b_given_a[grade_a])
    } else {
        rng.categorical(&spec.b_marginal)
    };
    let [near, far] = spec.thresholds;
    let (blo, bhi) = match target {
        2 => (g.min_dist(), near),
        1 => (near, far),
        _ => (far, g.reach()),
    };
    let first = place_in_band(g, blo, bhi, rng).expect("validated thresholds leave every band reachable");
    // The first lesion sets the minimum; the rest stay at least as far out.
    // In the outer band any point of the band will do.
    let d0 = if target == 0 { far } else { dist(first, g.marker) };
    let mut lesions = vec![first];
    let sep = 3.0 * g.blob_sigma;
    for _ in 1..count {
        let mut spot = None;
        for attempt in 0..4000 {
            let p = place_in_band(g, d0, g.reach(), rng);
            let Some(p) = p else { break };
            // Keep blobs apart so they stay countable; give up on spacing
            // late rather than fail.
            if attempt > 3000 || lesions.iter().all(|&q| dist(p, q) >= sep) {
                spot = Some(p);
                break;
            }
        }
        lesions.push(spot.unwrap_or(first));
    }
    let min_d = lesions.iter().map(|&p| dist(p, g.marker)).fold(f64::INFINITY, f64::min);
    Layout {
        lesions,
        grade_a,
        grade_b: spec.grade_b_of(Some(min_d)),
    }
}

fn render(spec: &SynthSpec, g: &Geometry, lay: &Layout, rng: &mut RngState) -> Tensor<f32> {
    let s = spec.image_size;
    let gain = rng.uniform_in(0.85, 1.15);
    let disc = [0.45 * gain, 0.18 * gain, 0.08 * gain];
    let marker = [0.35, 0.8, 0.95];
    let lesion = [0.55, 0.6, 0.05];
    let mut img = vec![0.0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let rc = dist(p, g.centre);
            let mut px = [0.0; 3];
            if rc <= g.disc_r {
                let v = 1.0 - 0.35 * (rc / g.disc_r).powi(2);
                for c in 0..3 {
                    px[c] = disc[c] * v;
                }
            }
            // Soft-edged marker disc.
            let rm = dist(p, g.marker);
            let w = ((g.marker_r + 0.5 - rm) / 1.0).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - w) + marker[c] * w;
            }
            for &l in &lay.lesions {
                let d2 = (p.0 - l.0).powi(2) + (p.1 - l.1).powi(2);
                let a = (-d2 / (2.0 * g.blob_sigma * g.blob_sigma)).exp();
                if a > 1e-3 {
                    for c in 0..3 {
                        px[c] += lesion[c] * a;
                    }
                }
            }
            for c in 0..3 {
                img[(c * s + y) * s + x] = px[c];
            }
        }
    }
    // Noise, then 8-bit quantization so in-memory and on-disk samples agree.
    Tensor::from_fn(vec![3, s, s], |i| {
        let v = img[i] + if spec.noise > 0.0 { rng.normal(0.0, spec.noise) } else { 0.0 };
        ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
    })
}

/// Labels and lesion positions only, without rendering. Used for label
/// statistics over large `n`.
pub fn synth_labels(spec: &SynthSpec, n: usize) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    let g = Geometry::of(spec);
    let root = RngState::new(spec.seed);
    Ok((0..n)
        .map(|i| {
            let l = layout(spec, &g, &mut root.split(i as u64));
            (l.grade_a, l.grade_b)
        })
        .collect())
}

/// `n` samples with ids `synth_00000.ppm`, … . Sample `i` depends only on
/// `(seed, i)`.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Result<Vec<GradingSample>> {
    if n == 0 {
        return Err(Error::Parameter("synthetic dataset size must be >= 1".into()));
    }
    spec.validate()?;
    let g = Geometry::of(spec);
    let root = RngState::new(spec.seed);
    Ok((0..n)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let lay = layout(spec, &g, &mut rng);
            GradingSample {
                id: format!("synth_{i:05}.ppm"),
                image: render(spec, &g, &lay, &mut rng),
                grade_a: lay.grade_a,
                grade_b: lay.grade_b,
            }
        })
        .collect())
}

/// Pearson correlation of the two grade columns.
pub fn label_correlation(labels: &[(usize, usize)]) -> f64 {
    let n = labels.len() as f64;
    let ma = labels.iter().map(|l| l.0 as f64).sum::<f64>() / n;
    let mb = labels.iter().map(|l| l.1 as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(a, b) in labels {
        let (da, db) = (a as f64 - ma, b as f64 - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// `table[b][a]` counts.
pub fn joint_table(labels: &[(usize, usize)], ka: usize, kb: usize) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0; ka]; kb];
    for &(a, b) in labels {
        t[b][a] += 1;
    }
    t
}
