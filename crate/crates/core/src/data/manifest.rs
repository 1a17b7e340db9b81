//! `filename,grade_a,grade_b` manifests and per-channel normalization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{read_pnm, write_pnm, Pnm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 3] = ["filename", "grade_a", "grade_b"];

#[derive(Clone, Debug)]
pub struct GradingSample {
    /// File name relative to the manifest directory.
    pub id: String,
    /// `3×H×W`, values in `[0, 1]` before normalization.
    pub image: Tensor<f32>,
    pub grade_a: usize,
    pub grade_b: usize,
}

/// Mapping applied to the raw disease-A grade column on load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMap {
    #[default]
    Identity,
    /// Grades {0, 1} → 0 and {2, 3} → 1 (referable vs non-referable).
    BinaryDr,
}

impl LabelMap {
    pub fn apply(self, grade: usize) -> usize {
        match self {
            LabelMap::Identity => grade,
            LabelMap::BinaryDr => (grade >= 2) as usize,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub filename: String,
    pub grade_a: usize,
    pub grade_b: usize,
}

/// Parses the CSV only. Row numbers in errors count the header as row 1.
pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: row 1: {e}", path.display())))?
        .clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(Error::Data(format!(
            "{}: row 1: header must be `{}`, found `{}`",
            path.display(),
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{}: row {row}: {e}", path.display())))?;
        let grade = |j: usize| -> Result<usize> {
            rec[j].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {row}: {} `{}` is not a non-negative integer",
                    path.display(),
                    MANIFEST_HEADER[j],
                    &rec[j]
                ))
            })
        };
        rows.push(ManifestRow {
            filename: rec[0].trim().to_string(),
            grade_a: grade(1)?,
            grade_b: grade(2)?,
        });
    }
    Ok(rows)
}

/// Loads every image listed in the manifest. Grades are validated against
/// the class counts after `map` is applied to disease A.
pub fn load_manifest(path: &Path, classes_a: usize, classes_b: usize, map: LabelMap) -> Result<Vec<GradingSample>> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let rows = read_manifest_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let row = i + 2;
        let grade_a = map.apply(r.grade_a);
        if grade_a >= classes_a {
            return Err(Error::Data(format!(
                "{}: row {row}: grade_a {} out of range for {classes_a} classes",
                path.display(),
                r.grade_a
            )));
        }
        if r.grade_b >= classes_b {
            return Err(Error::Data(format!(
                "{}: row {row}: grade_b {} out of range for {classes_b} classes",
                path.display(),
                r.grade_b
            )));
        }
        let img = read_pnm(dir.join(&r.filename)).map_err(|e| match e {
            Error::Io { path: p, source } => Error::Data(format!(
                "{}: row {row}: cannot read image {}: {source}",
                path.display(),
                p.display()
            )),
            Error::Data(m) => Error::Data(format!("{}: row {row}: {m}", path.display())),
            other => other,
        })?;
        out.push(GradingSample {
            id: r.filename,
            image: img.to_tensor(),
            grade_a,
            grade_b: r.grade_b,
        });
    }
    Ok(out)
}

/// Writes each image as `<id>` (P6) into `dir` plus `manifest.csv`.
pub fn write_manifest(dir: &Path, samples: &[GradingSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.csv");
    let mut text = MANIFEST_HEADER.join(",");
    text.push('\n');
    for s in samples {
        write_pnm(dir.join(&s.id), &Pnm::from_tensor(&s.image)?)?;
        text.push_str(&format!("{},{},{}\n", s.id, s.grade_a, s.grade_b));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn compute(samples: &[GradingSample]) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = [0usize; 3];
        for s in samples {
            let hw = s.image.numel() / 3;
            for (i, &v) in s.image.data().iter().enumerate() {
                let c = i / hw;
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
                count[c] += 1;
            }
        }
        if count[0] == 0 {
            return Err(Error::Data("cannot normalize an empty dataset".into()));
        }
        let mut n = Normalization::identity();
        for c in 0..3 {
            let m = sum[c] / count[c] as f64;
            n.mean[c] = m;
            n.std[c] = (sq[c] / count[c] as f64 - m * m).max(0.0).sqrt().max(1e-6);
        }
        Ok(n)
    }

    /// Reads the cache at `path` if it exists, otherwise computes the
    /// statistics from `samples` and writes them there.
    pub fn load_or_compute(path: &Path, samples: &[GradingSample]) -> Result<Self> {
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Ok(serde_json::from_str(&text)?);
        }
        let n = Self::compute(samples)?;
        std::fs::write(path, serde_json::to_string_pretty(&n)? + "\n").map_err(|e| Error::io(path, e))?;
        Ok(n)
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let hw = img.numel() / 3;
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / hw;
            *v = ((*v as f64 - self.mean[c]) / self.std[c]) as f32;
        }
        out
    }
}
