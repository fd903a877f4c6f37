//! 2AFC and JND evaluation against human judgments.
//!
//! Data comes in through a tab-separated manifest, one record per line:
//!
//! ```text
//! 2AFC<TAB>subdivision<TAB>ref_path<TAB>p0_path<TAB>p1_path<TAB>judge
//! JND<TAB>a_path<TAB>b_path<TAB>same_rate
//! ```
//!
//! `judge` is the fraction of annotators who found `p1` closer to the
//! reference; `same_rate` the fraction who judged the pair identical.
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Backbone;
use crate::image::{Image, ImageError};
use crate::metrics::{distance, MetricConfig, MetricError};
use crate::probes::{gen_pattern_sized, translate_region, PatternKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("manifest line {line}: {field} {value} is outside [0, 1]")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: f64,
    },
    #[error("manifest line {line}: {source}")]
    Image {
        line: usize,
        #[source]
        source: ImageError,
    },
    #[error("manifest line {line}: images differ in size")]
    SizeMismatch { line: usize },
    #[error("no samples to score")]
    Empty,
    #[error("JND ranking needs both same and different pairs (got {same} same of {total})")]
    SingleClass { same: usize, total: usize },
    #[error("sample {index}: {source}")]
    Metric {
        index: usize,
        #[source]
        source: MetricError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoAfcSample {
    pub reference: Image,
    pub p0: Image,
    pub p1: Image,
    /// Fraction of annotators preferring `p1`.
    pub judge: f64,
    pub subdivision: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JndSample {
    pub a: Image,
    pub b: Image,
    /// Fraction of annotators judging the pair "same".
    pub same_rate: f64,
}

/// One manifest record with paths as written.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifestRow {
    TwoAfc {
        subdivision: String,
        reference: PathBuf,
        p0: PathBuf,
        p1: PathBuf,
        judge: f64,
    },
    Jnd {
        a: PathBuf,
        b: PathBuf,
        same_rate: f64,
    },
}

impl ManifestRow {
    pub fn to_line(&self) -> String {
        match self {
            ManifestRow::TwoAfc {
                subdivision,
                reference,
                p0,
                p1,
                judge,
            } => format!(
                "2AFC\t{subdivision}\t{}\t{}\t{}\t{judge}",
                reference.display(),
                p0.display(),
                p1.display()
            ),
            ManifestRow::Jnd { a, b, same_rate } => {
                format!("JND\t{}\t{}\t{same_rate}", a.display(), b.display())
            }
        }
    }
}

fn parse_unit(line: usize, field: &'static str, s: &str) -> Result<f64, EvalError> {
    let value: f64 = s.trim().parse().map_err(|_| EvalError::Malformed {
        line,
        reason: format!("{field} `{s}` is not a number"),
    })?;
    if !(0.0..=1.0).contains(&value) {
        return Err(EvalError::OutOfRange { line, field, value });
    }
    Ok(value)
}

/// Parses manifest text; line numbers in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<(usize, ManifestRow)>, EvalError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let row = match fields[0] {
            "2AFC" if fields.len() == 6 => ManifestRow::TwoAfc {
                subdivision: fields[1].to_string(),
                reference: PathBuf::from(fields[2]),
                p0: PathBuf::from(fields[3]),
                p1: PathBuf::from(fields[4]),
                judge: parse_unit(line, "judge", fields[5])?,
            },
            "JND" if fields.len() == 4 => ManifestRow::Jnd {
                a: PathBuf::from(fields[1]),
                b: PathBuf::from(fields[2]),
                same_rate: parse_unit(line, "same_rate", fields[3])?,
            },
            "2AFC" | "JND" => {
                return Err(EvalError::Malformed {
                    line,
                    reason: format!("wrong field count {} for {}", fields.len(), fields[0]),
                })
            }
            other => {
                return Err(EvalError::Malformed {
                    line,
                    reason: format!("unknown record type `{other}`"),
                })
            }
        };
        rows.push((line, row));
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a manifest and every image it references.
pub fn load_manifest(
    path: impl AsRef<Path>,
) -> Result<(Vec<TwoAfcSample>, Vec<JndSample>), EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load = |line: usize, p: &Path| {
        Image::load_png(base.join(p)).map_err(|source| EvalError::Image { line, source })
    };
    let mut two_afc = Vec::new();
    let mut jnd = Vec::new();
    for (line, row) in parse_manifest(&text)? {
        match row {
            ManifestRow::TwoAfc {
                subdivision,
                reference,
                p0,
                p1,
                judge,
            } => {
                let (reference, p0, p1) =
                    (load(line, &reference)?, load(line, &p0)?, load(line, &p1)?);
                if !reference.same_size(&p0) || !reference.same_size(&p1) {
                    return Err(EvalError::SizeMismatch { line });
                }
                two_afc.push(TwoAfcSample {
                    reference,
                    p0,
                    p1,
                    judge,
                    subdivision,
                });
            }
            ManifestRow::Jnd { a, b, same_rate } => {
                let (a, b) = (load(line, &a)?, load(line, &b)?);
                if !a.same_size(&b) {
                    return Err(EvalError::SizeMismatch { line });
                }
                jnd.push(JndSample { a, b, same_rate });
            }
        }
    }
    Ok((two_afc, jnd))
}

/// Credit for one 2AFC decision: `judge` when the metric prefers `p1`,
/// `1 - judge` when it prefers `p0`, one half on an exact tie.
pub fn two_afc_credit(d0: f64, d1: f64, judge: f64) -> f64 {
    if d1 < d0 {
        judge
    } else if d0 < d1 {
        1.0 - judge
    } else {
        0.5
    }
}

/// Mean credit per subdivision, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdivisionScore {
    pub subdivision: String,
    pub score: f64,
    pub samples: usize,
}

/// Scores pre-computed `(subdivision, d0, d1, judge)` outcomes.
pub fn score_2afc_distances<'a>(
    outcomes: impl IntoIterator<Item = (&'a str, f64, f64, f64)>,
) -> Result<Vec<SubdivisionScore>, EvalError> {
    let mut sums: Vec<(String, f64, usize)> = Vec::new();
    for (sub, d0, d1, judge) in outcomes {
        let credit = two_afc_credit(d0, d1, judge);
        match sums.iter_mut().find(|s| s.0 == sub) {
            Some(s) => {
                s.1 += credit;
                s.2 += 1;
            }
            None => sums.push((sub.to_string(), credit, 1)),
        }
    }
    if sums.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(sums
        .into_iter()
        .map(|(subdivision, total, samples)| SubdivisionScore {
            subdivision,
            score: total / samples as f64,
            samples,
        })
        .collect())
}

pub fn score_2afc(
    samples: &[TwoAfcSample],
    config: &MetricConfig,
    backbone: Option<&Backbone>,
) -> Result<Vec<SubdivisionScore>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let distances = samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let err = |source| EvalError::Metric { index, source };
            let d0 = distance(&s.reference, &s.p0, config, backbone)
                .map_err(err)?
                .0;
            let d1 = distance(&s.reference, &s.p1, config, backbone)
                .map_err(err)?
                .0;
            Ok((d0, d1))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    score_2afc_distances(
        samples
            .iter()
            .zip(&distances)
            .map(|(s, &(d0, d1))| (s.subdivision.as_str(), d0, d1, s.judge)),
    )
}

/// How JND rankings are turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JndScoring {
    /// Binary relevance (`same_rate > 0.5`), precision averaged over the
    /// ranks of relevant pairs.
    #[default]
    BinaryAp,
    /// Fractional relevance with an interpolated precision envelope.
    WeightedAp,
}

/// Indices ordered by ascending distance; ties keep index order.
fn ranking(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]));
    order
}

/// Average precision of the ascending-distance ranking with binary
/// relevance `same_rate > 0.5`.
pub fn jnd_average_precision(distances: &[f64], same_rates: &[f64]) -> Result<f64, EvalError> {
    assert_eq!(distances.len(), same_rates.len());
    if distances.is_empty() {
        return Err(EvalError::Empty);
    }
    let relevant = same_rates.iter().filter(|&&r| r > 0.5).count();
    if relevant == 0 || relevant == distances.len() {
        return Err(EvalError::SingleClass {
            same: relevant,
            total: distances.len(),
        });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(distances).iter().enumerate() {
        if same_rates[i] > 0.5 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / relevant as f64)
}

/// Area under the interpolated precision/recall curve, with each pair
/// counting `same_rate` as a true positive and `1 - same_rate` as a false one.
pub fn jnd_weighted_ap(distances: &[f64], same_rates: &[f64]) -> Result<f64, EvalError> {
    assert_eq!(distances.len(), same_rates.len());
    if distances.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: f64 = same_rates.iter().sum();
    if total <= 0.0 || total >= distances.len() as f64 {
        return Err(EvalError::SingleClass {
            same: same_rates.iter().filter(|&&r| r > 0.5).count(),
            total: distances.len(),
        });
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for i in ranking(distances) {
        tp += same_rates[i];
        fp += 1.0 - same_rates[i];
        recall.push(tp / total);
        precision.push(tp / (tp + fp));
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    Ok(ap)
}

pub fn score_jnd(
    samples: &[JndSample],
    config: &MetricConfig,
    backbone: Option<&Backbone>,
    scoring: JndScoring,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let distances = samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            distance(&s.a, &s.b, config, backbone)
                .map(|d| d.0)
                .map_err(|source| EvalError::Metric { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rates: Vec<f64> = samples.iter().map(|s| s.same_rate).collect();
    match scoring {
        JndScoring::BinaryAp => jnd_average_precision(&distances, &rates),
        JndScoring::WeightedAp => jnd_weighted_ap(&distances, &rates),
    }
}

/// Subdivision groups of the 2AFC set, with the directory-style aliases
/// each subdivision is known by.
pub const GROUPS: [(&str, &[&[&str]]); 2] = [
    ("distortions", &[&["traditional"], &["cnn-based", "cnn"]]),
    (
        "real algorithms",
        &[
            &["superresolution", "superres"],
            &["video deblurring", "deblur"],
            &["colorization", "color"],
            &["frame interpolation", "frameinterp"],
        ],
    ),
];

fn group_of(subdivision: &str) -> Option<&'static str> {
    let s = subdivision.to_ascii_lowercase();
    GROUPS
        .iter()
        .find(|(_, members)| members.iter().any(|aliases| aliases.contains(&s.as_str())))
        .map(|(g, _)| *g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: String,
    pub score: f64,
    pub subdivisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: String,
    pub subdivisions: Vec<SubdivisionScore>,
    pub groups: Vec<GroupScore>,
    /// Unweighted mean over subdivisions.
    pub all: f64,
    pub jnd: Option<f64>,
}

/// Group and overall scores as unweighted means of subdivision scores.
pub fn aggregate_report(
    config: &str,
    subdivisions: Vec<SubdivisionScore>,
    jnd: Option<f64>,
) -> Result<EvalReport, EvalError> {
    if subdivisions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups = Vec::new();
    for (name, _) in GROUPS {
        let members: Vec<f64> = subdivisions
            .iter()
            .filter(|s| group_of(&s.subdivision) == Some(name))
            .map(|s| s.score)
            .collect();
        if !members.is_empty() {
            groups.push(GroupScore {
                group: name.to_string(),
                score: members.iter().sum::<f64>() / members.len() as f64,
                subdivisions: members.len(),
            });
        }
    }
    let all = subdivisions.iter().map(|s| s.score).sum::<f64>() / subdivisions.len() as f64;
    Ok(EvalReport {
        config: config.to_string(),
        subdivisions,
        groups,
        all,
        jnd,
    })
}

impl EvalReport {
    /// Human-readable table, scores in percent.
    pub fn render(&self) -> String {
        let mut out = format!("config: {}\n", self.config);
        for s in &self.subdivisions {
            let _ = writeln!(
                out,
                "{:<22} {:>6.1}  (n={})",
                s.subdivision,
                s.score * 100.0,
                s.samples
            );
        }
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<22} {:>6.1}",
                format!("[{}] all", g.group),
                g.score * 100.0
            );
        }
        let _ = writeln!(out, "{:<22} {:>6.1}", "2AFC all", self.all * 100.0);
        match self.jnd {
            Some(j) => {
                let _ = writeln!(out, "{:<22} {:>6.1}", "JND", j * 100.0);
            }
            None => {
                let _ = writeln!(out, "{:<22} {:>6}", "JND", "-");
            }
        }
        out
    }
}

/// Distortion families for synthetic 2AFC sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticFamily {
    Brightness,
    Noise,
    Blur,
    Shift,
}

impl SyntheticFamily {
    pub const ALL: [SyntheticFamily; 4] = [
        SyntheticFamily::Brightness,
        SyntheticFamily::Noise,
        SyntheticFamily::Blur,
        SyntheticFamily::Shift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticFamily::Brightness => "brightness",
            SyntheticFamily::Noise => "noise",
            SyntheticFamily::Blur => "blur",
            SyntheticFamily::Shift => "shift",
        }
    }

    /// `(mild, severe)` versions of `img`.
    fn distort(self, img: &Image, rng: &mut ChaCha8Rng) -> (Image, Image) {
        match self {
            SyntheticFamily::Brightness => {
                let sign = if rng.random() { 1.0 } else { -1.0 };
                let mild = sign * rng.random_range(0.03..0.08f32);
                let severe = sign * rng.random_range(0.15..0.25f32);
                (
                    img.map(|p| p.map(|v| v + mild)),
                    img.map(|p| p.map(|v| v + severe)),
                )
            }
            SyntheticFamily::Noise => {
                let mild = rng.random_range(0.03..0.06f32);
                let severe = rng.random_range(0.15..0.25f32);
                let mut noisy = |amp: f32| {
                    let noise: Vec<f32> = (0..img.pixels().len())
                        .map(|_| rng.random_range(-1.0..1.0f32))
                        .collect();
                    let w = img.width();
                    Image::from_fn(w, img.height(), |x, y| {
                        let p = img.get(x, y);
                        let i = (y * w + x) * 3;
                        [
                            p[0] + amp * noise[i],
                            p[1] + amp * noise[i + 1],
                            p[2] + amp * noise[i + 2],
                        ]
                    })
                };
                (noisy(mild), noisy(severe))
            }
            SyntheticFamily::Blur => (box_blur(img, 1), box_blur(img, 3)),
            SyntheticFamily::Shift => {
                let fill = mean_color(img);
                let (mild, severe) = (rng.random_range(1..=2), rng.random_range(5..=8));
                (
                    translate_region(img, mild, 0, fill).expect("small shift"),
                    translate_region(img, severe, 0, fill).expect("small shift"),
                )
            }
        }
    }
}

fn mean_color(img: &Image) -> [f32; 3] {
    let n = (img.width() * img.height()).max(1) as f32;
    let mut sum = [0.0f32; 3];
    for px in img.pixels().chunks_exact(3) {
        for c in 0..3 {
            sum[c] += px[c];
        }
    }
    sum.map(|s| s / n)
}

fn box_blur(img: &Image, radius: usize) -> Image {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let r = radius as isize;
    Image::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = [0.0f32; 3];
        let mut n = 0.0;
        for yy in (y as isize - r).max(0)..=(y as isize + r).min(h - 1) {
            for xx in (x as isize - r).max(0)..=(x as isize + r).min(w - 1) {
                let p = img.get(xx as usize, yy as usize);
                for c in 0..3 {
                    acc[c] += p[c];
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    })
}

pub const SYNTHETIC_SIZE: usize = 64;
pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes `n` synthetic 2AFC triplets and `n` JND pairs under `dir`,
/// returning the manifest path.
///
/// Each triplet holds a mild and a severe distortion of one pattern, in
/// random order; annotators are simulated as unanimous in preferring the
/// mild one. JND pairs alternate between a barely perceptible change
/// (`same_rate` 1) and a severe one (`same_rate` 0). Pattern values are
/// compressed into `[0.2, 0.8]` so distortions rarely clip.
pub fn gen_synthetic_2afc(
    seed: u64,
    n: usize,
    dir: impl AsRef<Path>,
    families: &[SyntheticFamily],
) -> Result<PathBuf, EvalError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let families = if families.is_empty() {
        &SyntheticFamily::ALL[..]
    } else {
        families
    };
    let kinds = [
        PatternKind::RegionScene,
        PatternKind::ColoredShapes,
        PatternKind::BwPattern,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(2 * n);
    let save = |img: &Image, name: &str| -> Result<PathBuf, EvalError> {
        img.save_png(dir.join(name))
            .map_err(|source| EvalError::Image { line: 0, source })?;
        Ok(PathBuf::from(name))
    };
    for i in 0..n {
        let family = families[i % families.len()];
        let kind = kinds[rng.random_range(0..kinds.len())];
        let pattern = gen_pattern_sized(kind, rng.random(), SYNTHETIC_SIZE);
        let reference = pattern.map(|p| p.map(|v| 0.2 + 0.6 * v));
        let (mild, severe) = family.distort(&reference, &mut rng);
        let mild_first: bool = rng.random();
        let (p0, p1, judge) = if mild_first {
            (mild, severe.clone(), 0.0)
        } else {
            (severe.clone(), mild, 1.0)
        };
        rows.push(ManifestRow::TwoAfc {
            subdivision: family.as_str().to_string(),
            reference: save(&reference, &format!("{i:05}_ref.png"))?,
            p0: save(&p0, &format!("{i:05}_p0.png"))?,
            p1: save(&p1, &format!("{i:05}_p1.png"))?,
            judge,
        });

        let (b, same_rate) = if i % 2 == 0 {
            let delta = 1.0 / 255.0;
            (reference.map(|p| p.map(|v| v + delta)), 1.0)
        } else {
            (severe, 0.0)
        };
        rows.push(ManifestRow::Jnd {
            a: PathBuf::from(format!("{i:05}_ref.png")),
            b: save(&b, &format!("{i:05}_jnd.png"))?,
            same_rate,
        });
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&rows, &manifest)?;
    Ok(manifest)
}
