//! Pixel-wise and deep-feature distances.
//!
//! All feature distances sum a per-layer term over the taps of a
//! [`FeatureStack`]. Per layer:
//!
//! * spatial: mean over `c, h, w` of `f(a - b)`
//! * mean: mean over channels of `f(mean(a_c) - mean(b_c))`
//! * sort: mean over channels of the mean over positions of
//!   `f(sorted_desc(a_c) - sorted_desc(b_c))`
//!
//! where `f` is `|d|` (L1) or `d^2` (L2). Combined methods add the spatial
//! distance to one of the non-spatial ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, BackboneId, FeatureStack};
use crate::image::Image;
use crate::tensor::{channel_unit_normalize, Tensor3, DEFAULT_UNIT_EPSILON};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image sizes differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    ImageSize {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("feature stacks differ: {a:?} vs {b:?}")]
    StackShape {
        a: Vec<(usize, usize, usize)>,
        b: Vec<(usize, usize, usize)>,
    },
    #[error("method `{0}` needs a backbone")]
    MissingBackbone(Method),
    #[error("pixelwise method takes no backbone")]
    UnexpectedBackbone,
    #[error("config expects backbone `{expected}` but weights are for `{found}`")]
    BackboneMismatch {
        expected: BackboneId,
        found: BackboneId,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    #[inline]
    pub fn term(self, diff: f64) -> f64 {
        elementwise_norm_term(diff, self)
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        })
    }
}

impl FromStr for Norm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            _ => Err(format!("unknown norm `{s}` (expected l1 or l2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pixelwise")]
    Pixelwise,
    #[serde(rename = "spatial")]
    Spatial,
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "sort")]
    Sort,
    #[serde(rename = "spatial+mean")]
    SpatialMean,
    #[serde(rename = "spatial+sort")]
    SpatialSort,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pixelwise,
        Method::Spatial,
        Method::Mean,
        Method::Sort,
        Method::SpatialMean,
        Method::SpatialSort,
    ];

    pub const DEEP: [Method; 5] = [
        Method::Spatial,
        Method::Sort,
        Method::Mean,
        Method::SpatialSort,
        Method::SpatialMean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pixelwise => "pixelwise",
            Method::Spatial => "spatial",
            Method::Mean => "mean",
            Method::Sort => "sort",
            Method::SpatialMean => "spatial+mean",
            Method::SpatialSort => "spatial+sort",
        }
    }

    pub fn needs_backbone(self) -> bool {
        self != Method::Pixelwise
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonSpatial {
    Mean,
    Sort,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub method: Method,
    pub norm: Norm,
    pub unit_normalize: bool,
    pub backbone: Option<BackboneId>,
    /// Weight on the non-spatial term of combined methods.
    #[serde(default = "one")]
    pub nonspatial_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl MetricConfig {
    pub fn pixelwise(norm: Norm) -> Self {
        Self {
            method: Method::Pixelwise,
            norm,
            unit_normalize: false,
            backbone: None,
            nonspatial_weight: 1.0,
        }
    }

    /// A deep-feature config; `method` must not be pixelwise.
    pub fn deep(method: Method, backbone: BackboneId, norm: Norm, unit_normalize: bool) -> Self {
        Self {
            method,
            norm,
            unit_normalize,
            backbone: Some(backbone),
            nonspatial_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        match (self.method.needs_backbone(), self.backbone) {
            (true, None) => Err(MetricError::MissingBackbone(self.method)),
            (false, Some(_)) => Err(MetricError::UnexpectedBackbone),
            _ => Ok(()),
        }
    }

    /// Short stable identifier, e.g. `sort/alexnet/l2` or `spatial/vgg16/l2/unit`.
    pub fn id(&self) -> String {
        let mut s = self.method.to_string();
        if let Some(b) = self.backbone {
            s.push('/');
            s.push_str(b.as_str());
        }
        s.push('/');
        s.push_str(&self.norm.to_string());
        if self.unit_normalize {
            s.push_str("/unit");
        }
        if self.nonspatial_weight != 1.0 {
            s.push_str(&format!("/w{}", self.nonspatial_weight));
        }
        s
    }
}

/// A nonnegative dissimilarity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distance(pub f64);

impl Distance {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `|diff|` for L1, `diff^2` for L2.
#[inline]
pub fn elementwise_norm_term(diff: f64, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => diff.abs(),
        Norm::L2 => diff * diff,
    }
}

/// Mean over all pixels and channels of the norm term of the difference.
pub fn pixelwise_distance(a: &Image, b: &Image, norm: Norm) -> Result<Distance, MetricError> {
    if !a.same_size(b) {
        return Err(MetricError::ImageSize {
            a_w: a.width(),
            a_h: a.height(),
            b_w: b.width(),
            b_h: b.height(),
        });
    }
    let n = a.pixels().len();
    if n == 0 {
        return Ok(Distance(0.0));
    }
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| norm.term(f64::from(x) - f64::from(y)))
        .sum();
    Ok(Distance(sum / n as f64))
}

fn check_shapes(a: &FeatureStack, b: &FeatureStack) -> Result<(), MetricError> {
    let (sa, sb) = (a.shapes(), b.shapes());
    if sa != sb {
        return Err(MetricError::StackShape { a: sa, b: sb });
    }
    Ok(())
}

fn sum_layers(
    a: &FeatureStack,
    b: &FeatureStack,
    layer: impl Fn(&Tensor3, &Tensor3) -> f64,
) -> Result<Distance, MetricError> {
    check_shapes(a, b)?;
    Ok(Distance(
        a.tensors().zip(b.tensors()).map(|(x, y)| layer(x, y)).sum(),
    ))
}

fn spatial_layer(a: &Tensor3, b: &Tensor3, norm: Norm) -> f64 {
    let n = a.data().len();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| norm.term(f64::from(x) - f64::from(y)))
        .sum();
    s / n as f64
}

// Summed in sorted order so the result cannot depend on spatial arrangement.
fn channel_mean(v: &[f32]) -> f64 {
    sorted_descending(v)
        .iter()
        .map(|&x| f64::from(x))
        .sum::<f64>()
        / v.len() as f64
}

fn mean_layer(a: &Tensor3, b: &Tensor3, norm: Norm) -> f64 {
    let c = a.channels();
    if c == 0 || a.height() * a.width() == 0 {
        return 0.0;
    }
    let s: f64 = (0..c)
        .map(|k| norm.term(channel_mean(a.channel(k)) - channel_mean(b.channel(k))))
        .sum();
    s / c as f64
}

/// Copy of `v` in descending order; equal values keep their encounter order.
pub fn sorted_descending(v: &[f32]) -> Vec<f32> {
    let mut s = v.to_vec();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Mean of the norm term over positionwise differences of the two
/// descending-sorted vectors.
pub fn sorted_pair_cost(a: &[f32], b: &[f32], norm: Norm) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let (sa, sb) = (sorted_descending(a), sorted_descending(b));
    let s: f64 = sa
        .iter()
        .zip(&sb)
        .map(|(&x, &y)| norm.term(f64::from(x) - f64::from(y)))
        .sum();
    s / a.len() as f64
}

fn sort_layer(a: &Tensor3, b: &Tensor3, norm: Norm) -> f64 {
    let c = a.channels();
    if c == 0 {
        return 0.0;
    }
    let s: f64 = (0..c)
        .map(|k| sorted_pair_cost(a.channel(k), b.channel(k), norm))
        .sum();
    s / c as f64
}

pub fn spatial_distance(
    a: &FeatureStack,
    b: &FeatureStack,
    norm: Norm,
) -> Result<Distance, MetricError> {
    sum_layers(a, b, |x, y| spatial_layer(x, y, norm))
}

pub fn mean_distance(
    a: &FeatureStack,
    b: &FeatureStack,
    norm: Norm,
) -> Result<Distance, MetricError> {
    sum_layers(a, b, |x, y| mean_layer(x, y, norm))
}

pub fn sort_distance(
    a: &FeatureStack,
    b: &FeatureStack,
    norm: Norm,
) -> Result<Distance, MetricError> {
    sum_layers(a, b, |x, y| sort_layer(x, y, norm))
}

/// Spatial distance plus `weight` times the chosen non-spatial distance.
pub fn combined_distance(
    a: &FeatureStack,
    b: &FeatureStack,
    norm: Norm,
    nonspatial: NonSpatial,
    weight: f64,
) -> Result<Distance, MetricError> {
    let spatial = spatial_distance(a, b, norm)?.0;
    let other = match nonspatial {
        NonSpatial::Mean => mean_distance(a, b, norm)?,
        NonSpatial::Sort => sort_distance(a, b, norm)?,
    };
    Ok(Distance(spatial + weight * other.0))
}

pub fn unit_normalize_stack(stack: &FeatureStack) -> FeatureStack {
    stack.map_tensors(|t| channel_unit_normalize(t, DEFAULT_UNIT_EPSILON))
}

/// Dispatches a deep-feature method on already extracted stacks.
///
/// When `config.unit_normalize` is set the stacks are normalized here, so
/// callers pass raw tap activations.
pub fn feature_distance(
    a: &FeatureStack,
    b: &FeatureStack,
    config: &MetricConfig,
) -> Result<Distance, MetricError> {
    if config.unit_normalize {
        let (na, nb) = (unit_normalize_stack(a), unit_normalize_stack(b));
        return dispatch(&na, &nb, config);
    }
    dispatch(a, b, config)
}

fn dispatch(
    a: &FeatureStack,
    b: &FeatureStack,
    config: &MetricConfig,
) -> Result<Distance, MetricError> {
    let norm = config.norm;
    match config.method {
        Method::Pixelwise => Err(MetricError::UnexpectedBackbone),
        Method::Spatial => spatial_distance(a, b, norm),
        Method::Mean => mean_distance(a, b, norm),
        Method::Sort => sort_distance(a, b, norm),
        Method::SpatialMean => {
            combined_distance(a, b, norm, NonSpatial::Mean, config.nonspatial_weight)
        }
        Method::SpatialSort => {
            combined_distance(a, b, norm, NonSpatial::Sort, config.nonspatial_weight)
        }
    }
}

/// End-to-end distance between two images.
///
/// `backbone` must be given for every method except pixelwise and must
/// match `config.backbone`.
pub fn distance(
    a: &Image,
    b: &Image,
    config: &MetricConfig,
    backbone: Option<&Backbone>,
) -> Result<Distance, MetricError> {
    config.validate()?;
    if !a.same_size(b) {
        return Err(MetricError::ImageSize {
            a_w: a.width(),
            a_h: a.height(),
            b_w: b.width(),
            b_h: b.height(),
        });
    }
    if config.method == Method::Pixelwise {
        return pixelwise_distance(a, b, config.norm);
    }
    let expected = config.backbone.expect("validated");
    let bb = backbone.ok_or(MetricError::MissingBackbone(config.method))?;
    if bb.id() != expected {
        return Err(MetricError::BackboneMismatch {
            expected,
            found: bb.id(),
        });
    }
    let fa = bb.extract(a)?;
    let fb = bb.extract(b)?;
    feature_distance(&fa, &fb, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureStack {
        FeatureStack::new(vec![("t".into(), Tensor3::new(c, h, w, data).unwrap())])
    }

    #[test]
    fn norm_terms() {
        assert_eq!(elementwise_norm_term(-2.0, Norm::L2), 4.0);
        assert_eq!(elementwise_norm_term(-2.0, Norm::L1), 2.0);
        assert_eq!(elementwise_norm_term(0.0, Norm::L1), 0.0);
        assert_eq!(elementwise_norm_term(0.0, Norm::L2), 0.0);
    }

    #[test]
    fn pixelwise_black_white_and_inversion() {
        let black = Image::filled(4, 4, [0.0; 3]);
        let white = Image::filled(4, 4, [1.0; 3]);
        let gray = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(pixelwise_distance(&black, &white, Norm::L2).unwrap().0, 1.0);
        assert_eq!(pixelwise_distance(&black, &black, Norm::L2).unwrap().0, 0.0);

        let bw = Image::from_fn(
            4,
            4,
            |x, y| if (x + y) % 2 == 0 { [1.0; 3] } else { [0.0; 3] },
        );
        let inv = bw.map(|p| p.map(|v| 1.0 - v));
        assert_eq!(pixelwise_distance(&bw, &inv, Norm::L2).unwrap().0, 1.0);
        assert_eq!(pixelwise_distance(&bw, &gray, Norm::L2).unwrap().0, 0.25);
    }

    #[test]
    fn pixelwise_size_mismatch() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 5, [0.0; 3]);
        assert!(matches!(
            pixelwise_distance(&a, &b, Norm::L1),
            Err(MetricError::ImageSize { .. })
        ));
    }

    #[test]
    fn spatial_hand_value() {
        let a = stack(1, 1, 2, vec![4.0, 0.0]);
        let b = stack(1, 1, 2, vec![0.0, 0.0]);
        assert_eq!(spatial_distance(&a, &b, Norm::L2).unwrap().0, 8.0);
    }

    #[test]
    fn mean_hand_value() {
        let a = stack(1, 1, 2, vec![1.0, 3.0]);
        let b = stack(1, 1, 2, vec![0.0, 0.0]);
        assert_eq!(mean_distance(&a, &b, Norm::L2).unwrap().0, 4.0);
    }

    #[test]
    fn sort_hand_values() {
        let a = stack(1, 1, 3, vec![3.0, 1.0, 2.0]);
        let b = stack(1, 1, 3, vec![2.0, 3.0, 1.0]);
        assert_eq!(sort_distance(&a, &b, Norm::L2).unwrap().0, 0.0);

        let a = stack(1, 1, 2, vec![5.0, 1.0]);
        let b = stack(1, 1, 2, vec![2.0, 2.0]);
        assert_eq!(sort_distance(&a, &b, Norm::L2).unwrap().0, 5.0);
    }

    #[test]
    fn sort_ignores_circular_shift() {
        let a = stack(2, 2, 3, (0..12).map(|v| (v * 7 % 5) as f32).collect());
        let shifted: Vec<f32> = (0..2)
            .flat_map(|c| {
                let ch = a.get(0).unwrap().channel(c).to_vec();
                (0..6).map(move |i| ch[(i + 1) % 6])
            })
            .collect();
        let b = stack(2, 2, 3, shifted);
        assert_eq!(sort_distance(&a, &b, Norm::L1).unwrap().0, 0.0);
        assert_eq!(mean_distance(&a, &b, Norm::L1).unwrap().0, 0.0);
        assert!(spatial_distance(&a, &b, Norm::L1).unwrap().0 > 0.0);
    }

    #[test]
    fn combined_is_sum() {
        let a = stack(1, 1, 2, vec![5.0, 1.0]);
        let b = stack(1, 1, 2, vec![2.0, 2.0]);
        let s = spatial_distance(&a, &b, Norm::L2).unwrap().0;
        let o = sort_distance(&a, &b, Norm::L2).unwrap().0;
        let c = combined_distance(&a, &b, Norm::L2, NonSpatial::Sort, 1.0)
            .unwrap()
            .0;
        assert_eq!(c, s + o);
        let half = combined_distance(&a, &b, Norm::L2, NonSpatial::Sort, 0.5)
            .unwrap()
            .0;
        assert_eq!(half, s + 0.5 * o);
    }

    #[test]
    fn stack_shape_mismatch() {
        let a = stack(1, 1, 2, vec![0.0; 2]);
        let b = stack(2, 1, 1, vec![0.0; 2]);
        assert!(matches!(
            spatial_distance(&a, &b, Norm::L2),
            Err(MetricError::StackShape { .. })
        ));
        assert!(matches!(
            sort_distance(&a, &b, Norm::L2),
            Err(MetricError::StackShape { .. })
        ));
    }

    #[test]
    fn config_validation_and_ids() {
        assert!(MetricConfig::pixelwise(Norm::L2).validate().is_ok());
        let mut c = MetricConfig::deep(Method::Sort, BackboneId::AlexNet, Norm::L2, true);
        assert_eq!(c.id(), "sort/alexnet/l2/unit");
        c.backbone = None;
        assert!(matches!(
            c.validate(),
            Err(MetricError::MissingBackbone(Method::Sort))
        ));
        let mut p = MetricConfig::pixelwise(Norm::L1);
        p.backbone = Some(BackboneId::Vgg16);
        assert!(p.validate().is_err());
    }

    #[test]
    fn method_round_trips_through_str() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
