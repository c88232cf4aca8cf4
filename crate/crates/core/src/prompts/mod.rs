//! Two-branch 3D prompt sources: a point branch emitting per-point logits and
//! point groups, and a box branch emitting 3D boxes. Both attach unit-norm
//! descriptors so that matching can compare them by cosine similarity.

mod exchange;

pub use exchange::{ExchangeBackend, ExchangeBox, ExchangeFile};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_model::{Box3D, ScenePointCloud, Vec3};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointBranchOutput {
    /// Width of each per-point logit row.
    pub classes: usize,
    /// Row-major `N x classes`.
    pub logits: Vec<f64>,
    /// Point indices of each proposed 3D mask.
    pub groups: Vec<Vec<usize>>,
    /// Unit-norm descriptor per group.
    pub features: Vec<Vec<f64>>,
}

impl PointBranchOutput {
    /// Build the output with group descriptors mean-pooled from the logits.
    pub fn from_logits(classes: usize, logits: Vec<f64>, groups: Vec<Vec<usize>>) -> Result<Self> {
        if classes == 0 || !logits.len().is_multiple_of(classes) {
            return Err(Error::DimensionMismatch(format!(
                "{} logits are not a multiple of {classes} classes",
                logits.len()
            )));
        }
        let mut out = PointBranchOutput {
            classes,
            logits,
            groups,
            features: Vec::new(),
        };
        out.features = out.groups.iter().map(|g| out.pooled(g)).collect();
        Ok(out)
    }

    pub fn num_points(&self) -> usize {
        self.logits.len().checked_div(self.classes).unwrap_or(0)
    }

    pub fn logit(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    /// L2-normalized mean logit over `indices`; zero when the mean vanishes.
    pub fn pooled(&self, indices: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes];
        for &i in indices {
            for (a, l) in acc.iter_mut().zip(self.logit(i)) {
                *a += l;
            }
        }
        if !indices.is_empty() {
            acc.iter_mut().for_each(|a| *a /= indices.len() as f64);
        }
        normalized(acc)
    }

    /// Synthesize per-point logits from group descriptors when a backend
    /// only reports groups: each point gets the mean descriptor of the groups
    /// containing it.
    pub fn fill_logits_from_groups(&mut self, num_points: usize) {
        let classes = self.features.first().map_or(0, |f| f.len());
        let mut logits = vec![0.0; num_points * classes];
        let mut counts = vec![0u32; num_points];
        for (g, f) in self.groups.iter().zip(&self.features) {
            for &i in g {
                counts[i] += 1;
                for (a, x) in logits[i * classes..(i + 1) * classes].iter_mut().zip(f) {
                    *a += x;
                }
            }
        }
        for (i, c) in counts.iter().enumerate() {
            if *c > 1 {
                logits[i * classes..(i + 1) * classes]
                    .iter_mut()
                    .for_each(|a| *a /= *c as f64);
            }
        }
        self.classes = classes;
        self.logits = logits;
    }

    fn check(&mut self, num_points: usize) -> Result<()> {
        for (k, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidInput(format!("point group {k} is empty")));
            }
            if let Some(bad) = g.iter().find(|i| **i >= num_points) {
                return Err(Error::InvalidInput(format!(
                    "point group {k} references point {bad} of {num_points}"
                )));
            }
        }
        if self.features.len() != self.groups.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} group features for {} groups",
                self.features.len(),
                self.groups.len()
            )));
        }
        if self.classes > 0 && self.num_points() != num_points {
            return Err(Error::DimensionMismatch(format!(
                "logits cover {} points, cloud has {num_points}",
                self.num_points()
            )));
        }
        for f in self.features.iter_mut() {
            *f = normalized(std::mem::take(f));
        }
        if self.classes == 0 && !self.groups.is_empty() {
            self.fill_logits_from_groups(num_points);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxBranchOutput {
    pub boxes: Vec<Box3D>,
    /// Unit-norm descriptor per box.
    pub features: Vec<Vec<f64>>,
}

impl BoxBranchOutput {
    fn check(&mut self) -> Result<()> {
        if self.features.len() != self.boxes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} box features for {} boxes",
                self.features.len(),
                self.boxes.len()
            )));
        }
        if let Some(k) = self.boxes.iter().position(|b| !b.is_valid()) {
            return Err(Error::InvalidInput(format!("box {k} has a non-positive size")));
        }
        for f in self.features.iter_mut() {
            *f = normalized(std::mem::take(f));
        }
        Ok(())
    }
}

/// Backend selector: a registered kind plus opaque parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBackendSpec {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl PromptBackendSpec {
    pub fn new(kind: impl Into<String>) -> Self {
        PromptBackendSpec {
            kind: kind.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn f64_param(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Config(format!("backend parameter `{key}` must be a number"))),
        }
    }

    pub fn u64_param(&self, key: &str, default: u64) -> Result<u64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config(format!("backend parameter `{key}` must be a non-negative integer"))),
        }
    }

    pub fn str_param(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(|v| v.as_str())
    }
}

pub trait PointPromptBackend: Send + Sync {
    fn run(&self, cloud: &ScenePointCloud) -> Result<PointBranchOutput>;
}

pub trait BoxPromptBackend: Send + Sync {
    fn run(&self, cloud: &ScenePointCloud) -> Result<BoxBranchOutput>;
}

type PointFactory = Arc<dyn Fn(&PromptBackendSpec) -> Result<Box<dyn PointPromptBackend>> + Send + Sync>;
type BoxFactory = Arc<dyn Fn(&PromptBackendSpec) -> Result<Box<dyn BoxPromptBackend>> + Send + Sync>;

/// Maps backend kinds to constructors. The file-exchange backend is always
/// registered under `"exchange"`.
#[derive(Clone)]
pub struct PromptRegistry {
    point: BTreeMap<String, PointFactory>,
    boxes: BTreeMap<String, BoxFactory>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl PromptRegistry {
    pub fn new() -> Self {
        let mut reg = PromptRegistry {
            point: BTreeMap::new(),
            boxes: BTreeMap::new(),
        };
        reg.register_point("exchange", |spec| Ok(Box::new(ExchangeBackend::from_spec(spec)?)));
        reg.register_box("exchange", |spec| Ok(Box::new(ExchangeBackend::from_spec(spec)?)));
        reg
    }

    pub fn register_point<F>(&mut self, kind: &str, factory: F)
    where
        F: Fn(&PromptBackendSpec) -> Result<Box<dyn PointPromptBackend>> + Send + Sync + 'static,
    {
        self.point.insert(kind.to_string(), Arc::new(factory));
    }

    pub fn register_box<F>(&mut self, kind: &str, factory: F)
    where
        F: Fn(&PromptBackendSpec) -> Result<Box<dyn BoxPromptBackend>> + Send + Sync + 'static,
    {
        self.boxes.insert(kind.to_string(), Arc::new(factory));
    }

    pub fn point_kinds(&self) -> impl Iterator<Item = &str> {
        self.point.keys().map(String::as_str)
    }

    pub fn box_kinds(&self) -> impl Iterator<Item = &str> {
        self.boxes.keys().map(String::as_str)
    }

    pub fn has_point(&self, kind: &str) -> bool {
        self.point.contains_key(kind)
    }

    pub fn has_box(&self, kind: &str) -> bool {
        self.boxes.contains_key(kind)
    }
}

/// Run the configured point-branch backend and normalize its descriptors.
pub fn point_branch(
    cloud: &ScenePointCloud,
    spec: &PromptBackendSpec,
    registry: &PromptRegistry,
) -> Result<PointBranchOutput> {
    let factory = registry
        .point
        .get(&spec.kind)
        .ok_or_else(|| Error::UnknownBackend(spec.kind.clone()))?;
    let mut out = factory(spec)?.run(cloud)?;
    out.check(cloud.len())?;
    Ok(out)
}

/// Run the configured box-branch backend and normalize its descriptors.
pub fn box_branch(
    cloud: &ScenePointCloud,
    spec: &PromptBackendSpec,
    registry: &PromptRegistry,
) -> Result<BoxBranchOutput> {
    let factory = registry
        .boxes
        .get(&spec.kind)
        .ok_or_else(|| Error::UnknownBackend(spec.kind.clone()))?;
    let mut out = factory(spec)?.run(cloud)?;
    out.check()?;
    Ok(out)
}

pub fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Geometry descriptor shared by the mock backends: scene-normalized center,
/// size offset from a reference object, and a one-hot shape code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorFrame {
    pub center: Vec3,
    pub half_extent: Vec3,
    pub reference_size: f64,
    pub size_scale: f64,
    pub shape_classes: usize,
}

impl DescriptorFrame {
    /// Derived from the cloud's bounding box so both branches agree without
    /// sharing any ground truth.
    pub fn for_cloud(cloud: &ScenePointCloud, shape_classes: usize) -> Self {
        let (lo, hi) = cloud.aabb().unwrap_or((Vec3::zeros(), Vec3::repeat(1.0)));
        DescriptorFrame {
            center: (lo + hi) * 0.5,
            half_extent: ((hi - lo) * 0.5).map(|h| h.max(1e-6)),
            reference_size: 0.8,
            size_scale: 0.4,
            shape_classes,
        }
    }

    pub fn dim(&self) -> usize {
        6 + self.shape_classes
    }

    /// Raw (unnormalized) descriptor; `shape` outside the class range yields a zero code.
    pub fn describe(&self, center: &Vec3, size: &Vec3, shape: Option<usize>) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for k in 0..3 {
            v.push((center[k] - self.center[k]) / self.half_extent[k]);
        }
        for k in 0..3 {
            v.push((size[k] - self.reference_size) / self.size_scale);
        }
        for c in 0..self.shape_classes {
            v.push(if Some(c) == shape { 1.5 } else { 0.0 });
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(PointBranchOutput);

    impl PointPromptBackend for Fixed {
        fn run(&self, _: &ScenePointCloud) -> Result<PointBranchOutput> {
            Ok(self.0.clone())
        }
    }

    fn cloud() -> ScenePointCloud {
        ScenePointCloud::new((0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect(), None).unwrap()
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let reg = PromptRegistry::new();
        let err = point_branch(&cloud(), &PromptBackendSpec::new("foo"), &reg).unwrap_err();
        assert!(matches!(err, Error::UnknownBackend(k) if k == "foo"));
        assert!(box_branch(&cloud(), &PromptBackendSpec::new("foo"), &reg).is_err());
    }

    #[test]
    fn group_features_are_pooled_and_normalized() {
        let logits = vec![3.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        let out = PointBranchOutput::from_logits(2, logits, vec![vec![0, 1], vec![2]]).unwrap();
        assert_eq!(out.features[0], vec![1.0, 0.0]);
        assert_eq!(out.features[1], vec![0.0, 1.0]);

        let mut reg = PromptRegistry::new();
        let raw = PointBranchOutput {
            classes: 0,
            logits: vec![],
            groups: vec![vec![0, 1], vec![1, 2]],
            features: vec![vec![3.0, 4.0], vec![0.0, 2.0]],
        };
        reg.register_point("fixed", move |_| Ok(Box::new(Fixed(raw.clone()))));
        let out = point_branch(&cloud(), &PromptBackendSpec::new("fixed"), &reg).unwrap();
        for f in &out.features {
            assert!((f.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Point 1 belongs to both groups and gets their mean descriptor.
        assert_eq!(out.classes, 2);
        assert!((out.logit(1)[0] - 0.3).abs() < 1e-12 && (out.logit(1)[1] - 0.9).abs() < 1e-12);
        assert_eq!(out.logit(3), &[0.0, 0.0]);
    }

    #[test]
    fn out_of_range_groups_are_rejected() {
        let mut reg = PromptRegistry::new();
        let raw = PointBranchOutput {
            classes: 0,
            logits: vec![],
            groups: vec![vec![0, 9]],
            features: vec![vec![1.0]],
        };
        reg.register_point("bad", move |_| Ok(Box::new(Fixed(raw.clone()))));
        assert!(point_branch(&cloud(), &PromptBackendSpec::new("bad"), &reg).is_err());
    }

    #[test]
    fn spec_parameters() {
        let spec = PromptBackendSpec::new("x").with("sigma", 0.5).with("n", 3u64);
        assert_eq!(spec.f64_param("sigma", 0.0).unwrap(), 0.5);
        assert_eq!(spec.u64_param("n", 0).unwrap(), 3);
        assert_eq!(spec.f64_param("missing", 2.0).unwrap(), 2.0);
        assert!(spec.u64_param("sigma", 0).is_err());
    }
}
