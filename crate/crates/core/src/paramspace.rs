//! Named per-layer parameter groups plus the frozen pre-trained snapshot.
//!
//! Every weight matrix and every bias vector is its own group; per-layer
//! quantities elsewhere in the crate (projection strength, inner products,
//! norms) are computed at this granularity.

use std::borrow::Cow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// What the regularization gradient of a group is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Distance to the captured pre-trained snapshot.
    #[default]
    Snapshot,
    /// Distance to the zero vector (adapter parameters).
    Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default = "default_true")]
    pub trainable: bool,
    #[serde(default)]
    pub reference_mode: ReferenceMode,
}

fn default_true() -> bool {
    true
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::Shape(format!(
                "group `{name}` has {} values but shape {shape:?} needs {expect}",
                values.len()
            )));
        }
        Ok(ParamGroup {
            name,
            shape,
            values,
            trainable: true,
            reference_mode: ReferenceMode::Snapshot,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Model parameters and the pre-trained snapshot θ₀.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    groups: Vec<ParamGroup>,
    snapshot: Option<Vec<Vec<f64>>>,
    seed: u64,
}

impl ParamSpace {
    pub fn from_groups(groups: Vec<ParamGroup>, seed: u64) -> Result<Self> {
        for g in &groups {
            let expect: usize = g.shape.iter().product();
            if g.values.len() != expect {
                return Err(Error::Shape(format!(
                    "group `{}` has {} values but shape {:?}",
                    g.name,
                    g.values.len(),
                    g.shape
                )));
            }
        }
        Ok(ParamSpace {
            groups,
            snapshot: None,
            seed,
        })
    }

    /// Dense layers `layer_sizes[i] -> layer_sizes[i + 1]` with He-scaled
    /// Gaussian weights (std `sqrt(2 / fan_in)`) and zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least an input and an output size, got {layer_sizes:?}"
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!(
                "layer size at position {pos} is zero"
            )));
        }
        let mut r = rng::stream(seed, "init");
        let mut groups = Vec::with_capacity(2 * (layer_sizes.len() - 1));
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| scale * rng::gaussian(&mut r))
                .collect();
            groups.push(ParamGroup::new(
                format!("layer{i}.weight"),
                vec![fan_out, fan_in],
                w,
            )?);
            groups.push(ParamGroup::new(
                format!("layer{i}.bias"),
                vec![fan_out],
                vec![0.0; fan_out],
            )?);
        }
        Ok(ParamSpace {
            groups,
            snapshot: None,
            seed,
        })
    }

    /// Appends a group. Only allowed before the snapshot is captured so the
    /// snapshot always mirrors the group layout.
    pub fn push_group(&mut self, group: ParamGroup) -> Result<usize> {
        if self.snapshot.is_some() {
            return Err(Error::State(format!(
                "cannot add group `{}` after the snapshot was captured",
                group.name
            )));
        }
        if self.index_of(&group.name).is_some() {
            return Err(Error::Config(format!("duplicate group `{}`", group.name)));
        }
        self.groups.push(group);
        Ok(self.groups.len() - 1)
    }

    /// Freezes θ₀. Can only happen once.
    pub fn capture_snapshot(&mut self) -> Result<()> {
        if self.snapshot.is_some() {
            return Err(Error::State("snapshot already captured".into()));
        }
        self.snapshot = Some(self.groups.iter().map(|g| g.values.clone()).collect());
        Ok(())
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.is_some()
    }

    pub fn snapshot(&self) -> Option<&[Vec<f64>]> {
        self.snapshot.as_deref()
    }

    /// A copy of the space whose values are the snapshot.
    pub fn snapshot_space(&self) -> Result<ParamSpace> {
        let snap = self.require_snapshot()?;
        let mut out = self.clone();
        for (g, s) in out.groups.iter_mut().zip(snap) {
            g.values.clone_from(s);
        }
        Ok(out)
    }

    fn require_snapshot(&self) -> Result<&[Vec<f64>]> {
        self.snapshot
            .as_deref()
            .ok_or_else(|| Error::State("pre-trained snapshot has not been captured".into()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &ParamGroup {
        &self.groups[i]
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.groups[i].values
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.groups[i].values
    }

    pub fn set_trainable(&mut self, i: usize, trainable: bool) {
        self.groups[i].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.groups.iter_mut().for_each(|g| g.trainable = trainable);
    }

    pub fn set_reference_mode(&mut self, i: usize, mode: ReferenceMode) {
        self.groups[i].reference_mode = mode;
    }

    pub fn num_trainable(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).count()
    }

    /// The regularization reference of group `i`: θ₀ in snapshot mode,
    /// zeros in origin mode.
    pub fn reference(&self, i: usize) -> Result<Cow<'_, [f64]>> {
        let g = &self.groups[i];
        match g.reference_mode {
            ReferenceMode::Origin => Ok(Cow::Owned(vec![0.0; g.len()])),
            ReferenceMode::Snapshot => Ok(Cow::Borrowed(&self.require_snapshot()?[i])),
        }
    }

    /// `θ − θ_ref` for group `i`.
    pub fn reg_gradient(&self, i: usize) -> Result<Vec<f64>> {
        let g = &self.groups[i];
        match g.reference_mode {
            ReferenceMode::Origin => Ok(g.values.clone()),
            ReferenceMode::Snapshot => {
                let snap = &self.require_snapshot()?[i];
                Ok(reference_gap(&g.values, snap))
            }
        }
    }

    /// Zero gradient with this space's layout.
    pub fn zero_grad(&self) -> GradSet {
        GradSet {
            groups: self.groups.iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    pub fn check_layout(&self, g: &GradSet) -> Result<()> {
        if g.groups.len() != self.groups.len() {
            return Err(Error::Shape(format!(
                "gradient has {} groups, parameters have {}",
                g.groups.len(),
                self.groups.len()
            )));
        }
        for (p, v) in self.groups.iter().zip(&g.groups) {
            if p.len() != v.len() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has {} entries, expected {}",
                    p.name,
                    v.len(),
                    p.len()
                )));
            }
        }
        Ok(())
    }

    /// True when both spaces have the same group names, shapes and order.
    pub fn same_layout(&self, other: &ParamSpace) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let space: ParamSpace = serde_json::from_str(s)?;
        let checked = ParamSpace::from_groups(space.groups, space.seed)?;
        if let Some(snap) = &space.snapshot {
            if snap.len() != checked.groups.len()
                || snap.iter().zip(&checked.groups).any(|(s, g)| s.len() != g.len())
            {
                return Err(Error::Shape(
                    "snapshot layout does not mirror the parameter groups".into(),
                ));
            }
        }
        Ok(ParamSpace {
            snapshot: space.snapshot,
            ..checked
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Per-group gradients mirroring a [`ParamSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub groups: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|v| v.is_finite())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn reference_gap(values: &[f64], reference: &[f64]) -> Vec<f64> {
    values.iter().zip(reference).map(|(v, r)| v - r).collect()
}

pub fn group_dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dot of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

pub fn group_norm_sq(a: &[f64]) -> f64 {
    dot_unchecked(a, a)
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_small_layout() {
        let p = ParamSpace::init(&[2, 3], 7).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.group(0).shape, vec![3, 2]);
        assert_eq!(p.group(1).shape, vec![3]);
        assert_eq!(p.values(1), &[0.0; 3]);
        assert!(!p.has_snapshot());
    }

    #[test]
    fn init_is_deterministic() {
        let a = ParamSpace::init(&[2, 3], 7).unwrap();
        let b = ParamSpace::init(&[2, 3], 7).unwrap();
        let bits = |p: &ParamSpace| -> Vec<u64> {
            p.groups().iter().flat_map(|g| g.values.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = ParamSpace::init(&[2, 3], 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let p = ParamSpace::init(&[16, 64, 64, 8], 11).unwrap();
        assert_eq!(p.len(), 6);
        let w = p.values(0);
        assert_eq!(w.len(), 64 * 16);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 16.0;
        assert!((var - target).abs() / target < 0.2, "var {var}");
    }

    #[test]
    fn init_rejects_zero_sizes() {
        assert!(matches!(ParamSpace::init(&[4, 0, 2], 0), Err(Error::Config(_))));
        assert!(matches!(ParamSpace::init(&[4], 0), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_capture_is_one_shot_and_frozen() {
        let mut p = ParamSpace::init(&[2, 2], 1).unwrap();
        assert!(matches!(p.reg_gradient(0), Err(Error::State(_))));
        p.capture_snapshot().unwrap();
        assert!(matches!(p.capture_snapshot(), Err(Error::State(_))));
        let before = p.snapshot().unwrap().to_vec();
        assert!(p.reg_gradient(0).unwrap().iter().all(|&v| v == 0.0));
        p.values_mut(0)[0] = 5.0;
        assert_eq!(p.snapshot().unwrap(), &before[..]);
        assert_eq!(p.reg_gradient(0).unwrap()[0], 5.0 - before[0][0]);
    }

    #[test]
    fn origin_mode_reference_is_zero() {
        let mut p = ParamSpace::from_groups(
            vec![ParamGroup::new("a", vec![2], vec![1.0, -2.0]).unwrap()],
            0,
        )
        .unwrap();
        p.set_reference_mode(0, ReferenceMode::Origin);
        assert_eq!(p.reg_gradient(0).unwrap(), vec![1.0, -2.0]);
        p.capture_snapshot().unwrap();
        assert_eq!(p.reg_gradient(0).unwrap(), vec![1.0, -2.0]);
        assert_eq!(&*p.reference(0).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn no_groups_after_capture() {
        let mut p = ParamSpace::init(&[2, 2], 1).unwrap();
        p.capture_snapshot().unwrap();
        let g = ParamGroup::new("extra", vec![1], vec![0.0]).unwrap();
        assert!(matches!(p.push_group(g), Err(Error::State(_))));
    }

    #[test]
    fn dot_and_norm() {
        assert_eq!(group_dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(group_dot(&[1.0, -1.0], &[0.0, 1.0]).unwrap(), -1.0);
        assert_eq!(group_norm_sq(&[3.0, 4.0]), 25.0);
        assert!(matches!(group_dot(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn group_shape_mismatch_rejected() {
        assert!(ParamGroup::new("w", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_json_rejects_bad_snapshot() {
        let mut p = ParamSpace::init(&[2, 2], 1).unwrap();
        p.capture_snapshot().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        v["snapshot"][0] = serde_json::json!([1.0]);
        assert!(ParamSpace::from_json(&v.to_string()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dot_self_equals_norm_sq(a in prop::collection::vec(-1e6f64..1e6, 0..64)) {
                prop_assert_eq!(group_dot(&a, &a).unwrap().to_bits(), group_norm_sq(&a).to_bits());
                prop_assert!(group_norm_sq(&a) >= 0.0);
            }

            #[test]
            fn checkpoint_round_trip_is_bitwise(
                sizes in prop::collection::vec(1usize..6, 2..4),
                seed in any::<u64>(),
                shift in -10.0f64..10.0,
            ) {
                let mut p = ParamSpace::init(&sizes, seed).unwrap();
                p.capture_snapshot().unwrap();
                p.values_mut(0)[0] += shift / 3.0;
                let back = ParamSpace::from_json(&p.to_json().unwrap()).unwrap();
                let bits = |s: &ParamSpace| -> Vec<u64> {
                    s.groups().iter().flat_map(|g| g.values.iter().map(|v| v.to_bits()))
                        .chain(s.snapshot().unwrap().iter().flatten().map(|v| v.to_bits()))
                        .collect()
                };
                prop_assert_eq!(bits(&p), bits(&back));
                prop_assert_eq!(p.seed(), back.seed());
                prop_assert!(p.same_layout(&back));
            }
        }
    }
}
