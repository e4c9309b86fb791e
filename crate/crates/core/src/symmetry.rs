//! Proper symmetry groups of rigid objects and rotation canonicalization.
//!
//! A symmetry group is a finite set of rotations mapping the object onto
//! itself. Poses that differ by a right-composed group element render
//! identically, so estimators can only ever recover a pose up to that
//! ambiguity. Continuous revolution symmetry is represented by a
//! discretized cyclic subgroup; the discretization count bounds how finely
//! downstream metrics resolve rotation about the axis.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::pose::{is_rotation, rotation_about, Pose};

/// Tolerance for group axioms checked at construction.
const CLOSURE_TOL: f64 = 1e-6;
const ELEMENT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SymmetryError {
    #[error("symmetry group needs at least the identity element")]
    Empty,
    #[error("element {0} is not a proper rotation")]
    ImproperElement(usize),
    #[error("group does not contain the identity")]
    MissingIdentity,
    #[error("group is not closed: element {0} composed with {1} has no match")]
    NotClosed(usize, usize),
    #[error("discretized revolution needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

/// Finite proper symmetry group of an object, always containing the
/// identity as element 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryGroup {
    elements: Vec<Matrix3<f64>>,
}

impl SymmetryGroup {
    /// The trivial group of an asymmetric object.
    pub fn trivial() -> Self {
        Self { elements: vec![Matrix3::identity()] }
    }

    /// Cyclic group of `order` rotations about `axis`.
    pub fn cyclic(axis: &Vector3<f64>, order: usize) -> Result<Self, SymmetryError> {
        if order < 1 {
            return Err(SymmetryError::Empty);
        }
        let step = std::f64::consts::TAU / order as f64;
        let elements =
            (0..order).map(|k| rotation_about(axis, k as f64 * step)).collect::<Vec<_>>();
        Self::from_elements(elements)
    }

    /// Continuous revolution symmetry, discretized to `samples` evenly
    /// spaced rotations about `axis`.
    pub fn discretized_revolution(
        axis: &Vector3<f64>,
        samples: usize,
    ) -> Result<Self, SymmetryError> {
        if samples < 2 {
            return Err(SymmetryError::TooFewSamples(samples));
        }
        Self::cyclic(axis, samples)
    }

    /// Builds a group from explicit rotations, validating the group axioms:
    /// proper rotations, identity present (moved to index 0), closure under
    /// composition within 1e-6.
    pub fn from_elements(mut elements: Vec<Matrix3<f64>>) -> Result<Self, SymmetryError> {
        if elements.is_empty() {
            return Err(SymmetryError::Empty);
        }
        for (i, m) in elements.iter().enumerate() {
            if !is_rotation(m, ELEMENT_TOL) {
                return Err(SymmetryError::ImproperElement(i));
            }
        }
        let id_pos = elements
            .iter()
            .position(|m| (m - Matrix3::identity()).norm() <= CLOSURE_TOL)
            .ok_or(SymmetryError::MissingIdentity)?;
        elements.swap(0, id_pos);

        for i in 0..elements.len() {
            for j in 0..elements.len() {
                let composed = elements[i] * elements[j];
                let closed = elements.iter().any(|m| (m - composed).norm() <= CLOSURE_TOL);
                if !closed {
                    return Err(SymmetryError::NotClosed(i, j));
                }
            }
        }
        Ok(Self { elements })
    }

    pub fn elements(&self) -> &[Matrix3<f64>] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_trivial(&self) -> bool {
        self.elements.len() == 1
    }
}

/// The group element whose inverse brings `r` closest to the identity:
/// argmin over S of the Frobenius distance between S^-1 R and I. Ties go to
/// the smallest element index. Returns (element, index).
pub fn closest_symmetry(r: &Matrix3<f64>, group: &SymmetryGroup) -> (Matrix3<f64>, usize) {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, s) in group.elements.iter().enumerate() {
        let d = (s.transpose() * r - Matrix3::identity()).norm();
        if d < best_dist {
            best_dist = d;
            best = i;
        }
    }
    (group.elements[best], best)
}

/// Canonical representative of the left coset of `r`: S^-1 R for the
/// closest symmetry S. Idempotent, and invariant under left composition
/// with any group element.
pub fn canonicalize(r: &Matrix3<f64>, group: &SymmetryGroup) -> Matrix3<f64> {
    let (s, _) = closest_symmetry(r, group);
    s.transpose() * r
}

/// All poses that render identically to `pose`: right composition of the
/// rotation with each group element. Element order follows the group.
pub fn equivalent_poses(pose: &Pose, group: &SymmetryGroup) -> Vec<Pose> {
    group
        .elements
        .iter()
        .map(|s| Pose::new(pose.rotation * s, pose.translation))
        .collect()
}

/// The equivalent pose whose rotation is closest to the identity. This is
/// the representative a simulator should emit when labels are required to
/// be consistent across views of a symmetric object.
pub fn canonical_equivalent_pose(pose: &Pose, group: &SymmetryGroup) -> Pose {
    // trace(R S) = trace(S^T R^T)^T ranges over the same values as
    // trace(S^T R), so the minimizing right factor is the transpose of the
    // closest left symmetry.
    let (s, _) = closest_symmetry(&pose.rotation, group);
    Pose::new(pose.rotation * s.transpose(), pose.translation)
}
