//! Rigid-motion geometry: transforms, ego flow and flow composition.

use alloc::format;
use alloc::vec::Vec;

use crate::cloud::FlowField;
use crate::error::{CoreError, Result};
use crate::math;

/// Proper rigid transform (rotation + translation), double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    /// Row-major 3x3 rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn from_yaw_translation(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = (libm::sin(yaw), libm::cos(yaw));
        RigidTransform {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Checks orthonormality and det = +1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if math::abs(dot - expect) > tol {
                    return Err(CoreError::Contract(format!(
                        "rotation columns not orthonormal: col {i} . col {j} = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if math::abs(det - 1.0) > tol {
            return Err(CoreError::Contract(format!("det(rotation) = {det}, expected +1")));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Rotation applied without translation.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform { rotation: rt, translation: ti }
    }
}

/// p' = R p + t for every row.
pub fn apply_transform(points: &[[f64; 3]], t: &RigidTransform) -> Vec<[f64; 3]> {
    points.iter().map(|&p| t.apply(p)).collect()
}

/// Per-point flow produced by ego motion: T(p) - p.
pub fn ego_flow(points: &[[f64; 3]], t: &RigidTransform) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|&p| {
            let q = t.apply(p);
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        })
        .collect()
}

/// Elementwise sum of ego and residual flow. Rows where the residual is
/// invalid keep the ego value and stay valid (ego-only fallback).
pub fn compose_flow(ego: &FlowField, residual: &FlowField) -> Result<FlowField> {
    if ego.len() != residual.len() {
        return Err(CoreError::Contract(format!(
            "compose_flow length mismatch: {} vs {}",
            ego.len(),
            residual.len()
        )));
    }
    let flow = ego
        .flow
        .iter()
        .zip(residual.flow.iter())
        .zip(residual.validity.iter())
        .map(|((&e, &r), &rv)| {
            if rv {
                [e[0] + r[0], e[1] + r[1], e[2] + r[2]]
            } else {
                e
            }
        })
        .collect();
    let validity = ego.validity.clone();
    Ok(FlowField { flow, validity })
}
