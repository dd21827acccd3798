//! Pose evaluation: MPJPE, Procrustes-aligned MPJPE, PCK at 150mm, and AUC
//! over the 5..150mm threshold grid.
//!
//! Inputs follow the root-relative convention (pelvis at the origin of
//! every frame, protocol-1 style); the evaluation harness centers poses
//! before they reach these functions, and the distances here are measured
//! as given. P-MPJPE aligns each predicted frame to the ground truth with
//! the least-squares similarity transform (rotation with reflection
//! correction, scale, translation) before measuring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{det3, matmul, svd3, Tensor};
use crate::skeleton::JointSequence3D;

/// Threshold grid for AUC: 5, 10, ..., 150 mm.
pub const AUC_THRESHOLDS_MM: usize = 30;
pub const AUC_THRESHOLD_STEP_MM: f64 = 5.0;
pub const PCK_THRESHOLD_MM: f64 = 150.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean per-joint position error, millimeters.
    pub mpjpe: f64,
    /// MPJPE after per-frame Procrustes alignment, millimeters.
    pub p_mpjpe: f64,
    /// Percentage of keypoints within 150mm.
    pub pck_150: f64,
    /// Mean PCK over the 30-threshold grid, percent.
    pub auc: f64,
    /// Per-joint MPJPE breakdown, millimeters.
    pub per_joint_mpjpe: Vec<f64>,
    /// Frames skipped by the Procrustes alignment as degenerate.
    pub degenerate_frames: usize,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        if self.mpjpe < 0.0 || self.p_mpjpe < 0.0 || !in_range(self.pck_150) || !in_range(self.auc) {
            return Err(Error::Numeric("metrics report out of range".into()));
        }
        if self.p_mpjpe > self.mpjpe + 1e-9 {
            return Err(Error::Numeric(format!(
                "aligned error {} exceeds unaligned error {}",
                self.p_mpjpe, self.mpjpe
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "mpjpe,p_mpjpe,pck150,auc"
    }

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6}", self.mpjpe, self.p_mpjpe, self.pck_150, self.auc)
    }
}

fn check_shapes(pred: &JointSequence3D, gt: &JointSequence3D) -> Result<()> {
    if pred.frames() != gt.frames() || pred.joints() != gt.joints() {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.frames(),
            pred.joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    if pred.frames() == 0 || pred.joints() == 0 {
        return Err(Error::Dimension("empty sequence".into()));
    }
    Ok(())
}

fn joint_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean distance over frames and joints, millimeters.
pub fn mpjpe(pred: &JointSequence3D, gt: &JointSequence3D) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut total = 0.0;
    for f in 0..pred.frames() {
        for j in 0..pred.joints() {
            total += joint_error(pred.get(f, j), gt.get(f, j));
        }
    }
    Ok(total / (pred.frames() * pred.joints()) as f64)
}

/// Per-joint MPJPE breakdown.
pub fn per_joint_mpjpe(pred: &JointSequence3D, gt: &JointSequence3D) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    let mut out = vec![0.0; pred.joints()];
    for f in 0..pred.frames() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += joint_error(pred.get(f, j), gt.get(f, j));
        }
    }
    for o in out.iter_mut() {
        *o /= pred.frames() as f64;
    }
    Ok(out)
}

/// The optimal similarity alignment of one frame of `pred` onto `gt`.
/// Returns `None` when the frame is degenerate (covariance rank < 2).
fn procrustes_frame(pred: &JointSequence3D, gt: &JointSequence3D, frame: usize) -> Option<Vec<[f64; 3]>> {
    let j = pred.joints();
    let mut pc = [0.0f64; 3];
    let mut gc = [0.0f64; 3];
    for ji in 0..j {
        let p = pred.get(frame, ji);
        let g = gt.get(frame, ji);
        for k in 0..3 {
            pc[k] += p[k] / j as f64;
            gc[k] += g[k] / j as f64;
        }
    }
    // cross-covariance H = sum (p - pc)(g - gc)^T and prediction energy
    let mut h = Tensor::<f64>::zeros(vec![3, 3]);
    let mut p_energy = 0.0;
    for ji in 0..j {
        let p = pred.get(frame, ji);
        let g = gt.get(frame, ji);
        let pd = [p[0] - pc[0], p[1] - pc[1], p[2] - pc[2]];
        let gd = [g[0] - gc[0], g[1] - gc[1], g[2] - gc[2]];
        for r in 0..3 {
            for c in 0..3 {
                let v = h.at2(r, c) + pd[r] * gd[c];
                h.set2(r, c, v);
            }
        }
        p_energy += pd[0] * pd[0] + pd[1] * pd[1] + pd[2] * pd[2];
    }
    let (u, s, v) = svd3(&h).ok()?;
    // rank check: a similarity transform needs at least a rank-2 covariance
    let scale_ref = s.data()[0].abs();
    if scale_ref <= 0.0 || s.data()[1] <= scale_ref * 1e-12 || p_energy <= 0.0 {
        return None;
    }
    // rotation R = V diag(1, 1, sign) U^T with reflection correction
    let sign = if det3(&matmul(&v, &u.transpose2().ok()?).ok()?) < 0.0 { -1.0 } else { 1.0 };
    let mut vs = v.clone();
    for r in 0..3 {
        let val = vs.at2(r, 2) * sign;
        vs.set2(r, 2, val);
    }
    let rot = matmul(&vs, &u.transpose2().ok()?).ok()?;
    let trace = s.data()[0] + s.data()[1] + sign * s.data()[2];
    let scale = trace / p_energy;
    let mut aligned = Vec::with_capacity(j);
    for ji in 0..j {
        let p = pred.get(frame, ji);
        let pd = [p[0] - pc[0], p[1] - pc[1], p[2] - pc[2]];
        let mut out = [0.0f64; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = scale * (rot.at2(r, 0) * pd[0] + rot.at2(r, 1) * pd[1] + rot.at2(r, 2) * pd[2]) + gc[r];
        }
        aligned.push(out);
    }
    Some(aligned)
}

/// Procrustes-aligned MPJPE: per frame, finds the similarity transform
/// (rotation, scale, translation) minimizing the squared error before
/// measuring; degenerate frames are excluded and counted.
pub fn p_mpjpe(pred: &JointSequence3D, gt: &JointSequence3D) -> Result<f64> {
    Ok(p_mpjpe_detailed(pred, gt)?.0)
}

pub fn p_mpjpe_detailed(pred: &JointSequence3D, gt: &JointSequence3D) -> Result<(f64, usize)> {
    check_shapes(pred, gt)?;
    if pred.joints() < 3 {
        return Err(Error::Dimension("alignment needs at least 3 joints".into()));
    }
    let mut total = 0.0;
    let mut frames_used = 0usize;
    let mut degenerate = 0usize;
    for f in 0..pred.frames() {
        match procrustes_frame(pred, gt, f) {
            Some(aligned) => {
                let mut frame_err = 0.0;
                for (j, a) in aligned.iter().enumerate() {
                    frame_err += joint_error(*a, gt.get(f, j));
                }
                total += frame_err / pred.joints() as f64;
                frames_used += 1;
            }
            None => degenerate += 1,
        }
    }
    if frames_used == 0 {
        return Err(Error::Numeric("every frame was degenerate for alignment".into()));
    }
    Ok((total / frames_used as f64, degenerate))
}

/// Percentage of (frame, joint) pairs with error strictly below the
/// threshold.
pub fn pck(pred: &JointSequence3D, gt: &JointSequence3D, threshold_mm: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut hits = 0usize;
    let total = pred.frames() * pred.joints();
    for f in 0..pred.frames() {
        for j in 0..pred.joints() {
            if joint_error(pred.get(f, j), gt.get(f, j)) < threshold_mm {
                hits += 1;
            }
        }
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Mean PCK over thresholds 5, 10, ..., 150 mm.
pub fn auc(pred: &JointSequence3D, gt: &JointSequence3D) -> Result<f64> {
    let mut total = 0.0;
    for i in 1..=AUC_THRESHOLDS_MM {
        total += pck(pred, gt, AUC_THRESHOLD_STEP_MM * i as f64)?;
    }
    Ok(total / AUC_THRESHOLDS_MM as f64)
}

/// Full evaluation of a prediction against ground truth.
pub fn report(pred: &JointSequence3D, gt: &JointSequence3D) -> Result<MetricsReport> {
    let (p_mpjpe_val, degenerate) = p_mpjpe_detailed(pred, gt)?;
    let rep = MetricsReport {
        mpjpe: mpjpe(pred, gt)?,
        p_mpjpe: p_mpjpe_val,
        pck_150: pck(pred, gt, PCK_THRESHOLD_MM)?,
        auc: auc(pred, gt)?,
        per_joint_mpjpe: per_joint_mpjpe(pred, gt)?,
        degenerate_frames: degenerate,
    };
    rep.validate()?;
    Ok(rep)
}
