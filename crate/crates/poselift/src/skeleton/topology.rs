//! The canonical 17-joint body graph (Human3.6M joint convention).

use crate::skeleton::types::SkeletonTopology;

pub const PELVIS: usize = 0;
pub const R_HIP: usize = 1;
pub const R_KNEE: usize = 2;
pub const R_ANKLE: usize = 3;
pub const L_HIP: usize = 4;
pub const L_KNEE: usize = 5;
pub const L_ANKLE: usize = 6;
pub const SPINE: usize = 7;
pub const THORAX: usize = 8;
pub const NECK: usize = 9;
pub const HEAD: usize = 10;
pub const L_SHOULDER: usize = 11;
pub const L_ELBOW: usize = 12;
pub const L_WRIST: usize = 13;
pub const R_SHOULDER: usize = 14;
pub const R_ELBOW: usize = 15;
pub const R_WRIST: usize = 16;

/// The canonical 17-joint tree: pelvis root, spine/neck/head chain, two arm
/// chains, two leg chains; 16 edges and 6 left/right mirror pairs.
pub fn human_topology() -> SkeletonTopology {
    let edges = vec![
        (PELVIS, R_HIP),
        (R_HIP, R_KNEE),
        (R_KNEE, R_ANKLE),
        (PELVIS, L_HIP),
        (L_HIP, L_KNEE),
        (L_KNEE, L_ANKLE),
        (PELVIS, SPINE),
        (SPINE, THORAX),
        (THORAX, NECK),
        (NECK, HEAD),
        (THORAX, L_SHOULDER),
        (L_SHOULDER, L_ELBOW),
        (L_ELBOW, L_WRIST),
        (THORAX, R_SHOULDER),
        (R_SHOULDER, R_ELBOW),
        (R_ELBOW, R_WRIST),
    ];
    let mirror_pairs = vec![
        (L_HIP, R_HIP),
        (L_KNEE, R_KNEE),
        (L_ANKLE, R_ANKLE),
        (L_SHOULDER, R_SHOULDER),
        (L_ELBOW, R_ELBOW),
        (L_WRIST, R_WRIST),
    ];
    SkeletonTopology::new(17, edges, mirror_pairs, PELVIS).expect("canonical topology is valid")
}

/// Rest-pose offset of each joint from its parent, in millimeters. The
/// subject stands facing the camera (x lateral, y up, z toward the camera)
/// in a relaxed stance: elbows trail slightly, forearms reach forward,
/// knees carry a small bend, so the rest skeleton is genuinely
/// three-dimensional rather than a flat cutout.
pub fn rest_offsets() -> [[f64; 3]; 17] {
    let mut o = [[0.0; 3]; 17];
    o[R_HIP] = [-130.0, 0.0, 0.0];
    o[R_KNEE] = [-10.0, -430.0, 90.0];
    o[R_ANKLE] = [0.0, -430.0, -95.0];
    o[L_HIP] = [130.0, 0.0, 0.0];
    o[L_KNEE] = [10.0, -430.0, 90.0];
    o[L_ANKLE] = [0.0, -430.0, -95.0];
    o[SPINE] = [0.0, 230.0, 25.0];
    o[THORAX] = [0.0, 250.0, -20.0];
    o[NECK] = [0.0, 120.0, 30.0];
    o[HEAD] = [0.0, 115.0, 35.0];
    o[L_SHOULDER] = [170.0, -20.0, -15.0];
    o[L_ELBOW] = [30.0, -260.0, -100.0];
    o[L_WRIST] = [10.0, -160.0, 190.0];
    o[R_SHOULDER] = [-170.0, -20.0, -15.0];
    o[R_ELBOW] = [-30.0, -260.0, -100.0];
    o[R_WRIST] = [-10.0, -160.0, 190.0];
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_joints() {
        assert_eq!(human_topology().joint_count(), 17);
    }

    #[test]
    fn sixteen_edges() {
        assert_eq!(human_topology().edges().len(), 16);
    }

    #[test]
    fn six_mirror_pairs() {
        assert_eq!(human_topology().mirror_pairs().len(), 6);
    }

    #[test]
    fn every_non_root_joint_has_one_parent() {
        let topo = human_topology();
        let parents = topo.parents();
        for j in 0..topo.joint_count() {
            if j == topo.root_index() {
                assert!(parents[j].is_none());
            } else {
                assert!(parents[j].is_some(), "joint {} without parent", j);
            }
        }
    }

    #[test]
    fn topological_order_visits_parents_first() {
        let topo = human_topology();
        let order = topo.topological_order();
        assert_eq!(order.len(), 17);
        let parents = topo.parents();
        let mut seen = vec![false; 17];
        for &j in &order {
            if let Some(p) = parents[j] {
                assert!(seen[p], "joint {} visited before parent {}", j, p);
            }
            seen[j] = true;
        }
    }
}
