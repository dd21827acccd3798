use crate::error::{Error, Result};

/// A 2D keypoint sequence: `frames x joints x 2` coordinates in normalized
/// image units (the image square maps to [-1, 1]^2).
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence2D {
    frames: usize,
    joints: usize,
    coords: Vec<f64>,
}

/// A 3D pose sequence: `frames x joints x 3` coordinates in millimeters,
/// root-relative (pelvis at the origin of every frame) unless stated
/// otherwise by the producer.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence3D {
    frames: usize,
    joints: usize,
    coords: Vec<f64>,
}

macro_rules! seq_impl {
    ($ty:ident, $dim:expr) => {
        impl $ty {
            pub fn new(frames: usize, joints: usize, coords: Vec<f64>) -> Result<Self> {
                if coords.len() != frames * joints * $dim {
                    return Err(Error::Dimension(format!(
                        "{} needs {}x{}x{} = {} coords, got {}",
                        stringify!($ty),
                        frames,
                        joints,
                        $dim,
                        frames * joints * $dim,
                        coords.len()
                    )));
                }
                if coords.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "{} contains non-finite coordinates",
                        stringify!($ty)
                    )));
                }
                Ok(Self { frames, joints, coords })
            }

            pub fn zeros(frames: usize, joints: usize) -> Self {
                Self { frames, joints, coords: vec![0.0; frames * joints * $dim] }
            }

            pub fn frames(&self) -> usize {
                self.frames
            }

            pub fn joints(&self) -> usize {
                self.joints
            }

            pub fn coords(&self) -> &[f64] {
                &self.coords
            }

            pub fn coords_mut(&mut self) -> &mut [f64] {
                &mut self.coords
            }

            pub fn get(&self, frame: usize, joint: usize) -> [f64; $dim] {
                let base = (frame * self.joints + joint) * $dim;
                let mut out = [0.0; $dim];
                out.copy_from_slice(&self.coords[base..base + $dim]);
                out
            }

            pub fn set(&mut self, frame: usize, joint: usize, v: [f64; $dim]) {
                let base = (frame * self.joints + joint) * $dim;
                self.coords[base..base + $dim].copy_from_slice(&v);
            }

            pub fn all_finite(&self) -> bool {
                self.coords.iter().all(|v| v.is_finite())
            }
        }
    };
}

seq_impl!(JointSequence2D, 2);
seq_impl!(JointSequence3D, 3);

impl JointSequence3D {
    /// Subtracts the root joint from every joint, per frame.
    pub fn to_root_relative(&self, root: usize) -> JointSequence3D {
        let mut out = self.clone();
        for f in 0..self.frames {
            let r = self.get(f, root);
            for j in 0..self.joints {
                let p = self.get(f, j);
                out.set(f, j, [p[0] - r[0], p[1] - r[1], p[2] - r[2]]);
            }
        }
        out
    }

    pub fn is_root_relative(&self, root: usize) -> bool {
        (0..self.frames).all(|f| self.get(f, root) == [0.0, 0.0, 0.0])
    }
}

/// Joint graph of the body: a spanning tree over joints plus left/right
/// mirror pairs and a root index.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    mirror_pairs: Vec<(usize, usize)>,
    root_index: usize,
}

impl SkeletonTopology {
    pub fn new(
        joint_count: usize,
        edges: Vec<(usize, usize)>,
        mirror_pairs: Vec<(usize, usize)>,
        root_index: usize,
    ) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::Topology("a skeleton needs at least one joint".into()));
        }
        if root_index >= joint_count {
            return Err(Error::Topology(format!("root index {} out of range", root_index)));
        }
        if edges.len() != joint_count - 1 {
            return Err(Error::Topology(format!(
                "a spanning tree over {} joints needs {} edges, got {}",
                joint_count,
                joint_count - 1,
                edges.len()
            )));
        }
        let mut parent = vec![usize::MAX; joint_count];
        for &(p, c) in &edges {
            if p >= joint_count || c >= joint_count {
                return Err(Error::Topology(format!("edge ({}, {}) out of range", p, c)));
            }
            if c == root_index {
                return Err(Error::Topology("the root joint cannot have a parent".into()));
            }
            if parent[c] != usize::MAX {
                return Err(Error::Topology(format!("joint {} has two parents", c)));
            }
            parent[c] = p;
        }
        // connectivity: every non-root joint must reach the root
        for j in 0..joint_count {
            if j == root_index {
                continue;
            }
            let mut cur = j;
            let mut hops = 0;
            while cur != root_index {
                if parent[cur] == usize::MAX || hops > joint_count {
                    return Err(Error::Topology(format!("joint {} is not connected to the root", j)));
                }
                cur = parent[cur];
                hops += 1;
            }
        }
        for &(l, r) in &mirror_pairs {
            if l >= joint_count || r >= joint_count {
                return Err(Error::Topology(format!("mirror pair ({}, {}) out of range", l, r)));
            }
            if l == r {
                return Err(Error::Topology("mirror pairs must involve distinct joints".into()));
            }
        }
        Ok(SkeletonTopology { joint_count, edges, mirror_pairs, root_index })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn mirror_pairs(&self) -> &[(usize, usize)] {
        &self.mirror_pairs
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    /// Parent of each joint (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.joint_count];
        for &(p, c) in &self.edges {
            out[c] = Some(p);
        }
        out
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.joint_count];
        for &(p, c) in &self.edges {
            children[p].push(c);
        }
        let mut order = Vec::with_capacity(self.joint_count);
        let mut stack = vec![self.root_index];
        while let Some(j) = stack.pop() {
            order.push(j);
            for &c in children[j].iter().rev() {
                stack.push(c);
            }
        }
        order
    }

    /// Per-edge Euclidean bone lengths of one frame.
    pub fn bone_lengths(&self, pose: &JointSequence3D, frame: usize) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&(p, c)| {
                let a = pose.get(frame, p);
                let b = pose.get(frame, c);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .collect()
    }
}

/// Camera model for projecting 3D poses to normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// Unitless focal scale applied to normalized coordinates.
    pub focal: f64,
    /// Distance (mm) added to every depth so the subject sits in front of
    /// the camera.
    pub depth_offset: f64,
    pub kind: ProjectionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    Orthographic,
    Pinhole,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("camera focal must be positive, got {}", self.focal)));
        }
        if !self.focal.is_finite() || !self.depth_offset.is_finite() {
            return Err(Error::Config("camera parameters must be finite".into()));
        }
        Ok(())
    }
}

impl Default for Camera {
    fn default() -> Self {
        Camera { focal: 3.5, depth_offset: 4000.0, kind: ProjectionKind::Pinhole }
    }
}
