//! Multi-level voxel coarsening of a point cloud, feature pooling across the
//! levels, and multi-hot label propagation for coarse points.
//!
//! Level `i + 1` holds one centroid per occupied voxel of edge
//! `base_voxel · 2^i` over the level-`i` points. Voxels are keyed by
//! `floor(coord / edge)` and emitted in lexicographic key order, so the result
//! depends only on the input coordinates.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct HierarchyLevel {
    /// `[n_i × 3]` meters.
    pub coords: Tensor,
    /// Index into level `i + 1` for every point; empty on the top level.
    pub parent: Arc<[usize]>,
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    levels: Vec<HierarchyLevel>,
    base_voxel: f64,
}

impl Hierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &HierarchyLevel {
        &self.levels[i]
    }

    pub fn len(&self, level: usize) -> usize {
        self.levels[level].coords.rows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.levels.len()).map(|i| self.len(i)).collect()
    }

    pub fn base_voxel(&self) -> f64 {
        self.base_voxel
    }

    pub fn coords(&self, level: usize) -> &Tensor {
        &self.levels[level].coords
    }

    /// Parent indices of level `level` into level `level + 1`.
    pub fn parents(&self, level: usize) -> Result<&Arc<[usize]>> {
        if level + 1 >= self.levels.len() {
            return Err(Error::Contract(format!(
                "level {level} has no parent level in a {}-level hierarchy",
                self.levels.len()
            )));
        }
        Ok(&self.levels[level].parent)
    }

    /// Maps every level-0 point to its ancestor at `level`.
    pub fn ancestors(&self, level: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len(0)).collect();
        for l in 0..level {
            let p = &self.levels[l].parent;
            for i in idx.iter_mut() {
                *i = p[*i];
            }
        }
        idx
    }
}

pub fn voxel_edge(base_voxel: f64, level: usize) -> f64 {
    base_voxel * f64::powi(2.0, level as i32)
}

fn voxel_key(p: &[f64], edge: f64) -> [i64; 3] {
    [
        (p[0] / edge).floor() as i64,
        (p[1] / edge).floor() as i64,
        (p[2] / edge).floor() as i64,
    ]
}

pub fn build_hierarchy(coords: &Tensor, base_voxel: f64, levels: usize) -> Result<Hierarchy> {
    let (n, c) = coords.dims2()?;
    if c != 3 {
        return Err(Error::dim("build_hierarchy", coords.shape(), &[n, 3]));
    }
    if n == 0 {
        return Err(Error::Contract("cannot coarsen an empty cloud".into()));
    }
    if !(base_voxel > 0.0 && base_voxel.is_finite()) {
        return Err(Error::Contract(format!(
            "base voxel must be positive, got {base_voxel}"
        )));
    }
    if levels < 2 {
        return Err(Error::Contract(format!(
            "a hierarchy needs at least 2 levels, got {levels}"
        )));
    }
    if !coords.is_finite() {
        return Err(Error::Contract("non-finite coordinates".into()));
    }

    let mut out = Vec::with_capacity(levels);
    let mut current = coords.clone();
    for i in 0..levels - 1 {
        let edge = voxel_edge(base_voxel, i);
        let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for j in 0..current.rows() {
            cells.entry(voxel_key(current.row(j), edge)).or_default().push(j);
        }
        let mut parent = vec![0usize; current.rows()];
        let mut centroids = Vec::with_capacity(cells.len() * 3);
        for (slot, members) in cells.values().enumerate() {
            let mut sum = [0.0; 3];
            for &j in members {
                parent[j] = slot;
                for (s, v) in sum.iter_mut().zip(current.row(j)) {
                    *s += v;
                }
            }
            let k = members.len() as f64;
            centroids.extend(sum.iter().map(|s| s / k));
        }
        let next = Tensor::new(&[cells.len(), 3], centroids)?;
        out.push(HierarchyLevel {
            coords: current,
            parent: Arc::from(parent),
        });
        current = next;
    }
    out.push(HierarchyLevel {
        coords: current,
        parent: Arc::from(Vec::new()),
    });
    Ok(Hierarchy {
        levels: out,
        base_voxel,
    })
}

/// Mean of child features for every level-`level + 1` point.
pub fn pool_features(tape: &mut Tape, h: &Hierarchy, level: usize, f: Var) -> Result<Var> {
    let parent = h.parents(level)?.clone();
    if tape.value(f).rows() != h.len(level) || tape.shape(f).len() != 2 {
        return Err(Error::dim("pool_features", tape.shape(f), &[h.len(level), 0]));
    }
    tape.segment_mean(f, parent, h.len(level + 1))
}

/// Every level-`level` point receives its parent's feature plus its own skip
/// feature.
pub fn unpool_features(
    tape: &mut Tape,
    h: &Hierarchy,
    level: usize,
    f_parent: Var,
    skip: Var,
) -> Result<Var> {
    let parent = h.parents(level)?.clone();
    if tape.value(f_parent).rows() != h.len(level + 1) || tape.shape(f_parent).len() != 2 {
        return Err(Error::dim(
            "unpool_features",
            tape.shape(f_parent),
            &[h.len(level + 1), 0],
        ));
    }
    let up = tape.gather_rows(f_parent, parent)?;
    if tape.shape(up) != tape.shape(skip) {
        return Err(Error::dim("unpool_features", tape.shape(up), tape.shape(skip)));
    }
    tape.add(up, skip)
}

/// Binary `[rows × classes]` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    classes: usize,
    bits: Vec<bool>,
}

impl LabelMatrix {
    pub fn zeros(rows: usize, classes: usize) -> Self {
        LabelMatrix {
            rows,
            classes,
            bits: vec![false; rows * classes],
        }
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut m = Self::zeros(labels.len(), classes);
        for (j, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::Validation(format!(
                    "label {l} at point {j} out of range for {classes} classes"
                )));
            }
            m.set(j, l, true);
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, row: usize, class: usize) -> bool {
        self.bits[row * self.classes + class]
    }

    pub fn set(&mut self, row: usize, class: usize, v: bool) {
        self.bits[row * self.classes + class] = v;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.classes..(row + 1) * self.classes]
    }

    pub fn row_count(&self, row: usize) -> usize {
        self.row(row).iter().filter(|b| **b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.rows, self.classes], data).expect("consistent dims")
    }
}

/// Per-level multi-hot labels; level 0 is one-hot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHotLabels {
    pub levels: Vec<LabelMatrix>,
}

impl MultiHotLabels {
    pub fn level(&self, i: usize) -> &LabelMatrix {
        &self.levels[i]
    }
}

/// `l^{i+1}_{j'} = min(1, Σ_{j ∈ children(j')} l^i_j)`, applied level by level.
pub fn shadow_labels(h: &Hierarchy, onehot0: &LabelMatrix) -> Result<MultiHotLabels> {
    if onehot0.rows() != h.len(0) {
        return Err(Error::dim(
            "shadow_labels",
            &[onehot0.rows(), onehot0.classes()],
            &[h.len(0), onehot0.classes()],
        ));
    }
    if let Some(j) = (0..onehot0.rows()).find(|&j| onehot0.row_count(j) != 1) {
        return Err(Error::Validation(format!("level-0 row {j} is not one-hot")));
    }
    let classes = onehot0.classes();
    let mut levels = vec![onehot0.clone()];
    for i in 0..h.num_levels() - 1 {
        let parent = h.parents(i)?;
        let child = &levels[i];
        let mut next = LabelMatrix::zeros(h.len(i + 1), classes);
        for (j, &p) in parent.iter().enumerate() {
            for k in 0..classes {
                if child.get(j, k) {
                    next.set(p, k, true);
                }
            }
        }
        levels.push(next);
    }
    Ok(MultiHotLabels { levels })
}
