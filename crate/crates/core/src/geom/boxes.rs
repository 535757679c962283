//! Axis-aligned 3D boxes: IoU, GIoU and greedy NMS.

use crate::numerics::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f32; 3],
    /// Full extents along x, y, z.
    pub size: [f32; 3],
    pub class_id: usize,
}

impl Box3D {
    pub fn new(center: [f32; 3], size: [f32; 3], class_id: usize) -> Self {
        Box3D {
            center,
            size,
            class_id,
        }
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] as f64 - 0.5 * self.size[k] as f64)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] as f64 + 0.5 * self.size[k] as f64)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().map(|&s| s as f64).product()
    }

    pub fn contains(&self, p: &[f32], margin: f32) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= 0.5 * self.size[k] + margin)
    }
}

fn overlap_stats(a: &Box3D, b: &Box3D) -> (f64, f64, f64) {
    let (amin, amax, bmin, bmax) = (
        a.min_corner(),
        a.max_corner(),
        b.min_corner(),
        b.max_corner(),
    );
    let mut inter = 1.0;
    let mut enclosing = 1.0;
    for k in 0..3 {
        inter *= (amax[k].min(bmax[k]) - amin[k].max(bmin[k])).max(0.0);
        enclosing *= amax[k].max(bmax[k]) - amin[k].min(bmin[k]);
    }
    let union = a.volume() + b.volume() - inter;
    (inter, union, enclosing)
}

pub fn box_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (inter, union, _) = overlap_stats(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn box_giou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (inter, union, enclosing) = overlap_stats(a, b);
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

/// Greedy suppression in descending score order (ties by lowest index);
/// a box is dropped when its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms_3d(boxes: &[Box3D], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| box_iou_3d(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

fn col_product<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let a = g.slice_cols(x, 0, 1);
    let b = g.slice_cols(x, 1, 1);
    let c = g.slice_cols(x, 2, 1);
    let ab = g.mul(a, b);
    g.mul(ab, c)
}

/// Row-wise GIoU `[n×1]` between predicted boxes (`centers`, `sizes`, both
/// `[n×3]` graph nodes) and constant target boxes.
pub fn giou_rows<T: Real>(
    g: &mut Graph<'_, T>,
    centers: Var,
    sizes: Var,
    targets: &[Box3D],
) -> Var {
    let n = targets.len();
    let tmin: Vec<T> = targets
        .iter()
        .flat_map(|b| b.min_corner().map(T::lit))
        .collect();
    let tmax: Vec<T> = targets
        .iter()
        .flat_map(|b| b.max_corner().map(T::lit))
        .collect();
    let tvol: Vec<T> = targets.iter().map(|b| T::lit(b.volume())).collect();
    let tmin = g.constant(crate::numerics::Tensor::new(vec![n, 3], tmin).expect("shape"));
    let tmax = g.constant(crate::numerics::Tensor::new(vec![n, 3], tmax).expect("shape"));
    let tvol = g.constant(crate::numerics::Tensor::new(vec![n, 1], tvol).expect("shape"));

    let half = g.scale(sizes, 0.5);
    let pmin = g.sub(centers, half);
    let pmax = g.add(centers, half);
    let hi = g.minimum(pmax, tmax);
    let lo = g.maximum(pmin, tmin);
    let ext = g.sub(hi, lo);
    let ext = g.relu(ext);
    let inter = col_product(g, ext);
    let pvol = col_product(g, sizes);
    let vsum = g.add(pvol, tvol);
    let union = g.sub(vsum, inter);
    let ehi = g.maximum(pmax, tmax);
    let elo = g.minimum(pmin, tmin);
    let eext = g.sub(ehi, elo);
    let enclosing = col_product(g, eext);
    let iou = g.div(inter, union);
    let gap = g.sub(enclosing, union);
    let pen = g.div(gap, enclosing);
    g.sub(iou, pen)
}
