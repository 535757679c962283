//! Procedural scenes: non-overlapping colored boxes in a 10×10×3 room,
//! surface-sampled points and template captions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{BicaError, Result};
use crate::geom::Box3D;
use crate::numerics::Tensor;

use super::vocab::{Vocabulary, COLORS, DIRECTIONS, SIZES};

pub const ROOM: [f32; 3] = [10.0, 10.0, 3.0];
pub const NOISE_SIGMA: f32 = 0.01;
pub const MAX_OBJECTS: usize = 8;
pub const N_CLASSES: usize = COLORS.len() * SIZES.len();
/// Nearest-neighbor distance up to which the "next to" wording is used.
pub const NEAR_RADIUS: f32 = 2.5;
/// Beyond this distance to every other box, the global wording is used.
pub const FAR_RADIUS: f32 = 5.0;

const RGB: [[f32; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.1, 0.2, 0.9],
    [0.9, 0.9, 0.1],
    [0.6, 0.1, 0.8],
    [1.0, 0.55, 0.0],
];
const FLOOR_RGB: [f32; 3] = [0.5, 0.5, 0.5];
const WALL_RGB: [f32; 3] = [0.8, 0.8, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionMode {
    /// One reference per object: attributes followed by the relation.
    Combined,
    /// An attribute-only reference plus the combined one.
    Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneOptions {
    pub n_points: usize,
    pub points_per_box: usize,
    pub mode: CaptionMode,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            n_points: 2048,
            points_per_box: 200,
            mode: CaptionMode::Combined,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub xyz: Tensor<f32>,
    pub feats: Tensor<f32>,
    pub boxes: Vec<Box3D>,
    /// Per object, reference token sequences ending in EOS.
    pub captions: Vec<Vec<Vec<usize>>>,
}

pub fn color_of(class_id: usize) -> usize {
    class_id / SIZES.len()
}

pub fn size_of(class_id: usize) -> usize {
    class_id % SIZES.len()
}

fn xy_dist(a: &Box3D, b: &Box3D) -> f32 {
    ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt()
}

/// Compass word for a planar direction, +y being north.
pub fn compass(dx: f32, dy: f32) -> &'static str {
    let a = dy.atan2(dx).to_degrees();
    let sector = (((a + 360.0 + 22.5) % 360.0) / 45.0).floor() as usize % 8;
    DIRECTIONS[sector]
}

/// Reference captions for every box, as text.
pub fn describe(boxes: &[Box3D], mode: CaptionMode) -> Vec<Vec<String>> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let attr = format!(
                "the {} {} box",
                SIZES[size_of(b.class_id)],
                COLORS[color_of(b.class_id)]
            );
            let nearest = (0..boxes.len()).filter(|&j| j != i).min_by(|&j, &k| {
                xy_dist(b, &boxes[j])
                    .total_cmp(&xy_dist(b, &boxes[k]))
                    .then(j.cmp(&k))
            });
            let relation = match nearest {
                None => "is the only box in the room".to_string(),
                Some(j) => {
                    let d = xy_dist(b, &boxes[j]);
                    let other = COLORS[color_of(boxes[j].class_id)];
                    if d <= NEAR_RADIUS {
                        format!("next to the {other} box")
                    } else if d <= FAR_RADIUS {
                        format!("near the {other} box")
                    } else {
                        let n = (boxes.len() - 1) as f32;
                        let (mut cx, mut cy) = (0.0, 0.0);
                        for (k, o) in boxes.iter().enumerate() {
                            if k != i {
                                cx += o.center[0] / n;
                                cy += o.center[1] / n;
                            }
                        }
                        format!(
                            "is the {} most box in the room",
                            compass(b.center[0] - cx, b.center[1] - cy)
                        )
                    }
                }
            };
            let combined = format!("{attr} {relation}");
            match mode {
                CaptionMode::Combined => vec![combined],
                CaptionMode::Split => vec![attr, combined],
            }
        })
        .collect()
}

fn place_boxes(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<Box3D>> {
    const GAP: f32 = 0.3;
    const WALL_MARGIN: f32 = 0.2;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    let mut tries = 0;
    while boxes.len() < n {
        tries += 1;
        if tries > 1000 {
            return Err(BicaError::Invalid(format!(
                "could not place {n} boxes after 1000 tries"
            )));
        }
        let color = rng.gen_range(0..COLORS.len());
        let size_cat = rng.gen_range(0..SIZES.len());
        let (edge, height) = if size_cat == 0 {
            (0.5..0.7, 0.4..0.6)
        } else {
            (1.0..1.4, 0.8..1.2)
        };
        let sx: f32 = rng.gen_range(edge.clone());
        let sy: f32 = rng.gen_range(edge);
        let sz: f32 = rng.gen_range(height);
        let cx = rng.gen_range(sx / 2.0 + WALL_MARGIN..ROOM[0] - sx / 2.0 - WALL_MARGIN);
        let cy = rng.gen_range(sy / 2.0 + WALL_MARGIN..ROOM[1] - sy / 2.0 - WALL_MARGIN);
        let cand = Box3D::new(
            [cx, cy, sz / 2.0],
            [sx, sy, sz],
            color * SIZES.len() + size_cat,
        );
        let clear = boxes.iter().all(|b| {
            (b.center[0] - cx).abs() >= (b.size[0] + sx) / 2.0 + GAP
                || (b.center[1] - cy).abs() >= (b.size[1] + sy) / 2.0 + GAP
        });
        if clear {
            boxes.push(cand);
        }
    }
    Ok(boxes)
}

/// Uniform point on one of the five exposed faces, chosen by area.
fn box_surface_point(rng: &mut ChaCha8Rng, b: &Box3D) -> [f32; 3] {
    let [sx, sy, sz] = b.size;
    let areas = [sx * sy, sx * sz, sx * sz, sy * sz, sy * sz];
    let total: f32 = areas.iter().sum();
    let mut r = rng.gen_range(0.0..total);
    let mut face = 0;
    while face < 4 && r >= areas[face] {
        r -= areas[face];
        face += 1;
    }
    let (u, v): (f32, f32) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let [cx, cy, cz] = b.center;
    match face {
        0 => [cx + u * sx, cy + v * sy, cz + sz / 2.0],
        1 => [cx + u * sx, cy - sy / 2.0, cz + v * sz],
        2 => [cx + u * sx, cy + sy / 2.0, cz + v * sz],
        3 => [cx - sx / 2.0, cy + u * sy, cz + v * sz],
        _ => [cx + sx / 2.0, cy + u * sy, cz + v * sz],
    }
}

fn room_point(rng: &mut ChaCha8Rng, boxes: &[Box3D]) -> ([f32; 3], [f32; 3]) {
    let [w, d, h] = ROOM;
    let floor = w * d;
    let walls = 2.0 * (w + d) * h;
    loop {
        let r = rng.gen_range(0.0..floor + walls);
        if r < floor {
            let p = [rng.gen_range(0.0..w), rng.gen_range(0.0..d), 0.0];
            // the floor under a box is hidden
            if boxes.iter().all(|b| {
                (p[0] - b.center[0]).abs() > b.size[0] / 2.0
                    || (p[1] - b.center[1]).abs() > b.size[1] / 2.0
            }) {
                return (p, FLOOR_RGB);
            }
            continue;
        }
        let along = rng.gen_range(0.0..2.0 * (w + d));
        let z = rng.gen_range(0.0..h);
        let p = if along < w {
            [along, 0.0, z]
        } else if along < w + d {
            [w, along - w, z]
        } else if along < 2.0 * w + d {
            [along - w - d, d, z]
        } else {
            [0.0, along - 2.0 * w - d, z]
        };
        return (p, WALL_RGB);
    }
}

pub fn make_scene(seed: u64, n_objects: usize) -> Result<SceneSample> {
    make_scene_with(seed, n_objects, &SceneOptions::default())
}

pub fn make_scene_with(seed: u64, n_objects: usize, opts: &SceneOptions) -> Result<SceneSample> {
    if !(2..=MAX_OBJECTS).contains(&n_objects) {
        return Err(BicaError::Invalid(format!(
            "object count {n_objects} outside 2..={MAX_OBJECTS}"
        )));
    }
    if opts.points_per_box * n_objects > opts.n_points {
        return Err(BicaError::Invalid(
            "point budget smaller than the box surface samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = place_boxes(&mut rng, n_objects)?;
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("sigma");
    let mut xyz = Vec::with_capacity(opts.n_points * 3);
    let mut feats = Vec::with_capacity(opts.n_points * 3);
    let mut push = |rng: &mut ChaCha8Rng, p: [f32; 3], c: [f32; 3]| {
        for k in 0..3 {
            let e = noise
                .sample(rng)
                .clamp(-3.0 * NOISE_SIGMA, 3.0 * NOISE_SIGMA);
            xyz.push(p[k] + e);
        }
        feats.extend_from_slice(&c);
    };
    for b in &boxes {
        for _ in 0..opts.points_per_box {
            let p = box_surface_point(&mut rng, b);
            push(&mut rng, p, RGB[color_of(b.class_id)]);
        }
    }
    for _ in boxes.len() * opts.points_per_box..opts.n_points {
        let (p, c) = room_point(&mut rng, &boxes);
        push(&mut rng, p, c);
    }
    let vocab = Vocabulary::standard();
    let captions = describe(&boxes, opts.mode)
        .iter()
        .map(|refs| {
            refs.iter()
                .map(|r| vocab.encode(r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        seed,
        xyz: Tensor::new(vec![opts.n_points, 3], xyz)?,
        feats: Tensor::new(vec![opts.n_points, 3], feats)?,
        boxes,
        captions,
    })
}
