//! The canonical figure template every other module agrees on.
//!
//! The body is 14 rigid parts, each a flat quadrilateral carrying a chart
//! coordinate frame `(a, b) ∈ [0,1]²` — `a` across the part's width, `b` along
//! it from the proximal (torso-side) end to the distal end. Parts subdivide
//! into 24 surface patches: two-sided parts split at `a = 0.5`, hands and feet
//! are a single patch. A surface observation `(surface, u, v)` is the chart
//! point `a = a_lo + u·(a_hi − a_lo), b = v` of its part.
//!
//! Distances between surface observations use the chart planes directly:
//! within one part, Euclidean distance under the part's physical chart size;
//! across parts joined at a joint, the path through that joint's chart
//! positions; anything else is the fixed cap. Every part's diagonal is below
//! the cap, so no within-part distance can exceed a cross-part one.

/// Rigid parts, in frozen index order.
pub const PART_COUNT: usize = 14;
pub const PART_NAMES: [&str; PART_COUNT] = [
    "head",
    "torso",
    "upper_arm_right",
    "lower_arm_right",
    "upper_arm_left",
    "lower_arm_left",
    "upper_leg_right",
    "lower_leg_right",
    "upper_leg_left",
    "lower_leg_left",
    "hand_right",
    "hand_left",
    "foot_right",
    "foot_left",
];

/// Surface patches; label space is `0 = background`, `1..=24` = these names.
pub const SURFACE_COUNT: usize = 24;
pub const SURFACE_NAMES: [&str; SURFACE_COUNT] = [
    "torso_front",
    "torso_back",
    "hand_right",
    "hand_left",
    "foot_left",
    "foot_right",
    "upper_leg_right_back",
    "upper_leg_left_back",
    "upper_leg_right_front",
    "upper_leg_left_front",
    "lower_leg_right_back",
    "lower_leg_left_back",
    "lower_leg_right_front",
    "lower_leg_left_front",
    "upper_arm_left_front",
    "upper_arm_right_front",
    "upper_arm_left_back",
    "upper_arm_right_back",
    "lower_arm_left_front",
    "lower_arm_right_front",
    "lower_arm_left_back",
    "lower_arm_right_back",
    "head_right",
    "head_left",
];

/// COCO keypoint order.
pub const KEYPOINT_COUNT: usize = 17;
pub const KEYPOINT_NAMES: [&str; KEYPOINT_COUNT] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Per-keypoint falloff constants (the COCO protocol's `2σ_i` values) used by
/// the keypoint-similarity metric.
pub const KEYPOINT_FALLOFF: [f64; KEYPOINT_COUNT] = [
    0.052, 0.05, 0.05, 0.07, 0.07, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214, 0.174,
    0.174, 0.178, 0.178,
];

/// Reporting granularity: ten coarse parts.
pub const STANDARD_PART_COUNT: usize = 10;
pub const STANDARD_PART_NAMES: [&str; STANDARD_PART_COUNT] = [
    "Head", "Torso", "R-Arm", "L-Arm", "R-Hand", "L-Hand", "R-Leg", "L-Leg", "R-Foot", "L-Foot",
];

/// Location (instance-vs-background) labels.
pub const LOC_NAMES: [&str; 2] = ["background", "person"];

/// Cross-part distances saturate here; all part diagonals stay below it.
pub const DISTANCE_CAP: f64 = 1.0;

/// `(part index, a_lo, a_hi)` of surface label `s ∈ 1..=24`.
pub fn surface_span(surface: usize) -> (usize, f64, f64) {
    const FRONT: (f64, f64) = (0.0, 0.5);
    const BACK: (f64, f64) = (0.5, 1.0);
    const FULL: (f64, f64) = (0.0, 1.0);
    let (part, (lo, hi)) = match surface {
        1 => (1, FRONT),
        2 => (1, BACK),
        3 => (10, FULL),
        4 => (11, FULL),
        5 => (13, FULL),
        6 => (12, FULL),
        7 => (6, BACK),
        8 => (8, BACK),
        9 => (6, FRONT),
        10 => (8, FRONT),
        11 => (7, BACK),
        12 => (9, BACK),
        13 => (7, FRONT),
        14 => (9, FRONT),
        15 => (4, FRONT),
        16 => (2, FRONT),
        17 => (4, BACK),
        18 => (2, BACK),
        19 => (5, FRONT),
        20 => (3, FRONT),
        21 => (5, BACK),
        22 => (3, BACK),
        23 => (0, FRONT),
        24 => (0, BACK),
        _ => panic!("surface label {surface} outside 1..=24"),
    };
    (part, lo, hi)
}

/// Part index of surface label `s ∈ 1..=24`.
pub fn surface_part(surface: usize) -> usize {
    surface_span(surface).0
}

/// Surface labels carried by a part, ordered by their `a` interval.
pub fn part_surfaces(part: usize) -> Vec<usize> {
    let mut list: Vec<usize> =
        (1..=SURFACE_COUNT).filter(|&s| surface_part(s) == part).collect();
    list.sort_by(|&x, &y| {
        surface_span(x).1.partial_cmp(&surface_span(y).1).unwrap().then(x.cmp(&y))
    });
    list
}

/// Coarse reporting part of a fine part.
pub fn part_standard(part: usize) -> usize {
    match part {
        0 => 0,
        1 => 1,
        2 | 3 => 2,
        4 | 5 => 3,
        10 => 4,
        11 => 5,
        6 | 7 => 6,
        8 | 9 => 7,
        12 => 8,
        13 => 9,
        _ => panic!("part index {part} outside 0..14"),
    }
}

/// Coarse reporting part of a surface label.
pub fn surface_standard(surface: usize) -> usize {
    part_standard(surface_part(surface))
}

/// Physical chart extent `(width, height)` of a part, in template units.
pub fn part_chart_size(part: usize) -> (f64, f64) {
    match part {
        0 => (0.22, 0.26),
        1 => (0.36, 0.5),
        2 | 4 => (0.11, 0.32),
        3 | 5 => (0.1, 0.3),
        6 | 8 => (0.16, 0.4),
        7 | 9 => (0.13, 0.38),
        10 | 11 => (0.12, 0.14),
        12 | 13 => (0.22, 0.1),
        _ => panic!("part index {part} outside 0..14"),
    }
}

/// Joints: `(part_a, entry_in_a, part_b, entry_in_b, keypoint)` — the chart
/// coordinates `(a, b)` at which the two parts meet, and the keypoint sitting
/// on that joint (`usize::MAX` for the neck, which has no COCO keypoint).
pub const JOINTS: [(usize, (f64, f64), usize, (f64, f64), usize); 13] = [
    (1, (0.5, 1.0), 0, (0.5, 0.0), usize::MAX), // neck
    (1, (0.1, 0.95), 2, (0.5, 0.0), 6),         // right shoulder
    (1, (0.9, 0.95), 4, (0.5, 0.0), 5),         // left shoulder
    (2, (0.5, 1.0), 3, (0.5, 0.0), 8),          // right elbow
    (4, (0.5, 1.0), 5, (0.5, 0.0), 7),          // left elbow
    (3, (0.5, 1.0), 10, (0.5, 0.0), 10),        // right wrist
    (5, (0.5, 1.0), 11, (0.5, 0.0), 9),         // left wrist
    (1, (0.3, 0.05), 6, (0.5, 0.0), 12),        // right hip
    (1, (0.7, 0.05), 8, (0.5, 0.0), 11),        // left hip
    (6, (0.5, 1.0), 7, (0.5, 0.0), 14),         // right knee
    (8, (0.5, 1.0), 9, (0.5, 0.0), 13),         // left knee
    (7, (0.5, 1.0), 12, (0.5, 0.0), 16),        // right ankle
    (9, (0.5, 1.0), 13, (0.5, 0.0), 15),        // left ankle
];

/// Chart entry points of the joint shared by two parts, if adjacent:
/// `(entry in part_x's chart, entry in part_y's chart)`.
pub fn joint_between(x: usize, y: usize) -> Option<((f64, f64), (f64, f64))> {
    for &(pa, ea, pb, eb, _) in &JOINTS {
        if (pa, pb) == (x, y) {
            return Some((ea, eb));
        }
        if (pa, pb) == (y, x) {
            return Some((eb, ea));
        }
    }
    None
}

/// Parts a keypoint lies on (one side of each joint, plus the head points).
pub fn keypoint_parts(kpt: usize) -> Vec<usize> {
    if kpt <= 4 {
        return vec![0];
    }
    let mut parts = Vec::new();
    for &(pa, _, pb, _, k) in &JOINTS {
        if k == kpt {
            parts.push(pa);
            parts.push(pb);
        }
    }
    parts
}

/// Chart point of a surface observation: `(part, a, b)` in that part's frame.
pub fn chart_point(surface: usize, u: f64, v: f64) -> (usize, f64, f64) {
    let (part, lo, hi) = surface_span(surface);
    (part, lo + u * (hi - lo), v)
}

/// Inverse of [`chart_point`] for a given surface: chart `(a, b)` → `(u, v)`,
/// clamping `a` into the surface's span first.
pub fn chart_to_uv(surface: usize, a: f64, b: f64) -> (f64, f64) {
    let (_, lo, hi) = surface_span(surface);
    let a = a.clamp(lo, hi);
    ((a - lo) / (hi - lo), b.clamp(0.0, 1.0))
}

fn scaled_distance(part: usize, p: (f64, f64), q: (f64, f64)) -> f64 {
    let (w, h) = part_chart_size(part);
    ((p.0 - q.0) * w).hypot((p.1 - q.1) * h)
}

/// Geodesic proxy between two surface observations: exact chart Euclidean
/// within a part, through the shared joint for adjacent parts, else the cap.
/// Always in `[0, DISTANCE_CAP]`.
pub fn geodesic(s1: usize, u1: f64, v1: f64, s2: usize, u2: f64, v2: f64) -> f64 {
    let (part1, a1, b1) = chart_point(s1, u1, v1);
    let (part2, a2, b2) = chart_point(s2, u2, v2);
    let d = if part1 == part2 {
        scaled_distance(part1, (a1, b1), (a2, b2))
    } else if let Some((e1, e2)) = joint_between(part1, part2) {
        scaled_distance(part1, (a1, b1), e1) + scaled_distance(part2, e2, (a2, b2))
    } else {
        DISTANCE_CAP
    };
    d.min(DISTANCE_CAP)
}

/// Tokens of a label name (its underscore-separated words).
pub fn label_tokens(name: &str) -> Vec<String> {
    name.split('_').map(str::to_string).collect()
}
