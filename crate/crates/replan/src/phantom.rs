//! Synthetic planning problems on 2D voxel grids.
//!
//! A [`PhantomSpec`] describes geometric structures on a regular grid plus a
//! parallel-pencil-beam model: each beam axis passes through the combined
//! target centroid at a fixed angle, dose falls off exponentially with depth
//! from the grid edge and as a Gaussian with lateral distance from the axis,
//! and every beam column is normalized to a unit maximum. Generation is a
//! pure function of the [`PhantomSpec`], so identical inputs give
//! bit-identical matrices; the seed is carried as a provenance stamp.

use serde::{Deserialize, Serialize};

use crate::rtp::{DvKind, DvObjective, PlanProblem, Structure, StructureKind, Weights};

/// Planar region kinds. The annulus carries an angular span in degrees so a
/// ring segment is expressible; the full ring is 0..360.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum Geometry {
    Disk {
        center: (f64, f64),
        radius: f64,
    },
    Annulus {
        center: (f64, f64),
        r_inner: f64,
        r_outer: f64,
        #[serde(default)]
        start_deg: f64,
        #[serde(default = "full_circle")]
        end_deg: f64,
    },
    Rectangle {
        center: (f64, f64),
        width: f64,
        height: f64,
    },
}

fn full_circle() -> f64 {
    360.0
}

impl Geometry {
    fn contains(&self, p: (f64, f64)) -> bool {
        match *self {
            Geometry::Disk { center, radius } => {
                let (dx, dy) = (p.0 - center.0, p.1 - center.1);
                dx * dx + dy * dy <= radius * radius
            }
            Geometry::Annulus { center, r_inner, r_outer, start_deg, end_deg } => {
                let (dx, dy) = (p.0 - center.0, p.1 - center.1);
                let r2 = dx * dx + dy * dy;
                if r2 < r_inner * r_inner || r2 > r_outer * r_outer {
                    return false;
                }
                if end_deg - start_deg >= 360.0 {
                    return true;
                }
                let angle = dy.atan2(dx).to_degrees().rem_euclid(360.0);
                let lo = start_deg.rem_euclid(360.0);
                let hi = end_deg.rem_euclid(360.0);
                if lo <= hi {
                    (lo..=hi).contains(&angle)
                } else {
                    angle >= lo || angle <= hi
                }
            }
            Geometry::Rectangle { center, width, height } => {
                (p.0 - center.0).abs() <= width / 2.0 && (p.1 - center.1).abs() <= height / 2.0
            }
        }
    }

    fn valid(&self) -> bool {
        match *self {
            Geometry::Disk { radius, .. } => radius > 0.0,
            Geometry::Annulus { r_inner, r_outer, .. } => 0.0 <= r_inner && r_inner < r_outer,
            Geometry::Rectangle { width, height, .. } => width > 0.0 && height > 0.0,
        }
    }
}

/// One structure to carve out of the grid, with the planning parameters its
/// generated [`Structure`] will carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub name: String,
    pub kind: StructureKind,
    pub geometry: Geometry,
    #[serde(default)]
    pub prescribed_dose: f64,
    #[serde(default)]
    pub weights: Weights,
}

/// A complete phantom description; [`generate`] turns it into a
/// [`PlanProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Voxel counts (nx, ny).
    pub grid: (usize, usize),
    /// Voxel edge length in cm.
    pub voxel_size: f64,
    pub shapes: Vec<Shape>,
    /// Beam angles in degrees; 0 points along +x, angles grow
    /// counterclockwise.
    pub beams: Vec<f64>,
    /// Attenuation coefficient per cm.
    pub attenuation: f64,
    /// Lateral Gaussian spread in cm.
    pub pencil_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub objectives: Vec<DvObjective>,
}

/// Errors from spec validation and generation.
#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("grid must have at least one voxel per axis and a positive voxel size")]
    BadGrid,
    #[error("at least one target shape is required")]
    NoTargetShape,
    #[error("at least one beam is required")]
    NoBeams,
    #[error("attenuation must be non-negative and pencil_sigma positive")]
    BadBeamModel,
    #[error("shape {name} has invalid geometry")]
    BadGeometry { name: String },
    #[error("shape {name} contains no voxels after overlap resolution")]
    EmptyShape { name: String },
}

fn validate(spec: &PhantomSpec) -> Result<(), PhantomError> {
    if spec.grid.0 == 0 || spec.grid.1 == 0 || !spec.voxel_size.is_finite() || spec.voxel_size <= 0.0
    {
        return Err(PhantomError::BadGrid);
    }
    if !spec.shapes.iter().any(|s| s.kind == StructureKind::Target) {
        return Err(PhantomError::NoTargetShape);
    }
    if spec.beams.is_empty() {
        return Err(PhantomError::NoBeams);
    }
    if !spec.attenuation.is_finite()
        || spec.attenuation < 0.0
        || !spec.pencil_sigma.is_finite()
        || spec.pencil_sigma <= 0.0
    {
        return Err(PhantomError::BadBeamModel);
    }
    for s in &spec.shapes {
        if !s.geometry.valid() {
            return Err(PhantomError::BadGeometry { name: s.name.clone() });
        }
    }
    Ok(())
}

fn voxel_center(spec: &PhantomSpec, ix: usize, iy: usize) -> (f64, f64) {
    let h = spec.voxel_size;
    ((ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h)
}

/// Owner of each grid voxel: targets outrank OARs, earlier shapes outrank
/// later ones within a kind.
fn assign(spec: &PhantomSpec) -> Vec<Option<usize>> {
    let (nx, ny) = spec.grid;
    let mut priority: Vec<usize> = (0..spec.shapes.len()).collect();
    priority.sort_by_key(|&i| (spec.shapes[i].kind != StructureKind::Target, i));
    let mut owner = vec![None; nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            let p = voxel_center(spec, ix, iy);
            owner[iy * nx + ix] = priority
                .iter()
                .copied()
                .find(|&s| spec.shapes[s].geometry.contains(p));
        }
    }
    owner
}

/// Builds the planning problem: structure voxel sets from shape assignment
/// (grid voxels outside every shape are dropped and the rest re-indexed) and
/// the dose-influence matrix from the pencil-beam model.
pub fn generate(spec: &PhantomSpec) -> Result<PlanProblem, PhantomError> {
    validate(spec)?;
    let (nx, ny) = spec.grid;
    let owner = assign(spec);

    let included: Vec<usize> = (0..nx * ny).filter(|&v| owner[v].is_some()).collect();
    let mut structures: Vec<Structure> = spec
        .shapes
        .iter()
        .map(|s| Structure {
            name: s.name.clone(),
            kind: s.kind,
            voxels: Vec::new(),
            prescribed_dose: s.prescribed_dose,
            weights: s.weights,
        })
        .collect();
    for (new_idx, &v) in included.iter().enumerate() {
        structures[owner[v].unwrap()].voxels.push(new_idx);
    }
    for (s, shape) in structures.iter().zip(&spec.shapes) {
        if s.voxels.is_empty() {
            return Err(PhantomError::EmptyShape { name: shape.name.clone() });
        }
    }

    let centers: Vec<(f64, f64)> =
        included.iter().map(|&v| voxel_center(spec, v % nx, v / nx)).collect();
    let target_voxels: Vec<usize> = structures
        .iter()
        .filter(|s| s.kind == StructureKind::Target)
        .flat_map(|s| s.voxels.iter().copied())
        .collect();
    let centroid = {
        let n = target_voxels.len() as f64;
        let (sx, sy) = target_voxels
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &v| (sx + centers[v].0, sy + centers[v].1));
        (sx / n, sy / n)
    };

    let n_voxels = included.len();
    let n_beams = spec.beams.len();
    let mut matrix = vec![0.0; n_voxels * n_beams];
    let h = spec.voxel_size;
    let corners = [
        (0.5 * h, 0.5 * h),
        ((nx as f64 - 0.5) * h, 0.5 * h),
        (0.5 * h, (ny as f64 - 0.5) * h),
        ((nx as f64 - 0.5) * h, (ny as f64 - 0.5) * h),
    ];
    for (b, angle) in spec.beams.iter().enumerate() {
        let rad = angle.to_radians();
        let u = (rad.cos(), rad.sin());
        let normal = (-rad.sin(), rad.cos());
        let along = |p: (f64, f64)| (p.0 - centroid.0) * u.0 + (p.1 - centroid.1) * u.1;
        let entry = corners.iter().map(|&c| along(c)).fold(f64::INFINITY, f64::min);
        let mut peak = 0.0f64;
        for (v, &p) in centers.iter().enumerate() {
            let depth = along(p) - entry;
            let lat = (p.0 - centroid.0) * normal.0 + (p.1 - centroid.1) * normal.1;
            let value = (-spec.attenuation * depth).exp()
                * (-lat * lat / (2.0 * spec.pencil_sigma * spec.pencil_sigma)).exp();
            matrix[v * n_beams + b] = value;
            peak = peak.max(value);
        }
        if peak > 0.0 {
            for v in 0..n_voxels {
                matrix[v * n_beams + b] /= peak;
            }
        }
    }

    Ok(PlanProblem {
        structures,
        n_beams,
        n_voxels,
        dose_influence: matrix,
        objectives: spec.objectives.clone(),
    })
}

/// Grayscale structure mask as a binary PGM (P5): background 0, shapes at
/// evenly spaced levels in listing order, rows written top edge first.
pub fn mask_pgm(spec: &PhantomSpec) -> Result<Vec<u8>, PhantomError> {
    validate(spec)?;
    let (nx, ny) = spec.grid;
    let owner = assign(spec);
    let levels: Vec<u8> = (0..spec.shapes.len())
        .map(|i| (((i + 1) * 255) / spec.shapes.len()) as u8)
        .collect();
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for iy in (0..ny).rev() {
        for ix in 0..nx {
            out.push(owner[iy * nx + ix].map_or(0, |s| levels[s]));
        }
    }
    Ok(out)
}

/// Built-in presets p1..p4: a central target disk, an adjacent rectum-analog
/// ring segment below it, a bladder-analog disk above, and two lateral
/// femur-analog disks, irradiated by nine equally spaced beams. The four
/// differ in geometry details and prescription.
pub fn preset(name: &str) -> Option<PhantomSpec> {
    let (seed, prescription, ptv_r, rectum_span, bladder, femur_r) = match name {
        "p1" => (1, 36.25, 1.0, (240.0, 300.0), ((5.0, 7.4), 1.1), 0.95),
        "p2" => (2, 36.25, 1.1, (235.0, 305.0), ((4.8, 7.5), 1.0), 0.9),
        "p3" => (3, 38.0, 0.9, (245.0, 295.0), ((5.2, 7.3), 1.05), 0.95),
        "p4" => (4, 40.0, 1.0, (230.0, 310.0), ((5.0, 7.6), 1.15), 0.85),
        _ => return None,
    };
    let target_weights = Weights { underdose: 0.5, overdose: 0.05, max: 0.0, mean: 0.0 };
    let light = Weights { underdose: 0.0, overdose: 0.01, max: 0.0, mean: 0.0 };
    let shapes = vec![
        Shape {
            name: "ptv".into(),
            kind: StructureKind::Target,
            geometry: Geometry::Disk { center: (5.0, 5.0), radius: ptv_r },
            prescribed_dose: prescription,
            weights: target_weights,
        },
        Shape {
            name: "rectum".into(),
            kind: StructureKind::Oar,
            geometry: Geometry::Annulus {
                center: (5.0, 5.0),
                r_inner: ptv_r + 0.15,
                r_outer: ptv_r + 0.85,
                start_deg: rectum_span.0,
                end_deg: rectum_span.1,
            },
            prescribed_dose: 0.0,
            weights: Weights::default(),
        },
        Shape {
            name: "bladder".into(),
            kind: StructureKind::Oar,
            geometry: Geometry::Disk { center: bladder.0, radius: bladder.1 },
            prescribed_dose: 0.0,
            weights: light,
        },
        Shape {
            name: "femur_l".into(),
            kind: StructureKind::Oar,
            geometry: Geometry::Disk { center: (1.7, 5.0), radius: femur_r },
            prescribed_dose: 0.0,
            weights: light,
        },
        Shape {
            name: "femur_r".into(),
            kind: StructureKind::Oar,
            geometry: Geometry::Disk { center: (8.3, 5.0), radius: femur_r },
            prescribed_dose: 0.0,
            weights: light,
        },
    ];
    let objectives = vec![
        DvObjective {
            kind: DvKind::MinDvh,
            structure: "ptv".into(),
            roi_type: StructureKind::Target,
            dose_limit: 0.993 * prescription,
            weight: 0.0,
            fraction: 0.95,
        },
        DvObjective {
            kind: DvKind::MaxDvh,
            structure: "rectum".into(),
            roi_type: StructureKind::Oar,
            dose_limit: 0.58 * prescription,
            weight: 0.0,
            fraction: 0.3,
        },
    ];
    Some(PhantomSpec {
        grid: (40, 40),
        voxel_size: 0.25,
        shapes,
        beams: (0..9).map(|i| i as f64 * 40.0).collect(),
        attenuation: 0.15,
        pencil_sigma: 0.5,
        seed,
        objectives,
    })
}
