//! Synthetic scenes with analytic ground truth.
//!
//! An orthographic camera looks straight down (+z into the scene) at a ground
//! plane at depth [`PLANE_DEPTH`]. Shapes sit on the plane: spheres centred on
//! it (visible as domes), axis-aligned boxes, and upright cylinders. World
//! units span `[0, 1]` across the image width. Normals are expressed in the
//! image frame (x right, y down, z towards the viewer), so the plane normal is
//! `(0, 0, 1)`. Images are quantized to 8 bits at render time so that the PNG
//! files written by [`save_dataset`] reload bit-exactly.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_array, load_image, save_array, save_image};
use crate::rng::{make_rng, SeededRng};
use crate::tensor::ImageTensor;

use super::GroundTruth;

pub const PLANE_DEPTH: f64 = 1.0;

/// Shape types; the class label of a shape is its index + 1 (0 is the plane).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder];

    pub fn class(self) -> usize {
        match self {
            ShapeKind::Sphere => 1,
            ShapeKind::Box => 2,
            ShapeKind::Cylinder => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_shapes: usize,
    /// Number of shape types in use (1..=3); segmentation has `shape_classes + 1` classes.
    pub shape_classes: usize,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_shapes: 4,
            shape_classes: 3,
            seed: 0,
            train: 500,
            val: 100,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn classes(&self) -> usize {
        self.shape_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("scenes must be at least 4×4".into()));
        }
        if !(1..=3).contains(&self.shape_classes) {
            return Err(Error::Config(format!(
                "shape_classes must be 1..=3, got {}",
                self.shape_classes
            )));
        }
        Ok(())
    }
}

/// One placed shape, in world units.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Sphere/cylinder radius, or box half-width.
    pub size: f64,
    /// Box half-height in y (boxes only).
    pub size_y: f64,
    /// Height above the plane (boxes and cylinders).
    pub height: f64,
    pub albedo: [f64; 3],
}

impl PlacedShape {
    /// Height above the plane and surface normal at world point `(x, y)`, if covered.
    fn surface(&self, x: f64, y: f64) -> Option<(f64, [f64; 3])> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Sphere => {
                let r = self.size;
                let rho2 = dx * dx + dy * dy;
                (rho2 < r * r).then(|| {
                    let h = (r * r - rho2).sqrt();
                    (h, [dx / r, dy / r, h / r])
                })
            }
            ShapeKind::Box => (dx.abs() < self.size && dy.abs() < self.size_y)
                .then_some((self.height, [0.0, 0.0, 1.0])),
            ShapeKind::Cylinder => {
                (dx * dx + dy * dy < self.size * self.size).then_some((self.height, [0.0, 0.0, 1.0]))
            }
        }
    }
}

/// A rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    pub truth: GroundTruth,
}

const LIGHT: [f64; 3] = [-0.35, -0.45, 0.82];

fn shade(albedo: [f64; 3], n: [f64; 3]) -> [f64; 3] {
    let norm = (LIGHT[0] * LIGHT[0] + LIGHT[1] * LIGHT[1] + LIGHT[2] * LIGHT[2]).sqrt();
    let lambert = ((n[0] * LIGHT[0] + n[1] * LIGHT[1] + n[2] * LIGHT[2]) / norm).max(0.0);
    let k = 0.35 + 0.65 * lambert;
    [albedo[0] * k, albedo[1] * k, albedo[2] * k]
}

fn random_albedo(rng: &mut SeededRng) -> [f64; 3] {
    [
        rng.uniform_range(0.2, 0.95),
        rng.uniform_range(0.2, 0.95),
        rng.uniform_range(0.2, 0.95),
    ]
}

/// Places `spec.num_shapes` shapes fully inside the canvas.
pub fn place_shapes(spec: &SyntheticSceneSpec, rng: &mut SeededRng) -> Vec<PlacedShape> {
    let aspect = spec.height as f64 / spec.width as f64;
    (0..spec.num_shapes)
        .map(|_| {
            let kind = ShapeKind::ALL[rng.below(spec.shape_classes)];
            let size = rng.uniform_range(0.07, 0.17);
            let size_y = match kind {
                ShapeKind::Box => rng.uniform_range(0.07, 0.17).min(aspect / 2.0 - 1e-3),
                _ => size,
            };
            let size = size.min(aspect / 2.0 - 1e-3);
            let cx = rng.uniform_range(size, 1.0 - size);
            let cy = rng.uniform_range(size_y, aspect - size_y);
            let height = rng.uniform_range(0.05, 0.25);
            PlacedShape {
                kind,
                cx,
                cy,
                size,
                size_y,
                height,
                albedo: random_albedo(rng),
            }
        })
        .collect()
}

/// Renders a scene from explicit shapes. `rng` drives the plane appearance.
pub fn render_shapes(
    height: usize,
    width: usize,
    shapes: &[PlacedShape],
    rng: &mut SeededRng,
) -> Scene {
    let plane_albedo = random_albedo(rng);
    let (fx, fy) = (rng.uniform_range(1.0, 4.0), rng.uniform_range(1.0, 4.0));
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let px = 1.0 / width as f64;

    let mut image = Array3::zeros((3, height, width));
    let mut seg = Array2::zeros((height, width));
    let mut depth = Array3::zeros((1, height, width));
    let mut normals = Array3::zeros((3, height, width));
    let mut owner = Array2::from_elem((height, width), -1i64);

    for y in 0..height {
        for x in 0..width {
            let (wx, wy) = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
            let mut best: Option<(usize, f64, [f64; 3])> = None;
            for (i, s) in shapes.iter().enumerate() {
                if let Some((h, n)) = s.surface(wx, wy) {
                    if best.map_or(true, |(_, bh, _)| h > bh) {
                        best = Some((i, h, n));
                    }
                }
            }
            let (color, class, d, n) = match best {
                Some((i, h, n)) => {
                    owner[[y, x]] = i as i64;
                    (shade(shapes[i].albedo, n), shapes[i].kind.class(), PLANE_DEPTH - h, n)
                }
                None => {
                    let tex = 0.85
                        + 0.15 * (std::f64::consts::TAU * (fx * wx + fy * wy) + phase).sin();
                    let base = shade(plane_albedo, [0.0, 0.0, 1.0]);
                    (
                        [base[0] * tex, base[1] * tex, base[2] * tex],
                        0,
                        PLANE_DEPTH,
                        [0.0, 0.0, 1.0],
                    )
                }
            };
            for c in 0..3 {
                image[[c, y, x]] = f64::from(crate::io::quantize(color[c])) / 255.0;
                normals[[c, y, x]] = n[c];
            }
            seg[[y, x]] = class;
            depth[[0, y, x]] = d;
        }
    }

    // Normals are discontinuous at silhouettes; drop a one-pixel band there.
    let normal_valid = Array2::from_shape_fn((height, width), |(y, x)| {
        let me = owner[[y, x]];
        let neighbours = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
        neighbours.iter().all(|(dy, dx)| {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 || owner[[ny as usize, nx as usize]] == me
        })
    });

    Scene {
        image: ImageTensor::new(image).expect("rendered values are finite"),
        truth: GroundTruth {
            seg,
            depth,
            normals,
            valid: Array2::from_elem((height, width), true),
            normal_valid,
        },
    }
}

fn scene_rng(spec: &SyntheticSceneSpec, index: usize) -> SeededRng {
    make_rng(spec.seed).substream_indexed("scene", index as u64)
}

/// Renders scene `index` of the dataset described by `spec`.
pub fn render_scene(spec: &SyntheticSceneSpec, index: usize) -> Scene {
    let mut rng = scene_rng(spec, index);
    let shapes = place_shapes(spec, &mut rng);
    render_shapes(spec.height, spec.width, &shapes, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSceneSpec,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

/// Train scenes are indices `0..train`, validation scenes follow.
pub fn generate_synthetic_dataset(spec: &SyntheticSceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = (0..spec.train).map(|i| render_scene(spec, i)).collect();
    let val = (spec.train..spec.train + spec.val)
        .map(|i| render_scene(spec, i))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: SyntheticSceneSpec,
    train: Vec<ManifestEntry>,
    val: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    stem: String,
}

fn bool_array(a: &Array2<bool>) -> ArrayD<f64> {
    a.mapv(|b| if b { 1.0 } else { 0.0 }).into_dyn()
}

/// Writes `manifest.json` plus `<stem>.png`, `<stem>.seg.bin`, `<stem>.depth.bin`,
/// `<stem>.normals.bin`, `<stem>.valid.bin` and `<stem>.normal_valid.bin` per scene.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        spec: ds.spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for (split, scenes, offset) in [("train", &ds.train, 0), ("val", &ds.val, ds.spec.train)] {
        for (i, scene) in scenes.iter().enumerate() {
            let stem = format!("{split}_{i:05}");
            save_image(&scene.image, dir.join(format!("{stem}.png")))?;
            let t = &scene.truth;
            save_array(&t.seg.mapv(|v| v as f64).into_dyn(), dir.join(format!("{stem}.seg.bin")))?;
            save_array(&t.depth.clone().into_dyn(), dir.join(format!("{stem}.depth.bin")))?;
            save_array(&t.normals.clone().into_dyn(), dir.join(format!("{stem}.normals.bin")))?;
            save_array(&bool_array(&t.valid), dir.join(format!("{stem}.valid.bin")))?;
            save_array(&bool_array(&t.normal_valid), dir.join(format!("{stem}.normal_valid.bin")))?;
            let entry = ManifestEntry {
                index: offset + i,
                stem,
            };
            match split {
                "train" => manifest.train.push(entry),
                _ => manifest.val.push(entry),
            }
        }
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let load_scene = |stem: &str| -> Result<Scene> {
        let arr3 = |name: &str| -> Result<Array3<f64>> {
            load_array(dir.join(format!("{stem}.{name}.bin")))?
                .into_dimensionality()
                .map_err(|e| Error::Format(e.to_string()))
        };
        let arr2 = |name: &str| -> Result<Array2<f64>> {
            load_array(dir.join(format!("{stem}.{name}.bin")))?
                .into_dimensionality()
                .map_err(|e| Error::Format(e.to_string()))
        };
        Ok(Scene {
            image: load_image(dir.join(format!("{stem}.png")))?,
            truth: GroundTruth {
                seg: arr2("seg")?.mapv(|v| v as usize),
                depth: arr3("depth")?,
                normals: arr3("normals")?,
                valid: arr2("valid")?.mapv(|v| v != 0.0),
                normal_valid: arr2("normal_valid")?.mapv(|v| v != 0.0),
            },
        })
    };
    Ok(Dataset {
        train: manifest.train.iter().map(|e| load_scene(&e.stem)).collect::<Result<_>>()?,
        val: manifest.val.iter().map(|e| load_scene(&e.stem)).collect::<Result<_>>()?,
        spec: manifest.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(num_shapes: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            height: 32,
            width: 32,
            num_shapes,
            shape_classes: 3,
            seed: 4,
            train: 3,
            val: 2,
        }
    }

    #[test]
    fn empty_scene() {
        let scene = render_scene(&spec(0), 0);
        let t = &scene.truth;
        assert!(t.seg.iter().all(|&c| c == 0));
        assert!(t.depth.iter().all(|&d| d == PLANE_DEPTH));
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(
                    [t.normals[[0, y, x]], t.normals[[1, y, x]], t.normals[[2, y, x]]],
                    [0.0, 0.0, 1.0]
                );
            }
        }
        assert!(t.normal_valid.iter().all(|&v| v));
    }

    #[test]
    fn sphere_apex() {
        let r = 0.25;
        let sphere = PlacedShape {
            kind: ShapeKind::Sphere,
            cx: 0.5,
            cy: 0.5,
            size: r,
            size_y: r,
            height: 0.0,
            albedo: [0.5; 3],
        };
        // odd size so that a pixel centre sits on the sphere centre
        let scene = render_shapes(33, 33, &[sphere], &mut make_rng(0));
        let t = &scene.truth;
        assert!((t.depth[[0, 16, 16]] - (PLANE_DEPTH - r)).abs() < 1e-12);
        let n = [t.normals[[0, 16, 16]], t.normals[[1, 16, 16]], t.normals[[2, 16, 16]]];
        assert!(n[0].abs() < 1e-12 && n[1].abs() < 1e-12 && (n[2] - 1.0).abs() < 1e-12);
        assert_eq!(t.seg[[16, 16]], ShapeKind::Sphere.class());
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(&spec(3)).unwrap();
        let b = generate_synthetic_dataset(&spec(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0], a.train[1]);
    }

    #[test]
    fn truth_invariants() {
        let ds = generate_synthetic_dataset(&spec(5)).unwrap();
        for scene in ds.train.iter().chain(&ds.val) {
            scene.truth.validate(4).unwrap();
            assert!(scene.image.in_unit_range());
        }
    }

    #[test]
    fn normals_consistent_with_depth_gradient() {
        let r = 0.3;
        let sphere = PlacedShape {
            kind: ShapeKind::Sphere,
            cx: 0.5,
            cy: 0.5,
            size: r,
            size_y: r,
            height: 0.0,
            albedo: [0.5; 3],
        };
        let n = 64;
        let scene = render_shapes(n, n, &[sphere], &mut make_rng(0));
        let t = &scene.truth;
        let px = 1.0 / n as f64;
        let mut checked = 0;
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let (wx, wy) = ((x as f64 + 0.5) * px - 0.5, (y as f64 + 0.5) * px - 0.5);
                // stay well inside the silhouette where central differences are accurate
                if (wx * wx + wy * wy).sqrt() > 0.8 * r {
                    continue;
                }
                let gx = (t.depth[[0, y, x + 1]] - t.depth[[0, y, x - 1]]) / (2.0 * px);
                let gy = (t.depth[[0, y + 1, x]] - t.depth[[0, y - 1, x]]) / (2.0 * px);
                let len = (gx * gx + gy * gy + 1.0).sqrt();
                let est = [gx / len, gy / len, 1.0 / len];
                let dot: f64 = (0..3).map(|c| est[c] * t.normals[[c, y, x]]).sum();
                let angle = dot.clamp(-1.0, 1.0).acos().to_degrees();
                assert!(angle < 5.0, "({y}, {x}): {angle}°");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&spec(3)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
