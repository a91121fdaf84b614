//! Procedural garden-like scenes rendered with an orthographic top-down camera.
//!
//! Every pixel's reflectance, shading and class come straight from the analytic
//! surface that wins the depth test, so the ground truth is exact: the stored
//! image is the `f32` product of the stored reflectance and shading.

mod container;
mod dataset;

pub use container::{decode_sample, encode_sample, read_sample_file, write_sample_file, ISEG_MAGIC};
pub use dataset::{
    generate_dataset, load_dataset, random_scene, Dataset, DatasetManifest, GenConfig, SampleEntry,
    Split,
};

use crate::error::{Error, Result};
use crate::imaging::{compose, Image, LabelMap, Sample, SampleMeta};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightRig {
    pub direction: Vec3,
    pub ambient: f64,
    pub intensity: f64,
}

impl LightRig {
    /// Builds a rig from an arbitrary (non-zero) direction, which is normalised.
    pub fn new(direction: Vec3, ambient: f64, intensity: f64) -> Result<Self> {
        let n = norm(direction);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Invalid("light direction must be non-zero".into()));
        }
        let rig = Self {
            direction: [direction[0] / n, direction[1] / n, direction[2] / n],
            ambient,
            intensity,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if (norm(self.direction) - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "light direction {:?} is not unit length",
                self.direction
            )));
        }
        if !(0.0..=0.5).contains(&self.ambient) {
            return Err(Error::Invalid(format!(
                "ambient {} outside [0, 0.5]",
                self.ambient
            )));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.5) {
            return Err(Error::Invalid(format!(
                "intensity {} outside (0, 1.5]",
                self.intensity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    GroundPlane,
    /// Ellipsoid cap; a sphere when the horizontal and vertical radii agree.
    Sphere,
    /// Rotated box with a (possibly tilted) planar top face.
    Box,
    /// Horizontal cylinder lying on its side.
    Cylinder,
}

/// One object in world coordinates (1 unit = 1 pixel, `z` up towards the camera).
///
/// * sphere: `size = [radius_xy, _, radius_z]`, `position` is the centre.
/// * box: `size = [half_x, half_y, top_height]`, `tilt` is the top-face slope.
/// * cylinder: `size = [radius, half_length, _]`, axis height is `position[2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub class_id: u8,
    pub albedo: [f32; 3],
    pub position: Vec3,
    pub size: Vec3,
    pub orientation: f64,
    pub tilt: [f64; 2],
    /// Amplitude of the multiplicative albedo texture, 0 disables it.
    pub texture: f32,
}

impl SceneObject {
    pub fn ground(class_id: u8, albedo: [f32; 3]) -> Self {
        Self {
            shape: Shape::GroundPlane,
            class_id,
            albedo,
            position: [0.0; 3],
            size: [0.0; 3],
            orientation: 0.0,
            tilt: [0.0; 2],
            texture: 0.0,
        }
    }

    /// Height and unit normal of the surface above world point `(x, y)`, if any.
    fn hit(&self, x: f64, y: f64) -> Option<(f64, Vec3)> {
        let [cx, cy, cz] = self.position;
        match self.shape {
            Shape::GroundPlane => Some((cz, [0.0, 0.0, 1.0])),
            Shape::Sphere => {
                let (r, rz) = (self.size[0], self.size[2]);
                let (dx, dy) = (x - cx, y - cy);
                let q = 1.0 - (dx * dx + dy * dy) / (r * r);
                if q <= 0.0 {
                    return None;
                }
                let dz = rz * q.sqrt();
                // gradient of the implicit ellipsoid
                let n = normalize([dx / (r * r), dy / (r * r), dz / (rz * rz)]);
                Some((cz + dz, n))
            }
            Shape::Box => {
                let (c, s) = (self.orientation.cos(), self.orientation.sin());
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if u.abs() > self.size[0] || v.abs() > self.size[1] {
                    return None;
                }
                let [a, b] = self.tilt;
                let z = self.size[2] + a * u + b * v;
                // top plane z = h + a u + b v, rotated back to world axes
                let gx = a * c - b * s;
                let gy = a * s + b * c;
                Some((z, normalize([-gx, -gy, 1.0])))
            }
            Shape::Cylinder => {
                let (c, s) = (self.orientation.cos(), self.orientation.sin());
                let (dx, dy) = (x - cx, y - cy);
                let along = c * dx + s * dy;
                let across = -s * dx + c * dy;
                let r = self.size[0];
                if along.abs() > self.size[1] || across.abs() >= r {
                    return None;
                }
                let dz = (r * r - across * across).sqrt();
                let n = normalize([-s * across, c * across, dz]);
                Some((cz + dz, n))
            }
        }
    }

    fn albedo_at(&self, x: f64, y: f64) -> [f32; 3] {
        if self.texture == 0.0 {
            return self.albedo;
        }
        let m = 1.0 + self.texture * (2.0 * value_noise(x / 6.0, y / 6.0, self.class_id) - 1.0);
        self.albedo.map(|a| (a * m).clamp(0.05, 0.95))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Ground plane first, then the remaining objects.
    pub objects: Vec<SceneObject>,
    pub light_rigs: Vec<LightRig>,
    /// Sub-pixel camera translation derived from the scene seed.
    pub camera_offset: [f64; 2],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Invalid("scene has no objects".into()));
        }
        if self.objects[0].shape != Shape::GroundPlane {
            return Err(Error::Invalid(
                "the first object must be the ground plane".into(),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("canvas must be non-empty".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id as usize >= self.num_classes {
                return Err(Error::LabelRange {
                    label: o.class_id as usize,
                    num_classes: self.num_classes,
                });
            }
            if o.albedo.iter().any(|a| !(0.05..=0.95).contains(a)) {
                return Err(Error::Invalid(format!(
                    "object {i} albedo {:?} outside [0.05, 0.95]",
                    o.albedo
                )));
            }
        }
        for rig in &self.light_rigs {
            rig.validate()?;
        }
        Ok(())
    }
}

/// Clamped Lambertian shading `clamp01(ambient + intensity * max(0, n·s))`.
pub fn lambertian(normal: Vec3, rig: &LightRig) -> Result<f64> {
    if (norm(normal) - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!(
            "surface normal {normal:?} is not unit length"
        )));
    }
    let d = dot(normal, rig.direction).max(0.0);
    Ok((rig.ambient + rig.intensity * d).clamp(0.0, 1.0))
}

/// Renders one light rig of a scene.
pub fn render_scene(spec: &SceneSpec, rig_index: usize) -> Result<Sample> {
    spec.validate()?;
    let rig = spec.light_rigs.get(rig_index).ok_or_else(|| {
        Error::Invalid(format!(
            "rig index {rig_index} out of range ({} rigs)",
            spec.light_rigs.len()
        ))
    })?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut refl = vec![0f32; 3 * plane];
    let mut shading = vec![0f32; plane];
    let mut labels = vec![0u8; plane];

    for y in 0..h {
        for x in 0..w {
            let wx = x as f64 + 0.5 + spec.camera_offset[0];
            let wy = y as f64 + 0.5 + spec.camera_offset[1];
            let mut best: Option<(f64, Vec3, &SceneObject)> = None;
            for obj in &spec.objects {
                if let Some((z, n)) = obj.hit(wx, wy) {
                    if best.as_ref().is_none_or(|b| z > b.0) {
                        best = Some((z, n, obj));
                    }
                }
            }
            let (_, normal, obj) = best.expect("ground plane covers every pixel");
            let i = y * w + x;
            let a = obj.albedo_at(wx, wy);
            for c in 0..3 {
                refl[c * plane + i] = a[c];
            }
            shading[i] = lambertian(normal, rig)? as f32;
            labels[i] = obj.class_id;
        }
    }

    let reflectance = Image::new(3, h, w, refl)?;
    let shading = Image::new(1, h, w, shading)?;
    let image = compose(&reflectance, &shading)?;
    Ok(Sample {
        image,
        reflectance,
        shading,
        labels: LabelMap::new(h, w, spec.num_classes, labels)?,
        meta: SampleMeta {
            scene_id: 0,
            rig_id: rig_index as u32,
            camera_id: 0,
        },
    })
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Smooth deterministic value noise in `[0, 1]` on a unit lattice.
fn value_noise(x: f64, y: f64, salt: u8) -> f32 {
    fn lattice(ix: i64, iy: i64, salt: u8) -> f64 {
        let mut h = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (salt as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
        h ^= h >> 33;
        h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        h ^= h >> 33;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lattice(ix, iy, salt);
    let b = lattice(ix + 1, iy, salt);
    let c = lattice(ix, iy + 1, salt);
    let d = lattice(ix + 1, iy + 1, salt);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    (top + (bottom - top) * sy) as f32
}
