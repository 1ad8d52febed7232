//! Procedural rectified stereo pairs with analytic ground truth.
//!
//! A scene is a fronto-parallel backdrop plus a handful of textured
//! rectangles (fronto-parallel or slanted) and spheres. Both pinhole cameras
//! look down +Z; the right camera sits `baseline_m` to the right of the left
//! one. Ray hits are computed in closed form, so the left view's depth is
//! exact and the disparity follows by triangulation. Textures are pure
//! functions of the surface point, which makes both views photoconsistent
//! for every point they both see.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, ScalarField};
use crate::imaging::Image;
use crate::io::{self, Manifest, ManifestEntry};

/// Parameters of one generated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub rig: CameraRig,
    pub object_count: usize,
    pub depth_range_m: (f64, f64),
    pub texture_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 192,
            height: 96,
            rig: CameraRig::default(),
            object_count: 6,
            depth_range_m: (2.0, 90.0),
            texture_scale: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (z_min, z_max) = self.depth_range_m;
        if !(1.0 <= z_min && z_min < z_max && z_max <= 100.0) {
            return Err(Error::InvalidParameter(format!(
                "depth range must satisfy 1 <= z_min < z_max <= 100, got [{z_min}, {z_max}]"
            )));
        }
        if self.object_count < 1 {
            return Err(Error::InvalidParameter("object_count must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be positive".into()));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return Err(Error::InvalidParameter("texture_scale must be positive".into()));
        }
        Ok(())
    }
}

/// A rendered stereo pair and its ground truth, all in the left frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub rig: CameraRig,
    pub left: Image,
    pub right: Image,
    pub z_gt: ScalarField,
    pub d_gt: ScalarField,
    pub valid: Vec<bool>,
    /// Left pixels whose surface point is also seen by the right camera at
    /// both bilinear taps around its projection.
    pub covisible: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Vec3 {
    x: f64,
    y: f64,
    z: f64,
}

impl Vec3 {
    const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
    fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
    fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
    fn normalized(self) -> Vec3 {
        self.scale(1.0 / self.dot(self).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Backdrop {
        z: f64,
    },
    Rect {
        center: Vec3,
        u: Vec3,
        v: Vec3,
        half_u: f64,
        half_v: f64,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    seed: u64,
    /// Lattice spacing of the coarse noise octave, meters.
    cell_m: f64,
    /// Checker square size, meters.
    checker_m: f64,
    checker_weight: f64,
    brightness: f64,
    tint: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Object {
    shape: Shape,
    texture: Texture,
}

struct Hit {
    t: f64,
    object: usize,
    point: Vec3,
    normal: Vec3,
    local: Vec3,
}

impl Shape {
    /// Nearest positive ray parameter. Rays have unit Z component, so `t`
    /// equals the hit depth.
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3, Vec3)> {
        match *self {
            Shape::Backdrop { z } => {
                let t = (z - origin.z) / dir.z;
                let p = origin.add(dir.scale(t));
                (t > 0.0).then_some((t, Vec3::new(0.0, 0.0, -1.0), Vec3::new(p.x, p.y, 0.0)))
            }
            Shape::Rect {
                center,
                u,
                v,
                half_u,
                half_v,
            } => {
                let n = u.cross(v);
                let denom = dir.dot(n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = center.sub(origin).dot(n) / denom;
                if t <= 0.0 {
                    return None;
                }
                let rel = origin.add(dir.scale(t)).sub(center);
                let (s, r) = (rel.dot(u), rel.dot(v));
                (s.abs() <= half_u && r.abs() <= half_v).then_some((t, n, Vec3::new(s, r, 0.0)))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin.sub(center);
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                if t <= 0.0 {
                    return None;
                }
                let rel = origin.add(dir.scale(t)).sub(center);
                Some((t, rel.scale(1.0 / radius), rel))
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, iz: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64 ^ splitmix(iz as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smooth 3-D value noise in [0, 1].
fn value_noise(seed: u64, p: Vec3) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (fade(p.x - fx), fade(p.y - fy), fade(p.z - fz));
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                acc += wx * wy * wz * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    fn albedo(&self, local: Vec3, solid: bool) -> f64 {
        let coarse = value_noise(self.seed, local.scale(1.0 / self.cell_m));
        let fine = value_noise(self.seed ^ 0x5555, local.scale(2.0 / self.cell_m));
        let noise = 0.6 * coarse + 0.4 * fine;
        let q = local.scale(std::f64::consts::PI / self.checker_m);
        let mut wave = q.x.sin() * q.y.sin();
        if solid {
            wave *= q.z.sin();
        }
        let checker = smoothstep(-0.35, 0.35, wave);
        let mix = (1.0 - self.checker_weight) * noise + self.checker_weight * checker;
        self.brightness + (1.0 - self.brightness) * 0.85 * mix
    }
}

/// The geometry and materials of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    objects: Vec<Object>,
}

const LIGHT: Vec3 = Vec3::new(0.35, -0.55, -0.76);

impl Scene {
    fn texture_for(rng: &mut ChaCha8Rng, depth: f64, rig: &CameraRig, scale: f64) -> Texture {
        // Keep features a few pixels wide at the object's depth.
        let metres_per_px = depth / rig.focal_x_px();
        Texture {
            seed: rng.gen(),
            cell_m: scale * rng.gen_range(6.0..9.0) * metres_per_px,
            checker_m: scale * rng.gen_range(10.0..18.0) * metres_per_px,
            checker_weight: rng.gen_range(0.15..0.35),
            brightness: rng.gen_range(0.05..0.3),
            tint: [
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
            ],
        }
    }

    /// Random layout drawn from `spec.seed`.
    pub fn random(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (z_min, z_max) = spec.depth_range_m;
        let f = spec.rig.focal_x_px();
        let (cx, cy) = principal_point(spec.width, spec.height);

        let z_bg = rng.gen_range(z_min + 0.85 * (z_max - z_min)..=z_max);
        let mut objects = vec![Object {
            shape: Shape::Backdrop { z: z_bg },
            texture: Self::texture_for(&mut rng, z_bg, &spec.rig, spec.texture_scale),
        }];

        let z_far = z_min + 0.92 * (z_bg - z_min);
        for _ in 0..spec.object_count {
            let kind = rng.gen_range(0.0..1.0);
            let zc: f64 = rng.gen_range(z_min..z_far);
            let size_px = rng.gen_range(14.0..56.0);
            let half = 0.5 * size_px * zc / f;
            let px = rng.gen_range(-0.1..1.1) * spec.width as f64;
            let py = rng.gen_range(-0.1..1.1) * spec.height as f64;
            let center = Vec3::new((px - cx) * zc / f, (py - cy) * zc / f, zc);
            let texture = Self::texture_for(&mut rng, zc, &spec.rig, spec.texture_scale);
            let aspect = rng.gen_range(0.5..2.0);
            let yaw: f64 = rng.gen_range(-0.9..0.9);
            let pitch: f64 = rng.gen_range(-0.5..0.5);

            let fronto = Shape::Rect {
                center,
                u: Vec3::new(1.0, 0.0, 0.0),
                v: Vec3::new(0.0, 1.0, 0.0),
                half_u: half,
                half_v: half * aspect,
            };
            let shape = if kind < 0.35 {
                fronto
            } else if kind < 0.7 {
                let u = Vec3::new(yaw.cos(), 0.0, yaw.sin());
                let v0 = Vec3::new(0.0, pitch.cos(), pitch.sin());
                let n = u.cross(v0).normalized();
                let v = n.cross(u).normalized();
                let (half_u, half_v) = (half, half * aspect);
                let reach = half_u * u.z.abs() + half_v * v.z.abs();
                if zc - reach >= z_min && zc + reach < z_bg {
                    Shape::Rect {
                        center,
                        u,
                        v,
                        half_u,
                        half_v,
                    }
                } else {
                    fronto
                }
            } else if zc - half >= z_min && zc + half < z_bg {
                Shape::Sphere { center, radius: half }
            } else {
                fronto
            };
            objects.push(Object { shape, texture });
        }
        Ok(Self { objects })
    }

    /// A single textured backdrop at depth `z`.
    pub fn backdrop(z: f64, seed: u64, rig: &CameraRig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            objects: vec![Object {
                shape: Shape::Backdrop { z },
                texture: Self::texture_for(&mut rng, z, rig, 1.0),
            }],
        }
    }

    fn cast(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, normal, local)) = obj.shape.intersect(origin, dir) {
                if best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        object: i,
                        point: origin.add(dir.scale(t)),
                        normal,
                        local,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let obj = &self.objects[hit.object];
        // Orient the normal toward the left camera so both views agree.
        let mut n = hit.normal;
        if n.dot(hit.point.scale(-1.0)) < 0.0 {
            n = n.scale(-1.0);
        }
        let lambert = n.dot(LIGHT.normalized()).max(0.0);
        let solid = matches!(obj.shape, Shape::Sphere { .. });
        let a = obj.texture.albedo(hit.local, solid) * (0.6 + 0.4 * lambert);
        obj.texture.tint.map(|t| (a * t).clamp(0.0, 1.0))
    }

    /// Render both views and the left-frame ground truth.
    pub fn render(&self, width: usize, height: usize, rig: &CameraRig) -> Result<StereoSample> {
        let (cx, cy) = principal_point(width, height);
        let f = rig.focal_x_px();
        let b = rig.baseline_m();
        let left_origin = Vec3::new(0.0, 0.0, 0.0);
        let right_origin = Vec3::new(b, 0.0, 0.0);
        let ray = |u: f64, v: f64| Vec3::new((u - cx) / f, (v - cy) / f, 1.0);

        struct Px {
            left: [f64; 3],
            right: [f64; 3],
            left_hit: Option<(f64, usize, Vec3)>,
            right_object: Option<usize>,
        }

        let pixels: Vec<Px> = (0..height)
            .into_par_iter()
            .flat_map_iter(|y| {
                (0..width).map(move |x| {
                    let dir = ray(x as f64, y as f64);
                    let lh = self.cast(left_origin, dir);
                    let rh = self.cast(right_origin, dir);
                    Px {
                        left: lh.as_ref().map_or([0.0; 3], |h| self.shade(h)),
                        right: rh.as_ref().map_or([0.0; 3], |h| self.shade(h)),
                        left_hit: lh.map(|h| (h.t, h.object, h.point)),
                        right_object: rh.map(|h| h.object),
                    }
                })
            })
            .collect();

        let to_f32 = |c: &[f64; 3]| c.map(|v| v as f32);
        let left = Image::new(
            width,
            height,
            3,
            pixels.iter().flat_map(|p| to_f32(&p.left)).collect(),
        )?;
        let right = Image::new(
            width,
            height,
            3,
            pixels.iter().flat_map(|p| to_f32(&p.right)).collect(),
        )?;

        let z_gt = ScalarField::from_fn(width, height, |x, y| pixels[y * width + x].left_hit.map(|h| h.0));
        let d_gt = z_gt.map_valid(|z| rig.disparity_of(z));
        let valid = d_gt.valid().to_vec();

        let covisible = (0..width * height)
            .map(|i| {
                let y = i / width;
                let Some((z, object, point)) = pixels[i].left_hit else {
                    return false;
                };
                let ur = cx + f * (point.x - b) / point.z;
                if !(ur >= 0.0) || ur.ceil() > (width - 1) as f64 {
                    return false;
                }
                // The exact surface point must be the right camera's nearest hit ...
                let to_point = point.sub(right_origin).scale(1.0 / point.z);
                let seen = self
                    .cast(right_origin, to_point)
                    .is_some_and(|h| h.object == object && (h.t - z).abs() <= 1e-9 * z);
                // ... and both bilinear taps must land on the same surface.
                let x0 = ur.floor() as usize;
                let taps = [x0, (x0 + 1).min(width - 1)];
                seen && taps.iter().all(|&tx| pixels[y * width + tx].right_object == Some(object))
            })
            .collect();

        Ok(StereoSample {
            rig: *rig,
            left,
            right,
            z_gt,
            d_gt,
            valid,
            covisible,
        })
    }
}

fn principal_point(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Render the scene described by `spec`. Identical specs give identical
/// samples.
pub fn generate_scene(spec: &SceneSpec) -> Result<StereoSample> {
    Scene::random(spec)?.render(spec.width, spec.height, &spec.rig)
}

/// Directory name of sample `index` inside a dataset.
pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Render `count` samples with seeds `spec.seed .. spec.seed + count` into
/// `out_dir` and write its manifest.
pub fn generate_dataset(spec: &SceneSpec, count: usize, out_dir: &Path) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let sample_spec = SceneSpec {
                seed: spec.seed + i as u64,
                ..*spec
            };
            let sample = generate_scene(&sample_spec)?;
            let entry = ManifestEntry::standard(&sample_dir_name(i));
            io::write_sample(out_dir, &entry, &sample)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        rig: spec.rig,
        entries,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::warp_right_to_left;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SceneSpec::default();
        s.depth_range_m = (0.5, 10.0);
        assert!(s.validate().is_err());
        s.depth_range_m = (10.0, 10.0);
        assert!(s.validate().is_err());
        s.depth_range_m = (2.0, 120.0);
        assert!(s.validate().is_err());
        s.depth_range_m = (2.0, 90.0);
        s.object_count = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn fronto_plane_has_constant_disparity() {
        let rig = CameraRig::new(0.5, 200.0).unwrap();
        let sample = Scene::backdrop(5.0, 1, &rig).render(40, 20, &rig).unwrap();
        for (z, d) in sample.z_gt.values().iter().zip(sample.d_gt.values()) {
            assert!((z - 5.0).abs() < 1e-12);
            assert!((d - 20.0).abs() < 1e-12);
        }
        assert!(sample.valid.iter().all(|&v| v));
    }

    #[test]
    fn same_seed_is_identical() {
        let a = generate_scene(&small_spec(3)).unwrap();
        let b = generate_scene(&small_spec(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_scene(&small_spec(7)).unwrap();
        let b = generate_scene(&small_spec(8)).unwrap();
        let checksum = |s: &StereoSample| {
            s.z_gt
                .values()
                .iter()
                .fold(0u64, |h, v| splitmix(h ^ v.to_bits()))
        };
        assert_ne!(checksum(&a), checksum(&b));
    }

    #[test]
    fn ground_truth_is_consistent_and_in_range() {
        for seed in 0..4 {
            let spec = small_spec(seed);
            let s = generate_scene(&spec).unwrap();
            let bf = spec.rig.bf();
            for i in 0..s.valid.len() {
                assert!(s.valid[i]);
                let (z, d) = (s.z_gt.values()[i], s.d_gt.values()[i]);
                assert!(((d - bf / z) / d).abs() <= 1e-9);
                assert!(z >= spec.depth_range_m.0 && z <= spec.depth_range_m.1, "z = {z}");
            }
        }
    }

    #[test]
    fn warp_with_ground_truth_reproduces_left() {
        for seed in 0..4 {
            let s = generate_scene(&small_spec(seed)).unwrap();
            let warped = warp_right_to_left(&s.right, &s.d_gt).unwrap();
            let (mut sum, mut n) = (0.0f64, 0usize);
            for i in 0..s.covisible.len() {
                if s.covisible[i] {
                    assert!(warped.valid[i]);
                    for c in 0..3 {
                        sum += (warped.image.values()[i * 3 + c] - s.left.values()[i * 3 + c]).abs() as f64;
                        n += 1;
                    }
                }
            }
            let mad = sum / n as f64;
            assert!(n / 3 > s.covisible.len() / 2, "too few covisible pixels");
            assert!(mad < 2.0 / 255.0, "seed {seed}: mean abs diff {mad}");
        }
    }
}
