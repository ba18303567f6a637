//! Analytic ray casting of spheres, boxes and cylinders in front of a
//! fronto-parallel background plane. The camera sits at the origin looking
//! down +z; depth is the z coordinate of the visible surface.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{DataError, Result};
use crate::sample::Sample;

pub const MIN_DEPTH: f64 = 0.3;
/// Share of the transparent surface colour in the blended pixel.
const TINT: f64 = 0.4;
const AMBIENT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Cuboid { center: [f64; 3], half: [f64; 3] },
    /// Cylinder with its axis along the image y direction.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
    },
}

/// What a depth sensor reports on a transparent object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    /// No return: depth 0.
    Drop,
    /// The surface behind the object.
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    /// Diffuse colour in [0, 1].
    pub color: [f64; 3],
    pub transparent: bool,
    pub corruption: Corruption,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels; the principal point is the image centre.
    pub focal: f64,
    pub background_depth: f64,
    pub background_color: [f64; 3],
    pub objects: Vec<Object>,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    normal: [f64; 3],
}

/// Smallest root of `a t² − 2 b t + c = 0` with `t > 0`.
fn nearest_root(a: f64, b: f64, c: f64) -> Option<f64> {
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [(b - s) / a, (b + s) / a].into_iter().find(|&t| t > 0.0)
}

impl Shape {
    fn center(&self) -> [f64; 3] {
        match *self {
            Shape::Sphere { center, .. } | Shape::Cuboid { center, .. } | Shape::Cylinder { center, .. } => center,
        }
    }

    /// Extent along z.
    fn depth_range(&self) -> (f64, f64) {
        let z = self.center()[2];
        let r = match *self {
            Shape::Sphere { radius, .. } | Shape::Cylinder { radius, .. } => radius,
            Shape::Cuboid { half, .. } => half[2],
        };
        (z - r, z + r)
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius, .. } => radius > 0.0,
            Shape::Cuboid { half, .. } => half.iter().all(|&h| h > 0.0),
            Shape::Cylinder { radius, half_height, .. } => radius > 0.0 && half_height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(DataError::Scene(format!("degenerate primitive {self:?}")))
        }
    }

    /// Nearest intersection of the ray `t·d`, `t > 0`.
    fn intersect(&self, d: [f64; 3]) -> Option<Hit> {
        match *self {
            Shape::Sphere { center: c, radius } => {
                let t = nearest_root(dot(d, d), dot(d, c), dot(c, c) - radius * radius)?;
                let p = [t * d[0] - c[0], t * d[1] - c[1], t * d[2] - c[2]];
                Some(Hit {
                    t,
                    normal: normalize(p),
                })
            }
            Shape::Cuboid { center: c, half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for k in 0..3 {
                    let (lo, hi) = (c[k] - half[k], c[k] + half[k]);
                    if d[k] == 0.0 {
                        if !(lo..=hi).contains(&0.0) {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo / d[k]).min(hi / d[k]), (lo / d[k]).max(hi / d[k]));
                    if a > t0 {
                        t0 = a;
                        axis = k;
                    }
                    t1 = t1.min(b);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut normal = [0.0; 3];
                normal[axis] = -d[axis].signum();
                Some(Hit { t: t0, normal })
            }
            Shape::Cylinder {
                center: c,
                radius,
                half_height,
            } => {
                let (y0, y1) = (c[1] - half_height, c[1] + half_height);
                let mut best: Option<Hit> = None;
                let a = d[0] * d[0] + d[2] * d[2];
                if a > 0.0 {
                    let b = d[0] * c[0] + d[2] * c[2];
                    let cc = c[0] * c[0] + c[2] * c[2] - radius * radius;
                    if let Some(t) = nearest_root(a, b, cc) {
                        let y = t * d[1];
                        if (y0..=y1).contains(&y) {
                            let n = normalize([t * d[0] - c[0], 0.0, t * d[2] - c[2]]);
                            best = Some(Hit { t, normal: n });
                        }
                    }
                }
                if d[1] != 0.0 {
                    for (cap, ny) in [(y0, -1.0), (y1, 1.0)] {
                        let t = cap / d[1];
                        if t <= 0.0 || best.is_some_and(|h| h.t <= t) {
                            continue;
                        }
                        let (x, z) = (t * d[0] - c[0], t * d[2] - c[2]);
                        if x * x + z * z <= radius * radius {
                            best = Some(Hit {
                                t,
                                normal: [0.0, ny, 0.0],
                            });
                        }
                    }
                }
                best
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.focal > 0.0) {
            return Err(DataError::Scene("image size and focal length must be positive".into()));
        }
        if !(self.background_depth > MIN_DEPTH) {
            return Err(DataError::Scene(format!(
                "background at {} m is closer than {MIN_DEPTH} m",
                self.background_depth
            )));
        }
        for o in &self.objects {
            o.shape.validate()?;
            let (near, far) = o.shape.depth_range();
            if near < MIN_DEPTH || far >= self.background_depth {
                return Err(DataError::Scene(format!(
                    "object spans {near:.3}–{far:.3} m, outside [{MIN_DEPTH}, {})",
                    self.background_depth
                )));
            }
        }
        Ok(())
    }

    /// Unnormalised ray through the centre of pixel (x, y), with unit z.
    pub fn ray(&self, x: usize, y: usize) -> [f64; 3] {
        [
            (x as f64 + 0.5 - self.width as f64 / 2.0) / self.focal,
            (y as f64 + 0.5 - self.height as f64 / 2.0) / self.focal,
            1.0,
        ]
    }
}

fn shade(color: [f64; 3], normal: [f64; 3]) -> [f64; 3] {
    // Light from the upper left, slightly behind the camera.
    let light = normalize([-0.4, -0.6, -1.0]);
    let k = AMBIENT + (1.0 - AMBIENT) * dot(normal, light).max(0.0);
    color.map(|c| c * k)
}

fn background_shade(spec: &SceneSpec, x: usize, y: usize) -> [f64; 3] {
    let cell = (spec.width / 8).max(1);
    let k = if (x / cell + y / cell).is_multiple_of(2) { 1.0 } else { 0.85 };
    spec.background_color.map(|c| c * k)
}

struct Pixel {
    rgb: [u8; 3],
    raw: f32,
    gt: f32,
    masked: bool,
}

fn render_pixel(spec: &SceneSpec, x: usize, y: usize) -> Pixel {
    let d = spec.ray(x, y);
    let mut nearest: Option<(Hit, &Object)> = None;
    let mut opaque: Option<(Hit, &Object)> = None;
    for o in &spec.objects {
        if let Some(h) = o.shape.intersect(d) {
            if nearest.is_none_or(|(n, _)| h.t < n.t) {
                nearest = Some((h, o));
            }
            if !o.transparent && opaque.is_none_or(|(n, _)| h.t < n.t) {
                opaque = Some((h, o));
            }
        }
    }
    let (behind_depth, behind_rgb) = match opaque {
        Some((h, o)) => (h.t, shade(o.color, h.normal)),
        None => (spec.background_depth, background_shade(spec, x, y)),
    };
    let to_bytes = |c: [f64; 3]| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    match nearest {
        Some((h, o)) if o.transparent => {
            let surface = shade(o.color, h.normal);
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                rgb[k] = TINT * surface[k] + (1.0 - TINT) * behind_rgb[k];
            }
            let raw = match o.corruption {
                Corruption::Drop => 0.0,
                Corruption::Background => behind_depth as f32,
            };
            Pixel {
                rgb: to_bytes(rgb),
                raw,
                gt: h.t as f32,
                masked: true,
            }
        }
        _ => Pixel {
            rgb: to_bytes(behind_rgb),
            raw: behind_depth as f32,
            gt: behind_depth as f32,
            masked: false,
        },
    }
}

pub fn render(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let pixels: Vec<Pixel> = (0..h * w)
        .into_par_iter()
        .map(|i| render_pixel(spec, i % w, i / w))
        .collect();
    let mut s = Sample {
        height: h,
        width: w,
        rgb: Vec::with_capacity(3 * h * w),
        depth_raw: Vec::with_capacity(h * w),
        depth_gt: Vec::with_capacity(h * w),
        mask: Vec::with_capacity(h * w),
    };
    for p in pixels {
        s.rgb.extend_from_slice(&p.rgb);
        s.depth_raw.push(p.raw);
        s.depth_gt.push(p.gt);
        s.mask.push(u8::from(p.masked));
    }
    Ok(s)
}

/// Draws a scene with 1–5 primitives, at least one of them transparent.
pub fn random_scene<R: Rng>(rng: &mut R, height: usize, width: usize) -> SceneSpec {
    let focal = height.max(width) as f64;
    let background_depth = rng.gen_range(2.0..3.0);
    let count = rng.gen_range(1..=5);
    let objects = (0..count)
        .map(|i| {
            let z = rng.gen_range(0.8..background_depth - 0.5);
            let u = rng.gen_range(0.15..0.85) * width as f64;
            let v = rng.gen_range(0.15..0.85) * height as f64;
            let center = [(u - width as f64 / 2.0) / focal * z, (v - height as f64 / 2.0) / focal * z, z];
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Sphere {
                    center,
                    radius: z * rng.gen_range(0.08..0.2),
                },
                1 => Shape::Cuboid {
                    center,
                    half: [
                        z * rng.gen_range(0.06..0.16),
                        z * rng.gen_range(0.06..0.16),
                        z * rng.gen_range(0.06..0.16),
                    ],
                },
                _ => Shape::Cylinder {
                    center,
                    radius: z * rng.gen_range(0.06..0.14),
                    half_height: z * rng.gen_range(0.1..0.25),
                },
            };
            Object {
                shape,
                color: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
                transparent: i == 0 || rng.gen_bool(0.4),
                corruption: if rng.gen_bool(0.5) {
                    Corruption::Drop
                } else {
                    Corruption::Background
                },
            }
        })
        .collect();
    SceneSpec {
        height,
        width,
        focal,
        background_depth,
        background_color: [rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9)],
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty(h: usize, w: usize) -> SceneSpec {
        SceneSpec {
            height: h,
            width: w,
            focal: w as f64,
            background_depth: 2.0,
            background_color: [0.5; 3],
            objects: vec![],
        }
    }

    fn sphere(transparent: bool, corruption: Corruption) -> Object {
        Object {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 1.0],
                radius: 0.2,
            },
            color: [0.9, 0.2, 0.2],
            transparent,
            corruption,
        }
    }

    #[test]
    fn empty_scene_is_the_background_plane() {
        let s = render(&empty(8, 10)).unwrap();
        assert!(s.mask.iter().all(|&m| m == 0));
        assert!(s.depth_gt.iter().all(|&d| d == 2.0));
        assert_eq!(s.depth_raw, s.depth_gt);
    }

    #[test]
    fn opaque_sphere_has_no_corruption() {
        let mut spec = empty(16, 16);
        spec.objects.push(sphere(false, Corruption::Drop));
        let s = render(&spec).unwrap();
        assert!(s.mask.iter().all(|&m| m == 0));
        assert_eq!(s.depth_raw, s.depth_gt);
        assert!(s.depth_gt.iter().any(|&d| d < 2.0));
    }

    #[test]
    fn transparent_sphere_reports_the_background() {
        let mut spec = empty(16, 16);
        spec.objects.push(sphere(true, Corruption::Background));
        let s = render(&spec).unwrap();
        let mut hits = 0;
        for y in 0..16 {
            for x in 0..16 {
                let i = y * 16 + x;
                // Independent ray–sphere solution: |t·d − c|² = r² with d_z = 1.
                let d = spec.ray(x, y);
                let (a, b, c) = (d[0] * d[0] + d[1] * d[1] + 1.0, 1.0, 1.0 - 0.04);
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    hits += 1;
                    let t = (b - disc.sqrt()) / a;
                    assert_eq!(s.mask[i], 1);
                    assert!((s.depth_gt[i] as f64 - t).abs() < 1e-6);
                    assert_eq!(s.depth_raw[i], 2.0);
                    assert!(s.depth_raw[i] > s.depth_gt[i]);
                } else {
                    assert_eq!(s.mask[i], 0);
                }
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn drop_mode_zeroes_the_mask() {
        let mut spec = empty(16, 16);
        spec.objects.push(sphere(true, Corruption::Drop));
        let s = render(&spec).unwrap();
        for i in 0..256 {
            assert_eq!(s.depth_raw[i] == 0.0, s.mask[i] == 1);
        }
    }

    #[test]
    fn transparent_in_front_of_opaque_reports_the_opaque_surface() {
        let mut spec = empty(16, 16);
        spec.objects.push(sphere(true, Corruption::Background));
        spec.objects.push(Object {
            shape: Shape::Cuboid {
                center: [0.0, 0.0, 1.5],
                half: [0.5, 0.5, 0.1],
            },
            color: [0.1, 0.8, 0.1],
            transparent: false,
            corruption: Corruption::Drop,
        });
        let s = render(&spec).unwrap();
        let centre = 8 * 16 + 8;
        assert_eq!(s.mask[centre], 1);
        assert!((s.depth_raw[centre] - 1.4).abs() < 1e-6);
    }

    #[test]
    fn box_and_cylinder_front_faces() {
        let d = [0.0, 0.0, 1.0];
        let cube = Shape::Cuboid {
            center: [0.0, 0.0, 1.0],
            half: [0.1, 0.1, 0.2],
        };
        let h = cube.intersect(d).unwrap();
        assert!((h.t - 0.8).abs() < 1e-12);
        assert_eq!(h.normal, [0.0, 0.0, -1.0]);
        let cyl = Shape::Cylinder {
            center: [0.0, 0.0, 1.0],
            radius: 0.25,
            half_height: 0.3,
        };
        assert!((cyl.intersect(d).unwrap().t - 0.75).abs() < 1e-12);
        // A ray passing above the cylinder misses it.
        assert!(cyl.intersect([0.0, -0.5, 1.0]).is_none());
    }

    #[test]
    fn degenerate_and_misplaced_objects_are_rejected() {
        let mut spec = empty(4, 4);
        spec.objects.push(Object {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 1.0],
                radius: 0.0,
            },
            ..sphere(false, Corruption::Drop)
        });
        assert!(render(&spec).is_err());
        spec.objects[0].shape = Shape::Sphere {
            center: [0.0, 0.0, 1.95],
            radius: 0.1,
        };
        assert!(render(&spec).is_err());
    }
}
