//! Phong-model scene renderer with known reflectance/shading ground truth.
//!
//! Orthographic camera looking along `-viewer`, directional lights only.
//! Each pixel is shaded as
//!
//! ```text
//! I_c = r_c·a_c + Σ_n ( k_d·r_c·max(L̂·N̂, 0)·d_c + k_s·s_c·max(R̂·V̂, 0)^γ·p_c )
//! ```
//!
//! where `a_c = k_a·i_a` is the pre-multiplied ambient term, `d_c` and `p_c` are
//! the light's diffuse and specular intensities and `R̂` is `L̂` mirrored about
//! the normal. [`render_lambertian`] restricts this to one light without
//! ambient or specular terms, where the image factors exactly as
//! `reflectance ⊙ shading`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub type Vec3 = [f64; 3];

const UNIT_TOL: f64 = 1e-9;

pub const DEFAULT_RESOLUTION: (usize, usize) = (128, 128);

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Unit vector tilted `tilt_deg` away from +z towards azimuth `azimuth_deg`.
pub fn direction_from_angles(tilt_deg: f64, azimuth_deg: f64) -> Vec3 {
    let (t, a) = (tilt_deg.to_radians(), azimuth_deg.to_radians());
    [t.sin() * a.cos(), t.sin() * a.sin(), t.cos()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Geometry {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Points `p` with `normal · p = offset`. Rendered two-sided.
    Plane {
        normal: Vec3,
        offset: f64,
    },
    /// Parallelogram `center + a·u_axis + b·v_axis`, `|a|, |b| ≤ 1`, whose
    /// albedo is looked up nearest-neighbour in `texture` (`v` points up).
    TexturedQuad {
        center: Vec3,
        u_axis: Vec3,
        v_axis: Vec3,
        texture: ImageTensor,
    },
}

/// Diffuse spectral reflectance `r(λ_c)` of an object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Reflectance {
    Uniform { rgb: Vec3 },
    /// Two constant albedos split by the plane through the object's centre
    /// (origin for planes) with normal `axis`.
    Split { axis: Vec3, positive: Vec3, negative: Vec3 },
}

impl Reflectance {
    fn at(&self, local: Vec3) -> Vec3 {
        match self {
            Reflectance::Uniform { rgb } => *rgb,
            Reflectance::Split {
                axis,
                positive,
                negative,
            } => {
                if dot(local, *axis) >= 0.0 {
                    *positive
                } else {
                    *negative
                }
            }
        }
    }

    fn values(&self) -> Vec<Vec3> {
        match self {
            Reflectance::Uniform { rgb } => vec![*rgb],
            Reflectance::Split {
                positive, negative, ..
            } => vec![*positive, *negative],
        }
    }
}

fn white() -> Vec3 {
    [1.0; 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub geometry: Geometry,
    pub reflectance: Reflectance,
    /// Specular reflectance `s(λ_c)`.
    #[serde(default = "white")]
    pub specular_reflectance: Vec3,
}

impl SceneObject {
    pub fn new(geometry: Geometry, reflectance: Reflectance) -> Self {
        Self {
            geometry,
            reflectance,
            specular_reflectance: white(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector from the surface towards the light.
    pub direction: Vec3,
    pub diffuse: Vec3,
    #[serde(default)]
    pub specular: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    pub k_s: f64,
    pub shininess: f64,
}

fn default_viewer() -> Vec3 {
    [0.0, 0.0, 1.0]
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub lights: Vec<Light>,
    /// Pre-multiplied ambient term `k_a·i_a(λ_c)`.
    #[serde(default)]
    pub ambient: Vec3,
    /// Unit vector pointing from the scene towards the viewer.
    #[serde(default = "default_viewer")]
    pub viewer: Vec3,
    #[serde(default = "one")]
    pub k_d: f64,
    #[serde(default)]
    pub specular: Option<Specular>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: Vec3, what: &str| -> Result<()> {
            if (norm(v) - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("{what} must be unit length, |v| = {}", norm(v))));
            }
            Ok(())
        };
        let nonneg = |v: Vec3, what: &str| -> Result<()> {
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::invalid(format!("{what} must be non-negative, got {v:?}")));
            }
            Ok(())
        };
        unit(self.viewer, "viewer direction")?;
        nonneg(self.ambient, "ambient")?;
        if !(self.k_d >= 0.0) {
            return Err(Error::invalid("k_d must be non-negative"));
        }
        if let Some(s) = self.specular {
            if !(s.k_s >= 0.0 && s.shininess >= 0.0) {
                return Err(Error::invalid("specular coefficients must be non-negative"));
            }
        }
        for l in &self.lights {
            unit(l.direction, "light direction")?;
            nonneg(l.diffuse, "light diffuse intensity")?;
            nonneg(l.specular, "light specular intensity")?;
        }
        for o in &self.objects {
            for r in o.reflectance.values() {
                nonneg(r, "reflectance")?;
            }
            nonneg(o.specular_reflectance, "specular reflectance")?;
            match &o.geometry {
                Geometry::Sphere { radius, .. } => {
                    if !(*radius > 0.0) {
                        return Err(Error::invalid(format!("degenerate sphere radius {radius}")));
                    }
                }
                Geometry::Plane { normal, .. } => unit(*normal, "plane normal")?,
                Geometry::TexturedQuad {
                    u_axis,
                    v_axis,
                    texture,
                    ..
                } => {
                    let n = norm(cross(*u_axis, *v_axis));
                    if !(n > 1e-12) {
                        return Err(Error::invalid("degenerate quad axes"));
                    }
                    if texture.channels() != 3 || texture.pixel_count() == 0 {
                        return Err(Error::invalid("quad texture must be a non-empty RGB image"));
                    }
                    if texture.data().iter().any(|v| !(*v >= 0.0)) {
                        return Err(Error::invalid("quad texture must be non-negative"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rendered image with its exact reflectance and shading factors.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderTriple {
    pub image: ImageTensor,
    pub reflectance: ImageTensor,
    pub shading: ImageTensor,
}

struct Hit {
    normal: Vec3,
    albedo: Vec3,
    specular_reflectance: Vec3,
}

struct Camera {
    right: Vec3,
    up: Vec3,
    back: Vec3,
    height: usize,
    width: usize,
    pixel: f64,
}

const CAMERA_DISTANCE: f64 = 1e3;

impl Camera {
    fn new(viewer: Vec3, (height, width): (usize, usize)) -> Self {
        let hint = if viewer[1].abs() > 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let right = normalize(cross(hint, viewer));
        let up = cross(viewer, right);
        Self {
            right,
            up,
            back: viewer,
            height,
            width,
            pixel: 2.0 / height.min(width) as f64,
        }
    }

    /// Ray origin for a pixel centre; rays travel along `-back`.
    fn origin(&self, row: usize, col: usize) -> Vec3 {
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) * self.pixel;
        let y = (self.height as f64 / 2.0 - row as f64 - 0.5) * self.pixel;
        add(
            add(scale(self.right, x), scale(self.up, y)),
            scale(self.back, CAMERA_DISTANCE),
        )
    }
}

fn intersect(obj: &SceneObject, o: Vec3, d: Vec3) -> Option<(f64, Hit)> {
    let facing = |n: Vec3| if dot(n, d) > 0.0 { scale(n, -1.0) } else { n };
    match &obj.geometry {
        Geometry::Sphere { center, radius } => {
            let oc = sub(o, *center);
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 0.0 {
                return None;
            }
            let p = add(o, scale(d, t));
            let local = sub(p, *center);
            Some((
                t,
                Hit {
                    normal: scale(local, 1.0 / radius),
                    albedo: obj.reflectance.at(local),
                    specular_reflectance: obj.specular_reflectance,
                },
            ))
        }
        Geometry::Plane { normal, offset } => {
            let denom = dot(*normal, d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (offset - dot(*normal, o)) / denom;
            if t <= 0.0 {
                return None;
            }
            let p = add(o, scale(d, t));
            Some((
                t,
                Hit {
                    normal: facing(*normal),
                    albedo: obj.reflectance.at(p),
                    specular_reflectance: obj.specular_reflectance,
                },
            ))
        }
        Geometry::TexturedQuad {
            center,
            u_axis,
            v_axis,
            texture,
        } => {
            let n = normalize(cross(*u_axis, *v_axis));
            let denom = dot(n, d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = dot(n, sub(*center, o)) / denom;
            if t <= 0.0 {
                return None;
            }
            let local = sub(add(o, scale(d, t)), *center);
            let a = dot(local, *u_axis) / dot(*u_axis, *u_axis);
            let b = dot(local, *v_axis) / dot(*v_axis, *v_axis);
            if a.abs() > 1.0 || b.abs() > 1.0 {
                return None;
            }
            let (th, tw) = (texture.height(), texture.width());
            let col = (((a + 1.0) / 2.0 * tw as f64).floor() as usize).min(tw - 1);
            let row = (((1.0 - b) / 2.0 * th as f64).floor() as usize).min(th - 1);
            let tex = texture.pixel(row, col);
            let tint = obj.reflectance.at(local);
            Some((
                t,
                Hit {
                    normal: facing(n),
                    albedo: [tex[0] * tint[0], tex[1] * tint[1], tex[2] * tint[2]],
                    specular_reflectance: obj.specular_reflectance,
                },
            ))
        }
    }
}

fn trace(scene: &Scene, o: Vec3, d: Vec3) -> Option<Hit> {
    scene
        .objects
        .iter()
        .filter_map(|obj| intersect(obj, o, d))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, h)| h)
}

fn check_resolution((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("resolution must be positive, got {h}x{w}")));
    }
    Ok(())
}

/// Full ambient + diffuse + specular render, clamped to `[0, 1]`.
pub fn render_full(scene: &Scene, resolution: (usize, usize)) -> Result<ImageTensor> {
    scene.validate()?;
    check_resolution(resolution)?;
    let cam = Camera::new(scene.viewer, resolution);
    let dir = scale(scene.viewer, -1.0);
    let mut img = ImageTensor::zeros(resolution.0, resolution.1, 3);
    for row in 0..resolution.0 {
        for col in 0..resolution.1 {
            let Some(hit) = trace(scene, cam.origin(row, col), dir) else {
                continue;
            };
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = hit.albedo[c] * scene.ambient[c];
            }
            for light in &scene.lights {
                let ln = dot(light.direction, hit.normal);
                if ln <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    px[c] += scene.k_d * hit.albedo[c] * ln * light.diffuse[c];
                }
                if let Some(spec) = scene.specular {
                    let refl = sub(scale(hit.normal, 2.0 * ln), light.direction);
                    let rv = dot(refl, scene.viewer).max(0.0).powf(spec.shininess);
                    for c in 0..3 {
                        px[c] += spec.k_s * hit.specular_reflectance[c] * rv * light.specular[c];
                    }
                }
            }
            for c in 0..3 {
                img.set(row, col, c, px[c].clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// Single-light diffuse render returning `(image, reflectance, shading)` with
/// `image = reflectance ⊙ shading` exactly. Background pixels are zero in all
/// three outputs.
///
/// Requires exactly one light with equal diffuse intensity in every channel,
/// no ambient or specular term, and `k_d·i_d ≤ 1`.
pub fn render_lambertian(scene: &Scene, resolution: (usize, usize)) -> Result<RenderTriple> {
    scene.validate()?;
    check_resolution(resolution)?;
    let [light] = scene.lights.as_slice() else {
        return Err(Error::invalid(format!(
            "lambertian render needs exactly one light, got {}",
            scene.lights.len()
        )));
    };
    if scene.ambient != [0.0; 3] {
        return Err(Error::invalid("lambertian render needs zero ambient light"));
    }
    if scene.specular.is_some_and(|s| s.k_s != 0.0) {
        return Err(Error::invalid("lambertian render needs the specular term disabled"));
    }
    let id = light.diffuse[0];
    if light.diffuse.iter().any(|&v| v != id) {
        return Err(Error::invalid("lambertian render needs equal diffuse intensity per channel"));
    }
    if scene.k_d * id > 1.0 {
        return Err(Error::invalid("k_d · i_d must not exceed 1"));
    }
    let cam = Camera::new(scene.viewer, resolution);
    let dir = scale(scene.viewer, -1.0);
    let (h, w) = resolution;
    let mut image = ImageTensor::zeros(h, w, 3);
    let mut reflectance = ImageTensor::zeros(h, w, 3);
    let mut shading = ImageTensor::zeros(h, w, 1);
    for row in 0..h {
        for col in 0..w {
            let Some(hit) = trace(scene, cam.origin(row, col), dir) else {
                continue;
            };
            let s = scene.k_d * dot(light.direction, hit.normal).max(0.0) * id;
            shading.set(row, col, 0, s);
            for c in 0..3 {
                reflectance.set(row, col, c, hit.albedo[c]);
                image.set(row, col, c, hit.albedo[c] * s);
            }
        }
    }
    Ok(RenderTriple {
        image,
        reflectance,
        shading,
    })
}

pub const SUITE_NAMES: [&str; 4] = ["single-sphere", "two-tone-sphere", "textured-quad", "multi-sphere"];

fn random_colour(rng: &mut ChaCha8Rng) -> Vec3 {
    // saturated-ish albedo: one strong channel, the others weaker
    let strong = rng.random_range(0..3);
    let mut c = [0.0; 3];
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == strong {
            rng.random_range(0.7..0.95)
        } else {
            rng.random_range(0.15..0.6)
        };
    }
    c
}

fn random_light(rng: &mut ChaCha8Rng, max_tilt: f64) -> Light {
    let tilt = rng.random_range(0.0..max_tilt);
    let azimuth = rng.random_range(0.0..360.0);
    let id = rng.random_range(0.8..1.0);
    Light {
        direction: direction_from_angles(tilt, azimuth),
        diffuse: [id; 3],
        specular: [0.0; 3],
    }
}

fn lambertian_scene(objects: Vec<SceneObject>, light: Light) -> Scene {
    Scene {
        objects,
        lights: vec![light],
        ambient: [0.0; 3],
        viewer: default_viewer(),
        k_d: 1.0,
        specular: None,
    }
}

fn backdrop(rng: &mut ChaCha8Rng) -> SceneObject {
    let grey = rng.random_range(0.45..0.7);
    SceneObject::new(
        Geometry::Plane {
            normal: [0.0, 0.0, 1.0],
            offset: -1.0,
        },
        Reflectance::Uniform {
            rgb: [grey, grey * rng.random_range(0.85..1.0), grey * rng.random_range(0.85..1.0)],
        },
    )
}

/// Builds one named suite scene. Every scene is a single-light Lambertian
/// scene that [`render_lambertian`] accepts.
///
/// * `single-sphere`: one uniformly coloured sphere (radius 0.75) on black;
///   light tilted 0–35° from the view axis at a random azimuth.
/// * `two-tone-sphere`: sphere of radius 0.8 split into two constant albedos
///   of different chromaticity by a plane through its centre; light tilted
///   0–25°. Seed 0 splits along the vertical plane `x = 0`.
/// * `textured-quad`: a quad tilted up to 30° carrying an 8×8 grid of random
///   colour tiles over a grey backdrop; light tilted 0–35°.
/// * `multi-sphere`: three spheres of random colour in front of a grey
///   backdrop plane at `z = -1`; light tilted 0–35°.
pub fn suite_scene(name: &str, seed: u64) -> Option<Scene> {
    let idx = SUITE_NAMES.iter().position(|n| *n == name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ idx as u64);
    let scene = match idx {
        0 => {
            let light = random_light(&mut rng, 35.0);
            lambertian_scene(
                vec![SceneObject::new(
                    Geometry::Sphere {
                        center: [0.0, 0.0, 0.0],
                        radius: 0.75,
                    },
                    Reflectance::Uniform {
                        rgb: random_colour(&mut rng),
                    },
                )],
                light,
            )
        }
        1 => {
            let light = random_light(&mut rng, 25.0);
            let axis = if seed == 0 {
                [1.0, 0.0, 0.0]
            } else {
                direction_from_angles(90.0, rng.random_range(0.0..180.0))
            };
            let positive = random_colour(&mut rng);
            // rotate the dominant channel so the two halves differ in chromaticity
            let negative = [positive[2], positive[0], positive[1]];
            lambertian_scene(
                vec![SceneObject::new(
                    Geometry::Sphere {
                        center: [0.0, 0.0, 0.0],
                        radius: 0.8,
                    },
                    Reflectance::Split {
                        axis,
                        positive,
                        negative,
                    },
                )],
                light,
            )
        }
        2 => {
            let light = random_light(&mut rng, 35.0);
            let tiles = 8;
            let colours: Vec<Vec3> = (0..tiles * tiles).map(|_| random_colour(&mut rng)).collect();
            let texture = ImageTensor::from_fn(64, 64, 3, |r, c, ch| {
                colours[(r / 8) * tiles + c / 8][ch]
            });
            let tilt = rng.random_range(0.0f64..30.0).to_radians();
            let u_axis = scale([tilt.cos(), 0.0, -tilt.sin()], 0.75);
            let v_axis = [0.0, 0.75, 0.0];
            let back = backdrop(&mut rng);
            lambertian_scene(
                vec![
                    SceneObject::new(
                        Geometry::TexturedQuad {
                            center: [0.0, 0.0, 0.0],
                            u_axis,
                            v_axis,
                            texture,
                        },
                        Reflectance::Uniform { rgb: white() },
                    ),
                    back,
                ],
                light,
            )
        }
        _ => {
            let light = random_light(&mut rng, 35.0);
            let mut objects = Vec::new();
            let anchors = [[-0.45, 0.35], [0.45, 0.3], [0.0, -0.4]];
            for a in anchors {
                let radius = rng.random_range(0.3..0.45);
                let center = [
                    a[0] + rng.random_range(-0.08..0.08),
                    a[1] + rng.random_range(-0.08..0.08),
                    rng.random_range(-0.3..0.2),
                ];
                objects.push(SceneObject::new(
                    Geometry::Sphere { center, radius },
                    Reflectance::Uniform {
                        rgb: random_colour(&mut rng),
                    },
                ));
            }
            objects.push(backdrop(&mut rng));
            lambertian_scene(objects, light)
        }
    };
    Some(scene)
}

/// The deterministic scene catalogue for a seed.
pub fn make_test_suite(seed: u64) -> Vec<(String, Scene)> {
    SUITE_NAMES
        .iter()
        .map(|n| (n.to_string(), suite_scene(n, seed).expect("known name")))
        .collect()
}
