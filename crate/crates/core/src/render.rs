//! Software rasterizer for the 64×64 wrist-camera view.
//!
//! Every sphere of the plant is drawn as a flat disk. Projection runs in
//! `f32`; disk centres and radii are snapped with round-half-away-from-zero
//! and coverage is decided in integer arithmetic, so frames are byte-exact
//! across runs.

use std::io::Write;

use crate::arm::CameraPose;
use crate::scene::PlantModel;

pub const IMAGE_SIZE: usize = 64;
pub const FRAME_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * 3;
pub const IMAGE_CENTER: f64 = (IMAGE_SIZE / 2) as f64;

/// A 64×64 RGB8 observation, row-major, background white.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame(Box<[u8; FRAME_BYTES]>);

impl Frame {
    pub fn white() -> Self {
        Frame(Box::new([255; FRAME_BYTES]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let arr: [u8; FRAME_BYTES] = bytes.try_into().ok()?;
        Some(Frame(Box::new(arr)))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0[..]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * IMAGE_SIZE + x) * 3;
        [self.0[i], self.0[i + 1], self.0[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * IMAGE_SIZE + x) * 3;
        self.0[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_blank(&self) -> bool {
        self.0.iter().all(|&b| b == 255)
    }

    /// Binary PPM (P6) encoding.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", IMAGE_SIZE, IMAGE_SIZE)?;
        w.write_all(self.as_bytes())
    }
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let covered = self.0.chunks(3).filter(|p| p != &[255, 255, 255]).count();
        write!(f, "Frame({covered} covered px)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub hfov: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            hfov: 1.2,
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            near: 0.01,
        }
    }
}

impl CameraIntrinsics {
    /// Focal length in pixels: `(width / 2) / tan(hfov / 2)`.
    pub fn focal_px(&self) -> f32 {
        ((self.width as f64 / 2.0) / (self.hfov / 2.0).tan()) as f32
    }
}

/// Round half away from zero.
pub fn round_half_away(x: f32) -> i32 {
    if x >= 0.0 {
        (x + 0.5).floor() as i32
    } else {
        -((-x + 0.5).floor() as i32)
    }
}

/// Projection of one point: pixel coordinates and camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f32,
    pub v: f32,
    pub depth: f32,
}

/// f32 snapshot of a camera pose, shared by all projections of one frame.
struct Camera {
    pos: [f32; 3],
    rot: [[f32; 3]; 3],
    focal: f32,
    half_w: f32,
    half_h: f32,
    near: f32,
}

impl Camera {
    fn new(pose: &CameraPose, intr: &CameraIntrinsics) -> Self {
        let mut rot = [[0f32; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = pose.orientation[i][j] as f32;
            }
        }
        Camera {
            pos: pose.position.map(|v| v as f32),
            rot,
            focal: intr.focal_px(),
            half_w: (intr.width / 2) as f32,
            half_h: (intr.height / 2) as f32,
            near: intr.near as f32,
        }
    }

    fn project(&self, p: [f32; 3]) -> Option<Projected> {
        let d = [p[0] - self.pos[0], p[1] - self.pos[1], p[2] - self.pos[2]];
        let r = &self.rot;
        let fwd = r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2];
        if fwd <= self.near {
            return None;
        }
        let left = r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2];
        let up = r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2];
        Some(Projected {
            u: self.half_w - self.focal * left / fwd,
            v: self.half_h - self.focal * up / fwd,
            depth: fwd,
        })
    }

    fn in_bounds(&self, p: &Projected) -> bool {
        p.u >= 0.0 && p.u < 2.0 * self.half_w && p.v >= 0.0 && p.v < 2.0 * self.half_h
    }
}

/// Projects `point` with the renderer's camera model; `None` when it lies
/// behind the near plane.
pub fn project_point(pose: &CameraPose, intr: &CameraIntrinsics, point: [f64; 3]) -> Option<Projected> {
    Camera::new(pose, intr).project(point.map(|v| v as f32))
}

/// Depth cue: `clamp(1 - 0.8 (depth - 0.2), 0.5, 1)`.
pub fn depth_shade(depth: f32) -> f32 {
    (1.0 - 0.8 * (depth - 0.2)).clamp(0.5, 1.0)
}

pub fn render(plant: &PlantModel, pose: &CameraPose, intr: &CameraIntrinsics) -> Frame {
    let cam = Camera::new(pose, intr);
    let w = intr.width as i32;
    let h = intr.height as i32;

    let mut disks: Vec<(f32, usize, Projected)> = plant
        .spheres
        .iter()
        .enumerate()
        .filter_map(|(i, s)| cam.project(s.center.map(|v| v as f32)).map(|p| (p.depth, i, p)))
        .collect();
    // Painter's order: farthest first, ties by sphere index.
    disks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut frame = Frame::white();
    for (depth, idx, p) in disks {
        let sphere = &plant.spheres[idx];
        let radius = round_half_away(cam.focal * sphere.radius as f32 / depth).max(1);
        let cx = round_half_away(p.u);
        let cy = round_half_away(p.v);
        // Pixel (x, y) has its centre at (x + 0.5, y + 0.5); the disk centre
        // is the grid corner (cx, cy). Compare doubled offsets to stay integral.
        let x0 = (cx - radius).max(0);
        let x1 = (cx + radius).min(w);
        let y0 = (cy - radius).max(0);
        let y1 = (cy + radius).min(h);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let shade = depth_shade(depth);
        let rgb = sphere.color.map(|c| round_half_away(c as f32 * shade).clamp(0, 255) as u8);
        let r2 = 4 * radius * radius;
        for y in y0..y1 {
            let dy = 2 * (y - cy) + 1;
            for x in x0..x1 {
                let dx = 2 * (x - cx) + 1;
                if dx * dx + dy * dy <= r2 {
                    frame.put(x as usize, y as usize, rgb);
                }
            }
        }
    }
    frame
}

/// Fraction of sphere centres that project inside the image.
pub fn visible_fraction(plant: &PlantModel, pose: &CameraPose, intr: &CameraIntrinsics) -> f64 {
    if plant.spheres.is_empty() {
        return 0.0;
    }
    let cam = Camera::new(pose, intr);
    let inside = plant
        .spheres
        .iter()
        .filter_map(|s| cam.project(s.center.map(|v| v as f32)))
        .filter(|p| cam.in_bounds(p))
        .count();
    inside as f64 / plant.spheres.len() as f64
}

/// Mean pixel position of the sphere centres that land inside the image.
pub fn plant_centroid_px(plant: &PlantModel, pose: &CameraPose, intr: &CameraIntrinsics) -> Option<(f64, f64)> {
    let cam = Camera::new(pose, intr);
    let mut n = 0usize;
    let (mut su, mut sv) = (0f32, 0f32);
    for p in plant
        .spheres
        .iter()
        .filter_map(|s| cam.project(s.center.map(|v| v as f32)))
        .filter(|p| cam.in_bounds(p))
    {
        su += p.u;
        sv += p.v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(((su / n as f32) as f64, (sv / n as f32) as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{forward_kinematics, ArmGeometry, JointConfig, IDENTITY};
    use crate::scene::{PlantModel, Sphere};

    fn origin_pose() -> CameraPose {
        CameraPose {
            position: [0.0, 0.0, 0.0],
            orientation: IDENTITY,
        }
    }

    fn single(center: [f64; 3], radius: f64) -> PlantModel {
        PlantModel {
            spheres: vec![Sphere {
                center,
                radius,
                color: [40, 160, 30],
            }],
            anchor: center,
            seed: 0,
        }
    }

    fn covered(frame: &Frame) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if frame.pixel(x, y) != [255, 255, 255] {
                    v.push((x, y));
                }
            }
        }
        v
    }

    #[test]
    fn plant_behind_camera_renders_white() {
        let plant = single([-0.3, 0.0, 0.0], 0.02);
        let frame = render(&plant, &origin_pose(), &CameraIntrinsics::default());
        assert!(frame.is_blank());
        assert_eq!(visible_fraction(&plant, &origin_pose(), &CameraIntrinsics::default()), 0.0);
        assert_eq!(plant_centroid_px(&plant, &origin_pose(), &CameraIntrinsics::default()), None);
    }

    #[test]
    fn on_axis_sphere_radius_matches_pinhole() {
        // ρ = 0.02 at r = 0.2: 32 · 0.02 / (0.2 · tan 0.6) = 4.6777… → 5 px.
        let expected = (32.0 * 0.02 / (0.2 * 0.6f64.tan())).round() as i32;
        assert_eq!(expected, 5);
        let frame = render(&single([0.2, 0.0, 0.0], 0.02), &origin_pose(), &CameraIntrinsics::default());
        let px = covered(&frame);
        let xs: Vec<usize> = px.iter().filter(|p| p.1 == 32).map(|p| p.0).collect();
        // Disk centred on the corner (32, 32): spans columns 27..=36 on row 32.
        assert_eq!(xs.first(), Some(&27));
        assert_eq!(xs.last(), Some(&36));
        // Symmetric about the image centre.
        for &(x, y) in &px {
            assert!(px.contains(&(63 - x, y)));
            assert!(px.contains(&(x, 63 - y)));
        }
    }

    #[test]
    fn halving_range_doubles_radius() {
        let intr = CameraIntrinsics::default();
        let width = |range: f64| {
            let f = render(&single([range, 0.0, 0.0], 0.01), &origin_pose(), &intr);
            covered(&f).iter().filter(|p| p.1 == 32).count() as i32
        };
        let far = width(0.4);
        let near = width(0.2);
        // Widths are 2R; allow one pixel of rounding on the radius.
        assert!((near - 2 * far).abs() <= 2, "near {near} far {far}");
    }

    #[test]
    fn single_sphere_centroid() {
        let intr = CameraIntrinsics::default();
        let f = intr.focal_px() as f64;
        // Place the centre so that it projects to (10, 50).
        let depth = 0.3;
        let left = (32.0 - 10.0) * depth / f;
        let up = (32.0 - 50.0) * depth / f;
        let plant = single([depth, left, up], 0.01);
        let (u, v) = plant_centroid_px(&plant, &origin_pose(), &intr).unwrap();
        assert!((u - 10.0).abs() < 1e-4 && (v - 50.0).abs() < 1e-4, "{u} {v}");
    }

    #[test]
    fn render_is_deterministic_and_background_pure() {
        let g = ArmGeometry::default();
        let pose = forward_kinematics(&g, &JointConfig::HOME).unwrap();
        let scene = crate::scene::make_training_scene(crate::scene::Side::Left, 5).unwrap();
        let plant = crate::scene::grow_plant(&scene);
        let a = render(&plant, &pose, &CameraIntrinsics::default());
        let b = render(&plant, &pose, &CameraIntrinsics::default());
        assert_eq!(a, b);
        for px in a.as_bytes().chunks(3) {
            // Plant colours are green-dominant, so any non-plant pixel must be white.
            let white = px == [255, 255, 255];
            let green = px[1] > px[0] && px[1] > px[2];
            assert!(white || green);
        }
    }

    #[test]
    fn nearer_sphere_paints_over_farther() {
        let mut plant = single([0.4, 0.0, 0.0], 0.02);
        plant.spheres.push(Sphere {
            center: [0.2, 0.0, 0.0],
            radius: 0.005,
            color: [10, 250, 10],
        });
        let frame = render(&plant, &origin_pose(), &CameraIntrinsics::default());
        assert_eq!(frame.pixel(32, 32), [10, 250, 10]);
    }

    #[test]
    fn shade_bounds() {
        assert_eq!(depth_shade(0.0), 1.0);
        assert_eq!(depth_shade(0.2), 1.0);
        assert!((depth_shade(0.45) - 0.8).abs() < 1e-6);
        assert_eq!(depth_shade(5.0), 0.5);
    }

    #[test]
    fn round_half_away_from_zero() {
        assert_eq!(round_half_away(2.5), 3);
        assert_eq!(round_half_away(-2.5), -3);
        assert_eq!(round_half_away(2.49), 2);
        assert_eq!(round_half_away(-0.4), 0);
    }

    #[test]
    fn ppm_header() {
        let mut out = Vec::new();
        Frame::white().write_ppm(&mut out).unwrap();
        assert!(out.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(out.len(), 13 + FRAME_BYTES);
    }
}
