//! Blender-format scenes: loading, average-pool downscaling, frame subsets,
//! and a small procedural scene writer in the same format.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::renderer::{Camera, Image, Pose, Ray};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub file: PathBuf,
    pub pose: Pose,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub camera_angle_x: f64,
    pub width: usize,
    pub height: usize,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    #[serde(default)]
    rotation: f64,
    transform_matrix: Vec<Vec<f64>>,
}

fn load_err(path: &Path, e: impl ToString) -> Error {
    Error::Load { path: path.to_path_buf(), message: e.to_string() }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: msg.into() }
}

/// Checks that `m` is 4x4 with an orthonormal rotation block.
pub fn parse_pose(path: &Path, m: &[Vec<f64>]) -> Result<Pose> {
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err(format_err(path, "transform_matrix must be 4x4"));
    }
    let mut pose = [[0.0; 4]; 4];
    for (r, row) in m.iter().enumerate() {
        pose[r].copy_from_slice(row);
    }
    for a in 0..3 {
        for b in 0..3 {
            let dot: f64 = (0..3).map(|k| pose[k][a] * pose[k][b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-4 {
                return Err(format_err(path, "transform_matrix rotation block is not orthonormal"));
            }
        }
    }
    Ok(pose)
}

/// Decodes an 8- or 16-bit PNG, composites alpha over white, returns floats in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| load_err(path, e))?.into_rgba32f();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        let a = f64::from(px[3]).clamp(0.0, 1.0);
        for k in 0..3 {
            let c = f64::from(px[k]).clamp(0.0, 1.0);
            data.push(c * a + (1.0 - a));
        }
    }
    Image::new(w as usize, h as usize, data)
}

fn load_split(dir: &Path, split: &str) -> Result<(f64, Vec<Frame>)> {
    let path = dir.join(format!("transforms_{split}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| load_err(&path, e))?;
    let parsed: TransformsFile = serde_json::from_str(&text).map_err(|e| load_err(&path, e))?;
    let mut frames = Vec::with_capacity(parsed.frames.len());
    for entry in &parsed.frames {
        let pose = parse_pose(&path, &entry.transform_matrix)?;
        let mut file = dir.join(entry.file_path.trim_start_matches("./"));
        if file.extension().is_none() {
            file.set_extension("png");
        }
        let image = load_image(&file)?;
        frames.push(Frame { file, pose, image });
    }
    Ok((parsed.camera_angle_x, frames))
}

/// Reads `transforms_train.json`, `transforms_test.json` and their images.
pub fn load_blender(dir: &Path) -> Result<SceneDataset> {
    let (angle, train) = load_split(dir, "train")?;
    let (test_angle, test) = load_split(dir, "test")?;
    if (angle - test_angle).abs() > 1e-9 {
        return Err(format_err(dir, "train and test splits disagree on camera_angle_x"));
    }
    let first = train.first().or(test.first()).ok_or_else(|| format_err(dir, "scene has no frames"))?;
    let (width, height) = (first.image.width, first.image.height);
    if train.iter().chain(&test).any(|f| (f.image.width, f.image.height) != (width, height)) {
        return Err(format_err(dir, "frames have different image sizes"));
    }
    Ok(SceneDataset { camera_angle_x: angle, width, height, train, test })
}

/// Each output pixel is the mean of a `k x k` block.
pub fn downscale_avg(img: &Image, k: usize) -> Result<Image> {
    if k == 0 || img.width % k != 0 || img.height % k != 0 {
        return invalid(format!("factor {k} does not divide {}x{}", img.width, img.height));
    }
    let (w, h) = (img.width / k, img.height / k);
    let mut out = Image::filled(w, h, 0.0);
    let norm = (k * k) as f64;
    for j in 0..h {
        for i in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..k {
                for dx in 0..k {
                    let p = img.pixel(i * k + dx, j * k + dy);
                    acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                }
            }
            out.set_pixel(i, j, acc.map(|a| a / norm));
        }
    }
    Ok(out)
}

/// Deterministic pick of `count` indices out of `total` (all when `count >= total`).
pub fn select_frames(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    if count >= total {
        return idx;
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(count);
    idx
}

impl SceneDataset {
    pub fn downscale(&self, k: usize) -> Result<Self> {
        let pool = |frames: &[Frame]| -> Result<Vec<Frame>> {
            frames
                .iter()
                .map(|f| Ok(Frame { file: f.file.clone(), pose: f.pose, image: downscale_avg(&f.image, k)? }))
                .collect()
        };
        Ok(Self {
            camera_angle_x: self.camera_angle_x,
            width: self.width / k.max(1),
            height: self.height / k.max(1),
            train: pool(&self.train)?,
            test: pool(&self.test)?,
        })
    }

    /// Keeps a seeded subset of each split, in the order drawn.
    pub fn subset(&self, n_train: usize, n_test: usize, seed: u64) -> Self {
        let pick = |frames: &[Frame], n: usize, s: u64| -> Vec<Frame> {
            select_frames(frames.len(), n, s).into_iter().map(|i| frames[i].clone()).collect()
        };
        Self {
            camera_angle_x: self.camera_angle_x,
            width: self.width,
            height: self.height,
            train: pick(&self.train, n_train, seed),
            test: pick(&self.test, n_test, seed ^ 0x5eed),
        }
    }

    pub fn camera(&self, frame: &Frame) -> Result<Camera> {
        Camera::new(self.width, self.height, self.camera_angle_x, frame.pose)
    }
}

/// Every pixel of a frame set as `(ray, colour)` pairs, frame-major.
pub fn pixel_rays(data: &SceneDataset, frames: &[Frame]) -> Result<(Vec<Ray>, Vec<[f64; 3]>)> {
    let mut rays = Vec::new();
    let mut colors = Vec::new();
    for f in frames {
        let cam = data.camera(f)?;
        for j in 0..data.height {
            for i in 0..data.width {
                rays.push(cam.pixel_ray(i, j));
                colors.push(f.image.pixel(i, j));
            }
        }
    }
    Ok((rays, colors))
}

pub mod synthetic {
    //! Procedural scenes written in the Blender transforms format: a few
    //! coloured boxes on a plate, Lambert-shaded, transparent background.

    use super::*;
    use rand::Rng;

    /// Field of view of the Blender synthetic cameras.
    pub const CAMERA_ANGLE_X: f64 = 0.691_111_207_008_361_8;
    pub const CAMERA_RADIUS: f64 = 4.031_128_874_149_275;

    #[derive(Clone, Copy, Debug)]
    pub struct Cuboid {
        pub min: [f64; 3],
        pub max: [f64; 3],
        pub color: [f64; 3],
    }

    /// A brick-built toy: yellow base plate, red and grey blocks, a dark arm.
    pub fn toy_scene() -> Vec<Cuboid> {
        let b = |min: [f64; 3], max: [f64; 3], color: [f64; 3]| Cuboid { min, max, color };
        vec![
            b([-1.1, -0.8, -0.6], [1.1, 0.8, -0.45], [0.95, 0.78, 0.1]),
            b([-0.9, -0.6, -0.45], [-0.1, 0.6, 0.15], [0.8, 0.12, 0.1]),
            b([0.0, -0.5, -0.45], [0.8, 0.3, 0.45], [0.55, 0.55, 0.58]),
            b([0.1, -0.4, 0.45], [0.6, 0.2, 0.75], [0.15, 0.15, 0.18]),
            b([-0.7, 0.2, 0.15], [-0.3, 0.5, 0.9], [0.95, 0.78, 0.1]),
            b([-0.2, 0.35, -0.45], [0.9, 0.7, -0.1], [0.1, 0.35, 0.75]),
            b([-1.0, -0.75, 0.15], [-0.6, -0.35, 0.35], [0.15, 0.15, 0.18]),
        ]
    }

    fn normalize(v: [f64; 3]) -> [f64; 3] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.map(|x| x / n)
    }

    fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    }

    /// Camera-to-world pose at `position` looking at the origin, z up.
    pub fn look_at(position: [f64; 3]) -> Pose {
        let z = normalize(position);
        let x = normalize(cross([0.0, 0.0, 1.0], z));
        let y = cross(z, x);
        let mut p = [[0.0; 4]; 4];
        for r in 0..3 {
            p[r] = [x[r], y[r], z[r], position[r]];
        }
        p[3] = [0.0, 0.0, 0.0, 1.0];
        p
    }

    fn hit(c: &Cuboid, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut normal = [0.0; 3];
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if o[k] < c.min[k] || o[k] > c.max[k] {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((c.min[k] - o[k]) / d[k], (c.max[k] - o[k]) / d[k]);
            let mut sign = -1.0;
            if a > b {
                std::mem::swap(&mut a, &mut b);
                sign = 1.0;
            }
            if a > t0 {
                t0 = a;
                normal = [0.0; 3];
                normal[k] = sign;
            }
            t1 = t1.min(b);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, normal))
    }

    fn shade(scene: &[Cuboid], ray: &Ray) -> [f64; 4] {
        let light = normalize([0.4, -0.3, 1.0]);
        let mut best: Option<(f64, [f64; 3], [f64; 3])> = None;
        for c in scene {
            if let Some((t, n)) = hit(c, ray.origin, ray.direction) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, n, c.color));
                }
            }
        }
        match best {
            None => [0.0; 4],
            Some((_, n, col)) => {
                let lambert = n.iter().zip(light).map(|(a, b)| a * b).sum::<f64>().max(0.0);
                let k = 0.35 + 0.65 * lambert;
                [col[0] * k, col[1] * k, col[2] * k, 1.0]
            }
        }
    }

    /// RGBA render with `ss x ss` supersampling per pixel.
    pub fn render_rgba(scene: &[Cuboid], camera: &Camera, ss: usize) -> Vec<[f64; 4]> {
        let mut out = Vec::with_capacity(camera.width * camera.height);
        let inv = 1.0 / (ss * ss) as f64;
        for j in 0..camera.height {
            for i in 0..camera.width {
                let mut acc = [0.0; 4];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = i as f64 + (sx as f64 + 0.5) / ss as f64;
                        let v = j as f64 + (sy as f64 + 0.5) / ss as f64;
                        let s = shade(scene, &camera.ray_at(u, v));
                        // premultiplied accumulation, un-premultiplied below
                        for k in 0..3 {
                            acc[k] += s[k] * s[3];
                        }
                        acc[3] += s[3];
                    }
                }
                let a = acc[3] * inv;
                let rgb = if acc[3] > 0.0 { [acc[0] / acc[3], acc[1] / acc[3], acc[2] / acc[3]] } else { [0.0; 3] };
                out.push([rgb[0], rgb[1], rgb[2], a]);
            }
        }
        out
    }

    /// Camera positions on the upper hemisphere, drawn from `seed`.
    pub fn hemisphere_poses(count: usize, seed: u64) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let az = rng.random_range(0.0..std::f64::consts::TAU);
                let el = rng.random_range(0.15..1.2f64);
                let r = CAMERA_RADIUS;
                look_at([r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()])
            })
            .collect()
    }

    fn write_split(dir: &Path, split: &str, poses: &[Pose], size: usize, scene: &[Cuboid]) -> Result<()> {
        std::fs::create_dir_all(dir.join(split))?;
        let mut frames = Vec::with_capacity(poses.len());
        for (k, pose) in poses.iter().enumerate() {
            let cam = Camera::new(size, size, CAMERA_ANGLE_X, *pose)?;
            let px = render_rgba(scene, &cam, 2);
            let bytes: Vec<u8> = px.iter().flatten().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let rel = format!("./{split}/r_{k}");
            let file = dir.join(format!("{split}/r_{k}.png"));
            image::RgbaImage::from_raw(size as u32, size as u32, bytes)
                .expect("buffer sized to image")
                .save(&file)
                .map_err(|e| load_err(&file, e))?;
            frames.push(FrameEntry {
                file_path: rel,
                rotation: 0.0,
                transform_matrix: pose.iter().map(|r| r.to_vec()).collect(),
            });
        }
        let doc = TransformsFile { camera_angle_x: CAMERA_ANGLE_X, frames };
        let path = dir.join(format!("transforms_{split}.json"));
        let text = serde_json::to_string_pretty(&doc).map_err(|e| load_err(&path, e))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Writes a complete Blender-format scene directory.
    pub fn write_scene(dir: &Path, size: usize, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
        let scene = toy_scene();
        write_split(dir, "train", &hemisphere_poses(n_train, seed), size, &scene)?;
        write_split(dir, "test", &hemisphere_poses(n_test, seed.wrapping_add(1)), size, &scene)?;
        Ok(())
    }
}
