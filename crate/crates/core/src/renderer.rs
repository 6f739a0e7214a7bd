//! Pinhole rays, stratified sampling, the volume-rendering quadrature and
//! image metrics.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{CustomOp, Matrix, NodeId, Tape};
use crate::error::{invalid, Error, Result};
use crate::field::{Model, NoiseContext};

pub const T_NEAR: f64 = 2.0;
pub const T_FAR: f64 = 6.0;
pub const LAST_DELTA: f64 = 1e10;
pub const DEFAULT_SAMPLES: usize = 64;

pub type Pose = [[f64; 4]; 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Camera-to-world transform; the camera looks down its local -z.
    pub pose: Pose,
}

pub fn focal_from_angle(width: usize, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

fn det3(m: &Pose) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl Camera {
    pub fn new(width: usize, height: usize, camera_angle_x: f64, pose: Pose) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid("camera needs a non-empty image plane");
        }
        if !(camera_angle_x > 0.0 && camera_angle_x < std::f64::consts::PI) {
            return invalid(format!("camera_angle_x {camera_angle_x} outside (0, pi)"));
        }
        if pose.iter().flatten().any(|v| !v.is_finite()) || det3(&pose).abs() < 1e-9 {
            return invalid("camera pose rotation block is singular");
        }
        Ok(Self { width, height, focal: focal_from_angle(width, camera_angle_x), pose })
    }

    /// Ray through image-plane point `(u, v)`, in pixels from the top-left
    /// corner. Pixel `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.
    pub fn ray_at(&self, u: f64, v: f64) -> Ray {
        let local = [
            (u - 0.5 * self.width as f64) / self.focal,
            -(v - 0.5 * self.height as f64) / self.focal,
            -1.0,
        ];
        let p = &self.pose;
        let mut d = [0.0; 3];
        for (r, out) in d.iter_mut().enumerate() {
            *out = p[r][0] * local[0] + p[r][1] * local[1] + p[r][2] * local[2];
        }
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ray {
            origin: [p[0][3], p[1][3], p[2][3]],
            direction: d.map(|x| x / norm),
            t_near: T_NEAR,
            t_far: T_FAR,
        }
    }

    pub fn pixel_ray(&self, i: usize, j: usize) -> Ray {
        self.ray_at(i as f64 + 0.5, j as f64 + 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|k| self.origin[k] + t * self.direction[k])
    }
}

/// Pinhole ray for pixel `(i, j)`.
pub fn generate_ray(camera: &Camera, i: usize, j: usize) -> Ray {
    camera.pixel_ray(i, j)
}

/// One draw per equal-width bin of `[t_near, t_far]`, or the bin midpoints
/// when `rng` is `None`.
pub fn stratified_samples<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: Option<&mut R>) -> Result<Vec<f64>> {
    if n < 2 {
        return invalid(format!("need at least 2 samples per ray, got {n}"));
    }
    if !(ray.t_near < ray.t_far) {
        return invalid("ray needs t_near < t_far");
    }
    let width = (ray.t_far - ray.t_near) / n as f64;
    Ok(match rng {
        None => (0..n).map(|i| ray.t_near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n).map(|i| ray.t_near + (i as f64 + rng.random::<f64>()) * width).collect(),
    })
}

/// `delta_i = t_(i+1) - t_i`, with `last` for the final open interval.
pub fn deltas(t: &[f64], last: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    d.push(last);
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    /// Quadrature sum, before any background compositing.
    pub rgb: [f64; 3],
    /// Accumulated opacity `sum_i w_i`.
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T_1..T_N`.
    pub transmittance: Vec<f64>,
}

fn quadrature(sigma: &[f64], rgb: &[[f64; 3]], delta: &[f64]) -> RayRender {
    let mut out = RayRender {
        rgb: [0.0; 3],
        opacity: 0.0,
        weights: Vec::with_capacity(sigma.len()),
        transmittance: Vec::with_capacity(sigma.len()),
    };
    let mut optical_depth = 0.0f64;
    for i in 0..sigma.len() {
        let t = (-optical_depth).exp();
        let tau = sigma[i] * delta[i];
        let w = t * -(-tau).exp_m1();
        out.transmittance.push(t);
        out.weights.push(w);
        for (acc, c) in out.rgb.iter_mut().zip(rgb[i]) {
            *acc += w * c;
        }
        optical_depth += tau;
    }
    // the weights telescope to 1 - T_final; this form stays inside [0, 1]
    out.opacity = -(-optical_depth).exp_m1();
    out
}

/// Gradients of `g . C` where `C = sum_i w_i c_i + bg (1 - sum_i w_i)`.
fn quadrature_backward(
    sigma: &[f64],
    rgb: &[[f64; 3]],
    delta: &[f64],
    background: f64,
    g: [f64; 3],
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let fwd = quadrature(sigma, rgb, delta);
    let n = sigma.len();
    let shifted: Vec<f64> = (0..n).map(|i| (0..3).map(|k| g[k] * (rgb[i][k] - background)).sum()).collect();
    let mut d_sigma = vec![0.0; n];
    let mut d_rgb = vec![[0.0; 3]; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        let t_next = fwd.transmittance[i] * (-sigma[i] * delta[i]).exp();
        d_sigma[i] = delta[i] * (t_next * shifted[i] - tail);
        tail += fwd.weights[i] * shifted[i];
        d_rgb[i] = g.map(|gk| gk * fwd.weights[i]);
    }
    (d_sigma, d_rgb)
}

/// Quadrature sum `sum_i T_i (1 - exp(-sigma_i delta_i)) c_i`.
pub fn render_ray(samples: &SampleSet) -> RayRender {
    quadrature(&samples.sigma, &samples.rgb, &samples.delta)
}

/// `(d/d sigma_i, d/d c_i)` of `upstream . rendered`, where `rendered`
/// is composited over `background` (use 0 for the bare quadrature).
pub fn render_ray_backward(samples: &SampleSet, background: f64, upstream: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
    quadrature_backward(&samples.sigma, &samples.rgb, &samples.delta, background, upstream)
}

/// Adds the uncovered fraction of a white background.
pub fn composite_white(rgb: [f64; 3], opacity: f64) -> [f64; 3] {
    rgb.map(|c| c + (1.0 - opacity))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub last_delta: f64,
    /// Background intensity composited behind the volume (1 = white).
    pub background: f64,
    /// Rays per forward pass when rendering whole images.
    pub chunk_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { n_samples: DEFAULT_SAMPLES, last_delta: LAST_DELTA, background: 1.0, chunk_rays: 128 }
    }
}

/// Volume-rendering node: field rows `[r, g, b, sigma]` grouped by ray
/// (`n_samples` consecutive rows each) to composited ray colours.
struct VolumeRender {
    n_samples: usize,
    deltas: Vec<f64>,
    background: f64,
}

fn split_rows(field: &Matrix, lo: usize, hi: usize) -> (Vec<f64>, Vec<[f64; 3]>) {
    let sig = (lo..hi).map(|r| field[[r, 3]]).collect();
    let rgb = (lo..hi).map(|r| [field[[r, 0]], field[[r, 1]], field[[r, 2]]]).collect();
    (sig, rgb)
}

impl CustomOp for VolumeRender {
    fn name(&self) -> &'static str {
        "volume_render"
    }

    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        let field = inputs[0];
        let n = self.n_samples;
        if field.ncols() != 4 || field.nrows() != self.deltas.len() || field.nrows() % n != 0 {
            return invalid(format!("volume render got field {:?} for {} samples", field.dim(), self.deltas.len()));
        }
        let rays = field.nrows() / n;
        let mut out = Matrix::zeros((rays, 3));
        for r in 0..rays {
            let (sig, rgb) = split_rows(field, r * n, (r + 1) * n);
            let res = quadrature(&sig, &rgb, &self.deltas[r * n..(r + 1) * n]);
            for k in 0..3 {
                out[[r, k]] = res.rgb[k] + self.background * (1.0 - res.opacity);
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad_out: &Matrix) -> Vec<Matrix> {
        let field = inputs[0];
        let n = self.n_samples;
        let mut d = Matrix::zeros(field.raw_dim());
        for r in 0..grad_out.nrows() {
            let (sig, rgb) = split_rows(field, r * n, (r + 1) * n);
            let g = [grad_out[[r, 0]], grad_out[[r, 1]], grad_out[[r, 2]]];
            let (ds, dc) = quadrature_backward(&sig, &rgb, &self.deltas[r * n..(r + 1) * n], self.background, g);
            for i in 0..n {
                let row = r * n + i;
                d[[row, 0]] = dc[i][0];
                d[[row, 1]] = dc[i][1];
                d[[row, 2]] = dc[i][2];
                d[[row, 3]] = ds[i];
            }
        }
        vec![d]
    }
}

/// Records sampling, the field and the quadrature for a batch of rays;
/// returns the `rays x 3` colour node. `rng = None` uses bin midpoints.
pub fn render_rays<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    model: &Model,
    rays: &[Ray],
    cfg: &RenderConfig,
    rng: Option<&mut R>,
    noise: &NoiseContext,
) -> Result<NodeId> {
    let n = cfg.n_samples;
    let rows = rays.len() * n;
    let bound = model.config().scene_bound;
    let mut positions = Matrix::zeros((rows, 3));
    let mut directions = Matrix::zeros((rows, 3));
    let mut all_deltas = Vec::with_capacity(rows);
    let mut rng = rng;
    for (r, ray) in rays.iter().enumerate() {
        let t = stratified_samples(ray, n, rng.as_deref_mut())?;
        for (i, &ti) in t.iter().enumerate() {
            let p = ray.at(ti);
            for k in 0..3 {
                positions[[r * n + i, k]] = p[k] / bound;
                directions[[r * n + i, k]] = ray.direction[k];
            }
        }
        all_deltas.extend(deltas(&t, cfg.last_delta));
    }
    let nodes = model.forward(tape, &positions, &directions, noise)?;
    tape.custom(
        &[nodes.output],
        Box::new(VolumeRender { n_samples: n, deltas: all_deltas, background: cfg.background }),
    )
}

/// Row-major `height x width x 3` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return invalid(format!("{} values for a {width}x{height} rgb image", data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = (j * self.width + i) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, rgb: [f64; 3]) {
        let o = (j * self.width + i) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    fn channel(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(3).copied().collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Renders every pixel with midpoint sampling.
pub fn render_image(model: &Model, camera: &Camera, cfg: &RenderConfig, noise: &NoiseContext) -> Result<Image> {
    let rays: Vec<Ray> =
        (0..camera.height).flat_map(|j| (0..camera.width).map(move |i| (i, j))).map(|(i, j)| camera.pixel_ray(i, j)).collect();
    let chunk = cfg.chunk_rays.max(1);
    let mut data = Vec::with_capacity(rays.len() * 3);
    for (c, batch) in rays.chunks(chunk).enumerate() {
        let ctx = NoiseContext::new(noise.config, noise.stream.wrapping_mul(1 << 24).wrapping_add(c as u64));
        let mut tape = Tape::new(model.store());
        let out = render_rays::<rand_chacha::ChaCha8Rng>(&mut tape, model, batch, cfg, None, &ctx)?;
        data.extend(tape.value(out).iter().copied());
    }
    Image::new(camera.width, camera.height, data)
}

/// Mean of squared channel differences.
pub fn mse_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("mse of {} and {} values", a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(L^2 / mse)`; `+inf` when the images are identical.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

pub fn image_psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr(mse_loss(&a.data, &b.data)?, 1.0))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of one channel over all fully contained 11x11 Gaussian windows.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, peak: f64) -> f64 {
    let g = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let rows: Vec<f64> = (0..oh)
        .into_par_iter()
        .map(|oy| {
            let mut acc = 0.0;
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let k = gy * gx;
                        let idx = (oy + dy) * w + ox + dx;
                        let (a, b) = (x[idx], y[idx]);
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
            acc
        })
        .collect();
    rows.iter().sum::<f64>() / (ow * oh) as f64
}

/// Windowed SSIM (11x11 Gaussian, sigma 1.5, valid windows only), averaged
/// over the three channels. Pixel values are taken on a unit range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return invalid("ssim needs equally sized images");
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return invalid(format!("image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.width, a.height));
    }
    let total: f64 = (0..3).map(|k| ssim_channel(&a.channel(k), &b.channel(k), a.width, a.height, 1.0)).sum();
    Ok(total / 3.0)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::InvalidArgument("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::Load { path: path.to_path_buf(), message: e.to_string() })
}

/// Appends `image_id,psnr,ssim`, writing the header for a new file.
pub fn append_metrics_csv(path: &Path, image_id: &str, psnr: f64, ssim: f64) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "image_id,psnr,ssim")?;
    }
    writeln!(f, "{image_id},{psnr},{ssim}")?;
    Ok(())
}
