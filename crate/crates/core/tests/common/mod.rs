//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use qnerf::qsim::{CircuitSpec, GateKind};
use rand::Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn eye(d: usize) -> Dense {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn kron(a: &Dense, b: &Dense) -> Dense {
    let (ra, ca, rb, cb) = (a.len(), a[0].len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; ca * cb]; ra * rb];
    for i in 0..ra {
        for j in 0..ca {
            for k in 0..rb {
                for l in 0..cb {
                    out[i * rb + k][j * cb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let m = b[0].len();
    let k = b.len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            if a[i][p] == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn matvec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn ry_matrix(theta: f64) -> Dense {
    let (s, c) = (0.5 * theta).sin_cos();
    vec![vec![c, -s], vec![s, c]]
}

/// `op` on qubit `q` of `n`, identity elsewhere; qubit 0 is the leftmost factor.
pub fn embed_single(n: usize, q: usize, op: &Dense) -> Dense {
    let id = eye(2);
    let mut m = vec![vec![1.0]];
    for k in 0..n {
        m = kron(&m, if k == q { op } else { &id });
    }
    m
}

/// `|0><0| (x) I + |1><1| (x) RY` built from projectors.
pub fn cry_dense(n: usize, control: usize, target: usize, theta: f64) -> Dense {
    let p0 = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
    let p1 = vec![vec![0.0, 0.0], vec![0.0, 1.0]];
    let ry = ry_matrix(theta);
    let mut a = vec![vec![1.0]];
    let mut b = vec![vec![1.0]];
    for k in 0..n {
        let (fa, fb) = if k == control {
            (p0.clone(), p1.clone())
        } else if k == target {
            (eye(2), ry.clone())
        } else {
            (eye(2), eye(2))
        };
        a = kron(&a, &fa);
        b = kron(&b, &fb);
    }
    a.iter().zip(&b).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect()
}

pub fn circuit_unitary(c: &CircuitSpec, thetas: &[f64]) -> Dense {
    let n = c.n_qubits();
    let mut u = eye(1 << n);
    for g in c.gates() {
        let m = match g.kind {
            GateKind::RotY => embed_single(n, g.target, &ry_matrix(thetas[g.param_slot])),
            GateKind::ControlledRotY => cry_dense(n, g.control.unwrap(), g.target, thetas[g.param_slot]),
        };
        u = matmul(&m, &u);
    }
    u
}

/// `<psi| Z_q |psi>` with `Z_q` built as a dense matrix.
pub fn dense_expectation(n: usize, q: usize, psi: &[f64]) -> f64 {
    let z = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
    let zq = embed_single(n, q, &z);
    let zpsi = matvec(&zq, psi);
    psi.iter().zip(&zpsi).map(|(a, b)| a * b).sum()
}

pub fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn random_circuit<R: Rng>(n: usize, gates: usize, rng: &mut R) -> CircuitSpec {
    use qnerf::qsim::Gate;
    let list = (0..gates)
        .map(|slot| {
            let t = rng.random_range(0..n);
            if n > 1 && rng.random_bool(0.5) {
                let mut c = rng.random_range(0..n - 1);
                if c >= t {
                    c += 1;
                }
                Gate::cry(c, t, slot)
            } else {
                Gate::ry(t, slot)
            }
        })
        .collect();
    CircuitSpec::new(n, list).unwrap()
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `|a - b| <= rel * max(|a|, |b|, floor)`.
pub fn rel_close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(floor)
}

/// Outcome of a finite-difference sweep over a model's parameters.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates skipped because a +-h step moved some ReLU or clamp
    /// input across its kink.
    pub crossed: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

/// A random ray through the scene cube, as a camera on a sphere of radius
/// 4 would produce.
pub fn random_ray<R: Rng>(rng: &mut R) -> qnerf::renderer::Ray {
    let origin_dir = random_unit(3, rng);
    let origin = [0, 1, 2].map(|k| 4.0 * origin_dir[k]);
    let jitter = random_unit(3, rng);
    let d: Vec<f64> = (0..3).map(|k| -origin_dir[k] + 0.2 * jitter[k]).collect();
    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    qnerf::renderer::Ray {
        origin,
        direction: [d[0] / n, d[1] / n, d[2] / n],
        t_near: qnerf::renderer::T_NEAR,
        t_far: qnerf::renderer::T_FAR,
    }
}

/// Squared colour error of one rendered pixel (midpoint sampling, no noise),
/// together with the tape's distance to the nearest ReLU or clamp kink.
pub fn pixel_loss(
    model: &qnerf::field::Model,
    ray: &qnerf::renderer::Ray,
    target: [f64; 3],
    cfg: &qnerf::renderer::RenderConfig,
) -> (f64, f64, Option<qnerf::autodiff::Gradients>) {
    use qnerf::autodiff::{Matrix, Tape};
    let mut tape = Tape::new(model.store());
    let rgb = qnerf::renderer::render_rays::<ChaCha>(&mut tape, model, &[*ray], cfg, None, &qnerf::field::NoiseContext::none())
        .unwrap();
    let t = Matrix::from_shape_vec((1, 3), target.to_vec()).unwrap();
    let loss = tape.mse(rgb, t).unwrap();
    let g = tape.backward(loss).unwrap();
    (tape.value(loss)[[0, 0]], tape.kink_margin(), Some(g))
}

/// `pixel_loss` value together with the tape's kink pattern.
pub fn pixel_loss_pattern(
    model: &qnerf::field::Model,
    ray: &qnerf::renderer::Ray,
    target: [f64; 3],
    cfg: &qnerf::renderer::RenderConfig,
) -> (f64, Vec<u8>) {
    use qnerf::autodiff::{Matrix, Tape};
    let mut tape = Tape::new(model.store());
    let rgb = qnerf::renderer::render_rays::<ChaCha>(&mut tape, model, &[*ray], cfg, None, &qnerf::field::NoiseContext::none())
        .unwrap();
    let t = Matrix::from_shape_vec((1, 3), target.to_vec()).unwrap();
    let loss = tape.mse(rgb, t).unwrap();
    (tape.value(loss)[[0, 0]], tape.kink_pattern())
}

type ChaCha = rand_chacha::ChaCha8Rng;

/// Compares the analytic gradient of `pixel_loss` with central differences
/// on every circuit angle and output scale plus `mlp_coords` random MLP
/// entries. Probe points whose tape sits within `margin` of a kink are
/// skipped and redrawn; returns `None` if no usable point is found.
/// Coordinates whose +-h evaluations change the kink pattern are counted
/// in `crossed` and not compared.
pub fn hybrid_fd_check<R: Rng>(
    model: &mut qnerf::field::Model,
    cfg: &qnerf::renderer::RenderConfig,
    mlp_coords: usize,
    h: f64,
    rel: f64,
    margin: f64,
    rng: &mut R,
) -> Option<FdReport> {
    let (ray, target, grads) = (0..200).find_map(|_| {
        let ray = random_ray(rng);
        let target = [rng.random::<f64>(), rng.random(), rng.random()];
        let (_, m, g) = pixel_loss(model, &ray, target, cfg);
        (m > margin).then(|| (ray, target, g.unwrap()))
    })?;
    let mut coords: Vec<(qnerf::autodiff::ParamId, usize, usize)> = Vec::new();
    let ids: Vec<_> = model.store().iter().map(|(id, p)| (id, p.value.dim())).collect();
    for &(id, (r, c)) in &ids {
        if Some(id) == model.theta_param() || Some(id) == model.alpha_param() {
            for i in 0..r {
                for j in 0..c {
                    coords.push((id, i, j));
                }
            }
        }
    }
    let others: Vec<_> = ids.iter().filter(|(id, _)| Some(*id) != model.theta_param() && Some(*id) != model.alpha_param()).collect();
    for _ in 0..mlp_coords {
        let &&(id, (r, c)) = &others[rng.random_range(0..others.len())];
        coords.push((id, rng.random_range(0..r), rng.random_range(0..c)));
    }
    let mut report = FdReport::default();
    let (_, base) = pixel_loss_pattern(model, &ray, target, cfg);
    for (id, i, j) in coords {
        let analytic = grads.param(id).map_or(0.0, |g| g[[i, j]]);
        let orig = model.store().value(id)[[i, j]];
        model.store_mut().value_mut(id)[[i, j]] = orig + h;
        let (lp, pp) = pixel_loss_pattern(model, &ray, target, cfg);
        model.store_mut().value_mut(id)[[i, j]] = orig - h;
        let (lm, pm) = pixel_loss_pattern(model, &ray, target, cfg);
        model.store_mut().value_mut(id)[[i, j]] = orig;
        if pp != base || pm != base {
            report.crossed += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let scale = analytic.abs().max(fd.abs());
        let err = (analytic - fd).abs();
        report.checked += 1;
        if scale > 1e-7 {
            report.worst_rel = report.worst_rel.max(err / scale);
        }
        if err > rel * scale.max(1e-6) {
            let name = model.store().get(id).name.clone();
            report.failures.push(format!("{name}[{i},{j}]: analytic {analytic:.6e} fd {fd:.6e}"));
        }
    }
    Some(report)
}
