use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use super::{QuanvConfig, CHANNEL_GROUP};
use crate::error::{Error, Result};
use crate::nnet::{CustomOp, Graph, Tensor, Var};
use crate::qsim::{scale_input, scale_input_grad, Circuit, GradMethod, PlanState};

/// A quanvolution layer: one compiled circuit shared by every patch and
/// channel group.
#[derive(Debug, Clone)]
pub struct QuantumLayer {
    cfg: QuanvConfig,
    circuit: Arc<Circuit>,
    method: GradMethod,
}

impl QuantumLayer {
    pub fn new(cfg: QuanvConfig, method: GradMethod) -> Result<Self> {
        let circuit = Arc::new(Circuit::new(cfg.ansatz()?)?);
        Ok(Self {
            cfg,
            circuit,
            method,
        })
    }

    pub fn config(&self) -> &QuanvConfig {
        &self.cfg
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn parameter_count(&self) -> usize {
        self.circuit.parameter_count()
    }

    pub fn grad_method(&self) -> GradMethod {
        self.method
    }

    pub fn set_grad_method(&mut self, method: GradMethod) {
        self.method = method;
    }

    fn geometry(&self, shape: &[usize]) -> Result<Geometry> {
        let (b, h, w, c) = match *shape {
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::shape("quanvolve", format!("expected [B,H,W,C], got {shape:?}"))),
        };
        self.cfg.check_input(h, w, c)?;
        Ok(Geometry::new(b, h, w, c, self.cfg.patch_size, self.cfg.stride))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.parameter_count() {
            return Err(Error::shape(
                "quanvolve",
                format!(
                    "{} angles supplied, the {} ansatz has {}",
                    theta.len(),
                    self.cfg.family,
                    self.parameter_count()
                ),
            ));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite circuit angle".into()));
        }
        Ok(())
    }

    /// Applies the layer to `x: [B,H,W,C]` with angles `theta: [P]` on a tape.
    pub fn apply(&self, g: &mut Graph, x: Var, theta: Var) -> Result<Var> {
        let geom = self.geometry(g.shape(x))?;
        let th = g.value(theta).data();
        self.check_theta(th)?;
        let xv = g.value(x).data();
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite quanvolution input".into()));
        }
        let out = forward(&self.circuit, &geom, xv, th);
        let counter = g.circuit_counter();
        counter.fetch_add(geom.jobs() as u64, Ordering::Relaxed);
        let value = Tensor::new(g.shape(x), out)?;
        let op = QuanvOp {
            circuit: Arc::clone(&self.circuit),
            geom,
            method: self.method,
            counter,
        };
        Ok(g.custom(&[x, theta], value, Box::new(op)))
    }
}

/// Shape-preserving quanvolution of an `[H,W,C]` or `[B,H,W,C]` tensor.
pub fn quanvolve(input: &Tensor, cfg: &QuanvConfig, params: &[f64]) -> Result<Tensor> {
    let layer = QuantumLayer::new(*cfg, GradMethod::Adjoint)?;
    let batched = match *input.shape() {
        [h, w, c] => input.clone().reshape(&[1, h, w, c])?,
        [_, _, _, _] => input.clone(),
        ref s => return Err(Error::shape("quanvolve", format!("expected [H,W,C], got {s:?}"))),
    };
    let mut g = Graph::inference();
    let x = g.constant(batched);
    let theta = g.constant(Tensor::new(&[params.len()], params.to_vec())?);
    let y = layer.apply(&mut g, x, theta)?;
    g.value(y).clone().reshape(input.shape())
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
    py: usize,
    px: usize,
}

impl Geometry {
    fn new(b: usize, h: usize, w: usize, c: usize, k: usize, s: usize) -> Self {
        Self {
            b,
            h,
            w,
            c,
            k,
            s,
            py: (h - k) / s + 1,
            px: (w - k) / s + 1,
        }
    }

    fn groups(&self) -> usize {
        self.c / CHANNEL_GROUP
    }

    fn jobs(&self) -> usize {
        self.b * self.py * self.px * self.groups()
    }

    /// Flat tensor index for qubit `q` of `job`. Qubit order within a patch is
    /// channel-major, then row, then column.
    fn index(&self, job: usize, q: usize) -> usize {
        let gi = job % self.groups();
        let rest = job / self.groups();
        let px = rest % self.px;
        let rest = rest / self.px;
        let py = rest % self.py;
        let n = rest / self.py;
        let kk = self.k * self.k;
        let (ch, within) = (q / kk, q % kk);
        let (dy, dx) = (within / self.k, within % self.k);
        let (y, x) = (py * self.s + dy, px * self.s + dx);
        ((n * self.h + y) * self.w + x) * self.c + gi * CHANNEL_GROUP + ch
    }

    /// Number of patches covering pixel `(y, x)`.
    fn coverage(&self, y: usize, x: usize) -> usize {
        let span = |p: usize, count: usize| {
            let hi = (p / self.s).min(count - 1);
            let lo = (p + self.s).saturating_sub(self.k) / self.s;
            hi + 1 - lo.min(hi + 1)
        };
        span(y, self.py) * span(x, self.px)
    }

    fn inv_coverage(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                out[y * self.w + x] = 1.0 / self.coverage(y, x) as f64;
            }
        }
        out
    }

    fn pixel(&self, idx: usize) -> usize {
        (idx / self.c) % (self.h * self.w)
    }
}

fn forward(circuit: &Circuit, geom: &Geometry, x: &[f64], theta: &[f64]) -> Vec<f64> {
    let nq = circuit.n_qubits();
    let readouts: Vec<Vec<f64>> = (0..geom.jobs())
        .into_par_iter()
        .map_init(
            || (PlanState::default(), vec![0.0; nq]),
            |(st, angles), job| {
                for (q, a) in angles.iter_mut().enumerate() {
                    *a = scale_input(x[geom.index(job, q)]);
                }
                let mut z = vec![0.0; nq];
                circuit.forward_with(theta, angles, st, &mut z);
                z
            },
        )
        .collect();
    let inv = geom.inv_coverage();
    let mut out = vec![0.0; x.len()];
    for (job, z) in readouts.iter().enumerate() {
        for (q, v) in z.iter().enumerate() {
            let idx = geom.index(job, q);
            out[idx] += v * inv[geom.pixel(idx)];
        }
    }
    out
}

struct QuanvOp {
    circuit: Arc<Circuit>,
    geom: Geometry,
    method: GradMethod,
    counter: Arc<AtomicU64>,
}

impl CustomOp for QuanvOp {
    fn name(&self) -> &'static str {
        "quanvolve"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, theta) = (inputs[0].data(), inputs[1].data());
        let geom = &self.geom;
        let circuit = &*self.circuit;
        let nq = circuit.n_qubits();
        let np = circuit.parameter_count();
        let inv = geom.inv_coverage();
        let per_job: Vec<(Vec<f64>, Vec<f64>)> = (0..geom.jobs())
            .into_par_iter()
            .map_init(
                || (PlanState::default(), vec![0.0; nq], vec![0.0; nq]),
                |(st, angles, cot), job| {
                    for q in 0..nq {
                        let idx = geom.index(job, q);
                        angles[q] = scale_input(x[idx]);
                        cot[q] = grad_out[idx] * inv[geom.pixel(idx)];
                    }
                    let (gp, ga) = match self.method {
                        GradMethod::Adjoint => {
                            let mut gp = vec![0.0; np];
                            let mut ga = vec![0.0; nq];
                            circuit.adjoint_with(theta, angles, cot, st, &mut gp, &mut ga);
                            (gp, ga)
                        }
                        GradMethod::ParameterShift => circuit
                            .vjp(GradMethod::ParameterShift, theta, angles, cot)
                            .expect("inputs validated in forward"),
                    };
                    (gp, ga)
                },
            )
            .collect();
        let evals_per_job = match self.method {
            GradMethod::Adjoint => 1,
            GradMethod::ParameterShift => {
                let controlled = circuit
                    .gates()
                    .iter()
                    .filter(|g| g.kind.is_controlled())
                    .count();
                4 * controlled + 2 * (np - controlled) + 2 * nq
            }
        };
        self.counter
            .fetch_add((geom.jobs() * evals_per_job) as u64, Ordering::Relaxed);
        // ordered reduction
        let mut dtheta = vec![0.0; np];
        let mut dx = vec![0.0; x.len()];
        for (job, (gp, ga)) in per_job.iter().enumerate() {
            for (d, v) in dtheta.iter_mut().zip(gp) {
                *d += v;
            }
            for (q, v) in ga.iter().enumerate() {
                let idx = geom.index(job, q);
                dx[idx] += v * scale_input_grad(x[idx]);
            }
        }
        vec![Some(dx), Some(dtheta)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::AnsatzFamily;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn zero_input_identity_circuit_gives_ones() {
        let cfg = QuanvConfig {
            family: AnsatzFamily::OnlyRotations,
            ..Default::default()
        };
        let out = quanvolve(&Tensor::zeros(&[2, 2, 3]), &cfg, &[0.0; 36]).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn counts_one_circuit_per_patch_and_group() {
        let layer = QuantumLayer::new(QuanvConfig::default(), GradMethod::Adjoint).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
        let th = g.constant(Tensor::zeros(&[34]));
        let y = layer.apply(&mut g, x, th).unwrap();
        assert_eq!(g.shape(y), [1, 4, 4, 3]);
        assert_eq!(g.circuit_evals(), 4);
    }

    #[test]
    fn channel_groups_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = QuanvConfig::default();
        let theta: Vec<f64> = (0..34).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random_tensor(&[4, 4, 6], &mut rng);
        let full = quanvolve(&x, &cfg, &theta).unwrap();
        for grp in 0..2 {
            let part: Vec<f64> = x.data().chunks(6).flat_map(|p| p[3 * grp..3 * grp + 3].to_vec()).collect();
            let part = Tensor::new(&[4, 4, 3], part).unwrap();
            let alone = quanvolve(&part, &cfg, &theta).unwrap();
            for (p, chunk) in full.data().chunks(6).enumerate() {
                for ch in 0..3 {
                    assert_eq!(chunk[3 * grp + ch], alone.data()[p * 3 + ch]);
                }
            }
        }
    }

    #[test]
    fn perturbing_a_patch_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = QuanvConfig::default();
        let theta: Vec<f64> = (0..34).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random_tensor(&[4, 4, 3], &mut rng);
        let base = quanvolve(&x, &cfg, &theta).unwrap();
        let mut bumped = x.clone();
        bumped.data_mut()[0] += 0.7; // pixel (0,0), patch (0,0)
        let out = quanvolve(&bumped, &cfg, &theta).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                for ch in 0..3 {
                    let i = (y * 4 + xx) * 3 + ch;
                    if y >= 2 || xx >= 2 {
                        assert_eq!(out.data()[i], base.data()[i]);
                    }
                }
            }
        }
        assert!(out.max_abs_diff(&base) > 1e-6);
    }

    #[test]
    fn overlapping_patches_average_coverage() {
        let g = Geometry::new(1, 3, 3, 3, 2, 1);
        assert_eq!(g.coverage(0, 0), 1);
        assert_eq!(g.coverage(1, 1), 4);
        assert_eq!(g.coverage(0, 1), 2);
        assert_eq!(g.coverage(2, 2), 1);
        let g = Geometry::new(1, 4, 4, 3, 2, 2);
        assert!((0..4).all(|y| (0..4).all(|x| g.coverage(y, x) == 1)));
        // constant readout survives averaging
        let cfg = QuanvConfig {
            stride: 1,
            family: AnsatzFamily::OnlyRotations,
            ..Default::default()
        };
        let out = quanvolve(&Tensor::zeros(&[3, 3, 3]), &cfg, &[0.0; 36]).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (method, stride) in [(GradMethod::Adjoint, 2), (GradMethod::ParameterShift, 2), (GradMethod::Adjoint, 1)] {
            let cfg = QuanvConfig {
                stride,
                ..Default::default()
            };
            let layer = QuantumLayer::new(cfg, method).unwrap();
            let x0 = random_tensor(&[1, 4, 4, 3], &mut rng);
            let th0: Vec<f64> = (0..34).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wts = random_tensor(&[1, 4, 4, 3], &mut rng);
            let loss = |x: &Tensor, th: &[f64]| -> f64 {
                let mut g = Graph::inference();
                let xv = g.constant(x.clone());
                let tv = g.constant(Tensor::new(&[34], th.to_vec()).unwrap());
                let y = layer.apply(&mut g, xv, tv).unwrap();
                g.value(y).data().iter().zip(wts.data()).map(|(a, b)| a * b).sum()
            };
            let geom = layer.geometry(&[1, 4, 4, 3]).unwrap();
            let op = QuanvOp {
                circuit: Arc::clone(&layer.circuit),
                geom,
                method,
                counter: Arc::new(AtomicU64::new(0)),
            };
            let th_t = Tensor::new(&[34], th0.clone()).unwrap();
            let out = Tensor::new(&[1, 4, 4, 3], forward(&layer.circuit, &geom, x0.data(), &th0)).unwrap();
            // L = Σ w·y, so dL/dy = w
            let op_grads = op.backward(&[&x0, &th_t], &out, wts.data());
            let (dx, dth) = (op_grads[0].as_ref().unwrap(), op_grads[1].as_ref().unwrap());
            let h = 1e-5;
            for k in 0..34 {
                let mut p = th0.clone();
                p[k] += h;
                let up = loss(&x0, &p);
                p[k] -= 2.0 * h;
                let dn = loss(&x0, &p);
                assert!(((up - dn) / (2.0 * h) - dth[k]).abs() < 1e-6, "theta {k}");
            }
            for i in 0..x0.len() {
                let mut xp = x0.clone();
                xp.data_mut()[i] += h;
                let up = loss(&xp, &th0);
                xp.data_mut()[i] -= 2.0 * h;
                let dn = loss(&xp, &th0);
                assert!(((up - dn) / (2.0 * h) - dx[i]).abs() < 1e-6, "x {i}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = QuanvConfig::default();
        assert!(quanvolve(&Tensor::zeros(&[3, 4, 3]), &cfg, &[0.0; 34]).is_err());
        assert!(quanvolve(&Tensor::zeros(&[4, 4, 2]), &cfg, &[0.0; 34]).is_err());
        assert!(quanvolve(&Tensor::zeros(&[4, 4, 3]), &cfg, &[0.0; 33]).is_err());
    }
}
