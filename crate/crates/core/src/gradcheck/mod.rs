//! Central finite-difference gradient checks at 64-bit precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamRegistry, Tape, Tensor, Var};

pub mod suite;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates checked per input tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max|analytic − numeric| / max|numeric|` over every checked
    /// coordinate of every input.
    pub rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a non-differentiable point lies within
    /// one step of them.
    pub kinks: usize,
}

impl FdReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.rel_error <= tolerance && self.kinks * 4 <= self.checked.max(1)
    }
}

/// Sums the output against fixed pseudo-random weights so that non-scalar
/// outputs still yield a scalar with a generic gradient.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().product::<usize>() as u64);
    let r = tape.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// Compares the tape gradient of `f` at `inputs` with central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vs)?;
        let l = project(&mut t, out)?;
        Ok(t.value(l).item())
    };

    let h = opts.step;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let f0 = eval(&work)?;
    let mut report = FdReport {
        rel_error: 0.0,
        checked: 0,
        kinks: 0,
    };
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x = input.data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                work[ti].data_mut()[i] = x + delta;
                let v = eval(&work);
                work[ti].data_mut()[i] = x;
                v
            };
            let (fp, fm) = (at(h)?, at(-h)?);
            let (fp2, fm2) = (at(h / 2.0)?, at(-h / 2.0)?);
            report.checked += 1;
            // Second differences at h and h/2 scale by exactly 4 when f is
            // smooth; a kink inside the stencil breaks that ratio.
            let s1 = fp - 2.0 * f0 + fm;
            let s2 = fp2 - 2.0 * f0 + fm2;
            let noise = 64.0 * f64::EPSILON * (f0.abs() + 1.0);
            if (s1 - 4.0 * s2).abs() > 1e-2 * s1.abs() + noise {
                report.kinks += 1;
                continue;
            }
            // Richardson combination of the two central differences
            let d1 = (fp - fm) / (2.0 * h);
            let d2 = (fp2 - fm2) / h;
            let numeric = (4.0 * d2 - d1) / 3.0;
            diff = diff.max((analytic[ti].data()[i] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    report.rel_error = diff / scale.max(1e-8);
    Ok(report)
}

/// Like [`check_gradients`], but differentiates with respect to every
/// tensor of `params` as well as `inputs`. `f` receives the input variables;
/// parameters resolve through [`Tape::param`] as usual.
pub fn check_module<F>(params: &ParamRegistry<f64>, inputs: &[Tensor<f64>], f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &ParamRegistry<f64>, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = params.names().cloned().collect();
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|(_, t)| t.clone()));
    let n = inputs.len();
    check_gradients(
        &all,
        |tape, vars| {
            for (name, &v) in names.iter().zip(&vars[n..]) {
                tape.bind_param(name, v)?;
            }
            f(tape, params, &vars[..n])
        },
        opts,
    )
}

/// Uniform random tensor in `[-1, 1)`.
pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn assert_grad<F>(inputs: &[Tensor<f64>], f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let r = check_gradients(inputs, f, &FdOptions::default()).unwrap();
        assert!(r.passed(FD_TOLERANCE), "{r:?}");
    }

    #[test]
    fn smooth_product_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[3, 4], &mut rng);
        assert_grad(&[a, b], |t, v| {
            let p = t.mul(v[0], v[1])?;
            Ok(t.sigmoid(p))
        });
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&[5], &mut rng);
        let r = check_gradients(
            &[a],
            |t, v| {
                let val = t.value(v[0]).map(|x| x * x);
                Ok(t.record("bad_square", val, &[v[0]], |ctx| {
                    // should be 2·x·g
                    vec![Some(Tensor::from_fn(ctx.grad.shape(), |i| {
                        1.9 * ctx.inputs[0].data()[i] * ctx.grad.data()[i]
                    }))]
                }))
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert!(!r.passed(FD_TOLERANCE));
        assert!(r.rel_error > 0.01);
    }

    #[test]
    fn relu_kink_is_detected_not_failed() {
        let x = Tensor::new(vec![3], vec![0.3, 2e-6, -0.4]).unwrap();
        let r = check_gradients(&[x], |t, v| Ok(t.relu(v[0])), &FdOptions::default()).unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.rel_error <= FD_TOLERANCE);
    }
}
