//! Central-difference gradient checking.
//!
//! A probe perturbs one scalar by `±h` and rebuilds the graph. If the two
//! perturbed graphs disagree on any piecewise decision (ReLU side, L1 sign,
//! routing permutation), the probe straddles a kink and another coordinate
//! is drawn instead.
//!
//! Coordinates whose analytic and numeric derivatives both sit below the
//! rounding floor of the difference quotient, `10 eps max(|L|, 1) / h`,
//! count as agreeing on zero. Shift-invariant directions such as a key
//! bias under softmax have an exactly zero derivative that neither route
//! can resolve more finely than that floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Ctx, Mode, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Probes per checked tensor; tensors at or below this size are probed
    /// exhaustively.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: DEFAULT_STEP,
            probes: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor label and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
    pub probes: usize,
    pub resampled: usize,
    /// Probes settled by the rounding floor.
    pub floored: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        self.probes += 1;
        let err = if analytic.abs() <= floor && numeric.abs() <= floor {
            self.floored += 1;
            0.0
        } else {
            relative_error(analytic, numeric)
        };
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label.to_string(), index));
        }
    }
}

/// Rounding noise of a central difference of a loss of magnitude `loss`.
pub fn rounding_floor(loss: f64, h: f64) -> f64 {
    10.0 * f64::EPSILON * loss.abs().max(1.0) / h
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Fixed random weighting that turns any output into a scalar loss.
pub fn random_projection(graph: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_10ad);
    let w = Tensor::from_fn(graph.value(out).shape(), |_| rng.random_range(-1.0..1.0));
    graph.dot(out, w)
}

/// Loss value, kink signature, and (input, parameter) gradients when tracked.
type Evaluation = (f64, u64, Option<(Vec<Tensor>, Vec<Tensor>)>);

fn scalar(graph: &Graph, loss: Var) -> Result<f64> {
    let v = graph.value(loss);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Indices to probe: everything for small tensors, otherwise a shuffled
/// stream the caller consumes until enough clean probes are collected.
fn candidates(numel: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..numel).collect();
    for i in (1..numel).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

fn probe_tensor(
    report: &mut GradCheckReport,
    label: &str,
    analytic: &Tensor,
    probes: usize,
    rng: &mut ChaCha8Rng,
    mut eval: impl FnMut(usize, f64) -> Result<(f64, u64)>,
    h: f64,
) -> Result<()> {
    let mut taken = 0;
    for i in candidates(analytic.numel(), rng) {
        if taken == probes {
            break;
        }
        let (plus, sig_plus) = eval(i, h)?;
        let (minus, sig_minus) = eval(i, -h)?;
        if sig_plus != sig_minus {
            report.resampled += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let floor = rounding_floor(plus.abs().max(minus.abs()), h);
        report.record(label, i, analytic.data()[i], numeric, floor);
        taken += 1;
    }
    Ok(())
}

/// Checks `build`, which maps leaf variables for `inputs` to a scalar loss.
pub fn grad_check<F>(
    inputs: &[Tensor],
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], track: bool| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let loss = build(&mut g, &vars)?;
        scalar(&g, loss)?;
        Ok((g, loss, vars))
    };
    let (g, loss, vars) = run(inputs, true)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let eval = |i: usize, dh: f64| -> Result<(f64, u64)> {
            let mut values = inputs.to_vec();
            values[k].data_mut()[i] += dh;
            let (g, loss, _) = run(&values, false)?;
            Ok((scalar(&g, loss)?, g.kink_signature()))
        };
        probe_tensor(
            &mut report,
            &format!("input{k}"),
            &analytic,
            opts.probes,
            &mut rng,
            eval,
            opts.h,
        )?;
    }
    Ok(report)
}

/// Checks a parameterised computation with respect to its inputs and the
/// named parameters. `build` receives the input leaves and binds parameters
/// through the context.
pub fn grad_check_params<F>(
    params: &ModelParams,
    names: &[String],
    inputs: &[Tensor],
    mode: Mode,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let run = |p: &ModelParams, values: &[Tensor], track: bool| -> Result<Evaluation> {
        let mut ctx = Ctx::new(p, mode, track);
        let vars: Vec<Var> = values
            .iter()
            .map(|t| ctx.graph.leaf(t.clone(), track))
            .collect();
        let loss = build(&mut ctx, &vars)?;
        let value = scalar(&ctx.graph, loss)?;
        if !track {
            return Ok((value, ctx.graph.kink_signature(), None));
        }
        let grads = ctx.graph.backward(loss)?;
        let input_grads = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        let mut param_grads = Vec::with_capacity(names.len());
        for n in names {
            let g = match ctx.bound().get(n) {
                Some(&v) => grads.get_or_zeros(v),
                None => Tensor::zeros(p.require(n)?.shape()),
            };
            param_grads.push(g);
        }
        Ok((value, 0, Some((input_grads, param_grads))))
    };
    let (_, _, analytic) = run(params, inputs, true)?;
    let (input_grads, param_grads) = analytic.expect("tracked run returns gradients");
    let mut report = GradCheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (k, analytic) in input_grads.iter().enumerate() {
        let eval = |i: usize, dh: f64| -> Result<(f64, u64)> {
            let mut values = inputs.to_vec();
            values[k].data_mut()[i] += dh;
            let (v, sig, _) = run(params, &values, false)?;
            Ok((v, sig))
        };
        probe_tensor(
            &mut report,
            &format!("input{k}"),
            analytic,
            opts.probes,
            &mut rng,
            eval,
            opts.h,
        )?;
    }
    for (name, analytic) in names.iter().zip(&param_grads) {
        let eval = |i: usize, dh: f64| -> Result<(f64, u64)> {
            let mut p = params.clone();
            p.get_mut(name).expect("checked name").data_mut()[i] += dh;
            let (v, sig, _) = run(&p, inputs, false)?;
            Ok((v, sig))
        };
        probe_tensor(
            &mut report,
            name,
            analytic,
            opts.probes,
            &mut rng,
            eval,
            opts.h,
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let report = grad_check(&[x], &GradCheckOptions::default(), |g, v| {
            let y = g.scale(v[0], 3.0);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(report.probes, 5);
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let x = Tensor::zeros(&[3]);
        let err = grad_check(&[x], &GradCheckOptions::default(), |g, v| {
            Ok(g.scale(v[0], 2.0))
        });
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn flat_directions_settle_on_the_rounding_floor() {
        // softmax is invariant to a shared shift, so the derivative is zero
        let x = Tensor::from_fn(&[1, 1, 6], |i| i as f64 * 0.3);
        let report = grad_check(
            &[x, Tensor::scalar(0.2)],
            &GradCheckOptions::default(),
            |g, v| {
                let shift = g.gather(v[1], vec![0; 6], &[1, 1, 6])?;
                let z = g.add(v[0], shift)?;
                let p = g.softmax(z);
                random_projection(g, p, 9)
            },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
