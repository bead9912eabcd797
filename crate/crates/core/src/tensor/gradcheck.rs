use rand::seq::index::sample;

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;
use crate::util::stream_rng;

/// Finite-difference formula used for the numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central,
    /// Richardson-extrapolated central difference over `h` and `2h`;
    /// truncation error O(h^4), so `h` can be large enough that rounding
    /// in the loss value stops dominating.
    Central4,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub stencil: Stencil,
    pub tolerance: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked in full.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-3,
            stencil: Stencil::Central4,
            tolerance: 1e-4,
            samples_per_param: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub worst: CoordinateCheck,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !p.passed).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.worst.rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{} {:<40} n={:<4} worst[{}] ad={:+.6e} fd={:+.6e} rel={:.3e}",
                if p.passed { "ok  " } else { "FAIL" },
                p.name,
                p.checked,
                p.worst.index,
                p.worst.analytic,
                p.worst.numeric,
                p.worst.rel_error
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of the scalar built by `loss_fn` with
/// central finite differences on sampled coordinates of every trainable
/// parameter.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?.into_param_grads()
    };
    check_against(store, loss_fn, &analytic, config)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients, indexed
/// like the store.
pub fn check_against<F>(store: &ParamStore, loss_fn: F, analytic: &[Option<Tensor>], config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<NodeId>,
{
    let mut work = store.clone();
    let mut params = Vec::new();
    for idx in 0..store.len() {
        let p = store.by_index(idx);
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let coords: Vec<usize> = if n <= config.samples_per_param {
            (0..n).collect()
        } else {
            let mut rng = stream_rng(config.seed, &format!("gradcheck/{}", p.name));
            let mut c = sample(&mut rng, n, config.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: Option<CoordinateCheck> = None;
        for &c in &coords {
            let orig = work.by_index(idx).value.data()[c];
            let mut at = |k: f64| -> Result<f64> {
                work.by_index_mut(idx).value.data_mut()[c] = orig + k * config.epsilon;
                let l = eval_loss(&work, &loss_fn);
                work.by_index_mut(idx).value.data_mut()[c] = orig;
                l
            };
            let h = config.epsilon;
            let d1 = at(1.0)? - at(-1.0)?;
            let numeric = match config.stencil {
                Stencil::Central => d1 / (2.0 * h),
                Stencil::Central4 => {
                    let d2 = at(2.0)? - at(-2.0)?;
                    (8.0 * d1 - d2) / (12.0 * h)
                }
            };
            let ad = analytic
                .get(idx)
                .and_then(Option::as_ref)
                .map_or(0.0, |t| t.data()[c]);
            let check = CoordinateCheck {
                index: c,
                analytic: ad,
                numeric,
                rel_error: relative_error(ad, numeric),
            };
            if worst.map_or(true, |w| !(check.rel_error <= w.rel_error)) {
                worst = Some(check);
            }
        }
        if let Some(worst) = worst {
            params.push(ParamCheck {
                name: p.name.clone(),
                checked: coords.len(),
                worst,
                passed: worst.rel_error <= config.tolerance,
            });
        }
    }
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        params,
    })
}
