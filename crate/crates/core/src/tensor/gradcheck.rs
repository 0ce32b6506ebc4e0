use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::par::{self, ExecMode};

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-4;

/// Gradients below this magnitude are compared on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Retry step for coordinates that miss tolerance at [`FD_STEP`]. A kink of
/// relu or max within one step of the point biases the central difference; an
/// adjoint error does not shrink with the step.
pub const FD_FINE_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
    /// Coordinates re-measured at [`FD_FINE_STEP`].
    pub refined: usize,
    /// Set when a gradient was non-finite or the builder failed.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients of `build` against central finite
/// differences for every entry of every parameter.
///
/// `build` receives a fresh graph and one leaf per parameter (in order) and
/// returns the scalar loss. It must be deterministic.
pub fn gradcheck<F>(
    build: F,
    params: &[(String, Tensor<f64>)],
    tol: f64,
    mode: ExecMode,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let analytic = g.grad(loss, &vars)?;

    let eval = |pi: usize, ei: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(j, (_, t))| {
                if j == pi {
                    let mut t = t.clone();
                    t.data_mut()[ei] += delta;
                    g.param(t)
                } else {
                    g.param(t.clone())
                }
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.len()).map(move |ei| (pi, ei)))
        .collect();
    let central = |pi: usize, ei: usize, h: f64| -> Result<f64> {
        Ok((eval(pi, ei, h)? - eval(pi, ei, -h)?) / (2.0 * h))
    };
    let numeric = par::map(mode, &coords, |&(pi, ei)| central(pi, ei, FD_STEP));

    let mut entries: Vec<GradcheckEntry> = params
        .iter()
        .map(|(name, _)| GradcheckEntry {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    let mut failure = None;
    let mut refined = 0;
    for (&(pi, ei), num) in coords.iter().zip(numeric) {
        let ana = analytic[pi].data()[ei];
        let name = &params[pi].0;
        let num = match num {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert_with(|| format!("loss evaluation failed at {name}[{ei}]: {e}"));
                continue;
            }
        };
        if !ana.is_finite() || !num.is_finite() {
            failure.get_or_insert_with(|| {
                format!("non-finite gradient at {name}[{ei}]: analytic {ana}, numeric {num}")
            });
            continue;
        }
        let mut err = rel_error(ana, num);
        let mut num = num;
        if err > tol {
            refined += 1;
            match central(pi, ei, FD_FINE_STEP) {
                Ok(fine) if fine.is_finite() && rel_error(ana, fine) < err => {
                    num = fine;
                    err = rel_error(ana, fine);
                }
                Ok(_) => {}
                Err(e) => {
                    failure.get_or_insert_with(|| format!("loss evaluation failed at {name}[{ei}]: {e}"));
                }
            }
        }
        let e = &mut entries[pi];
        if err > e.max_rel_error || (e.max_rel_error == 0.0 && ei == 0) {
            e.max_rel_error = err;
            e.worst_index = ei;
            e.analytic = ana;
            e.numeric = num;
        }
    }
    let passed = failure.is_none() && entries.iter().all(|e| e.max_rel_error <= tol);
    Ok(GradcheckReport {
        tol,
        entries,
        passed,
        refined,
        failure,
    })
}
