//! Central-finite-difference verification of tape gradients.

use super::{Tape, Tensor, Val};
use crate::{Real, Result};

/// Builds the graph under test and returns the scalar loss. The builder
/// must bind the given tensors themselves (directly, or by temporarily
/// swapping them into a model), so their gradients are retrievable from
/// the tape afterwards. Must be deterministic: same inputs, same graph.
pub type GraphBuilder<'a> = dyn FnMut(&mut Tape, &mut [Tensor]) -> Result<Val> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// (element index, relative error) for entries above tolerance;
    /// non-finite evaluations are reported as infinite error.
    pub failures: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.failures.is_empty())
    }

    pub fn total_checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn total_skipped(&self) -> usize {
        self.entries.iter().map(|e| e.skipped).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.failures.is_empty() { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{status:4} {:<28} max_rel_err {:9.3e}  checked {:5}  skipped {}\n",
                e.name, e.max_rel_err, e.checked, e.skipped
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (tolerance {:.1e})\n",
            self.max_rel_err(),
            self.tolerance
        ));
        out
    }
}

/// Compares tape gradients of `build` against central finite differences,
/// one perturbed element at a time.
///
/// A comparison is skipped when the perturbed forward passes cross a
/// relu/leaky-relu/clamp breakpoint (detected by the tape's activation
/// signature changing), or when the unperturbed pass already sits within
/// 1e-6 of a breakpoint that the perturbation moves: at such points the
/// subgradient convention and the difference quotient legitimately
/// disagree. Gradients tiny relative to their tensor's largest gradient
/// are measured against that scale instead of their own magnitude, since
/// the difference quotient carries an absolute rounding-noise floor.
pub fn check_gradients(
    inputs: &[(&str, Tensor)],
    build: &mut GraphBuilder,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut work: Vec<Tensor> = inputs
        .iter()
        .map(|(_, t)| {
            let mut c = t.clone();
            c.requires_grad = true;
            c.grad = None;
            c
        })
        .collect();

    // Analytic pass.
    let mut tape = Tape::new();
    let loss = build(&mut tape, &mut work)?;
    tape.backward(loss)?;
    let base_sig = tape.activation_signature();
    let analytic: Vec<Vec<Real>> = work
        .iter()
        .map(|t| {
            tape.grad_of(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut eval = |work: &mut [Tensor]| -> Result<(Real, u64)> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, work)?;
        Ok((tape.item(loss), tape.activation_signature()))
    };

    let mut entries = Vec::new();
    for (p, (name, _)) in inputs.iter().enumerate() {
        let n = work[p].numel();
        let scale = analytic[p]
            .iter()
            .map(|v| v.abs() as f64)
            .fold(0.0, f64::max);
        let mut entry = GradCheckEntry {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            failures: Vec::new(),
        };
        for e in 0..n {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + step as Real;
            let plus = eval(&mut work);
            work[p].data_mut()[e] = orig - step as Real;
            let minus = eval(&mut work);
            work[p].data_mut()[e] = orig;

            let (fp, sig_p, fm, sig_m) = match (plus, minus) {
                (Ok((fp, kp)), Ok((fm, km))) => (fp, kp, fm, km),
                _ => {
                    entry.failures.push((e, f64::INFINITY));
                    continue;
                }
            };
            if !fp.is_finite() || !fm.is_finite() {
                entry.failures.push((e, f64::INFINITY));
                continue;
            }
            if sig_p != base_sig || sig_m != base_sig {
                entry.skipped += 1;
                continue;
            }
            let numeric = (fp as f64 - fm as f64) / (2.0 * step);
            let a = analytic[p][e] as f64;
            entry.checked += 1;
            let mag = a.abs().max(numeric.abs());
            let err = if mag < 1e-7 {
                0.0
            } else {
                (a - numeric).abs() / mag.max(1e-3 * scale)
            };
            entry.max_rel_err = entry.max_rel_err.max(err);
            if err > tolerance {
                entry.failures.push((e, err));
            }
        }
        entries.push(entry);
    }

    Ok(GradCheckReport {
        tolerance,
        step,
        entries,
    })
}
