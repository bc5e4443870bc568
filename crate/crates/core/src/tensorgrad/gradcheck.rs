use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};

fn eval<F>(f: &F, xs: &[Tensor]) -> Result<(f64, Vec<bool>), TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item()?, tape.relu_pattern()))
}

/// Outcome of [`gradient_check_smooth`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates whose `±h` probes changed some ReLU's active side.
    pub skipped_at_kinks: usize,
}

fn check<F>(
    f: F,
    xs: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
    skip_kinks: bool,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let pattern = tape.relu_pattern();
    drop(tape);

    let mut report = GradCheckReport {
        max_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    let mut probe = xs.to_vec();
    for &(ti, ci) in coords {
        let analytic = grads.get(vars[ti]).expect("leaf gradient").data()[ci];
        let orig = xs[ti].data()[ci];
        probe[ti].data_mut()[ci] = orig + h;
        let (plus, plus_pattern) = eval(&f, &probe)?;
        probe[ti].data_mut()[ci] = orig - h;
        let (minus, minus_pattern) = eval(&f, &probe)?;
        probe[ti].data_mut()[ci] = orig;
        if skip_kinks && (plus_pattern != pattern || minus_pattern != pattern) {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        report.checked += 1;
        report.max_error = report
            .max_error
            .max((analytic - numeric).abs() / analytic.abs().max(1.0));
    }
    Ok(report)
}

/// Like [`gradient_check_at`], but coordinates whose central-difference
/// probes land on a different linear piece of some ReLU are skipped and
/// counted instead: across a kink the difference quotient is not an estimate
/// of the derivative.
pub fn gradient_check_smooth<F>(
    f: F,
    xs: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    check(f, xs, h, coords, true)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences at the listed `(tensor, element)` coordinates and returns the
/// largest `|analytic − numeric| / max(1, |analytic|)`.
pub fn gradient_check_at<F>(f: F, xs: &[Tensor], h: f64, coords: &[(usize, usize)]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    Ok(check(f, xs, h, coords, false)?.max_error)
}

/// [`gradient_check_at`] over every element of every input.
pub fn gradient_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let coords: Vec<(usize, usize)> = xs
        .iter()
        .enumerate()
        .flat_map(|(ti, x)| (0..x.numel()).map(move |ci| (ti, ci)))
        .collect();
    gradient_check_at(f, xs, h, &coords)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    gradient_check_many(|tape, vs| f(tape, vs[0]), std::slice::from_ref(x), h)
}
