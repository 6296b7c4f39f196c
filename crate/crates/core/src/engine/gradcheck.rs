//! Central finite-difference gradient checking in double precision.

use super::{EngineError, Tape, Tensor, Var};

/// Largest deviation between tape gradients and central differences, per
/// input, relative to the largest gradient magnitude of that input. That
/// magnitude is floored at [`SCALE_FLOOR`] times the largest magnitude over
/// all inputs, so inputs the output does not depend on (a bias followed by
/// batch norm) compare finite-difference noise against the overall scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub relative_error: Vec<f64>,
    pub checked: usize,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_error.iter().copied().fold(0.0, f64::max)
    }
}

pub const SCALE_FLOOR: f64 = 1e-3;

/// Compares the gradient of the scalar `f(inputs)` recorded on a tape with
/// `(f(x + h) − f(x − h)) / 2h`, element by element, for every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheck, EngineError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, EngineError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, EngineError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut deviations = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut values = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            values[k].data_mut()[i] = x + step;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = x - step;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        deviations.push((worst, scale));
    }
    let floor = SCALE_FLOOR * deviations.iter().map(|d| d.1).fold(0.0, f64::max);
    let relative_error = deviations
        .into_iter()
        .map(|(worst, scale)| {
            let s = scale.max(floor);
            if s > 0.0 {
                worst / s
            } else {
                worst
            }
        })
        .collect();
    Ok(GradCheck { relative_error, checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu'(x) at x = 0 is taken as 0 by the tape; the central difference sees 1/2.
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let r = check_gradients(|t, v| Ok(t.relu(v[0])), &[x], 1e-5).unwrap();
        assert!(r.max_error() > 0.1);
    }

    #[test]
    fn product_rule() {
        let a = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.5, 0.25, -3.0]).unwrap();
        let r = check_gradients(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_error() < 1e-8, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn inputs_without_influence_are_measured_against_the_overall_scale() {
        let x = Tensor::from_vec(&[2], vec![0.7, -0.4]).unwrap();
        let c = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let r = check_gradients(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let zero = t.scale(v[1], 0.0);
                let s = t.sum(sq);
                t.add(s, zero)
            },
            &[x, c],
            1e-5,
        )
        .unwrap();
        assert!(r.max_error() < 1e-8, "{r:?}");
    }
}
