use super::{Result, Tape, Tensor, TensorError, Var};

/// Evaluates `f` at `x` on a fresh tape and returns the scalar result.
fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let out = f(&mut tape, input)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NotScalar(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Central-difference gradient of a scalar function of `x`.
pub fn central_difference<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`,
/// comparing the tape gradient of `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(input).unwrap_or(&zeros).to_vec();
    let numeric = central_difference(&f, x, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Axis, ReduceKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_at_three() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let f = |t: &mut Tape<f64>, x: Var| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        };
        let numeric = central_difference(f, &x, 1e-5).unwrap();
        assert!((numeric[0] - 6.0).abs() < 1e-8);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let s = tape.sigmoid(x);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap()[0], 0.25);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = grad_check(|t, x| Ok(t.relu(x)), &x, 1e-5).unwrap_err();
        assert_eq!(err, TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let a = random(&[3, 4], &mut rng);
        let f = |t: &mut Tape<f64>, x: Var| {
            let bv = t.constant(b.clone());
            let wv = t.constant(w.clone());
            let p = t.matmul(x, bv)?;
            let p = t.mul(p, wv)?;
            Ok(t.sum(p))
        };
        assert!(grad_check(f, &a, 1e-5).unwrap() <= 1e-6);

        // and with respect to the right operand
        let f = |t: &mut Tape<f64>, x: Var| {
            let av = t.constant(a.clone());
            let wv = t.constant(w.clone());
            let p = t.matmul(av, x)?;
            let p = t.mul(p, wv)?;
            Ok(t.sum(p))
        };
        assert!(grad_check(f, &b, 1e-5).unwrap() <= 1e-6);
    }

    /// Every op kind composed with a random linear readout so no gradient
    /// is trivially uniform.
    #[test]
    fn every_op_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let x = random(&[3, 4], &mut rng);
            let w = random(&[3, 4], &mut rng);
            let other = random(&[3, 4], &mut rng).map(|v| v.abs() + 0.5);
            let bias = random(&[4], &mut rng);
            let readout = |t: &mut Tape<f64>, y: Var| -> Result<Var> {
                let shape = t.shape(y).to_vec();
                let n: usize = shape.iter().product();
                let mut r = ChaCha8Rng::seed_from_u64(99 + n as u64);
                let wr = Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
                let wv = t.constant(wr);
                let p = t.mul(y, wv)?;
                Ok(t.sum(p))
            };
            type Case<'a> = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var> + 'a>;
            let cases: Vec<(&str, Case)> = vec![
                ("add", Box::new(|t, x| { let b = t.constant(bias.clone()); t.add(x, b) })),
                ("sub", Box::new(|t, x| { let b = t.constant(other.clone()); t.sub(b, x) })),
                ("mul", Box::new(|t, x| { let w = t.constant(w.clone()); t.mul(x, w) })),
                ("div", Box::new(|t, x| { let o = t.constant(other.clone()); let y = t.div(x, o)?; let d = t_abs_plus(t, x)?; let z = t.div(o, d)?; t.add(y, z) })),
                ("scale", Box::new(|t, x| Ok(t.scale(x, -2.5)))),
                ("relu", Box::new(|t, x| Ok(t.relu(x)))),
                ("sigmoid", Box::new(|t, x| Ok(t.sigmoid(x)))),
                ("softplus", Box::new(|t, x| Ok(t.softplus(x)))),
                ("abs", Box::new(|t, x| Ok(t.abs(x)))),
                ("transpose", Box::new(|t, x| t.transpose(x))),
                ("softmax", Box::new(|t, x| t.row_softmax(x))),
                ("log_softmax", Box::new(|t, x| t.log_softmax(x))),
                ("layer_norm", Box::new(|t, x| t.layer_norm(x, 1e-5))),
                ("fourier", Box::new(|t, x| { let c = t.slice_cols(x, 0, 3)?; let c = t.scale(c, 0.2); t.fourier(c, 4) })),
                ("view", Box::new(|t, x| t.view(x, 3, &[2, 4]))),
                ("gather", Box::new(|t, x| t.gather_rows(x, &[2, 0, 2]))),
                ("slice_concat", Box::new(|t, x| { let a = t.slice_cols(x, 1, 2)?; let b = t.slice_cols(x, 0, 1)?; t.concat_cols(&[a, b, a]) })),
                ("sum_rows", Box::new(|t, x| t.reduce(ReduceKind::Sum, x, Axis::Dim(1)))),
                ("mean_cols", Box::new(|t, x| t.reduce(ReduceKind::Mean, x, Axis::Dim(0)))),
                ("l1", Box::new(|t, x| t.reduce(ReduceKind::L1, x, Axis::All))),
                ("sq_l2", Box::new(|t, x| t.reduce(ReduceKind::SquaredL2, x, Axis::Dim(1)))),
            ];
            for (name, op) in &cases {
                let f = |t: &mut Tape<f64>, x: Var| {
                    let y = op(t, x)?;
                    readout(t, y)
                };
                let err = grad_check(f, &x, 1e-5).unwrap();
                assert!(err <= 1e-6, "{name} trial {trial}: {err}");
            }
        }
    }

    fn t_abs_plus(t: &mut Tape<f64>, x: Var) -> Result<Var> {
        let a = t.abs(x);
        Ok(t.add_scalar(a, 1.0))
    }
}
