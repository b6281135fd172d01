use super::{Graph, Result, Tensor, Var};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` records a scalar computation on a fresh `f64` graph given the leaves
/// created from `params`. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over every
/// coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.input(t.clone().with_requires_grad(with_grad)))
            .collect();
        let loss = f(&mut g, &vars)?;
        let value = g.scalar(loss);
        let mut grads = Vec::new();
        if with_grad {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let original = work[pi].values()[i];
            work[pi].values_mut()[i] = original + epsilon;
            let (plus, _) = eval(&work, false)?;
            work[pi].values_mut()[i] = original - epsilon;
            let (minus, _) = eval(&work, false)?;
            work[pi].values_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random(&mut rng, vec![3, 4]), random(&mut rng, vec![2, 4]), random(&mut rng, vec![2])];
        let target = random(&mut rng, vec![3, 2]);
        let err = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                let t = g.input(target.clone());
                g.mse(y, t)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn strided_same_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![random(&mut rng, vec![2, 2, 11]), random(&mut rng, vec![3, 2, 4]), random(&mut rng, vec![3])];
        let err = grad_check(
            |g, v| {
                let y = g.conv1d(v[0], v[1], v[2], 2, Padding::Same)?;
                let t = g.leaf(&[2, 3, 6], &[0.1; 36], false)?;
                g.mse(y, t)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random(&mut rng, vec![4, 5])];
        let err = grad_check(|g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]), &params, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
