//! Central finite-difference gradient oracle.
//!
//! The oracle only evaluates the checked function forward, so it stays
//! independent of the backward implementation it verifies.

use super::{Graph, Real, TensorData, TensorError, TensorResult, Var};

/// Denominator guard for the relative error.
pub const REL_GUARD: f64 = 1e-8;

/// Compare the analytic gradient of `f` at `point` against central finite
/// differences with step `eps`. Returns the maximum over coordinates of
/// `|analytic − central| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F: Real>(
    f: &dyn Fn(&mut Graph<F>, Var) -> TensorResult<Var>,
    point: &TensorData<F>,
    eps: f64,
) -> TensorResult<f64> {
    if eps <= 0.0 {
        return Err(TensorError::Usage {
            op: "finite_diff_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    // Analytic gradient.
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let y = f(&mut g, x)?;
        if g.value(y).numel() != 1 {
            return Err(TensorError::Usage {
                op: "finite_diff_check",
                msg: "checked function must return a scalar".into(),
            });
        }
        g.backward(y)?;
        g.grad(x)
            .ok_or(TensorError::Usage {
                op: "finite_diff_check",
                msg: "no gradient reached the probe point".into(),
            })?
            .to_f64_vec()
    };

    let eval = |p: &TensorData<F>| -> TensorResult<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone(), false);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item().as_f64())
    };

    let mut worst = 0.0f64;
    let mut p = point.clone();
    for i in 0..p.numel() {
        let orig = p.data[i];
        p.data[i] = orig + F::from_f64(eps);
        let fp = eval(&p)?;
        p.data[i] = orig - F::from_f64(eps);
        let fm = eval(&p)?;
        p.data[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / (analytic[i].abs() + REL_GUARD);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, TensorData};
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, shape: &[usize]) -> TensorData<f64> {
        use rand_distr::StandardNormal;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        TensorData::new(shape.to_vec(), data)
    }

    #[test]
    fn oracle_sum_of_squares_is_tight() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let p = randn(&mut rng, &[3, 4]);
        // Central differences are exact for quadratics, so a larger step
        // leaves only rounding noise.
        let err = finite_diff_check(
            &|g, x| {
                let s = g.square(x);
                g.sum_all(s)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn oracle_sigmoid_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let p = randn(&mut rng, &[10]);
        let err = finite_diff_check(
            &|g, x| {
                let s = g.sigmoid(x);
                g.sum_all(s)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn oracle_rejects_zero_eps() {
        let p = TensorData::<f64>::ones(&[2]);
        let r = finite_diff_check(&|g, x| g.sum_all(x), &p, 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(TensorData::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
        let y = g.sum_all(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn backward_sum_of_squares_gives_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(TensorData::from_f64(&[3], &[1.0, -2.0, 3.0]), true);
        let s = g.square(x);
        let y = g.sum_all(s).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(TensorData::<f64>::ones(&[3]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grads_accumulate_until_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(TensorData::from_f64(&[2], &[1.0, 2.0]), true);
        let y = g.sum_all(x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(TensorData::scalar(0.0));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn l2_norm_of_unit_basis_vector_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(TensorData::from_f64(&[4], &[0.0, 1.0, 0.0, 0.0]));
        let n = g.l2_norm(x, &[0], false).unwrap();
        assert_eq!(g.value(n).item(), 1.0);
    }

    #[test]
    fn log_strict_rejects_nonpositive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(TensorData::from_f64(&[2], &[1.0, -0.5]));
        assert!(g.log(x, true).is_err());
        // Relaxed mode clamps instead.
        let y = g.log(x, false).unwrap();
        assert!((g.value(y).data[1] - (1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn elementwise_family_passes_oracle_at_random_points() {
        type Builder = (&'static str, Box<dyn Fn(&mut Graph<f64>, Var) -> crate::tensor::TensorResult<Var>>);
        let cases: Vec<Builder> = vec![
            ("add", Box::new(|g, x| {
                let c = g.constant(TensorData::from_f64(&[6], &[0.3, -1.0, 2.0, 0.1, -0.2, 1.5]));
                let y = g.add(x, c)?;
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("sub", Box::new(|g, x| {
                let c = g.constant(TensorData::from_f64(&[6], &[0.3, -1.0, 2.0, 0.1, -0.2, 1.5]));
                let y = g.sub(x, c)?;
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("mul_broadcast", Box::new(|g, x| {
                let c = g.constant(TensorData::from_f64(&[3, 1], &[0.5, -1.5, 2.0]));
                let xr = g.reshape(x, &[3, 2])?;
                let y = g.mul(xr, c)?;
                g.sum_all(y)
            })),
            ("div", Box::new(|g, x| {
                let c = g.constant(TensorData::from_f64(&[6], &[1.3, -1.0, 2.0, 1.1, -2.2, 1.5]));
                let y = g.div(x, c)?;
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("scalar_mul", Box::new(|g, x| {
                let y = g.mul_scalar(x, -1.7);
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("leaky_relu", Box::new(|g, x| {
                let y = g.leaky_relu(x, 0.2);
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("sigmoid", Box::new(|g, x| {
                let y = g.sigmoid(x);
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("log_of_softened", Box::new(|g, x| {
                let sq0 = g.square(x);
                let y = g.add_scalar(sq0, 0.5);
                let l = g.log(y, false)?;
                g.sum_all(l)
            })),
            ("square", Box::new(|g, x| {
                let y = g.square(x);
                g.sum_all(y)
            })),
            ("sqrt_of_softened", Box::new(|g, x| {
                let sq0 = g.square(x);
                let y = g.add_scalar(sq0, 0.3);
                let s = g.sqrt(y);
                g.sum_all(s)
            })),
            ("sum_axes", Box::new(|g, x| {
                let xr = g.reshape(x, &[2, 3])?;
                let s = g.sum_axes(xr, &[1], false)?;
                let sq = g.square(s);
                g.sum_all(sq)
            })),
            ("mean_axes", Box::new(|g, x| {
                let xr = g.reshape(x, &[2, 3])?;
                let s = g.mean_axes(xr, &[0], true)?;
                let sq = g.square(s);
                g.sum_all(sq)
            })),
            ("l2_norm", Box::new(|g, x| {
                let xr = g.reshape(x, &[2, 3])?;
                let n = g.l2_norm(xr, &[1], false)?;
                g.sum_all(n)
            })),
            ("concat_slice", Box::new(|g, x| {
                let a = g.slice(x, 0, 0, 2)?;
                let b = g.slice(x, 0, 2, 4)?;
                let c = g.concat(&[b, a], 0)?;
                let sq = g.square(c);
                let w = g.constant(TensorData::from_f64(&[6], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]));
                let p = g.mul(sq, w)?;
                g.sum_all(p)
            })),
            ("reshape", Box::new(|g, x| {
                let y = g.reshape(x, &[3, 2])?;
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("matmul", Box::new(|g, x| {
                let xr = g.reshape(x, &[2, 3])?;
                let w = g.constant(TensorData::from_f64(&[3, 2], &[0.5, -1.0, 2.0, 0.3, -0.7, 1.1]));
                let y = g.matmul(xr, w)?;
                let sq = g.square(y);
                g.sum_all(sq)
            })),
            ("cumsum_flip", Box::new(|g, x| {
                let c = g.cumsum(x, 0)?;
                let f = g.flip(c, 0)?;
                let sq = g.square(f);
                g.sum_all(sq)
            })),
            ("broadcast_to", Box::new(|g, x| {
                let xr = g.reshape(x, &[1, 6])?;
                let b = g.broadcast_to(xr, &[4, 6])?;
                let sq = g.square(b);
                g.sum_all(sq)
            })),
            ("exp", Box::new(|g, x| {
                let y = g.exp(x);
                g.sum_all(y)
            })),
            ("clamp_min", Box::new(|g, x| {
                let y = g.clamp_min(x, 0.05);
                let sq = g.square(y);
                g.sum_all(sq)
            })),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(991);
        for (name, f) in &cases {
            for trial in 0..10 {
                let p = randn(&mut rng, &[6]);
                let err = finite_diff_check(f.as_ref(), &p, 1e-6).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: rel err {err}");
            }
        }
    }
}
