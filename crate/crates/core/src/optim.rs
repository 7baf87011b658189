//! Derivative-free minimization.

/// Nelder-Mead with dimension-adaptive coefficients. Non-finite objective
/// values are treated as `+inf`. Returns the best point and its value.
pub(crate) fn nelder_mead<F>(f: F, x0: &[f64], step: &[f64], max_evals: usize, tol: f64) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();
    let mut evals = n + 1;

    let point = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(w).map(|(c, w)| c + t * (w - c)).collect()
    };

    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|a, b| vals[*a].total_cmp(&vals[*b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() <= tol * (1.0 + vals[0].abs()) {
            break;
        }
        let mut centroid = vec![0.0; n];
        for p in &pts[..n] {
            for (c, x) in centroid.iter_mut().zip(p) {
                *c += x / nf;
            }
        }
        let reflected = point(&centroid, &pts[n], -alpha);
        let fr = eval(&reflected);
        evals += 1;
        if fr < vals[0] {
            let expanded = point(&centroid, &pts[n], -alpha * beta);
            let fe = eval(&expanded);
            evals += 1;
            if fe < fr {
                pts[n] = expanded;
                vals[n] = fe;
            } else {
                pts[n] = reflected;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = reflected;
            vals[n] = fr;
            continue;
        }
        let t = if fr < vals[n] { -alpha * gamma } else { gamma };
        let contracted = point(&centroid, &pts[n], t);
        let fc = eval(&contracted);
        evals += 1;
        if fc < vals[n].min(fr) {
            pts[n] = contracted;
            vals[n] = fc;
            continue;
        }
        let best = pts[0].clone();
        for i in 1..=n {
            pts[i] = point(&best, &pts[i], delta);
            vals[i] = eval(&pts[i]);
        }
        evals += n;
    }
    let best = (0..=n).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap_or(0);
    (pts[best].clone(), vals[best])
}
