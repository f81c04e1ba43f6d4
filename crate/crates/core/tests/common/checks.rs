//! Library-versus-oracle comparisons; each returns the largest relative gap.

use rand::Rng;

use rda_core::regress::{
    absorb_fixed_effects, absorbed_dof, residualize, tsls_fit, wls_fit, FixedEffect,
    RegressionProblem, DEFAULT_ABSORB_TOL,
};

use super::*;

fn max_gap(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().map(|(a, b)| rel_gap(a, b)).fold(0.0, f64::max)
}

fn random_columns(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..n).map(|_| normal(rng) * rng.random_range(0.5..3.0)).collect()).collect()
}

/// Weighted least squares against the normal equations, coefficients and HC1 SEs.
pub fn wls_check(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = rng.random_range(15..80);
    let k = rng.random_range(1..6);
    let cols = random_columns(&mut rng, n, k);
    let w: Vec<f64> = (0..n).map(|i| if i % 11 == 5 { 0.0 } else { rng.random_range(0.1..4.0) }).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + cols.iter().enumerate().map(|(c, v)| (c as f64 - 1.5) * v[i]).sum::<f64>() + normal(&mut rng))
        .collect();

    let mut p = RegressionProblem::new(y.clone(), w.clone()).with_intercept();
    for (c, v) in cols.iter().enumerate() {
        p = p.with_column(format!("x{c}"), v.clone());
    }
    let fit = wls_fit(&p).unwrap();

    let ones = vec![1.0; n];
    let mut all: Vec<&[f64]> = vec![&ones];
    all.extend(cols.iter().map(|c| c.as_slice()));
    let x = hstack(&all);
    let b = normal_equations(&x, &y, &w);
    let e = residuals(&x, &y, &b);
    let se = hc1_se(&x, &w, &e, x.ncols());
    max_gap(
        fit.coefficients
            .iter()
            .enumerate()
            .flat_map(|(c, coef)| [(coef.estimate, b[c]), (coef.robust_se, se[c])]),
    )
}

/// Just-identified 2SLS against the ratio of partialled-out covariances.
pub fn tsls_check(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = rng.random_range(30..120);
    let k = rng.random_range(0..4);
    let controls = random_columns(&mut rng, n, k);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let z: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let u: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let x: Vec<f64> = (0..n)
        .map(|i| 0.9 * z[i] + 0.5 * u[i] + controls.iter().map(|c| 0.3 * c[i]).sum::<f64>() + 0.3 * normal(&mut rng))
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| -1.2 * x[i] + u[i] + controls.iter().map(|c| 0.2 * c[i]).sum::<f64>())
        .collect();

    let mut p = RegressionProblem::new(y.clone(), w.clone())
        .with_column("x", x.clone())
        .with_intercept();
    for (c, v) in controls.iter().enumerate() {
        p = p.with_column(format!("c{c}"), v.clone());
    }
    let fit = tsls_fit(&p.with_instrument("x", "z", z.clone())).unwrap();

    let ones = vec![1.0; n];
    let mut ctrl: Vec<&[f64]> = vec![&ones];
    ctrl.extend(controls.iter().map(|c| c.as_slice()));
    let cm = hstack(&ctrl);
    let (yt, xt, zt) = (partial_out(&y, &cm, &w), partial_out(&x, &cm, &w), partial_out(&z, &cm, &w));
    let beta = wcov(&zt, &yt, &w) / wcov(&zt, &xt, &w);

    // robust SE: scores use first-stage fitted values, residuals use the original x
    let mut fs: Vec<&[f64]> = vec![&z];
    fs.extend(ctrl.iter().copied());
    let fsm = hstack(&fs);
    let fb = normal_equations(&fsm, &x, &w);
    let xhat: Vec<f64> = (&fsm * fb).iter().copied().collect();
    let mut sc: Vec<&[f64]> = vec![&xhat];
    sc.extend(ctrl.iter().copied());
    let scores = hstack(&sc);
    let b2 = normal_equations(&scores, &y, &w);
    let mut orig: Vec<&[f64]> = vec![&x];
    orig.extend(ctrl.iter().copied());
    let e = residuals(&hstack(&orig), &y, &b2);
    let se = hc1_se(&scores, &w, &e, scores.ncols());

    max_gap([
        (fit.coef("x").unwrap(), beta),
        (fit.coef("x").unwrap(), b2[0]),
        (fit.se("x").unwrap(), se[0]),
    ])
}

/// Residualize-then-regress against the joint regression.
pub fn fwl_check(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = rng.random_range(20..100);
    let k = rng.random_range(1..5);
    let others = random_columns(&mut rng, n, k);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    let x1: Vec<f64> = (0..n).map(|i| normal(&mut rng) + others[0][i]).collect();
    let y: Vec<f64> = (0..n).map(|i| 2.0 * x1[i] - others[0][i] + normal(&mut rng)).collect();

    let ones = vec![1.0; n];
    let mut all: Vec<&[f64]> = vec![&x1, &ones];
    all.extend(others.iter().map(|c| c.as_slice()));
    let joint = normal_equations(&hstack(&all), &y, &w)[0];

    let on = hstack(&all[1..]);
    let targets = hstack(&[&y, &x1]);
    let r = residualize(&targets, &on, &w).unwrap();
    let fit = wls_fit(
        &RegressionProblem::new(r.column(0).iter().copied().collect(), w.clone())
            .with_column("x1", r.column(1).iter().copied().collect()),
    )
    .unwrap();
    rel_gap(fit.coef("x1").unwrap(), joint)
}

/// Absorbed fixed effects against explicit dummy columns, one or two dimensions.
pub fn fe_check(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let two_way = seed % 2 == 1;
    let g1 = rng.random_range(2..7);
    let g2 = rng.random_range(2..5);
    let n = rng.random_range(40..120);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        // the first rows link every group into one connected component
        if i < g2 {
            a.push(i % g1);
            b.push(i);
        } else if i < g2 + g1 {
            a.push(i - g2);
            b.push(0);
        } else {
            a.push(rng.random_range(0..g1));
            b.push(rng.random_range(0..g2));
        }
    }
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let x1: Vec<f64> = (0..n).map(|i| normal(&mut rng) + a[i] as f64 * 0.3).collect();
    let x2: Vec<f64> = (0..n).map(|i| normal(&mut rng) - b[i] as f64 * 0.2).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 0.5 * x1[i] - 1.5 * x2[i] + a[i] as f64 + if two_way { b[i] as f64 * 0.7 } else { 0.0 } + normal(&mut rng))
        .collect();

    let ka: Vec<String> = a.iter().map(|g| format!("a{g}")).collect();
    let kb: Vec<String> = b.iter().map(|g| format!("b{g}")).collect();
    let mut effects = vec![FixedEffect::from_keys("a", &ka)];
    if two_way {
        effects.push(FixedEffect::from_keys("b", &kb));
    }
    let m = hstack(&[&y, &x1, &x2]);
    let abs = absorb_fixed_effects(&m, &effects, &w, DEFAULT_ABSORB_TOL).unwrap();
    let dof = absorbed_dof(&effects, &w);
    let col = |c: usize| abs.column(c).iter().copied().collect::<Vec<f64>>();
    let fit = wls_fit(
        &RegressionProblem::new(col(0), w.clone())
            .with_column("x1", col(1))
            .with_column("x2", col(2))
            .with_absorbed_dof(dof),
    )
    .unwrap();

    let mut dummies: Vec<Vec<f64>> = (0..g1).map(|g| a.iter().map(|&v| (v == g) as u8 as f64).collect()).collect();
    if two_way {
        dummies.extend((1..g2).map(|g| b.iter().map(|&v| (v == g) as u8 as f64).collect::<Vec<f64>>()));
    }
    let mut all: Vec<&[f64]> = vec![&x1, &x2];
    all.extend(dummies.iter().map(|d| d.as_slice()));
    let x = hstack(&all);
    let beta = normal_equations(&x, &y, &w);
    let e = residuals(&x, &y, &beta);
    let se = hc1_se(&x, &w, &e, x.ncols());
    assert_eq!(dof, dummies.len());
    max_gap([
        (fit.coef("x1").unwrap(), beta[0]),
        (fit.coef("x2").unwrap(), beta[1]),
        (fit.se("x1").unwrap(), se[0]),
        (fit.se("x2").unwrap(), se[1]),
    ])
}
