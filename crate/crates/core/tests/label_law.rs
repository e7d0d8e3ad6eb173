use copa_core::scm::{gen_labels, label_law, CausalRelation, ScmParams};

const GRID: usize = 2000;

/// Midpoint-rule integration of the structural equations over the unit
/// square of the two latent uniforms. Returns `[P(Y=1), P(Z=1), P(Y=1,Z=1)]`.
fn grid_law(relation: CausalRelation, beta: f64, alpha: f64) -> [f64; 3] {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let mut acc = [0.0; 3];
    for i in 0..GRID {
        let a = (i as f64 + 0.5) / GRID as f64;
        for j in 0..GRID {
            let b = (j as f64 + 0.5) / GRID as f64;
            let (y, z) = match relation {
                CausalRelation::CommonCause => (
                    ind(beta * a + (1.0 - beta) * alpha > 0.5),
                    ind(beta * a + (1.0 - beta) * b > 0.5),
                ),
                CausalRelation::YCausesZ => {
                    let y = ind(beta * a + (1.0 - beta) * alpha > 0.5);
                    (y, ind(beta * y / 2.0 + (1.0 - beta / 2.0) * b > 0.5))
                }
                CausalRelation::ZCausesY => {
                    let z = ind(a > 0.5);
                    (ind(beta * z / 2.0 + beta * b / 2.0 + (1.0 - beta) * alpha > 0.5), z)
                }
            };
            acc[0] += y;
            acc[1] += z;
            acc[2] += y * z;
        }
    }
    acc.map(|v| v / (GRID * GRID) as f64)
}

#[test]
fn closed_form_matches_grid_integration() {
    let alpha = ScmParams::default().alpha;
    for relation in CausalRelation::ALL {
        for beta in [0.1, 0.3, 0.5, 0.7, 0.9, 0.95] {
            let law = label_law(relation, beta, alpha).unwrap();
            let [py, pz, pyz] = grid_law(relation, beta, alpha);
            let tol = 2e-3;
            assert!((law.p_y1 - py).abs() < tol, "{relation} {beta}: P(Y=1) {} vs {py}", law.p_y1);
            assert!((law.p_z1 - pz).abs() < tol, "{relation} {beta}: P(Z=1) {} vs {pz}", law.p_z1);
            if pz > 0.05 {
                let c1 = pyz / pz;
                assert!((law.p_y1_given_z[1] - c1).abs() < 0.01, "{relation} {beta}: P(Y=1|Z=1)");
            }
            if 1.0 - pz > 0.05 {
                let c0 = (py - pyz) / (1.0 - pz);
                assert!((law.p_y1_given_z[0] - c0).abs() < 0.01, "{relation} {beta}: P(Y=1|Z=0)");
            }
        }
    }
}

#[test]
fn sampled_labels_follow_the_closed_form() {
    let params = ScmParams::default();
    for relation in CausalRelation::ALL {
        let beta = 0.7;
        let n = 200_000;
        let labels = gen_labels(relation, beta, &params, n, 11).unwrap();
        let law = label_law(relation, beta, params.alpha).unwrap();
        let py = labels.iter().filter(|l| l.0 == 1).count() as f64 / n as f64;
        let pz = labels.iter().filter(|l| l.1 == 1).count() as f64 / n as f64;
        // five binomial standard errors
        let tol = 5.0 * (0.25 / n as f64).sqrt();
        assert!((py - law.p_y1).abs() < tol, "{relation}: {py} vs {}", law.p_y1);
        assert!((pz - law.p_z1).abs() < tol, "{relation}: {pz} vs {}", law.p_z1);
    }
}

#[test]
fn table_rows_are_distributions() {
    for relation in CausalRelation::ALL {
        for beta in [0.2, 0.6, 0.99] {
            let law = label_law(relation, beta, 0.3).unwrap();
            for row in law.conditional_table() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
