use labmae::baselines::{ImputerKind, ImputerSpec};
use labmae::data::Cohort;
use labmae::error::Error;
use labmae::eval::*;
use labmae::rng::rng_from_seed;
use labmae::synth::{generate, SynthConfig};
use proptest::prelude::*;
use rand::Rng;

/// Brute-force W1 on the line: the optimal plan between two empirical
/// measures, found by walking both sorted supports with mass splitting.
fn transport_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut a: Vec<(f64, f64)> = p.iter().map(|&x| (x, 1.0 / p.len() as f64)).collect();
    let mut b: Vec<(f64, f64)> = q.iter().map(|&x| (x, 1.0 / q.len() as f64)).collect();
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut i, mut j, mut cost) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let m = a[i].1.min(b[j].1);
        cost += m * (a[i].0 - b[j].0).abs();
        a[i].1 -= m;
        b[j].1 -= m;
        if a[i].1 <= 1e-15 {
            i += 1;
        }
        if j < b.len() && b[j].1 <= 1e-15 {
            j += 1;
        }
    }
    cost
}

/// The O(n²) check the other way round: for equal sizes the optimal plan is
/// a permutation, and on the line every crossing pair can be uncrossed, so
/// the best of all pairwise swaps from the sorted matching cannot improve.
fn no_improving_swap(p: &[f64], q: &[f64]) -> bool {
    let mut a = p.to_vec();
    let mut b = q.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let now = (a[i] - b[i]).abs() + (a[j] - b[j]).abs();
            let swapped = (a[i] - b[j]).abs() + (a[j] - b[i]).abs();
            if swapped < now - 1e-12 {
                return false;
            }
        }
    }
    true
}

fn randvec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
}

#[test]
fn wasserstein_matches_transport_oracle() {
    let mut rng = rng_from_seed(1);
    for n in [1, 2, 7, 50, 100] {
        for m in [n, 3, 100] {
            let p = randvec(&mut rng, n);
            let q = randvec(&mut rng, m);
            let w = wasserstein1(&p, &q).unwrap();
            assert!((w - transport_oracle(&p, &q)).abs() < 1e-9, "n={n} m={m}");
        }
        let p = randvec(&mut rng, n);
        let q = randvec(&mut rng, n);
        assert!(no_improving_swap(&p, &q));
    }
}

#[test]
fn metric_fixtures() {
    let r = rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap();
    assert!((r - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((r2(&[0.0, 1.0, 2.0], &[0.0, 0.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    let y = [3.0, 1.0, 4.0, 1.5];
    let c = 2.75;
    let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
    assert!((wasserstein1(&y, &shifted).unwrap() - c).abs() < 1e-12);
    assert!(matches!(rmse(&[], &[]), Err(Error::EmptyInput)));
    assert!(matches!(wasserstein1(&[1.0], &[]), Err(Error::EmptyInput)));
}

proptest! {
    #[test]
    fn wasserstein_symmetric_and_triangle(seed in 0u64..10_000, n in 1usize..40, m in 1usize..40, k in 1usize..40) {
        let mut rng = rng_from_seed(seed);
        let (a, b, c) = (randvec(&mut rng, n), randvec(&mut rng, m), randvec(&mut rng, k));
        let ab = wasserstein1(&a, &b).unwrap();
        prop_assert!((ab - wasserstein1(&b, &a).unwrap()).abs() < 1e-12);
        let bc = wasserstein1(&b, &c).unwrap();
        let ac = wasserstein1(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn rmse_squared_is_mse(seed in 0u64..10_000, n in 1usize..60) {
        let mut rng = rng_from_seed(seed);
        let (y, p) = (randvec(&mut rng, n), randvec(&mut rng, n));
        let direct = y.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
        prop_assert!((rmse(&y, &p).unwrap().powi(2) - direct).abs() < 1e-12 * direct.max(1.0));
    }
}

/// Reads the answer from the cohort's ground truth.
struct Oracle {
    truth: labmae::math::Matrix,
    ids: Vec<String>,
}

impl Imputer for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, hidden: &Cohort, feature: usize) -> labmae::Result<Vec<f64>> {
        Ok(hidden
            .rows
            .iter()
            .map(|r| {
                let i = self.ids.iter().position(|a| *a == r.admission_id).unwrap();
                self.truth.get(i, feature)
            })
            .collect())
    }
}

/// Records the blanked inputs it was given.
struct Spy(std::sync::Mutex<Vec<Option<f64>>>);

impl Imputer for Spy {
    fn name(&self) -> &str {
        "spy"
    }

    fn predict(&self, hidden: &Cohort, feature: usize) -> labmae::Result<Vec<f64>> {
        let mut seen = self.0.lock().unwrap();
        seen.extend(hidden.rows.iter().map(|r| r.values[feature]));
        Ok(vec![0.0; hidden.len()])
    }
}

fn cohort(seed: u64, n: usize, groups: usize, followup_prob: f64) -> Cohort {
    generate(&SynthConfig {
        n_rows: n,
        n_features: 5,
        latent_rank: 2,
        n_groups: groups,
        followup_prob,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn split(c: &Cohort) -> (Cohort, Cohort) {
    let mut t: Vec<i64> = c.rows.iter().map(|r| r.admission_time).collect();
    t.sort();
    c.temporal_split(t[t.len() * 4 / 5])
}

#[test]
fn oracle_scores_perfectly_and_counts_cells() {
    let c = cohort(2, 400, 3, 0.5);
    let oracle = Oracle {
        truth: c.ground_truth().unwrap().clone(),
        ids: c.rows.iter().map(|r| r.admission_id.clone()).collect(),
    };
    for f in c.schema.features() {
        let rec = evaluate_feature(&c, &oracle, &f.id).unwrap();
        assert_eq!(rec.rmse, 0.0);
        assert_eq!(rec.wasserstein, 0.0);
        assert_eq!(rec.r2, Some(1.0));
        let j = c.schema.feature_index(&f.id).unwrap();
        assert_eq!(rec.n, c.rows.iter().filter(|r| r.values[j].is_some()).count());
    }
}

#[test]
fn mean_baseline_has_nonpositive_r2() {
    let c = cohort(3, 1000, 2, 0.5);
    let (train, test) = split(&c);
    let schema = train.fit_normalizer((0.0, 1.0)).unwrap();
    let mean = BaselineMethod::fit(&train, &schema, &ImputerSpec::new(ImputerKind::Mean)).unwrap();
    for rec in evaluate_all(&test, &mean).unwrap() {
        assert!(rec.r2.unwrap() <= 1e-12, "{rec:?}");
    }
}

#[test]
fn methods_never_see_hidden_values() {
    let c = cohort(4, 300, 2, 0.5);
    let (train, test) = split(&c);
    let spy = Spy(Default::default());
    evaluate_feature(&test, &spy, &test.schema.features()[2].id).unwrap();
    let seen = spy.0.lock().unwrap();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(Option::is_none));

    // corrupting the target values changes no method's predictions
    let schema = train.fit_normalizer((0.01, 0.99)).unwrap();
    let mut corrupted = test.clone();
    for r in &mut corrupted.rows {
        if let Some(v) = r.values[2] {
            r.values[2] = Some(v * 7.0 + 100.0);
        }
    }
    for kind in ImputerKind::ALL {
        let m = BaselineMethod::fit(&train, &schema, &ImputerSpec::new(kind)).unwrap();
        let a = predict_feature(&test, &m, 2).unwrap();
        let b = predict_feature(&corrupted, &m, 2).unwrap();
        assert_eq!(a.pred, b.pred, "{kind:?}");
        assert_ne!(a.truth, b.truth);
    }
}

#[test]
fn single_group_matches_unstratified() {
    let c = cohort(5, 600, 1, 0.5);
    let (train, test) = split(&c);
    let schema = train.fit_normalizer((0.01, 0.99)).unwrap();
    let m = BaselineMethod::fit(&train, &schema, &ImputerSpec::new(ImputerKind::EmGaussian)).unwrap();
    let pooled = evaluate_all(&test, &m).unwrap();
    let strat = stratify_by_group(&test, &m, &[], DEFAULT_MIN_GROUP_N).unwrap();
    assert_eq!(pooled.len(), strat.len());
    for (a, b) in pooled.iter().zip(&strat) {
        assert_eq!((a.rmse, a.r2, a.mae, a.wasserstein, a.n), (b.rmse, b.r2, b.mae, b.wasserstein, b.n));
        assert_eq!(b.group.as_deref(), Some("g0"));
    }
}

#[test]
fn pooled_mse_is_weighted_group_mean() {
    let c = cohort(6, 1200, 4, 0.5);
    let (train, test) = split(&c);
    let schema = train.fit_normalizer((0.01, 0.99)).unwrap();
    let m = BaselineMethod::fit(&train, &schema, &ImputerSpec::new(ImputerKind::MiceRidge)).unwrap();
    let pooled = evaluate_all(&test, &m).unwrap();
    let strat = stratify_by_group(&test, &m, &[], DEFAULT_MIN_GROUP_N).unwrap();
    for p in &pooled {
        let per: Vec<MetricRecord> = strat.iter().filter(|r| r.feature_id == p.feature_id).cloned().collect();
        assert_eq!(per.iter().map(|r| r.n).sum::<usize>(), p.n);
        let w = pooled_mse(&per).unwrap();
        assert!((w - p.mse()).abs() <= 1e-10 * p.mse().max(1.0), "{w} vs {}", p.mse());
    }
}

#[test]
fn low_support_flag_and_unknown_groups() {
    let c = cohort(7, 200, 4, 0.5);
    let mean = BaselineMethod::fit(
        &c,
        &c.fit_normalizer((0.0, 1.0)).unwrap(),
        &ImputerSpec::new(ImputerKind::Mean),
    )
    .unwrap();
    let recs = stratify_by_group(&c, &mean, &[], 45).unwrap();
    assert!(recs.iter().any(|r| r.low_support));
    assert!(recs.iter().all(|r| r.low_support == (r.n < 45)));
    let allowed = vec!["g0".to_string(), "g1".to_string()];
    assert!(matches!(stratify_by_group(&c, &mean, &allowed, 30), Err(Error::UnknownGroup(_))));
}

#[test]
fn identical_groups_have_gap_ci_covering_zero() {
    let c = cohort(8, 4000, 2, 0.5);
    let (train, test) = split(&c);
    let schema = train.fit_normalizer((0.01, 0.99)).unwrap();
    let m = BaselineMethod::fit(&train, &schema, &ImputerSpec::new(ImputerKind::EmGaussian)).unwrap();
    for f in 0..5 {
        let a = predict_feature(&test.filter(|r| r.group == "g0"), &m, f).unwrap();
        let b = predict_feature(&test.filter(|r| r.group == "g1"), &m, f).unwrap();
        let (gap, lo, hi) = bootstrap_rmse_gap(&a, &b, 2000, 0.95, 9 + f as u64).unwrap();
        assert!(lo <= gap && gap <= hi);
        assert!(lo <= 0.0 && 0.0 <= hi, "feature {f}: [{lo}, {hi}]");
    }
}

#[test]
fn followup_strata_empty_flags() {
    for (p, with_empty) in [(1.0, false), (0.0, true)] {
        let c = cohort(9, 200, 1, p);
        let mean = BaselineMethod::fit(
            &c,
            &c.fit_normalizer((0.0, 1.0)).unwrap(),
            &ImputerSpec::new(ImputerKind::Mean),
        )
        .unwrap();
        let ab = followup_ablation(&c, &mean, &c.schema.features()[0].id).unwrap();
        assert_eq!(ab.with.is_none(), with_empty);
        assert_eq!(ab.without.is_none(), !with_empty);
        let rec = ab.with.or(ab.without).unwrap();
        assert_ne!(rec.stratum, Stratum::All);
    }
}

fn rec(feature: &str, method: &str, rmse: f64, wd: f64, r2: f64) -> MetricRecord {
    MetricRecord {
        feature_id: feature.into(),
        method: method.into(),
        group: None,
        stratum: Stratum::All,
        rmse,
        r2: Some(r2),
        mae: rmse,
        wasserstein: wd,
        n: 10,
        low_support: false,
    }
}

#[test]
fn win_count_fixture() {
    // baseline wins RMSE on f1 and f2, WD on f3 only, R2 nowhere (f3 ties)
    let recs = vec![
        rec("f1", "ref", 2.0, 1.0, 0.9),
        rec("f2", "ref", 2.0, 1.0, 0.9),
        rec("f3", "ref", 2.0, 1.0, 0.5),
        rec("f1", "base", 1.0, 1.0, 0.8),
        rec("f2", "base", 1.5, 2.0, 0.1),
        rec("f3", "base", 2.0, 0.5, 0.5),
    ];
    let t = win_counts(&recs, "ref").unwrap();
    assert_eq!(
        [Metric::Rmse, Metric::Wasserstein, Metric::R2].map(|m| t.baseline("base", m)),
        [2, 1, 0]
    );
    assert_eq!(t.reference("base", Metric::R2), 2);
    assert_eq!(t.n_features, 3);
    assert!(t.to_markdown().contains("| base | 2 | 1 | 0 |"));

    let same: Vec<MetricRecord> = recs[..3]
        .iter()
        .cloned()
        .chain(recs[..3].iter().cloned().map(|mut r| {
            r.method = "copy".into();
            r
        }))
        .collect();
    let t = win_counts(&same, "ref").unwrap();
    for m in Metric::ALL {
        assert_eq!(t.baseline("copy", m), 0);
        assert_eq!(t.reference("copy", m), 0);
    }
}

#[test]
fn win_counts_reject_uneven_grids() {
    let recs = vec![
        rec("f1", "ref", 1.0, 1.0, 0.5),
        rec("f2", "ref", 1.0, 1.0, 0.5),
        rec("f1", "base", 1.0, 1.0, 0.5),
    ];
    assert!(matches!(win_counts(&recs, "ref"), Err(Error::Coverage(_))));
    assert!(matches!(win_counts(&recs[..2], "nobody"), Err(Error::Coverage(_))));
    let mut dup = recs.clone();
    dup.push(rec("f1", "base", 1.0, 1.0, 0.5));
    assert!(matches!(win_counts(&dup, "ref"), Err(Error::Coverage(_))));
}

#[test]
fn records_csv_layout() {
    let mut buf = Vec::new();
    let mut r = rec("f1", "mean", 0.5, 0.25, 0.0);
    r.r2 = None;
    r.group = Some("g1".into());
    write_records_csv(&[r.clone()], &mut buf).unwrap();
    assert_eq!(read_records_csv(buf.as_slice()).unwrap(), vec![r]);
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(
        s,
        "feature_id,method,group,stratum,rmse,r2,mae,wasserstein,n,low_support\nf1,mean,g1,all,0.5,,0.5,0.25,10,false\n"
    );
}
