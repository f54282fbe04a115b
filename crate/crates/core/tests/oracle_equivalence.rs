use boostbert::baselines::{reference_problems, samme_oracle, trajectory_gap, StumpLearner};
use boostbert::boosting::{check_weight_law, run_boosting, WeightVector};

#[test]
fn engine_matches_oracle_on_reference_problems() {
    for seed in [0, 1, 2] {
        for p in reference_problems(seed) {
            let oracle = samme_oracle(&p.features, &p.labels, 5, p.num_classes).unwrap();
            let mut learner = StumpLearner {
                num_classes: p.num_classes,
            };
            let run = run_boosting(&mut learner, &p.features, &p.labels, p.num_classes, 5).unwrap();
            let gap = trajectory_gap(&oracle, &run).unwrap_or_else(|| {
                panic!("{} (seed {seed}): different stumps or round counts", p.name)
            });
            assert!(gap <= 1e-12, "{} (seed {seed}): gap {gap:e}", p.name);
        }
    }
}

#[test]
fn every_round_obeys_the_weight_law() {
    for p in reference_problems(5) {
        let mut learner = StumpLearner {
            num_classes: p.num_classes,
        };
        let run = run_boosting(&mut learner, &p.features, &p.labels, p.num_classes, 5).unwrap();
        for (r, log) in run.rounds.iter().zip(&run.log) {
            check_weight_law(
                r.round,
                &r.weights_before,
                &r.weights_after,
                &r.predictions,
                &p.labels,
                r.alpha,
            )
            .unwrap();
            assert!(log.wrong_fraction_after > log.wrong_fraction_before);
        }
    }
}

#[test]
fn weight_law_rejects_tampered_weights() {
    let before = WeightVector::new(vec![0.25; 4]).unwrap();
    let mut after = vec![0.25, 0.25, 0.25, 0.75];
    let preds = [0, 1, 0, 0];
    let labels = [0, 1, 0, 1];
    let alpha = 3f64.ln();
    check_weight_law(
        1,
        &before,
        &WeightVector::new(after.clone()).unwrap(),
        &preds,
        &labels,
        alpha,
    )
    .unwrap();
    after[0] = 0.3;
    assert!(check_weight_law(
        1,
        &before,
        &WeightVector::new(after).unwrap(),
        &preds,
        &labels,
        alpha
    )
    .is_err());
}
