//! Dose-volume curves and trade-off sweeps against independent oracles.
//!
//! The sweep problem reuses the two-beam geometry from the improvement
//! tests: target voxels receive one beam plus a fifth of the other, risk
//! voxels 0.8 of one beam each. With both dose-volume rows softened, each
//! weight pair lands on a kink of the piecewise-linear trade: full coverage
//! at risk tail 9 when the target weight dominates, exact coverage at risk
//! tail 20/3 when the risk weight does.

mod common;

use rand::Rng;
use replan::analysis::{dose_at_volume, dvh, pareto_sweep, AnalysisError};
use replan::rtp::{
    cvar_value, DvKind, DvObjective, PlanProblem, Structure, StructureKind, Weights,
};

fn sweep_problem() -> PlanProblem {
    PlanProblem {
        structures: vec![
            Structure {
                name: "ptv".into(),
                kind: StructureKind::Target,
                voxels: vec![0, 1],
                prescribed_dose: 10.0,
                weights: Weights::default(),
            },
            Structure {
                name: "oar".into(),
                kind: StructureKind::Oar,
                voxels: vec![2, 3],
                prescribed_dose: 0.0,
                weights: Weights::default(),
            },
        ],
        n_beams: 2,
        n_voxels: 4,
        dose_influence: vec![1.0, 0.2, 0.2, 1.0, 0.8, 0.0, 0.0, 0.8],
        objectives: vec![
            DvObjective {
                kind: DvKind::MaxDvh,
                structure: "oar".into(),
                roi_type: StructureKind::Oar,
                dose_limit: 9.0,
                weight: 0.0,
                fraction: 0.5,
            },
            DvObjective {
                kind: DvKind::MinDvh,
                structure: "ptv".into(),
                roi_type: StructureKind::Target,
                dose_limit: 10.0,
                weight: 0.0,
                fraction: 0.5,
            },
        ],
    }
}

#[test]
fn dose_at_volume_matches_the_sorted_tail_oracle() {
    let mut rng = common::rng(0x9a71);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let doses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..80.0)).collect();
        let curve = dvh(&doses, rng.gen_range(2..30)).unwrap();
        for _ in 0..5 {
            let f = rng.gen_range(0.01..1.0);
            let got = dose_at_volume(&curve, f).unwrap();
            let want = common::dose_at_volume_oracle(&doses, f);
            assert!(
                (got - want).abs() <= 1e-12,
                "n={n} f={f}: got {got}, oracle {want}"
            );
        }
    }
}

#[test]
fn hot_tail_mean_dominates_the_dose_at_its_volume() {
    let mut rng = common::rng(0x5eed);
    for _ in 0..200 {
        let n = rng.gen_range(1..30);
        let doses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..60.0)).collect();
        let alpha = rng.gen_range(0.05..0.95);
        let curve = dvh(&doses, 8).unwrap();
        let dv = dose_at_volume(&curve, 1.0 - alpha).unwrap();
        let tail = cvar_value(&doses, alpha).unwrap();
        assert!(tail >= dv - 1e-9, "tail {tail} < dose-at-volume {dv}");
    }
}

#[test]
fn curve_is_a_survivor_function() {
    let doses = [10.0, 20.0, 20.0, 40.0];
    let curve = dvh(&doses, 5).unwrap();
    for w in curve.points.windows(2) {
        assert!(w[0].0 < w[1].0);
        assert!(w[0].1 >= w[1].1);
    }
    assert_eq!(curve.points.first().unwrap().1, 1.0);
    let at = |d: f64| {
        curve
            .points
            .iter()
            .find(|p| (p.0 - d).abs() < 1e-12)
            .unwrap()
            .1
    };
    assert_eq!(at(10.0), 1.0);
    assert_eq!(at(20.0), 0.75);
    assert_eq!(at(40.0), 0.25);
}

#[test]
fn sweep_lands_on_the_hand_computed_kinks() {
    let problem = sweep_problem();
    let pts = pareto_sweep(&problem, 0, 1, &[(10.0, 1.0), (1.0, 1.0), (2.0, 1.0)]).unwrap();
    assert_eq!(pts.len(), 3);
    let w: Vec<f64> = pts.iter().map(|p| p.weights.0).collect();
    assert_eq!(w, vec![1.0, 2.0, 10.0]);
    assert!((pts[0].objective_values.0 - 9.0).abs() <= 1e-6);
    assert!((pts[0].objective_values.1 - 13.5).abs() <= 1e-6);
    for p in &pts[1..] {
        assert!((p.objective_values.0 - 20.0 / 3.0).abs() <= 1e-6);
        assert!((p.objective_values.1 - 10.0).abs() <= 1e-6);
    }
    for w in pts.windows(2) {
        assert!(w[1].objective_values.0 <= w[0].objective_values.0 + 1e-9);
        assert!(w[1].objective_values.1 <= w[0].objective_values.1 + 1e-9);
    }
    assert!(pts.iter().all(|p| !p.dominated));
}

#[test]
fn single_weight_pair_is_accepted() {
    let problem = sweep_problem();
    let pts = pareto_sweep(&problem, 0, 1, &[(1.0, 1.0)]).unwrap();
    assert_eq!(pts.len(), 1);
    assert!(!pts[0].dominated);
}

#[test]
fn sweep_rejects_bad_weights_and_bad_references() {
    let problem = sweep_problem();
    assert!(matches!(
        pareto_sweep(&problem, 0, 1, &[]),
        Err(AnalysisError::BadWeights)
    ));
    assert!(matches!(
        pareto_sweep(&problem, 0, 1, &[(-1.0, 1.0)]),
        Err(AnalysisError::BadWeights)
    ));
    assert!(matches!(
        pareto_sweep(&problem, 1, 0, &[(1.0, 1.0)]),
        Err(AnalysisError::BadObjectiveRef { .. })
    ));
    assert!(matches!(
        pareto_sweep(&problem, 5, 1, &[(1.0, 1.0)]),
        Err(AnalysisError::BadObjectiveRef { .. })
    ));
}

#[test]
fn infeasible_sub_solve_names_the_weight_pair() {
    let mut problem = sweep_problem();
    problem.objectives.push(DvObjective {
        kind: DvKind::MinDose,
        structure: "ptv".into(),
        roi_type: StructureKind::Target,
        dose_limit: 6.0,
        weight: 0.0,
        fraction: 1.0,
    });
    problem.objectives.push(DvObjective {
        kind: DvKind::MaxDose,
        structure: "ptv".into(),
        roi_type: StructureKind::Target,
        dose_limit: 5.0,
        weight: 0.0,
        fraction: 1.0,
    });
    match pareto_sweep(&problem, 0, 1, &[(3.0, 2.0)]) {
        Err(AnalysisError::SubSolveInfeasible { w_oar, w_target }) => {
            assert_eq!((w_oar, w_target), (3.0, 2.0));
        }
        other => panic!("expected infeasible sub-solve, got {other:?}"),
    }
}
