//! Planning model lowering: CVaR rows, measure variables, persistence.

mod common;

use rand::Rng;
use replan::lp::check_feasible;
use replan::rtp::{
    build_rtp, cvar_value, io, lower_cvar_value, solve_plan, BoundKind, DvKind, DvObjective,
    PlanProblem, RtpError, Structure, StructureKind, Weights,
};

fn identity_problem(objectives: Vec<DvObjective>) -> PlanProblem {
    PlanProblem {
        structures: vec![Structure {
            name: "ptv".into(),
            kind: StructureKind::Target,
            voxels: vec![0, 1, 2, 3],
            prescribed_dose: 0.0,
            weights: Weights::default(),
        }],
        n_beams: 4,
        n_voxels: 4,
        dose_influence: {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            d
        },
        objectives,
    }
}

fn dvh_objective(limit: f64) -> DvObjective {
    DvObjective {
        kind: DvKind::MaxDvh,
        structure: "ptv".into(),
        roi_type: StructureKind::Target,
        dose_limit: limit,
        weight: 0.0,
        fraction: 0.5,
    }
}

#[test]
fn tail_bound_row_admits_the_boundary_witness_and_rejects_tighter() {
    // doses [10,20,30,40], top-half mean 35: feasible at limit 35 with the
    // canonical auxiliaries, infeasible at 34.99 with the same assignment.
    let x = vec![
        10.0, 20.0, 30.0, 40.0, // doses
        10.0, 20.0, 30.0, 40.0, // beams (identity influence)
        30.0, // gamma
        0.0, 0.0, 0.0, 10.0, // excesses
    ];
    let at = build_rtp(&identity_problem(vec![dvh_objective(35.0)])).unwrap();
    assert_eq!(at.vars.total, 13);
    assert!(check_feasible(&at.lp, &x).unwrap().feasible);

    let tighter = build_rtp(&identity_problem(vec![dvh_objective(34.99)])).unwrap();
    let report = check_feasible(&tighter.lp, &x).unwrap();
    assert!(!report.feasible);
    assert!((report.max_violation - 0.01).abs() <= 1e-9);
}

#[test]
fn solved_tail_bounds_hold_on_the_returned_doses() {
    let mut problem = identity_problem(vec![dvh_objective(20.0)]);
    problem.structures[0].prescribed_dose = 40.0;
    problem.structures[0].weights.underdose = 1.0;
    let model = build_rtp(&problem).unwrap();
    let plan = solve_plan(&problem).unwrap();
    for h in &model.dvh_rows {
        let doses: Vec<f64> = h.voxels.iter().map(|&v| plan.voxel_doses[v]).collect();
        assert!(cvar_value(&doses, h.fraction).unwrap() <= h.limit + 1e-8);
    }
    // The cap binds: unconstrained optimum would sit at the prescription.
    let doses = problem.structure_doses(&problem.structures[0], &plan.voxel_doses);
    assert!((cvar_value(&doses, 0.5).unwrap() - 20.0).abs() <= 1e-7);
}

#[test]
fn coverage_row_pushes_cold_tail_up() {
    let mut problem = identity_problem(vec![DvObjective {
        kind: DvKind::MinDvh,
        structure: "ptv".into(),
        roi_type: StructureKind::Target,
        dose_limit: 10.0,
        weight: 0.0,
        fraction: 0.5,
    }]);
    // Overdose penalty pulls doses to zero; the coverage row forbids that.
    problem.structures[0].weights.overdose = 1.0;
    let plan = solve_plan(&problem).unwrap();
    let doses = problem.structure_doses(&problem.structures[0], &plan.voxel_doses);
    assert!(lower_cvar_value(&doses, 0.5).unwrap() >= 10.0 - 1e-8);
}

#[test]
fn full_volume_tail_objective_becomes_max_dose_with_warning() {
    let mut o = dvh_objective(25.0);
    o.fraction = 1.0;
    o.weight = 5.0;
    let model = build_rtp(&identity_problem(vec![o])).unwrap();
    assert_eq!(model.warnings.len(), 1);
    assert!(model.dvh_rows.is_empty());
    assert_eq!(model.hard_groups.len(), 1);
    assert!(model.hard_groups[0].upper);
    assert_eq!(model.hard_groups[0].rows.len(), 4);
}

#[test]
fn objective_table_parses_from_percentage_columns() {
    let json = r#"[
        {"objective_type": "max_dvh", "roi_name": "ptv", "roi_type": "target",
         "dose": 36.25, "weight": 5.0, "percentage": 100.0},
        {"objective_type": "min_dvh", "roi_name": "ptv", "roi_type": "target",
         "dose": 35.0, "weight": 0.0, "percentage": 95.0}
    ]"#;
    let objectives: Vec<DvObjective> = serde_json::from_str(json).unwrap();
    assert_eq!(objectives[0].fraction, 1.0);
    assert_eq!(objectives[1].fraction, 0.95);
    assert_eq!(objectives[1].kind, DvKind::MinDvh);
}

#[test]
fn max_and_mean_measures_track_the_dose_vector() {
    let mut problem = identity_problem(vec![]);
    problem.structures[0].prescribed_dose = 10.0;
    problem.structures[0].weights =
        Weights { underdose: 10.0, overdose: 0.0, max: 0.1, mean: 0.1 };
    // A second beam profile makes doses non-uniform: voxel 3 gets double.
    problem.dose_influence[3 * 4 + 3] = 2.0;
    let model = build_rtp(&problem).unwrap();
    let sol = replan::lp::solve_lp(&model.lp).unwrap();
    let plan = model.extract_plan(&sol.x, sol.objective);
    let doses = problem.structure_doses(&problem.structures[0], &plan.voxel_doses);
    let max = doses.iter().fold(0.0f64, |a, &b| a.max(b));
    let mean: f64 = doses.iter().sum::<f64>() / doses.len() as f64;
    // The measure variables sit exactly at the achieved max and mean.
    let zcol = (0..model.vars.total)
        .find(|&c| {
            model.lp.constraints.iter().any(|r| {
                r.row[c] == 1.0
                    && r.row.iter().filter(|&&v| v != 0.0).count() == 2
                    && model.vars.dose.clone().any(|d| r.row[d] == -1.0)
                    && r.rel == replan::lp::Relation::Ge
                    && c >= model.vars.beam.end
            })
        })
        .unwrap();
    assert!((sol.x[zcol] - max).abs() <= 1e-7);
    let mcol = zcol + 1;
    assert!((sol.x[mcol] - mean).abs() <= 1e-7);
}

#[test]
fn mean_limit_row_caps_the_average() {
    let mut problem = identity_problem(vec![DvObjective {
        kind: DvKind::Mean,
        structure: "ptv".into(),
        roi_type: StructureKind::Target,
        dose_limit: 5.0,
        weight: 0.0,
        fraction: 1.0,
    }]);
    problem.structures[0].prescribed_dose = 10.0;
    problem.structures[0].weights.underdose = 1.0;
    let plan = solve_plan(&problem).unwrap();
    let doses = problem.structure_doses(&problem.structures[0], &plan.voxel_doses);
    let mean: f64 = doses.iter().sum::<f64>() / doses.len() as f64;
    assert!(mean <= 5.0 + 1e-8);
    assert!(mean >= 5.0 - 1e-7);
}

#[test]
fn uniformity_objective_holds_doses_at_its_own_level() {
    let mut problem = identity_problem(vec![DvObjective {
        kind: DvKind::Uniform,
        structure: "ptv".into(),
        roi_type: StructureKind::Target,
        dose_limit: 7.5,
        weight: 2.0,
        fraction: 1.0,
    }]);
    problem.structures[0].prescribed_dose = 0.0;
    let plan = solve_plan(&problem).unwrap();
    for &v in &problem.structures[0].voxels {
        assert!((plan.voxel_doses[v] - 7.5).abs() <= 1e-8);
    }
    assert!(plan.objective_value.abs() <= 1e-8);
}

#[test]
fn scaling_influence_and_limits_scales_the_solution() {
    let mut problem = identity_problem(vec![dvh_objective(20.0)]);
    problem.structures[0].prescribed_dose = 40.0;
    problem.structures[0].weights.underdose = 1.0;
    problem.dose_influence[4 + 1] = 0.5; // voxel 1, beam 1
    let base = solve_plan(&problem).unwrap();

    let s = 3.0;
    let mut scaled = problem.clone();
    scaled.structures[0].prescribed_dose *= s;
    scaled.objectives[0].dose_limit *= s;
    let scaled_plan = solve_plan(&scaled).unwrap();
    assert!((scaled_plan.objective_value - s * base.objective_value).abs() <= 1e-6 * (1.0 + s * base.objective_value.abs()));
    for (a, b) in base.voxel_doses.iter().zip(&scaled_plan.voxel_doses) {
        assert!((b - s * a).abs() <= 1e-6);
    }
}

#[test]
fn tail_means_agree_with_the_scalar_form_oracle() {
    let mut r = common::rng(0x52_54_50);
    for _ in 0..250 {
        let n = r.gen_range(1..40);
        let doses: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..80.0)).collect();
        let alpha = r.gen_range(0.02..0.98);
        let upper = cvar_value(&doses, alpha).unwrap();
        assert!((upper - common::cvar_grid_oracle(&doses, alpha)).abs() <= 1e-9 * (1.0 + upper.abs()));
        let lower = lower_cvar_value(&doses, alpha).unwrap();
        assert!(
            (lower - common::lower_cvar_grid_oracle(&doses, alpha)).abs()
                <= 1e-9 * (1.0 + lower.abs())
        );
    }
}

#[test]
fn embedded_plans_satisfy_every_model_row() {
    let mut problem = identity_problem(vec![
        dvh_objective(20.0),
        DvObjective {
            kind: DvKind::MinDvh,
            structure: "ptv".into(),
            roi_type: StructureKind::Target,
            dose_limit: 5.0,
            weight: 0.0,
            fraction: 0.5,
        },
    ]);
    problem.structures[0].prescribed_dose = 40.0;
    problem.structures[0].weights =
        Weights { underdose: 1.0, overdose: 0.2, max: 0.05, mean: 0.05 };
    let model = build_rtp(&problem).unwrap();
    let plan = solve_plan(&problem).unwrap();
    let x = model.embed_plan(&plan);
    let report = check_feasible(&model.lp, &x).unwrap();
    assert!(report.feasible, "max violation {}", report.max_violation);
    // Canonical auxiliaries never overstate the objective.
    assert!(model.lp.objective_value(&x) <= plan.objective_value + 1e-7);
}

#[test]
fn added_tail_row_matches_built_in_lowering() {
    let built = build_rtp(&identity_problem(vec![dvh_objective(35.0)])).unwrap();
    let problem = identity_problem(vec![]);
    let mut grown = build_rtp(&problem).unwrap();
    let idx = grown
        .add_dvh_row(&problem, "ptv", 0.5, BoundKind::Upper, 35.0)
        .unwrap();
    assert_eq!(grown.vars.total, built.vars.total);
    assert_eq!(grown.dvh_rows[idx].dbar_cols, built.dvh_rows[0].dbar_cols);
    let x = vec![
        10.0, 20.0, 30.0, 40.0,
        10.0, 20.0, 30.0, 40.0,
        30.0,
        0.0, 0.0, 0.0, 10.0,
    ];
    assert!(check_feasible(&grown.lp, &x).unwrap().feasible);
}

#[test]
fn impossible_bounds_are_named_in_the_failure() {
    let problem = identity_problem(vec![
        DvObjective {
            kind: DvKind::MinDose,
            structure: "ptv".into(),
            roi_type: StructureKind::Target,
            dose_limit: 5.0,
            weight: 0.0,
            fraction: 1.0,
        },
        DvObjective {
            kind: DvKind::MaxDose,
            structure: "ptv".into(),
            roi_type: StructureKind::Target,
            dose_limit: 1.0,
            weight: 0.0,
            fraction: 1.0,
        },
    ]);
    match solve_plan(&problem) {
        Err(RtpError::InfeasibleDvh(violations)) => {
            assert!(!violations.is_empty());
            assert!(violations.iter().all(|v| v.structure == "ptv"));
            let total: f64 = violations.iter().map(|v| v.excess).sum();
            assert!((total - 4.0).abs() <= 1e-6);
        }
        other => panic!("expected a named bound failure, got {other:?}"),
    }
}

#[test]
fn roi_type_mismatch_is_rejected() {
    let mut o = dvh_objective(35.0);
    o.roi_type = StructureKind::Oar;
    let err = identity_problem(vec![o]).validate().unwrap_err();
    assert!(matches!(err, RtpError::RoiTypeMismatch { .. }));
}

#[test]
fn matrix_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let entries: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 + 0.001).collect();

    let bin = dir.path().join("m.bin");
    io::write_matrix_binary(&bin, 3, 4, &entries).unwrap();
    assert_eq!(io::read_matrix_binary(&bin).unwrap(), (3, 4, entries.clone()));

    let csv = dir.path().join("m.csv");
    io::write_matrix_csv(&csv, 4, &entries).unwrap();
    assert_eq!(io::read_matrix_csv(&csv).unwrap(), (3, 4, entries));
}

#[test]
fn problems_round_trip_through_disk_in_both_matrix_formats() {
    let mut problem = identity_problem(vec![dvh_objective(35.0)]);
    problem.structures[0].weights.underdose = 2.5;
    let dir = tempfile::tempdir().unwrap();
    for matrix_file in ["dose.bin", "dose.csv"] {
        let path = dir.path().join("problem.json");
        io::save_problem(&problem, &path, matrix_file).unwrap();
        let back = io::load_problem(&path).unwrap();
        assert_eq!(back, problem);
    }
}

#[test]
fn dimension_mismatch_is_reported_on_load() {
    let problem = identity_problem(vec![]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("problem.json");
    io::save_problem(&problem, &path, "dose.bin").unwrap();
    io::write_matrix_binary(&dir.path().join("dose.bin"), 2, 4, &[0.0; 8]).unwrap();
    assert!(matches!(
        io::load_problem(&path),
        Err(io::IoError::BadMatrixFile { .. })
    ));
}
