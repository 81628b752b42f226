use std::path::PathBuf;

use rating_xva::calibration::{
    adjust_matrix, calibrate_jlt, calibrate_piecewise, extract_generator, CalibrationOptions,
    CalibrationWeights, Measure,
};
use rating_xva::rating::{load_market_data, RatingScale};

fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn scratch_full_fitch_calibration() {
    let scale = RatingScale::fitch();
    let files = ["fitch_1m.csv", "fitch_3m.csv", "fitch_6m.csv", "fitch_12m.csv"].map(data_file);
    let (market, curve, schedule) =
        load_market_data(&files, data_file("fitch_pd_q.csv"), &scale).unwrap();
    let adjusted: Vec<_> = market.iter().map(|m| adjust_matrix(m).unwrap()).collect();

    let start = std::time::Instant::now();
    let (model, report) = calibrate_piecewise(
        &adjusted,
        &curve,
        &schedule,
        &CalibrationWeights::unit(7),
        &CalibrationOptions::default(),
        &scale,
    )
    .unwrap();
    let elapsed = start.elapsed();

    for r in &report.intervals {
        eprintln!(
            "interval {} [{:.4},{:.4}]: obj={:.3e} iters={} pd_res={:.3e} pd_max={:.3e} p_mae={:.3e} repair={:.3e}",
            r.interval, r.t_start, r.t_end, r.objective, r.iterations, r.pd_residual,
            r.pd_residual_max, r.p_residual_mae, r.repair_residual
        );
        eprintln!("  h = {:?}", r.h);
    }
    eprintln!("calibration took {elapsed:?}");

    let pd_1y = model.default_probabilities(Measure::RiskNeutral, 1.0).unwrap();
    eprintln!("model 1y PD: {:?}", pd_1y.as_slice());
    eprintln!("market 1y PD: {:?}", curve.pd_at(3).as_slice());

    for r in &report.intervals {
        assert!(r.pd_residual_max < 1e-3, "interval {} pd max {}", r.interval, r.pd_residual_max);
    }
    assert!(report.intervals[0].p_residual_mae < 1e-3);
}

#[test]
fn scratch_pinned_generator_pathology() {
    let scale = RatingScale::fitch();
    let files = ["fitch_1m.csv", "fitch_3m.csv", "fitch_6m.csv", "fitch_12m.csv"].map(data_file);
    let (market, curve, schedule) =
        load_market_data(&files, data_file("fitch_pd_q.csv"), &scale).unwrap();
    let adjusted: Vec<_> = market.iter().map(|m| adjust_matrix(m).unwrap()).collect();

    let (model, report) = calibrate_piecewise(
        &adjusted,
        &curve,
        &schedule,
        &CalibrationWeights::pinned_generator(7),
        &CalibrationOptions::default(),
        &scale,
    )
    .unwrap();

    for r in &report.intervals {
        eprintln!(
            "pinned interval {}: obj={:.3e} iters={} pd_max={:.3e} h={:?}",
            r.interval, r.objective, r.iterations, r.pd_residual_max, r.h
        );
    }
    let q1y = model.transition(Measure::RiskNeutral, 0.0, 1.0).unwrap();
    for i in 0..7 {
        let row: Vec<String> = (0..7).map(|j| format!("{:8.4}", q1y[(i, j)] * 100.0)).collect();
        eprintln!("Q1y row {i}: {}", row.join(" "));
    }
    let zero_col = (0..6).any(|j| (0..7).all(|i| q1y[(i, j)] < 1e-4));
    assert!(zero_col, "expected at least one rating column ~0");
}

#[test]
fn scratch_jlt_baseline() {
    let scale = RatingScale::fitch();
    let files = ["fitch_1m.csv", "fitch_3m.csv", "fitch_6m.csv", "fitch_12m.csv"].map(data_file);
    let (market, curve, _) =
        load_market_data(&files, data_file("fitch_pd_q.csv"), &scale).unwrap();
    let adjusted_12m = adjust_matrix(&market[3]).unwrap();
    let generator = extract_generator(&adjusted_12m).unwrap();
    let pd_1y = curve.pd_at(3);

    let outcome = calibrate_jlt(&generator, pd_1y, 1.0, &CalibrationOptions::default()).unwrap();
    eprintln!("jlt residual {:.3e}, scales {:?}", outcome.residual, outcome.params.row_scales);
    for i in 0..7 {
        let row: Vec<String> =
            (0..7).map(|j| format!("{:8.3}", outcome.q_matrix[(i, j)] * 100.0)).collect();
        eprintln!("JLT Q1y row {i}: {}", row.join(" "));
    }
    assert!(outcome.residual <= 1e-8, "residual {}", outcome.residual);
    assert!((outcome.q_matrix[(0, 0)] - 0.5720).abs() < 0.02);
    assert!((outcome.q_matrix[(3, 2)] - 0.3991).abs() < 0.02);
}
