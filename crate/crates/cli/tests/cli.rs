use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use svb_core::io::{self, AslMetadata, ColumnTag, DatasetMetadata, SeriesDataset};
use svb_core::models::{self, build_model, AslDesign, ModelDesign};

fn svb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svb")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn simulate(dir: &Path, n: &str) -> String {
    let stem = p(dir, "sim");
    let out = svb(&["simulate", "--seed", "4", "--n-points", "40", "--n-realizations", n, "--out", &stem]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    stem
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&svb(&["bogus"])), 1);
    assert_eq!(code(&svb(&[])), 1);
    assert_eq!(code(&svb(&["fit", "--data", "x"])), 1, "missing --seed");
    assert_eq!(code(&svb(&["sweep", "--out", "x.csv"])), 1, "missing --seed");
    assert_eq!(code(&svb(&["simulate", "--seed", "1", "--out", "x", "--n-realizations", "3", "--paper-scale"])), 1);
    assert_eq!(code(&svb(&["--help"])), 0);
    assert_eq!(code(&svb(&["--version"])), 0);
}

#[test]
fn invalid_optimizer_setting_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let stem = simulate(dir.path(), "1");
    assert_eq!(code(&svb(&["fit", "--data", &stem, "--seed", "1", "--sample-count", "0"])), 1);
}

#[test]
fn missing_data_exits_two() {
    let out = svb(&["fit", "--data", "/nonexistent/d", "--seed", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/d.json"));
}

#[test]
fn simulate_fit_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let stem = simulate(dir.path(), "3");
    let trace = p(dir.path(), "trace.csv");
    let out = svb(&["fit", "--data", &stem, "--seed", "2", "--batch-size", "10", "--max-epochs", "60", "--trace", &trace]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let results = fs::read_to_string(format!("{stem}.results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(
        lines.next().unwrap(),
        "series_id,amp1_mean,amp1_sd,rate1_mean,rate1_sd,amp2_mean,amp2_sd,rate2_mean,rate2_sd,\
         log_noise_var_mean,log_noise_var_sd,best_F,conv_epoch,conv_time_s"
    );
    assert_eq!(lines.count(), 3);
    let posteriors: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(format!("{stem}.posteriors.json")).unwrap()).unwrap();
    assert_eq!(posteriors.as_array().unwrap().len(), 3);

    let svg = p(dir.path(), "trace.svg");
    assert_eq!(code(&svb(&["plot", "--trace", &trace, "--out", &svg])), 0);
    let svg = fs::read_to_string(svg).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 3);
}

#[test]
fn fit_without_timing_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let stem = simulate(dir.path(), "2");
    let run = |name: &str| {
        let results = p(dir.path(), name);
        let out = svb(&["fit", "--data", &stem, "--seed", "9", "--max-epochs", "30", "--timing", "none", "--results", &results]);
        assert_eq!(code(&out), 0);
        fs::read(results).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with(','), "time column left empty");
}

#[test]
fn failed_series_are_reported_and_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("lin");
    let times: Vec<f64> = (0..10).map(f64::from).collect();
    let dataset = SeriesDataset {
        metadata: DatasetMetadata {
            model: models::LINEAR.into(),
            times: Some(times.clone()),
            asl: None,
            design_matrix: None,
            column_tags: None,
            units: "a.u.".into(),
            mask: None,
        },
        // The squared residuals of the second series overflow.
        values: vec![times.iter().map(|t| 1.0 + 0.5 * t).collect(), vec![1e200; 10]],
    };
    io::save_dataset(&dataset, &stem).unwrap();
    let stem = stem.display().to_string();
    let out = svb(&["fit", "--data", &stem, "--seed", "1", "--max-epochs", "20"]);
    assert_eq!(code(&out), 2);
    let results = fs::read_to_string(format!("{stem}.results.csv")).unwrap();
    let rows: Vec<&str> = results.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(!rows[0].contains(",,"));
    assert!(rows[1].starts_with("1,,"));
    let posteriors = fs::read_to_string(format!("{stem}.posteriors.json")).unwrap();
    assert!(posteriors.contains("\"error\""));
}

fn tagged_asl(dir: &Path) -> String {
    let design = AslDesign::paper_layout();
    let plds = vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5];
    let slices = vec![0, 2];
    let values = slices
        .iter()
        .map(|&slice| {
            let model = build_model(
                models::ASL_PCASL,
                &ModelDesign::Asl {
                    design: design.clone(),
                    slice_index: slice,
                },
            )
            .unwrap();
            let signal = models::model_evaluate(model.as_ref(), &[0.01, 1.2]).unwrap();
            signal
                .iter()
                .enumerate()
                .flat_map(|(k, s)| {
                    let wobble = 2e-5 * (k as f64 * 1.7).sin();
                    // Label then control for odd pairs to exercise both orders.
                    if k % 2 == 0 {
                        [100.0 + s + wobble, 100.0]
                    } else {
                        [100.0, 100.0 + s + wobble]
                    }
                })
                .collect()
        })
        .collect();
    let tags = (0..48)
        .flat_map(|k| {
            if k % 2 == 0 {
                [ColumnTag::Control, ColumnTag::Label]
            } else {
                [ColumnTag::Label, ColumnTag::Control]
            }
        })
        .collect();
    let dataset = SeriesDataset {
        metadata: DatasetMetadata {
            model: models::ASL_PCASL.into(),
            times: None,
            asl: Some(AslMetadata {
                design: AslDesign { plds, ..design },
                slice_index_per_voxel: Some(slices),
            }),
            design_matrix: None,
            column_tags: Some(tags),
            units: "a.u.".into(),
            mask: None,
        },
        values,
    };
    let stem = dir.join("asl");
    io::save_dataset(&dataset, &stem).unwrap();
    stem.display().to_string()
}

#[test]
fn asl_fit_differences_tagged_data() {
    let dir = tempfile::tempdir().unwrap();
    let stem = tagged_asl(dir.path());
    assert_eq!(code(&svb(&["fit", "--data", &stem, "--seed", "1"])), 1, "tagged data needs asl-fit");

    let out = svb(&["asl-fit", "--data", &stem, "--seed", "1", "--batch-size", "8", "--max-epochs", "300"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(format!("{stem}.results.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[1], "perfusion_mean");
    assert_eq!(&header[3], "transit_time_mean");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let f: f64 = row[1].parse().unwrap();
        let att: f64 = row[3].parse().unwrap();
        assert!((f - 0.01).abs() < 0.002, "perfusion {f}");
        assert!((att - 1.2).abs() < 0.2, "transit time {att}");
    }
}

#[test]
fn sweep_and_init_study_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = p(dir.path(), "sweep.csv");
    let out = svb(&[
        "sweep", "--seed", "1", "--n-points", "30", "--n-realizations", "3", "--learning-rates", "0.05,0.1",
        "--batch-sizes", "10,60", "--max-epochs", "20", "--out", &sweep,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("60"), "oversized batch is reported");
    let table = fs::read_to_string(&sweep).unwrap();
    assert!(table.starts_with("learning_rate,sample_count,batch_size,structure,fits,failures,mean_best_F"));
    assert_eq!(table.lines().count(), 3);

    let study = p(dir.path(), "init.csv");
    let out = svb(&[
        "init-study", "--seed", "1", "--n-points", "30", "--n-realizations", "2", "--max-epochs", "10", "--out", &study,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(&study).unwrap();
    assert!(table.starts_with("prior,init,"));
    assert_eq!(table.lines().count(), 1 + 8);
}
