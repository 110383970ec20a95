use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualmtl::harness::rmse;
use dualmtl::io::{load_model, save_model, write_dataset_csv};
use dualmtl::model::{MtlModel, TaskHead};
use dualmtl::nncore::DenseNet;
use ndarray::{array, Array1, Array2};

const QUICK_CONFIG: &str = r#"schema_version = 1

[hyperparams]
specific_depth = 2
specific_width = 8
q = 3
shared_depth = 2
shared_width = 8
p = 3
lambda_s = 0.1
lambda_c = 0.1
lambda_o = 0.001
batch_size = 16
learning_rate = 0.01
epochs = 15
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dualmtl"));
    for var in ["DUALMTL_SEED", "DUALMTL_CONFIG", "DUALMTL_OUT", "DUALMTL_JOBS", "DUALMTL_FULL_SCALE"] {
        cmd.env_remove(var);
    }
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.toml");
    fs::write(&path, QUICK_CONFIG).unwrap();
    path
}

fn read_metrics(path: &Path) -> Vec<(String, String, String, f64)> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[2].to_string(), r[3].to_string(), r[4].to_string(), r[5].parse().unwrap())
        })
        .collect()
}

#[test]
fn simulate_writes_deterministic_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--seed", "7", "--out", p(&a), "simulate", "--setting", "1", "--dc", "10"]);
    ok(&["--seed", "7", "--out", p(&b), "simulate", "--setting", "1", "--dc", "10"]);
    for task in 0..2 {
        for split in ["train", "val", "test"] {
            let name = format!("task_{task}_{split}.csv");
            let text = fs::read_to_string(a.join(&name)).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), 201, "{name}");
            assert!(lines.iter().all(|l| l.split(',').count() == 21));
            assert!(lines[0].starts_with("x1,x2,") && lines[0].ends_with(",x20,y"));
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        }
    }
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    let csvs = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 6);
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = quick_config(dir.path());
    ok(&["--seed", "3", "--out", p(&data), "simulate", "--setting", "linear", "--n", "30"]);

    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    for out in [&run1, &run2] {
        ok(&["--seed", "11", "--config", p(&config), "--out", p(out), "train", "--data", p(&data)]);
    }
    assert_eq!(fs::read(run1.join("model.bin")).unwrap(), fs::read(run2.join("model.bin")).unwrap());
    assert!(fs::read_to_string(run1.join("report.csv")).unwrap().starts_with("epoch,rate,"));

    let eval = dir.path().join("eval");
    ok(&[
        "--out",
        p(&eval),
        "eval",
        "--model",
        p(&run1.join("model.bin")),
        "--data",
        p(&data),
        "--splits",
        "test",
    ]);
    let trained = read_metrics(&run1.join("metrics.csv"));
    let evaluated = read_metrics(&eval.join("metrics.csv"));
    assert_eq!(evaluated.len(), 3);
    for row in &evaluated {
        let reference = trained
            .iter()
            .find(|t| t.0 == row.0 && t.2 == "test")
            .expect("train wrote test rows");
        assert!((reference.3 - row.3).abs() <= 1e-9);
        assert_eq!(row.1, "mtl");
    }
}

#[test]
fn stl_models_are_saved_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = quick_config(dir.path());
    ok(&["--out", p(&data), "simulate", "--setting", "1", "--n", "20"]);
    let out = dir.path().join("stl");
    ok(&["--config", p(&config), "--out", p(&out), "train", "--data", p(&data), "--method", "stl"]);
    let metrics = read_metrics(&out.join("metrics.csv"));
    assert_eq!(metrics.len(), 2 * 3);
    assert!(metrics.iter().all(|m| m.1 == "stl"));
    let model = load_model(&out.join("model_task1.bin")).unwrap();
    assert!(model.shared.is_none());
    assert_eq!(model.tasks(), 1);

    let eval = dir.path().join("eval");
    let missing_task = run(&["--out", p(&eval), "eval", "--model", p(&out.join("model_task1.bin")), "--data", p(&data)]);
    assert!(!missing_task.status.success());
    ok(&["--out", p(&eval), "eval", "--model", p(&out.join("model_task1.bin")), "--data", p(&data), "--task", "1"]);
    let rows = read_metrics(&eval.join("metrics.csv"));
    let reference: Vec<_> = metrics.iter().filter(|m| m.0 == "1").collect();
    assert_eq!(rows.len(), 3);
    for (a, b) in rows.iter().zip(reference) {
        assert!((a.3 - b.3).abs() <= 1e-9);
    }
}

/// One task, `y = 2·x1 - x2`, with a hand-built identity model.
fn perfect_toy(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("toy");
    let x: Array2<f64> = array![[0.5, 1.0], [-1.0, 2.0], [3.0, 0.25], [1.5, -0.5]];
    let y: Array1<f64> = x.column(0).mapv(|v| 2.0 * v) - x.column(1);
    for split in ["train", "val", "test"] {
        write_dataset_csv(&data.join(format!("task_0_{split}.csv")), &x, &y).unwrap();
    }
    let mut model = MtlModel::from_encoders(Some(DenseNet::identity(2)), vec![DenseNet::identity(2)]).unwrap();
    model.heads = vec![TaskHead {
        alpha: array![2.0, 0.0],
        beta: array![0.0, -1.0],
    }];
    let path = dir.join("toy.bin");
    save_model(&path, &model).unwrap();
    (data, path)
}

#[test]
fn eval_of_perfect_model_and_latent_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model_path) = perfect_toy(dir.path());
    let out = dir.path().join("eval");
    ok(&["--out", p(&out), "eval", "--model", p(&model_path), "--data", p(&data), "--splits", "train,test"]);
    let rows = read_metrics(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.3 <= 1e-6));

    let latents = dir.path().join("latents");
    ok(&["--out", p(&latents), "export-latents", "--model", p(&model_path), "--data", p(&data)]);
    let model = load_model(&model_path).unwrap();
    let read = |name: &str| -> Array2<f64> {
        let mut reader = csv::Reader::from_path(latents.join(name)).unwrap();
        let rows: Vec<Vec<f64>> = reader
            .records()
            .map(|r| r.unwrap().iter().skip(1).map(|c| c.parse().unwrap()).collect())
            .collect();
        let cols = rows[0].len();
        Array2::from_shape_vec((rows.len(), cols), rows.concat()).unwrap()
    };
    let s = read("latent_task0_test_specific.csv");
    let c = read("latent_task0_test_shared.csv");
    let yhat = s.dot(&model.heads[0].alpha) + c.dot(&model.heads[0].beta);
    let mut reader = csv::Reader::from_path(data.join("task_0_test.csv")).unwrap();
    let y: Array1<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    let manual = rmse(yhat.view(), y.view()).unwrap();
    let test_row = rows.iter().find(|r| r.2 == "test").unwrap();
    assert!((manual - test_row.3).abs() <= 1e-9);
}

#[test]
fn exported_latents_reproduce_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = quick_config(dir.path());
    ok(&["--out", p(&data), "simulate", "--setting", "4", "--n", "20"]);
    let run_dir = dir.path().join("run");
    ok(&["--config", p(&config), "--out", p(&run_dir), "train", "--data", p(&data)]);
    let latents = dir.path().join("latents");
    ok(&["--out", p(&latents), "export-latents", "--model", p(&run_dir.join("model.bin")), "--data", p(&data)]);
    let model = load_model(&run_dir.join("model.bin")).unwrap();
    let loaded = dualmtl::cli::load_data_dir(&data).unwrap();
    for (r, task) in loaded.tasks.iter().enumerate() {
        let expected = model.predict(r, task.val.x.view()).unwrap();
        let parse = |kind: &str| -> Array2<f64> {
            let text = fs::read_to_string(latents.join(format!("latent_task{r}_val_{kind}.csv"))).unwrap();
            let rows: Vec<Vec<f64>> = text
                .lines()
                .skip(1)
                .map(|l| {
                    let cells: Vec<&str> = l.split(',').collect();
                    assert_eq!(cells[0], r.to_string());
                    cells[1..].iter().map(|c| c.parse().unwrap()).collect()
                })
                .collect();
            assert_eq!(rows.len(), task.val.len());
            let cols = rows[0].len();
            Array2::from_shape_vec((rows.len(), cols), rows.concat()).unwrap()
        };
        let got = parse("specific").dot(&model.heads[r].alpha) + parse("shared").dot(&model.heads[r].beta);
        let worst = (&got - &expected).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(worst <= 1e-9, "task {r}: {worst}");
    }
}

#[test]
fn schema_errors_name_file_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = perfect_toy(dir.path());
    fs::write(data.join("task_0_val.csv"), "x1,x2\n1,2\n").unwrap();
    let out = run(&["--out", p(&dir.path().join("o")), "train", "--data", p(&data)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("task_0_val.csv") && err.contains("`y`"), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\n[hyperparams]\nwidth = 3\n").unwrap();
    let out = run(&["--config", p(&bad), "--out", p(&dir.path().join("o")), "train", "--data", p(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn sweep_is_scheduling_independent() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path());
    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    for (out, jobs) in [(&serial, "1"), (&parallel, "4")] {
        ok(&[
            "--seed", "5", "--jobs", jobs, "--config", p(&config), "--out", p(out), "sweep", "--setting", "linear",
            "--seeds", "3",
        ]);
    }
    for file in ["metrics.csv", "aggregate.csv"] {
        assert_eq!(fs::read(serial.join(file)).unwrap(), fs::read(parallel.join(file)).unwrap(), "{file}");
    }
    let aggregate = fs::read_to_string(serial.join("aggregate.csv")).unwrap();
    let rows: Vec<&str> = aggregate.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2);
    assert!(rows.iter().all(|r| r.contains(",test,3,")));
    assert_eq!(fs::read_to_string(serial.join("metrics.csv")).unwrap().lines().count(), 1 + 3 * 3 * 2);
}

#[test]
fn failed_seeds_set_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("diverge.toml");
    fs::write(&config, QUICK_CONFIG.replace("learning_rate = 0.01", "learning_rate = 1e300")).unwrap();
    let out_dir = dir.path().join("o");
    let args = ["--config", p(&config), "--out", p(&out_dir), "sweep", "--setting", "linear", "--seeds", "1"];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(fs::read_to_string(out_dir.join("failures.csv")).unwrap().lines().count() > 1);
    let mut partial = args.to_vec();
    partial.push("--allow-partial");
    ok(&partial);
}

#[test]
fn hpsearch_writes_trials_and_best_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["--out", p(&data), "simulate", "--setting", "linear", "--n", "20"]);
    let config = dir.path().join("search.toml");
    fs::write(
        &config,
        r#"schema_version = 1
[search]
trials = 3
[search.space]
depths = [1, 2]
widths = [4]
latent_dims = [2]
lambda_sim = [0.1, 10.0]
lambda_orth = [0.001]
batch_sizes = [10]
learning_rates = [0.01]
epochs = 5
"#,
    )
    .unwrap();
    let out = dir.path().join("search");
    ok(&["--seed", "2", "--config", p(&config), "--out", p(&out), "hpsearch", "--data", p(&data)]);
    let trials = fs::read_to_string(out.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 4);
    assert_eq!(trials.lines().filter(|l| l.ends_with(",true")).count(), 1);
    let best = dualmtl::cli::RunConfig::load(&out.join("best.toml")).unwrap();
    assert_eq!(best.hyperparams.unwrap().epochs, 5);
}
