mod common;

use std::fs;
use std::path::Path;

use common::*;
use patchgat::eval::{image_metrics, pixel_metrics, LabeledScores, MaskedMap};
use patchgat::pgm::read_mask_pgm8;
use patchgat::tokenio::read_tokens_file;

fn train(data: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["train".to_string()];
    args.extend(split_files(data, "support"));
    args.extend(["--out-dir".into(), s(out)]);
    args.extend(TINY_MODEL.iter().map(|a| a.to_string()));
    args.extend(extra.iter().map(|a| a.to_string()));
    run(args)
}

fn score(data: &Path, model: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec![
        "score".to_string(),
        "--model".into(),
        s(model),
        "--out-dir".into(),
        s(out),
    ];
    args.extend(split_files(data, "test"));
    args.extend(extra.iter().map(|a| a.to_string()));
    run(args)
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 1);
    let out = tmp.path().join("run");
    ok(&train(&data, &out, &["--seed", "3"]));
    assert!(out.join("model.gadc").is_file());
    let history = fs::read_to_string(out.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss"));
    assert_eq!(history.lines().count(), 16);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["train_config"]["encoder"]["hidden_dim"], 8);
    assert!(manifest["timings_ms"]["train"].is_number());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 2);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&train(&data, &a, &["--seed", "7"]));
    ok(&train(&data, &b, &["--seed", "7"]));
    let bytes = |d: &Path| fs::read(d.join("model.gadc")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let c = tmp.path().join("c");
    ok(&train(&data, &c, &["--seed", "8"]));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn invalid_mask_ratio_exits_2_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 3);
    let out = train(&data, &tmp.path().join("run"), &["--mask-ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--mask-ratio"), "{}", stderr(&out));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 4);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# settings\nlearning-rate = 1\n").unwrap();
    let out = train(&data, &tmp.path().join("x"), &["--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    fs::write(&cfg, "gamma = 3\nmask-ratio = 0.5\n").unwrap();
    let out = tmp.path().join("run");
    ok(&train(
        &data,
        &out,
        &["--config", &s(&cfg), "--gamma", "1.5"],
    ));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train_config"]["align"]["gamma"], 1.5);
    assert_eq!(manifest["train_config"]["encoder"]["mask_ratio"], 0.5);

    fs::write(&cfg, "mask_ratio = 2\n").unwrap();
    let out = train(&data, &tmp.path().join("y"), &["--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(":1 (mask_ratio)"), "{}", stderr(&out));
}

#[test]
fn mixed_dims_exit_2_and_unreadable_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 5);
    let other = tmp.path().join("other");
    ok(&run([
        "synth",
        "--out-dir",
        &s(&other),
        "--rows",
        "6",
        "--cols",
        "6",
        "--dim",
        "4",
        "--normal",
        "1",
        "--anomalous",
        "1",
    ]));
    let mut args = vec![
        "train".to_string(),
        "--out-dir".into(),
        s(&tmp.path().join("x")),
    ];
    args.extend(split_files(&data, "support"));
    args.extend(split_files(&other, "support"));
    let out = run(args);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("mixed grid dimensions"),
        "{}",
        stderr(&out)
    );

    let missing = tmp.path().join("missing.gadt");
    let out = run([
        "train",
        &s(&missing),
        "--out-dir",
        &s(&tmp.path().join("y")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let garbage = tmp.path().join("garbage.gadt");
    fs::write(&garbage, b"not a token file").unwrap();
    let out = run([
        "train",
        &s(&garbage),
        "--out-dir",
        &s(&tmp.path().join("z")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn score_rejects_mismatched_queries() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 6);
    let run_dir = tmp.path().join("run");
    ok(&train(&data, &run_dir, &[]));
    let other = tmp.path().join("other");
    ok(&run([
        "synth",
        "--out-dir",
        &s(&other),
        "--rows",
        "5",
        "--cols",
        "6",
        "--dim",
        "8",
        "--normal",
        "1",
        "--anomalous",
        "0",
    ]));
    let out = score(
        &other,
        &run_dir.join("model.gadc"),
        &tmp.path().join("sc"),
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("model expects 6x6x8"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn score_outputs_and_max_pooling_dominates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 7);
    let run_dir = tmp.path().join("run");
    ok(&train(&data, &run_dir, &[]));
    let model = run_dir.join("model.gadc");
    let (topk, max) = (tmp.path().join("topk"), tmp.path().join("max"));
    ok(&score(
        &data,
        &model,
        &topk,
        &["--pooling", "topk", "--top-ratio", "0.1"],
    ));
    ok(&score(&data, &model, &max, &["--pooling", "max"]));
    let a = csv_pairs(&topk.join("scores.csv"));
    let b = csv_pairs(&max.join("scores.csv"));
    assert_eq!(a.len(), 8);
    for ((fa, va), (fb, vb)) in a.iter().zip(&b) {
        assert_eq!(fa, fb);
        let (va, vb): (f32, f32) = (va.parse().unwrap(), vb.parse().unwrap());
        assert!(va.is_finite() && vb >= va, "{fa}: max {vb} < topk {va}");
    }
    let map = read_tokens_file(topk.join("maps/normal_000.gadt")).unwrap();
    assert_eq!((map.rows(), map.cols(), map.dim()), (48, 48, 1));
    assert!(topk.join("maps/normal_000.pgm").is_file());

    let sized = tmp.path().join("sized");
    ok(&score(
        &data,
        &model,
        &sized,
        &["--out-rows", "10", "--out-cols", "12"],
    ));
    let map = read_tokens_file(sized.join("maps/anomalous_000.gadt")).unwrap();
    assert_eq!((map.rows(), map.cols()), (10, 12));
}

#[test]
fn eval_perfect_scores_and_degenerate_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("scores.csv");
    let labels = tmp.path().join("labels.csv");
    fs::write(
        &scores,
        "file,image_score\na.gadt,0.1\nb.gadt,0.2\nc.gadt,0.9\nd.gadt,0.8\n",
    )
    .unwrap();
    fs::write(
        &labels,
        "file,label\na.gadt,0\nb.gadt,normal\nc.gadt,1\nd.gadt,anomalous\n",
    )
    .unwrap();
    let out = tmp.path().join("ev");
    let stdout = ok(&run([
        "eval",
        "--scores",
        &s(&scores),
        "--labels",
        &s(&labels),
        "--out-dir",
        &s(&out),
    ]));
    assert_eq!(
        stdout,
        "image_auroc,image_ap,pixel_auroc,pro\n1.000000,1.000000,,\n"
    );
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), stdout);

    let jsonl = ok(&run([
        "eval",
        "--scores",
        &s(&scores),
        "--labels",
        &s(&labels),
        "--out-dir",
        &s(&out),
        "--format",
        "jsonl",
    ]));
    let row: serde_json::Value = serde_json::from_str(jsonl.trim()).unwrap();
    assert_eq!(row["image_auroc"], 1.0);
    assert!(row["pro"].is_null());

    fs::write(
        &labels,
        "file,label\na.gadt,0\nb.gadt,0\nc.gadt,0\nd.gadt,0\n",
    )
    .unwrap();
    let bad = run([
        "eval",
        "--scores",
        &s(&scores),
        "--labels",
        &s(&labels),
        "--out-dir",
        &s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("both classes"), "{}", stderr(&bad));
}

#[test]
fn eval_lists_orphans() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("scores.csv");
    let labels = tmp.path().join("labels.csv");
    fs::write(
        &scores,
        "file,image_score\na.gadt,0.1\nb.gadt,0.2\nextra.gadt,0.3\n",
    )
    .unwrap();
    fs::write(&labels, "file,label\na.gadt,0\nb.gadt,1\n").unwrap();
    let out = run([
        "eval",
        "--scores",
        &s(&scores),
        "--labels",
        &s(&labels),
        "--out-dir",
        &s(&tmp.path().join("ev")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("extra"), "{}", stderr(&out));
}

#[test]
fn eval_matches_library_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 9);
    let run_dir = tmp.path().join("run");
    ok(&train(&data, &run_dir, &[]));
    let sc = tmp.path().join("sc");
    ok(&score(&data, &run_dir.join("model.gadc"), &sc, &[]));
    let ev = tmp.path().join("ev");
    let stdout = ok(&run([
        "eval",
        "--scores",
        &s(&sc.join("scores.csv")),
        "--labels",
        &s(&data.join("labels.csv")),
        "--maps",
        &s(&sc.join("maps")),
        "--masks",
        &s(&data.join("masks")),
        "--out-dir",
        &s(&ev),
        "--fpr-limit",
        "0.2",
        "--pro-thresholds",
        "50",
    ]));

    let labels: std::collections::BTreeMap<String, bool> = csv_pairs(&data.join("labels.csv"))
        .into_iter()
        .map(|(f, l)| (f, l == "1"))
        .collect();
    let (mut values, mut flags, mut maps) = (Vec::new(), Vec::new(), Vec::new());
    for (file, v) in csv_pairs(&sc.join("scores.csv")) {
        values.push(v.parse::<f64>().unwrap());
        flags.push(labels[&file]);
        let stem = file.trim_end_matches(".gadt");
        let map = read_tokens_file(sc.join(format!("maps/{stem}.gadt"))).unwrap();
        let mask = read_mask_pgm8(data.join(format!("masks/{stem}.pgm"))).unwrap();
        let mask = mask.resize_nearest(map.rows(), map.cols());
        maps.push(MaskedMap::new(map.into_data(), mask).unwrap());
    }
    let image = image_metrics(&LabeledScores::new(values, flags).unwrap()).unwrap();
    let pixel = pixel_metrics(&maps, 0.2, 50).unwrap();
    let expected = patchgat::eval::MetricsReport {
        pixel_auroc: pixel.pixel_auroc,
        pro: pixel.pro,
        ..image
    };
    assert_eq!(stdout.lines().nth(1).unwrap(), expected.csv_row());
}

#[test]
fn eval_requires_masks_unless_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 10);
    let run_dir = tmp.path().join("run");
    ok(&train(&data, &run_dir, &[]));
    let sc = tmp.path().join("sc");
    ok(&score(&data, &run_dir.join("model.gadc"), &sc, &[]));
    let masks = data.join("masks");
    for e in fs::read_dir(&masks).unwrap() {
        let p = e.unwrap().path();
        if p.file_name()
            .unwrap()
            .to_string_lossy()
            .starts_with("normal")
        {
            fs::remove_file(p).unwrap();
        }
    }
    let args = |allow: bool| {
        let mut a = vec![
            "eval".to_string(),
            "--maps".into(),
            s(&sc.join("maps")),
            "--masks".into(),
            s(&masks),
            "--out-dir".into(),
            s(&tmp.path().join("ev")),
        ];
        if allow {
            a.push("--allow-missing-masks".into());
        }
        a
    };
    let out = run(args(false));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("normal_000"), "{}", stderr(&out));
    let stdout = ok(&run(args(true)));
    let row = stdout.lines().nth(1).unwrap();
    assert!(row.starts_with(",,"), "{row}");
}

#[test]
fn single_point_sweep_matches_train_score_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 11);
    let cfg = tmp.path().join("base.cfg");
    fs::write(
        &cfg,
        "epochs = 15\nhidden_dim = 8\nlatent_dim = 8\ng_hidden_dim = 8\n",
    )
    .unwrap();
    let grid = tmp.path().join("grid.txt");
    fs::write(&grid, "gamma = 2\n").unwrap();
    let sw = tmp.path().join("sw");
    ok(&run([
        "sweep",
        "--grid",
        &s(&grid),
        "--data",
        &s(&data),
        "--config",
        &s(&cfg),
        "--seed",
        "21",
        "--out-dir",
        &s(&sw),
    ]));
    let sweep = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 2);
    let row = sweep.lines().nth(1).unwrap();

    let run_dir = tmp.path().join("run");
    ok(&train(&data, &run_dir, &["--seed", "21", "--gamma", "2"]));
    let sc = tmp.path().join("sc");
    ok(&score(&data, &run_dir.join("model.gadc"), &sc, &[]));
    let stdout = ok(&run([
        "eval",
        "--scores",
        &s(&sc.join("scores.csv")),
        "--labels",
        &s(&data.join("labels.csv")),
        "--maps",
        &s(&sc.join("maps")),
        "--masks",
        &s(&data.join("masks")),
        "--out-dir",
        &s(&tmp.path().join("ev")),
    ]));
    let metrics = stdout.lines().nth(1).unwrap();
    assert!(
        row.ends_with(metrics),
        "sweep row {row}\nseparate run {metrics}"
    );
}

#[test]
fn gamma_grid_gives_one_row_per_value_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 12);
    let cfg = tmp.path().join("base.cfg");
    fs::write(
        &cfg,
        "epochs = 5\nhidden_dim = 8\nlatent_dim = 8\ng_hidden_dim = 8\n",
    )
    .unwrap();
    let grid = tmp.path().join("grid.txt");
    fs::write(&grid, "gamma = 1.5, 2.0, 2.5\n").unwrap();
    let sw = tmp.path().join("sw");
    ok(&run([
        "sweep",
        "--grid",
        &s(&grid),
        "--data",
        &s(&data),
        "--config",
        &s(&cfg),
        "--seed",
        "4",
        "--out-dir",
        &s(&sw),
    ]));
    let sweep = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let header: Vec<&str> = sweep.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = sweep
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for (i, (row, gamma)) in rows.iter().zip(["1.5", "2", "2.5"]).enumerate() {
        assert_eq!(row[col("point")], i.to_string());
        assert_eq!(row[col("gamma")], gamma);
        assert_eq!(row[col("seed")], (4 + i).to_string());
    }
}

#[test]
fn sweep_rejects_bad_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 13);
    let grid = tmp.path().join("grid.txt");
    for (text, needle) in [
        ("gamma = 2, 0.5\n", "gamma"),
        ("seed = 1, 2\n", "seed"),
        ("colour = red\n", "colour"),
        ("\n", "no settings"),
    ] {
        fs::write(&grid, text).unwrap();
        let out = run([
            "sweep",
            "--grid",
            &s(&grid),
            "--data",
            &s(&data),
            "--out-dir",
            &s(&tmp.path().join("sw")),
        ]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(stderr(&out).contains(needle), "{}", stderr(&out));
    }
}

#[test]
fn synth_writes_a_consistent_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_benchmark(tmp.path(), 14);
    assert_eq!(split_files(&data, "support").len(), 1);
    assert_eq!(split_files(&data, "test").len(), 8);
    let labels = csv_pairs(&data.join("labels.csv"));
    assert_eq!(labels.len(), 8);
    for (file, label) in labels {
        let stem = file.trim_end_matches(".gadt");
        let mask = read_mask_pgm8(data.join(format!("masks/{stem}.pgm"))).unwrap();
        assert_eq!((mask.rows, mask.cols), (6, 6));
        let expected = if label == "1" { 4 } else { 0 };
        assert_eq!(mask.count(), expected, "{file}");
    }
    let again = tmp.path().join("again");
    ok(&run([
        "synth",
        "--out-dir",
        &s(&again),
        "--seed",
        "14",
        "--rows",
        "6",
        "--cols",
        "6",
        "--dim",
        "8",
        "--normal",
        "4",
        "--anomalous",
        "4",
        "--block",
        "2",
    ]));
    for split in ["support", "test"] {
        for (a, b) in split_files(&data, split)
            .iter()
            .zip(split_files(&again, split))
        {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
