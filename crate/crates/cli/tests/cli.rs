//! End-to-end runs of the `stprot` binary on small synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stprot::dataset::{load_dataset, read_labels, read_matrix};

const BIN: &str = env!("CARGO_BIN_EXE_stprot");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("STPROT_SEED").output().expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(BIN).args(args).env(key, value).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "synth", "--n-spots", "64", "--n-genes", "120", "--n-proteins", "4", "--seed", "5", "--out", s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&run(&args));
    out
}

fn train_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut args: Vec<String> = [
        "train",
        "--rna",
        &format!("{}", data.join("rna.csv").display()),
        "--coords",
        &format!("{}", data.join("coords.csv").display()),
        "--protein",
        &format!("{}", data.join("protein.csv").display()),
        "--epochs",
        "30",
        "--n-hvg",
        "100",
        "--hidden1",
        "8",
        "--hidden2",
        "8",
        "--log-every",
        "0",
        "--out",
        s(out),
    ]
    .iter()
    .map(|a| a.to_string())
    .collect();
    args.extend(extra.iter().map(|a| a.to_string()));
    args
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let args = train_args(data, out, extra);
    run(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("run_manifest.json")).expect("run manifest written");
    serde_json::from_str(&text).unwrap()
}

#[test]
fn synth_is_deterministic_and_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a", &[]);
    let b = synth(tmp.path(), "b", &[]);
    for file in ["rna.csv", "protein.csv", "coords.csv", "labels.csv"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let ds = load_dataset(&a.join("rna.csv"), &a.join("coords.csv"), Some(&a.join("protein.csv"))).unwrap();
    assert_eq!(ds.rna_counts.dim(), (64, 120));
    assert_eq!(ds.n_proteins(), Some(4));
    assert_eq!(manifest(&a)["command"], "synth");
    assert_eq!(manifest(&a)["seed"], 5);
}

#[test]
fn noiseless_synth_protein_is_a_linear_map_of_rna() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &["--noise", "0"]);
    let rna = read_matrix(&d.join("rna.csv")).unwrap().values;
    let protein = read_matrix(&d.join("protein.csv")).unwrap().values;
    assert!(protein.iter().all(|&v| v >= 0.0));
    // The library exposes the map the files were generated with.
    let generated = stprot::synth::generate(&stprot::synth::SynthConfig {
        n_spots: 64,
        n_genes: 120,
        n_proteins: 4,
        noise: 0.0,
        seed: 5,
        sample_seed: 5,
        ..Default::default()
    })
    .unwrap();
    let want = rna.dot(&generated.protein_map);
    let worst = (&want - &protein).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let flag = synth(tmp.path(), "flag", &[]);
    let env_dir = tmp.path().join("env");
    ok(&run_env(
        &["synth", "--n-spots", "64", "--n-genes", "120", "--n-proteins", "4", "--out", s(&env_dir)],
        "STPROT_SEED",
        "5",
    ));
    assert_eq!(std::fs::read(flag.join("rna.csv")).unwrap(), std::fs::read(env_dir.join("rna.csv")).unwrap());
    let bad = run_env(&["synth", "--out", s(&tmp.path().join("x"))], "STPROT_SEED", "minus one");
    assert_eq!(code(&bad), 2);
}

#[test]
fn preprocess_needs_protein_and_writes_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let out = tmp.path().join("pre");
    let missing = run(&["preprocess", "--rna", s(&d.join("rna.csv")), "--coords", s(&d.join("coords.csv")), "--out", s(&out)]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("ProteinMissing"));

    ok(&run(&[
        "preprocess",
        "--rna",
        s(&d.join("rna.csv")),
        "--coords",
        s(&d.join("coords.csv")),
        "--protein",
        s(&d.join("protein.csv")),
        "--n-hvg",
        "100",
        "--out",
        s(&out),
    ]));
    let x = read_matrix(&out.join("x.csv")).unwrap();
    let y = read_matrix(&out.join("y.csv")).unwrap();
    assert_eq!(x.values.dim(), (64, 4));
    assert_eq!(y.values.dim(), (64, 4));
    let rna: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("rna_pipeline.json")).unwrap()).unwrap();
    assert_eq!(rna["selected_names"].as_array().unwrap().len(), 100);
    assert_eq!(manifest(&out)["config"]["n_hvg"], 100);
}

#[test]
fn default_hvg_count_is_4000() {
    let help = run(&["preprocess", "--help"]);
    ok(&help);
    assert!(String::from_utf8_lossy(&help.stdout).contains("[default: 4000]"));
}

#[test]
fn training_twice_with_one_seed_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&train(&d, &a, &["--seed", "7"]));
    ok(&train(&d, &b, &["--seed", "7"]));
    ok(&train(&d, &c, &["--seed", "8"]));
    let ckpt = |dir: &Path| std::fs::read(dir.join("model.stpk")).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));
    assert_ne!(ckpt(&a), ckpt(&c));
    // The seconds column is wall-clock time; every loss column must match.
    let losses = |dir: &Path| -> Vec<String> {
        std::fs::read_to_string(dir.join("train_log.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(losses(&a).len(), 31);
    assert_eq!(manifest(&a)["seed"], 7);
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let out = tmp.path().join("m");
    ok(&train(&d, &out, &["--loss", "rna-only", "--graph", "spatial", "--radius", "2", "--untied", "--patience", "5"]));
    let ckpt: stprot::Checkpoint = stprot::checkpoint::load_checkpoint(&out.join("model.stpk")).unwrap();
    assert_eq!(ckpt.config.beta2_loss, 0.0);
    assert_eq!(ckpt.config.beta1_loss, 5.0);
    assert_eq!(ckpt.config.graph_kind, stprot::graph::GraphKind::SpatialRadius);
    assert_eq!(ckpt.config.radius, 2.0);
    assert_eq!(ckpt.config.tying, stprot::autoencoder::Tying::Untied);
    assert_eq!(ckpt.config.patience, Some(5));
    assert!(ckpt.params.decoder.is_some());
}

#[test]
fn config_file_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let cfg = tmp.path().join("train.toml");
    std::fs::write(&cfg, "lr = 0.001\nseed = 3\nk_neighbors = 4\n").unwrap();
    let out = tmp.path().join("m");
    ok(&train(&d, &out, &["--config", s(&cfg), "--k", "2"]));
    let m = manifest(&out);
    assert_eq!(m["config"]["lr"], 0.001);
    assert_eq!(m["config"]["k_neighbors"], 2);
    assert_eq!(m["seed"], 3);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&train(&d, &tmp.path().join("x"), &["--config", s(&bad)])), 2);
    assert_eq!(code(&train(&d, &tmp.path().join("x"), &["--lr=-1"])), 2);
}

#[test]
fn predict_reproduces_training_embedding_and_follows_row_order() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let model = tmp.path().join("m");
    ok(&train(&d, &model, &["--seed", "1"]));
    let pred = tmp.path().join("p");
    ok(&run(&[
        "predict",
        "--checkpoint",
        s(&model.join("model.stpk")),
        "--rna",
        s(&d.join("rna.csv")),
        "--coords",
        s(&d.join("coords.csv")),
        "--pca",
        "--out",
        s(&pred),
    ]));
    let clr = read_matrix(&pred.join("protein_clr.csv")).unwrap();
    let pca = read_matrix(&pred.join("protein_pca.csv")).unwrap();

    // Training-time embedding, inverted through the protein pipeline.
    let ckpt: stprot::Checkpoint = stprot::checkpoint::load_checkpoint(&model.join("model.stpk")).unwrap();
    let ds = load_dataset(&d.join("rna.csv"), &d.join("coords.csv"), None).unwrap();
    let x = stprot::preprocess::apply_rna_pipeline(&ckpt.rna_pipeline, &ds).unwrap();
    let graph = stprot::optim::build_graph(&ckpt.config, x.view(), ds.coords.view()).unwrap();
    let (z, _) = stprot::autoencoder::encode(&ckpt.params, x.view(), &graph.neighbor_lists()).unwrap();
    let inverted = stprot::preprocess::invert_protein_pipeline(&ckpt.protein_pipeline, z.view()).unwrap();
    let diff = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff(&pca.values, &z) < 1e-12);
    assert!(diff(&clr.values, &inverted) < 1e-12);
    assert_eq!(clr.col_names, ckpt.protein_pipeline.selected_names);

    // Reverse the spot order of both input files.
    let reverse = |name: &str| {
        let text = std::fs::read_to_string(d.join(name)).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1..].reverse();
        let path = tmp.path().join(format!("rev_{name}"));
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        path
    };
    let (rna_rev, coords_rev) = (reverse("rna.csv"), reverse("coords.csv"));
    let pred_rev = tmp.path().join("p_rev");
    ok(&run(&[
        "predict",
        "--checkpoint",
        s(&model.join("model.stpk")),
        "--rna",
        s(&rna_rev),
        "--coords",
        s(&coords_rev),
        "--out",
        s(&pred_rev),
    ]));
    let rev = read_matrix(&pred_rev.join("protein_clr.csv")).unwrap();
    let n = clr.row_ids.len();
    for i in 0..n {
        assert_eq!(rev.row_ids[i], clr.row_ids[n - 1 - i]);
        for j in 0..clr.col_names.len() {
            assert!((rev.values[[i, j]] - clr.values[[n - 1 - i, j]]).abs() < 1e-10);
        }
    }
}

#[test]
fn predict_lists_missing_genes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let model = tmp.path().join("m");
    ok(&train(&d, &model, &[]));
    let ckpt: stprot::Checkpoint = stprot::checkpoint::load_checkpoint(&model.join("model.stpk")).unwrap();
    let dropped = &ckpt.rna_pipeline.selected_names[0];
    // Drop one selected gene's column.
    let text = std::fs::read_to_string(d.join("rna.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| h == dropped).unwrap();
    let trimmed: Vec<String> = text
        .lines()
        .map(|l| l.split(',').enumerate().filter(|(j, _)| *j != col).map(|(_, v)| v).collect::<Vec<_>>().join(","))
        .collect();
    let rna = tmp.path().join("trimmed.csv");
    std::fs::write(&rna, trimmed.join("\n") + "\n").unwrap();
    let out = run(&[
        "predict",
        "--checkpoint",
        s(&model.join("model.stpk")),
        "--rna",
        s(&rna),
        "--coords",
        s(&d.join("coords.csv")),
        "--out",
        s(&tmp.path().join("p")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(dropped.as_str()));
}

fn write_blobs(dir: &Path) -> (PathBuf, PathBuf) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let centers = [(0.0, 0.0), (10.0, 0.0), (5.0, 9.0)];
    let mut emb = String::from("spot_id,a,b\n");
    let mut labels = String::from("spot_id,label\n");
    for i in 0..300 {
        let (cx, cy) = centers[i % 3];
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        emb.push_str(&format!("s{i},{},{}\n", cx + a, cy + b));
        labels.push_str(&format!("s{i},domain_{}\n", i % 3));
    }
    let (e, l) = (dir.join("emb.csv"), dir.join("truth.csv"));
    std::fs::write(&e, emb).unwrap();
    std::fs::write(&l, labels).unwrap();
    (e, l)
}

#[test]
fn cluster_and_evaluate_blobs() {
    let tmp = tempfile::tempdir().unwrap();
    let (emb, truth) = write_blobs(tmp.path());
    let no_k = run(&["cluster", "--embedding", s(&emb), "--out", s(&tmp.path().join("c0"))]);
    assert_eq!(code(&no_k), 2);

    let (c1, c2) = (tmp.path().join("c1"), tmp.path().join("c2"));
    ok(&run(&["cluster", "--embedding", s(&emb), "--truth", s(&truth), "--seed", "4", "--out", s(&c1)]));
    ok(&run(&["cluster", "--embedding", s(&emb), "--k", "3", "--seed", "4", "--out", s(&c2)]));
    assert_eq!(std::fs::read(c1.join("labels.csv")).unwrap(), std::fs::read(c2.join("labels.csv")).unwrap());
    assert_eq!(manifest(&c1)["config"]["k"], 3);

    let ev = tmp.path().join("ev");
    ok(&run(&["evaluate", "--truth-labels", s(&truth), "--pred-labels", s(&c1.join("labels.csv")), "--out", s(&ev)]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["ari"].as_f64().unwrap() >= 0.95);
    assert!(report["rmse"].is_null());

    let pct = tmp.path().join("pct");
    ok(&run(&[
        "evaluate",
        "--truth-labels",
        s(&truth),
        "--pred-labels",
        s(&c1.join("labels.csv")),
        "--percent",
        "--out",
        s(&pct),
    ]));
    let scaled: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pct.join("report.json")).unwrap()).unwrap();
    let ratio = scaled["nmi"].as_f64().unwrap() / report["nmi"].as_f64().unwrap();
    assert!((ratio - 100.0).abs() < 1e-9);
    let csv = std::fs::read_to_string(pct.join("report.csv")).unwrap();
    assert!(csv.starts_with("NMI,AMI,FMI,ARI,V-Measure,F1-Score,Jaccard,RMSE\n"));

    let (_, labels) = read_labels(&c1.join("labels.csv")).unwrap();
    assert_eq!(labels.len(), 300);
}

#[test]
fn evaluate_rmse_matches_rows_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = tmp.path().join("t.csv");
    let pred = tmp.path().join("p.csv");
    std::fs::write(&truth, "spot_id,u,v\na,1,2\nb,3,4\n").unwrap();
    std::fs::write(&pred, "spot_id,v,u\nb,4,3\na,2,2\n").unwrap();
    let out = tmp.path().join("ev");
    ok(&run(&["evaluate", "--truth-matrix", s(&truth), "--pred-matrix", s(&pred), "--out", s(&out)]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!((report["rmse"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    let nothing = run(&["evaluate", "--out", s(&tmp.path().join("none"))]);
    assert_eq!(code(&nothing), 2);
}

#[test]
fn plot_is_deterministic_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let a = tmp.path().join("plots/a.svg");
    let b = tmp.path().join("plots/b.svg");
    for out in [&a, &b] {
        ok(&run(&["plot", "--coords", s(&d.join("coords.csv")), "--labels", s(&d.join("labels.csv")), "--out", s(out)]));
    }
    let svg = std::fs::read_to_string(&a).unwrap();
    assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), 64);
    assert_eq!(svg.as_bytes(), std::fs::read(&b).unwrap().as_slice());
    assert!(tmp.path().join("plots/run_manifest.json").exists());

    let values = run(&[
        "plot",
        "--coords",
        s(&d.join("coords.csv")),
        "--values",
        s(&d.join("protein.csv")),
        "--column",
        "protein_002",
        "--out",
        s(&tmp.path().join("v.svg")),
    ]);
    ok(&values);
    let unknown = run(&[
        "plot",
        "--coords",
        s(&d.join("coords.csv")),
        "--values",
        s(&d.join("protein.csv")),
        "--column",
        "CD99",
        "--out",
        s(&tmp.path().join("u.svg")),
    ]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn sweep_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let base = |out: &Path| -> Vec<String> {
        [
            "sweep",
            "--rna",
            s(&d.join("rna.csv")),
            "--coords",
            s(&d.join("coords.csv")),
            "--protein",
            s(&d.join("protein.csv")),
            "--epochs",
            "10",
            "--n-hvg",
            "100",
            "--hidden1",
            "4",
            "--hidden2",
            "4",
            "--out",
            s(out),
        ]
        .iter()
        .map(|a| a.to_string())
        .collect()
    };
    let call = |out: &Path, extra: &[&str]| {
        let mut args = base(out);
        args.extend(extra.iter().map(|a| a.to_string()));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let k = tmp.path().join("k");
    ok(&call(&k, &["--param", "k", "--values", "1,2,3,4,5", "--labels", s(&d.join("labels.csv"))]));
    let csv = std::fs::read_to_string(k.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,rmse,final_loss,ari,nmi");
    assert_eq!(lines.len(), 6);
    assert!(lines[3].starts_with("3,"));

    // Worker threads must not change the table.
    let k2 = tmp.path().join("k2");
    ok(&call(&k2, &["--param", "k", "--values", "1,2,3,4,5", "--labels", s(&d.join("labels.csv")), "--jobs", "3"]));
    assert_eq!(csv, std::fs::read_to_string(k2.join("sweep.csv")).unwrap());

    let beta = tmp.path().join("beta");
    ok(&call(&beta, &["--param", "beta", "--grid", "1..2x1..3"]));
    let csv = std::fs::read_to_string(beta.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(2).unwrap().starts_with("1,2,"));

    assert_eq!(code(&call(&tmp.path().join("e"), &["--param", "k", "--values", ""])), 2);
    assert_eq!(code(&call(&tmp.path().join("e"), &["--param", "beta", "--grid", "3..1x1"])), 2);
}

#[test]
fn usage_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let missing = run(&[
        "train",
        "--rna",
        "/nonexistent/rna.csv",
        "--coords",
        "/nonexistent/coords.csv",
        "--protein",
        "/nonexistent/p.csv",
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(code(&missing), 3);
    let garbage = tmp.path().join("garbage.stpk");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let d = synth(tmp.path(), "d", &[]);
    let bad_ckpt = run(&[
        "predict",
        "--checkpoint",
        s(&garbage),
        "--rna",
        s(&d.join("rna.csv")),
        "--coords",
        s(&d.join("coords.csv")),
        "--out",
        s(&tmp.path().join("p")),
    ]);
    assert_eq!(code(&bad_ckpt), 3);
}
