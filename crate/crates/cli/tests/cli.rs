use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.clients=3",
    "--set",
    "data.samples_per_client=20",
    "--set",
    "pretrain.rounds=2",
    "--set",
    "pretrain.batch=8",
    "--set",
    "fedclf.bank_capacity=16",
    "--set",
    "fedmae.local_epochs=1",
    "--set",
    "finetune.rounds=2",
    "--set",
    "finetune.epochs=1",
    "--set",
    "finetune.label_fraction=0.5",
];

fn fedssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedssl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn dump_defaults_is_a_loadable_config() {
    let o = fedssl(&["--dump-defaults"]);
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("defaults.txt");
    std::fs::write(&cfg, &o.stdout).unwrap();
    let out = dir.path().join("data");
    let o = fedssl(&[
        "gen-data",
        "-c",
        cfg.to_str().unwrap(),
        "--set",
        "data.clients=2",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_creates_dir_is_reproducible_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = fedssl(&with_tiny("gen-data", &["-o", out.to_str().unwrap()]));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(&a.join("manifest.json")), read(&b.join("manifest.json")));
    assert!(a.join("config.txt").exists());

    let o = fedssl(&with_tiny("gen-data", &["-o", a.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    let o = fedssl(&with_tiny("gen-data", &["-o", a.to_str().unwrap(), "--force"]));
    assert!(o.status.success());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "[fedclf]\ntemperature = 0.1\n").unwrap();
    let o = fedssl(&["gen-data", "-c", cfg.to_str().unwrap(), "-o", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fedclf.temperature"), "{}", stderr(&o));

    let o = fedssl(&["pretrain", "--set", "fedmae.mask_ratio=1.5", "-o", dir.path().join("p").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fedmae.mask_ratio"));
}

#[test]
fn pretrain_then_finetune_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pre = dir.path().join("pre");
    let ft = dir.path().join("ft");
    assert!(fedssl(&with_tiny("gen-data", &["-o", data.to_str().unwrap()])).status.success());
    let o = fedssl(&with_tiny("pretrain", &["-o", pre.to_str().unwrap(), "--data", data.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.bin", "transcript.jsonl", "rounds.jsonl", "config.txt"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let ckpt = pre.join("checkpoint.bin");
    let o = fedssl(&with_tiny(
        "finetune",
        &["-o", ft.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()],
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(read(&ft.join("metrics.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("run_id,stage,variant,protocol,mode,label_fraction,seed,macro_recall"));
    assert!(ft.join("metrics.jsonl").exists());
}

#[test]
fn finetune_without_checkpoint_is_a_usage_error_unless_random() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ft");
    let o = fedssl(&with_tiny("finetune", &["-o", out.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(2));
    let o = fedssl(&with_tiny("finetune", &["-o", out.to_str().unwrap(), "--set", "finetune.init=random"]));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn mismatched_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(fedssl(&with_tiny("gen-data", &["-o", data.to_str().unwrap()])).status.success());
    let out = dir.path().join("p");
    let mut args = with_tiny("pretrain", &["-o", out.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    args.extend(["--set", "data.noise=0.2"]);
    let o = fedssl(&args);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn workers_do_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for proto in ["fedclf", "fedmae"] {
        let mut outs = Vec::new();
        for w in ["1", "4"] {
            let pre = dir.path().join(format!("{proto}-pre-{w}"));
            let ft = dir.path().join(format!("{proto}-ft-{w}"));
            let proto_set = format!("run.protocol={proto}");
            let mut args = vec!["--workers", w];
            args.extend(with_tiny("pretrain", &["-o", pre.to_str().unwrap(), "--set", &proto_set]));
            let o = fedssl(&args);
            assert!(o.status.success(), "{}", stderr(&o));
            let ckpt = pre.join("checkpoint.bin");
            let mut args = vec!["--workers", w];
            args.extend(with_tiny(
                "finetune",
                &["-o", ft.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--set", &proto_set],
            ));
            let o = fedssl(&args);
            assert!(o.status.success(), "{}", stderr(&o));
            outs.push((read(&ckpt), read(&pre.join("transcript.jsonl")), read(&ft.join("metrics.csv"))));
        }
        // The persisted config records the worker count; everything else must match.
        assert!(outs[0] == outs[1], "{proto}: outputs differ between 1 and 4 workers");
    }
}

#[test]
fn ablate_row_cardinality_and_duplicate_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = fedssl(&with_tiny(
        "ablate",
        &["-o", out.to_str().unwrap(), "--set", "ablate.variants=with_local,remote_only,with_local", "--set", "ablate.seeds=3"],
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(read(&out.join("ablation.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    // The third variant repeats the first, seed for seed.
    assert_eq!(rows[0..3], rows[6..9]);
    let summary = String::from_utf8(read(&out.join("ablation_summary.csv"))).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn ablate_sync_sets_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = fedssl(&with_tiny(
        "ablate",
        &[
            "-o",
            out.to_str().unwrap(),
            "--set",
            "ablate.variants=encoder_plus_decoder,wo_decoder,wo_linear_projection,wo_decoder_projection,wo_class_token",
            "--set",
            "ablate.seeds=1",
            "--set",
            "pretrain.rounds=1",
        ],
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = String::from_utf8(read(&out.join("ablation_summary.csv"))).unwrap();
    let labels: Vec<String> = summary.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    assert_eq!(
        labels,
        ["Encoder+Decoder", "W/o Decoder", "W/o Linear Projection", "W/o Decoder Projection", "W/o Class Token"]
    );
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let o = fedssl(&["gradcheck", "--instances", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = fedssl(&["gradcheck", "--instances", "2", "--inject-fault", "gelu"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gelu"));
    let o = fedssl(&["gradcheck", "--inject-fault", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fedssl(&["gradcheck", "--only", "no_such_case"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty"));
}
