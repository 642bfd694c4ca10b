use std::path::Path;
use std::process::{Command, Output};

use miracle::cli_io::{gen_synthetic, RunConfig};
use miracle::pipeline::{decompress_model, evaluate, CompressedModel};

const CONFIG: &str = "dataset = synthetic\nsynthetic_points = 300\nsynthetic_classes = 3\nsynthetic_dim = 6\n\
                      layers = 6,5,3\nparameterization = mean-kl\nblock_size = 8\nbudget_bits = 8\n\
                      max_iters = 60\nlearning_rate = 0.02\nbatch_size = 30\nfinetune_steps = 2\n";

fn miracle(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miracle")).args(args).current_dir(dir).output().unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), config).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    let dir = setup(&CONFIG.replace("budget_bits = 8\n", ""));
    let o = miracle(&["train", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("budget_bits"), "{}", stderr(&o));

    let o = miracle(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = miracle(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let dir = setup(&format!("{CONFIG}colour = blue\n"));
    let o = miracle(&["train", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn data_errors_exit_2() {
    let dir = setup(&CONFIG.replace("dataset = synthetic", "dataset = mnist\ndata_dir = bad"));
    std::fs::create_dir(dir.path().join("bad")).unwrap();
    for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        std::fs::write(dir.path().join("bad").join(name), b"not an idx file").unwrap();
    }
    let o = miracle(&["train", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let dir = setup(CONFIG);
    std::fs::write(dir.path().join("junk.mrcl"), b"MRCL\x01\x00").unwrap();
    let o = miracle(&["decompress", "--model", "junk.mrcl", "--out", "w.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("w.bin").exists());
    let o = miracle(&["compress", "--config", "run.cfg", "--checkpoint", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_twice_gives_identical_traces() {
    let dir = setup(CONFIG);
    for out in ["a", "b"] {
        let o = miracle(&["train", "--config", "run.cfg", "--seed", "7", "--out-dir", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["trace.csv", "train.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let trace = std::fs::read_to_string(dir.path().join("a/trace.csv")).unwrap();
    assert!(trace.lines().next().unwrap().starts_with('#'));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 61);
}

#[test]
fn compress_decompress_evaluate_agree_with_the_library() {
    let dir = setup(CONFIG);
    let ok = |args: &[&str]| {
        let o = miracle(args, dir.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["train", "--config", "run.cfg", "--out-dir", "out"]);
    ok(&["compress", "--config", "run.cfg", "--checkpoint", "out/train.json", "--out-dir", "out"]);
    ok(&["decompress", "--model", "out/model.mrcl", "--out", "out/w.bin"]);
    let by_model = stdout(&ok(&["evaluate", "--config", "run.cfg", "--model", "out/model.mrcl"]));
    let by_weights = stdout(&ok(&["evaluate", "--config", "run.cfg", "--weights", "out/w.bin"]));
    assert_eq!(by_model, by_weights);

    let cm = CompressedModel::from_bytes(&std::fs::read(dir.path().join("out/model.mrcl")).unwrap()).unwrap();
    let weights = decompress_model(&cm).unwrap();
    let raw: Vec<u8> = weights.iter().flat_map(|w| w.to_le_bytes()).collect();
    assert_eq!(std::fs::read(dir.path().join("out/w.bin")).unwrap(), raw);

    let cfg = RunConfig::parse(CONFIG).unwrap();
    let (_, test_set) = gen_synthetic(cfg.synthetic_points, cfg.synthetic_classes, cfg.synthetic_dim, cfg.seed).unwrap();
    let s = evaluate(&cm.spec, &weights, &test_set).unwrap();
    assert!(by_model.contains(&format!("accuracy={} error={}", s.accuracy, s.error)), "{by_model}");
}

#[test]
fn sweep_and_histogram_csvs() {
    let dir = setup(CONFIG);
    let o = miracle(&["train", "--config", "run.cfg", "--out-dir", "out"], dir.path());
    assert!(o.status.success());
    for cmd in ["prune-sweep", "histograms"] {
        let o = miracle(&[cmd, "--config", "run.cfg", "--checkpoint", "out/train.json", "--out-dir", "out"], dir.path());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let sweep = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let header = sweep.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.contains("strategy"), "{header}");
    let hist = std::fs::read_to_string(dir.path().join("out/histograms.csv")).unwrap();
    let rows = hist.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 6 * 5 + 5 * 3);
}
