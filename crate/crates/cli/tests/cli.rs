use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reform::PipelineConfig;
use tempfile::TempDir;

const TINY: &str = r#"
n_layers = 2
d_model = 32
n_q_heads = 4
n_kv_heads = 2
head_dim = 8
d_ff = 48
vocab_size = 264
rope_theta = 10000.0
rms_eps = 1e-5
max_positions = 4096
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Sandbox {
            dir: tempfile::tempdir().unwrap(),
        };
        s.file("tiny.toml", TINY);
        let out = s.reform(&[
            "--model",
            "tiny.rfwt",
            "--seed",
            "5",
            "make-model",
            "--model-config",
            "tiny.toml",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        s
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn reform(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_reform"))
            .args(args)
            .current_dir(self.dir.path())
            .env("REFORM_LOG", "error")
            .output()
            .unwrap()
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn prompt(sb: &Sandbox, context_len: usize) -> PathBuf {
    let words = ["ash ", "birch ", "cedar ", "dune ", "elm "];
    let mut text = String::new();
    let mut i = 0;
    while text.len() < context_len {
        text.push_str(words[(i * 7 + i / 3) % words.len()]);
        i += 1;
    }
    text.truncate(context_len);
    text.push_str("\nwhich tree?\n");
    sb.file("prompt.txt", &text)
}

fn unbounded(sb: &Sandbox) -> PathBuf {
    sb.file(
        "unbounded.toml",
        "chunk_size = 16\ncache_budget = 4096\nsink_len = 0\nrecent_len = 0\n\
         selected_heads = [\"1:v:0\"]\nexit_layer = 2\nrecomputation_budget = 4096\n",
    )
}

#[test]
fn unbounded_run_matches_dense_runner() {
    let sb = Sandbox::new();
    let p = prompt(&sb, 52);
    let cfg = unbounded(&sb);
    let common = [
        "--model",
        "tiny.rfwt",
        "--config",
        cfg.to_str().unwrap(),
        "run",
        "--prompt",
        p.to_str().unwrap(),
    ];
    let reform = sb.reform(&[&common[..], &["--max-new", "12"]].concat());
    let dense = sb.reform(&[&common[..], &["--max-new", "12", "--method", "dense"]].concat());
    assert_eq!(stdout(&reform), stdout(&dense));
}

#[test]
fn run_is_deterministic() {
    let sb = Sandbox::new();
    let p = prompt(&sb, 400);
    let cfg = sb.file(
        "c.toml",
        "chunk_size = 64\ncache_budget = 96\nsink_len = 4\nrecent_len = 4\nselected_heads = [\"0:v:1\", \"0:k:0\"]\nrecomputation_budget = 48\n",
    );
    let args = [
        "--model",
        "tiny.rfwt",
        "--config",
        cfg.to_str().unwrap(),
        "run",
        "--prompt",
        p.to_str().unwrap(),
        "--max-new",
        "6",
    ];
    let first = stdout(&sb.reform(&args));
    let side = sb.read("reform-out/run.toml");
    assert_eq!(stdout(&sb.reform(&args)), first);
    assert_eq!(sb.read("reform-out/run.toml"), side);
    let table: toml::Table = side.parse().unwrap();
    assert_eq!(table["stats"]["recomputed_tokens"].as_integer(), Some(48));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let sb = Sandbox::new();
    let p = prompt(&sb, 40);
    let p = p.to_str().unwrap();

    let missing = sb.reform(&["--model", "nope.rfwt", "run", "--prompt", p]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.rfwt"));

    sb.file("garbage.rfwt", "XXXXnot a model");
    assert_eq!(
        sb.reform(&["--model", "garbage.rfwt", "run", "--prompt", p])
            .status
            .code(),
        Some(4)
    );

    let bad = sb.file("bad.toml", "cache_budget = 4\nsink_len = 8\n");
    let out = sb.reform(&[
        "--model",
        "tiny.rfwt",
        "--config",
        bad.to_str().unwrap(),
        "run",
        "--prompt",
        p,
    ]);
    assert_eq!(out.status.code(), Some(5));
    let unknown = sb.file("unknown.toml", "no_such_field = 1\n");
    let out = sb.reform(&[
        "--model",
        "tiny.rfwt",
        "--config",
        unknown.to_str().unwrap(),
        "run",
        "--prompt",
        p,
    ]);
    assert_eq!(out.status.code(), Some(5));

    let one_line = sb.file("one.txt", "just one line");
    let out = sb.reform(&["--model", "tiny.rfwt", "run", "--prompt", one_line.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(6));

    assert_eq!(sb.reform(&["run", "--prompt", p]).status.code(), Some(2));
    assert_eq!(sb.reform(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn headscan_report_and_heads_snippet() {
    let sb = Sandbox::new();
    let cfg = sb.file(
        "scan.toml",
        "chunk_size = 128\ncache_budget = 128\nsink_len = 4\nrecent_len = 4\nobserver_window = 8\n",
    );
    let out = sb.reform(&[
        "--model",
        "tiny.rfwt",
        "--config",
        cfg.to_str().unwrap(),
        "headscan",
        "--scan-samples",
        "1",
        "--scan-length",
        "300",
        "--kv-pairs",
        "2",
    ]);
    let report = stdout(&out);
    // two datasets, each layers × (q heads + 2 × kv heads + 2)
    let per_dataset = 2 * (4 + 2 * 2 + 2);
    assert_eq!(report.lines().count(), 1 + 2 * per_dataset);
    assert_eq!(sb.read("reform-out/headscan.tsv"), report);
    for dataset in ["kv", "qa"] {
        let mnrs: Vec<f64> = report
            .lines()
            .skip(1)
            .map(|l| l.split('\t').collect::<Vec<_>>())
            .filter(|f| f[4] == dataset)
            .map(|f| f[3].parse().unwrap())
            .collect();
        assert_eq!(mnrs.len(), per_dataset);
        assert!(mnrs.windows(2).all(|w| w[0] <= w[1]));
    }
    let cfg = PipelineConfig::load(&sb.path("reform-out/heads.toml")).unwrap();
    assert_eq!(cfg.selected_heads.len(), 4);
}

#[test]
fn niah_grid_shape_and_sidecar() {
    let sb = Sandbox::new();
    let cfg = sb.file(
        "n.toml",
        "chunk_size = 64\ncache_budget = 64\nsink_len = 4\nrecent_len = 4\nselected_heads = [\"0:v:0\"]\nrecomputation_budget = 32\n",
    );
    let out = sb.reform(&[
        "--model",
        "tiny.rfwt",
        "--config",
        cfg.to_str().unwrap(),
        "niah",
        "--method",
        "truncation",
        "--lengths",
        "200,300",
        "--depths",
        "0,50,100",
        "--samples",
        "1",
    ]);
    let table = stdout(&out);
    assert_eq!(table.lines().count(), 1 + 2);
    let side: toml::Table = sb.read("reform-out/niah-truncation.toml").parse().unwrap();
    assert_eq!(side["cells"].as_array().unwrap().len(), 2 * 3);
    assert_eq!(side["method"].as_str(), Some("truncation"));
}

#[test]
fn ablation_rows_per_head_set_and_policy() {
    let sb = Sandbox::new();
    let cfg = sb.file(
        "a.toml",
        "chunk_size = 64\ncache_budget = 64\nsink_len = 4\nrecent_len = 4\nselected_heads = [\"0:v:0\"]\nrecomputation_budget = 32\n",
    );
    let args = [
        "--model",
        "tiny.rfwt",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "ablate",
        "--lengths",
        "200",
        "--depths",
        "50",
        "--samples",
        "1",
        "--bad-heads",
        "1:q:3",
        "--policies",
        "h2o,tova",
    ];
    let table = stdout(&sb.reform(&args));
    assert_eq!(table.lines().count(), 1 + 3 * 2);
    let side = sb.read("reform-out/ablate.toml");
    assert!(side.contains("random_seed = 10"));
    assert_eq!(stdout(&sb.reform(&args)), table);
    assert_eq!(sb.read("reform-out/ablate.toml"), side);
}

#[test]
fn export_report_lists_every_method() {
    let sb = Sandbox::new();
    let p = prompt(&sb, 600);
    let cfg = sb.file(
        "w.toml",
        "chunk_size = 64\ncache_budget = 128\nsink_len = 4\nrecent_len = 4\nselected_heads = [\"0:v:0\"]\nrecomputation_budget = 64\n",
    );
    let out = sb.reform(&[
        "--model",
        "tiny.rfwt",
        "--config",
        cfg.to_str().unwrap(),
        "export-report",
        "--prompt",
        p.to_str().unwrap(),
        "--max-new",
        "3",
    ]);
    let table = stdout(&out);
    assert_eq!(table.lines().count(), 1 + 6);
    let side: toml::Table = sb.read("reform-out/work.toml").parse().unwrap();
    let reports = side["reports"].as_array().unwrap();
    let ops = |i: usize| reports[i]["stats"]["attention_score_ops"].as_integer().unwrap();
    assert_eq!(reports[5]["method"].as_str(), Some("dense"));
    assert!(ops(0) < ops(5));
}

#[test]
fn probe_model_file_round_trips() {
    let sb = Sandbox::new();
    let out = sb.reform(&[
        "--model",
        "probe.rfwt",
        "make-model",
        "--kind",
        "probe",
        "--dtype",
        "f32",
    ]);
    assert!(out.status.success());
    let loaded = reform::Model::load(Path::new(&sb.path("probe.rfwt"))).unwrap();
    assert_eq!(loaded.config, reform::probe::probe_model().config);
}
